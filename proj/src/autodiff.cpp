#include "declip/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace declip {

const Tensor& Var::value() const { return graph_->value(*this); }
bool Var::requires_grad() const { return graph_->requires_grad(*this); }

void Graph::check_owner(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    fail(ErrorKind::Parameter, "variable does not belong to this graph");
  }
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  value.check_finite("graph leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  value.check_finite("graph op output");
  Node n;
  n.value = std::move(value);
  for (const auto& p : parents) {
    check_owner(p);
    n.requires_grad = n.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor* Graph::grad(Var v) const {
  check_owner(v);
  const auto& n = nodes_[v.id_];
  return n.has_grad ? &n.grad : nullptr;
}

Tensor& Graph::grad_slot(Var v) {
  auto& n = nodes_[v.id_];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::accumulate(Var v, const Tensor& delta) {
  check_owner(v);
  if (!nodes_[v.id_].requires_grad) return;
  auto& g = grad_slot(v);
  if (g.shape() != delta.shape()) {
    fail(ErrorKind::Dimension, "gradient shape " + shape_str(delta.shape()) + " for node of shape " +
                                   shape_str(g.shape()));
  }
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += delta[i];
}

void Graph::backward(Var loss) {
  check_owner(loss);
  if (nodes_[loss.id_].value.numel() != 1) {
    fail(ErrorKind::Dimension, "backward seed must be scalar, got " +
                                   shape_str(nodes_[loss.id_].value.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (!nodes_[loss.id_].requires_grad) return;
  grad_slot(loss)[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    // The closure may grow other nodes' grads but never this node's.
    const Tensor g = n.grad;
    n.backward(*this, g);
  }
}

namespace {

// out (m×n) += a (m×k) · b (k×n)
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out.at(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      if (av == 0.0) continue;
      const double* br = &b.at(p, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out (m×n) += a (m×k) · bᵀ, b is n×k
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = &a.at(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = &b.at(j, 0);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out.at(i, j) += s;
    }
  }
}

// out (k×n) += aᵀ · b, a is m×k, b is m×n
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* br = &b.at(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      if (av == 0.0) continue;
      double* o = &out.at(p, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension, std::string(what) + " " + shape_str(a.shape()) + " vs " +
                                   shape_str(b.shape()));
  }
}

void require_row_vector(const Tensor& a, const Tensor& row, const char* what) {
  require_matrix(a, what);
  require_matrix(row, what);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    fail(ErrorKind::Dimension, std::string(what) + " row operand " + shape_str(row.shape()) +
                                   " for " + shape_str(a.shape()));
  }
}

Graph& graph_of(std::initializer_list<Var> vs) {
  Graph* g = vs.begin()->graph();
  for (const auto& v : vs) {
    if (v.graph() != g || g == nullptr) fail(ErrorKind::Parameter, "operands from different graphs");
  }
  return *g;
}

}  // namespace

Var matmul(Var a, Var b) {
  auto& g = graph_of({a, b});
  Tensor out = declip::matmul(a.value(), b.value());
  const Var parents[] = {a, b};
  return g.record(std::move(out), parents, [a, b](Graph& gr, const Tensor& go) {
    if (a.requires_grad()) gemm_nt(go, b.value(), gr.grad_slot(a));
    if (b.requires_grad()) gemm_tn(a.value(), go, gr.grad_slot(b));
  });
}

Var matmul_bt(Var a, Var b) {
  auto& g = graph_of({a, b});
  require_matrix(a.value(), "matmul_bt");
  require_matrix(b.value(), "matmul_bt");
  if (a.value().cols() != b.value().cols()) {
    fail(ErrorKind::Dimension,
         "matmul_bt " + shape_str(a.value().shape()) + " * T(" + shape_str(b.value().shape()) + ")");
  }
  Tensor out({a.value().rows(), b.value().rows()});
  gemm_nt(a.value(), b.value(), out);
  const Var parents[] = {a, b};
  return g.record(std::move(out), parents, [a, b](Graph& gr, const Tensor& go) {
    if (a.requires_grad()) gemm_nn(go, b.value(), gr.grad_slot(a));
    if (b.requires_grad()) gemm_tn(go, a.value(), gr.grad_slot(b));
  });
}

Var transpose(Var a) {
  auto& g = graph_of({a});
  const Var parents[] = {a};
  return g.record(a.value().transposed(), parents, [a](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go.transposed());
  });
}

Var add(Var a, Var b) {
  auto& g = graph_of({a, b});
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  const Var parents[] = {a, b};
  return g.record(std::move(out), parents, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    gr.accumulate(b, go);
  });
}

Var sub(Var a, Var b) {
  auto& g = graph_of({a, b});
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  const Var parents[] = {a, b};
  return g.record(std::move(out), parents, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    if (b.requires_grad()) {
      auto& gb = gr.grad_slot(b);
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  auto& g = graph_of({a, b});
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  const Var parents[] = {a, b};
  return g.record(std::move(out), parents, [a, b](Graph& gr, const Tensor& go) {
    if (a.requires_grad()) {
      auto& ga = gr.grad_slot(a);
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      auto& gb = gr.grad_slot(b);
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * a.value()[i];
    }
  });
}

Var scale(Var a, double s) {
  auto& g = graph_of({a});
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  const Var parents[] = {a};
  return g.record(std::move(out), parents, [a, s](Graph& gr, const Tensor& go) {
    auto& ga = gr.grad_slot(a);
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += s * go[i];
  });
}

Var add_scalar(Var a, double s) {
  auto& g = graph_of({a});
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  const Var parents[] = {a};
  return g.record(std::move(out), parents, [a](Graph& gr, const Tensor& go) { gr.accumulate(a, go); });
}

Var add_row(Var a, Var row) {
  auto& g = graph_of({a, row});
  require_row_vector(a.value(), row.value(), "add_row");
  Tensor out = a.value();
  const auto m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += row.value()[j];
  const Var parents[] = {a, row};
  return g.record(std::move(out), parents, [a, row, m, n](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    if (row.requires_grad()) {
      auto& gr_row = gr.grad_slot(row);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr_row[j] += go.at(i, j);
    }
  });
}

Var mul_row(Var a, Var row) {
  auto& g = graph_of({a, row});
  require_row_vector(a.value(), row.value(), "mul_row");
  Tensor out = a.value();
  const auto m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= row.value()[j];
  const Var parents[] = {a, row};
  return g.record(std::move(out), parents, [a, row, m, n](Graph& gr, const Tensor& go) {
    if (a.requires_grad()) {
      auto& ga = gr.grad_slot(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += go.at(i, j) * row.value()[j];
    }
    if (row.requires_grad()) {
      auto& gr_row = gr.grad_slot(row);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr_row[j] += go.at(i, j) * a.value().at(i, j);
    }
  });
}

Var layer_norm_rows(Var x, double eps) {
  auto& g = graph_of({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm_rows");
  const auto m = xv.rows(), n = xv.cols();
  Tensor out({m, n});
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv.at(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv.at(i, j) - mu) * (xv.at(i, j) - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = (xv.at(i, j) - mu) * inv_std[i];
  }
  const Var parents[] = {x};
  Tensor y = out;
  return g.record(std::move(out), parents,
                  [x, y = std::move(y), inv_std = std::move(inv_std), m, n](Graph& gr, const Tensor& go) {
                    auto& gx = gr.grad_slot(x);
                    for (std::size_t i = 0; i < m; ++i) {
                      double mg = 0.0, mgy = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        mg += go.at(i, j);
                        mgy += go.at(i, j) * y.at(i, j);
                      }
                      mg /= static_cast<double>(n);
                      mgy /= static_cast<double>(n);
                      for (std::size_t j = 0; j < n; ++j) {
                        gx.at(i, j) += inv_std[i] * (go.at(i, j) - mg - y.at(i, j) * mgy);
                      }
                    }
                  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
  auto& g = graph_of({x});
  Tensor out = x.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  const Var parents[] = {x};
  return g.record(std::move(out), parents, [x](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_slot(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < go.numel(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor softmax_rows(const Tensor& x, double temperature) {
  require_matrix(x, "softmax_rows");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    fail(ErrorKind::Parameter, "softmax temperature must be positive, got " + std::to_string(temperature));
  }
  x.check_finite("softmax_rows input");
  const auto m = x.rows(), n = x.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp((x.at(i, j) - mx) / temperature);
      out.at(i, j) = e;
      s += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= s;
  }
  return out;
}

Var softmax_rows(Var x, double temperature) {
  auto& g = graph_of({x});
  Tensor out = softmax_rows(x.value(), temperature);
  Tensor y = out;
  const Var parents[] = {x};
  return g.record(std::move(out), parents, [x, y = std::move(y), temperature](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_slot(x);
    const auto m = y.rows(), n = y.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double dotp = 0.0;
      for (std::size_t j = 0; j < n; ++j) dotp += go.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < n; ++j) {
        gx.at(i, j) += y.at(i, j) * (go.at(i, j) - dotp) / temperature;
      }
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  require_matrix(x, "normalize_rows");
  const auto m = x.rows(), n = x.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.at(i, j) * x.at(i, j);
    const double norm = std::sqrt(s);
    if (!(norm > 0.0)) fail(ErrorKind::Degenerate, "zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) / norm;
  }
  return out;
}

Var normalize_rows(Var x) {
  auto& g = graph_of({x});
  Tensor out = normalize_rows(x.value());
  const auto m = out.rows(), n = out.cols();
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.value().at(i, j) * x.value().at(i, j);
    norms[i] = std::sqrt(s);
  }
  Tensor y = out;
  const Var parents[] = {x};
  return g.record(std::move(out), parents,
                  [x, y = std::move(y), norms = std::move(norms), m, n](Graph& gr, const Tensor& go) {
                    auto& gx = gr.grad_slot(x);
                    for (std::size_t i = 0; i < m; ++i) {
                      double d = 0.0;
                      for (std::size_t j = 0; j < n; ++j) d += go.at(i, j) * y.at(i, j);
                      for (std::size_t j = 0; j < n; ++j) {
                        gx.at(i, j) += (go.at(i, j) - y.at(i, j) * d) / norms[i];
                      }
                    }
                  });
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  require_matrix(a, "cosine_matrix");
  require_matrix(b, "cosine_matrix");
  if (a.cols() != b.cols()) {
    fail(ErrorKind::Dimension, "cosine_matrix feature dims " + shape_str(a.shape()) + " vs " +
                                   shape_str(b.shape()));
  }
  const Tensor an = normalize_rows(a);
  const Tensor bn = normalize_rows(b);
  Tensor out({a.rows(), b.rows()});
  gemm_nt(an, bn, out);
  return out;
}

Var cosine_matrix(Var a, Var b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.value().cols() != b.value().cols()) {
    fail(ErrorKind::Dimension, "cosine_matrix feature dims " + shape_str(a.value().shape()) + " vs " +
                                   shape_str(b.value().shape()));
  }
  const Var an = normalize_rows(a);
  const Var bn = a.id() == b.id() ? an : normalize_rows(b);
  return matmul_bt(an, bn);
}

void require_row_stochastic(const Tensor& m, double tol, const char* what) {
  require_matrix(m, what);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double v = m.at(i, j);
      if (!(v >= 0.0)) {
        fail(ErrorKind::Distribution, std::string(what) + ": negative entry in row " + std::to_string(i));
      }
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      fail(ErrorKind::Distribution,
           std::string(what) + ": row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

double kl_rows(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "kl_rows");
  require_row_stochastic(p, kStochasticTol, "kl_rows p");
  require_row_stochastic(q, kStochasticTol, "kl_rows q");
  const auto r = p.rows(), c = p.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double pv = p.at(i, j);
      if (pv <= 0.0) continue;
      row += pv * (std::log(pv) - std::log(std::max(q.at(i, j), kKlClamp)));
    }
    total += row;
  }
  return total / static_cast<double>(r);
}

Var kl_rows(Var p, Var q) {
  auto& g = graph_of({p, q});
  const double v = kl_rows(p.value(), q.value());
  const Var parents[] = {p, q};
  return g.record(Tensor({1, 1}, {v}), parents, [p, q](Graph& gr, const Tensor& go) {
    const Tensor& pv = p.value();
    const Tensor& qv = q.value();
    const double w = go[0] / static_cast<double>(pv.rows());
    if (q.requires_grad()) {
      auto& gq = gr.grad_slot(q);
      for (std::size_t i = 0; i < qv.numel(); ++i) {
        if (qv[i] > kKlClamp) gq[i] -= w * pv[i] / qv[i];
      }
    }
    if (p.requires_grad()) {
      // Zero-mass entries get the one-sided limit of the log-ratio term only.
      auto& gp = gr.grad_slot(p);
      for (std::size_t i = 0; i < pv.numel(); ++i) {
        const double lq = std::log(std::max(qv[i], kKlClamp));
        gp[i] += pv[i] > 0.0 ? w * (std::log(pv[i]) + 1.0 - lq) : -w * lq;
      }
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  auto& g = graph_of({x});
  Tensor out = x.value().row_slice(begin, end);
  const Var parents[] = {x};
  return g.record(std::move(out), parents, [x, begin](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_slot(x);
    const auto c = go.cols();
    for (std::size_t i = 0; i < go.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) gx.at(begin + i, j) += go.at(i, j);
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  auto& g = graph_of({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_cols");
  if (begin >= end || end > xv.cols()) fail(ErrorKind::Range, "column slice out of range");
  const auto m = xv.rows(), w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = xv.at(i, begin + j);
  const Var parents[] = {x};
  return g.record(std::move(out), parents, [x, begin, m, w](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_slot(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx.at(i, begin + j) += go.at(i, j);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat_rows of nothing");
  Graph& g = *parts[0].graph();
  const auto c = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != c) fail(ErrorKind::Dimension, "concat_rows column mismatch");
    total += p.value().rows();
  }
  Tensor out({total, c});
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.values().begin() +
                                                                        static_cast<std::ptrdiff_t>(r * c));
    r += p.value().rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [ps](Graph& gr, const Tensor& go) {
    std::size_t row = 0;
    for (const auto& p : ps) {
      const auto rows = p.value().rows();
      if (p.requires_grad()) gr.accumulate(p, go.row_slice(row, row + rows));
      row += rows;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat_cols of nothing");
  Graph& g = *parts[0].graph();
  const auto m = parts[0].value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m) fail(ErrorKind::Dimension, "concat_cols row mismatch");
    total += p.value().cols();
  }
  Tensor out({m, total});
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const auto w = p.value().cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(i, c0 + j) = p.value().at(i, j);
    c0 += w;
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [ps, m](Graph& gr, const Tensor& go) {
    std::size_t col = 0;
    for (const auto& p : ps) {
      const auto w = p.value().cols();
      if (p.requires_grad()) {
        auto& gp = gr.grad_slot(p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gp.at(i, j) += go.at(i, col + j);
      }
      col += w;
    }
  });
}

Var sum(Var x) {
  auto& g = graph_of({x});
  const auto& xs = x.value().storage();
  const double s = std::accumulate(xs.begin(), xs.end(), 0.0);
  const Var parents[] = {x};
  return g.record(Tensor({1, 1}, {s}), parents, [x](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_slot(x);
    for (auto& v : gx.values()) v += go[0];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

}  // namespace declip
