#include "declip/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <unistd.h>

namespace declip {

static_assert(std::endian::native == std::endian::little, "container codec assumes a little-endian host");

namespace {

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::I32: return 4;
  }
  return 0;
}

template <typename T>
void put(std::vector<char>& out, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

void validate_name(const std::string& name) {
  if (name.empty() || name.size() > kMaxSectionName) {
    fail(ErrorKind::Parameter, "section name must be 1-64 bytes: '" + name + "'");
  }
  for (unsigned char c : name) {
    if (c < 0x20 || c > 0x7e) fail(ErrorKind::Parameter, "section name is not printable ASCII: '" + name + "'");
  }
}

class Reader {
 public:
  Reader(const std::vector<char>& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <typename T>
  T take(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size()) {
      fail(ErrorKind::Truncated, origin_ + ": header ends inside " + what);
    }
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take_string(std::size_t n) {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::Truncated, origin_ + ": header ends inside section name");
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::vector<char>& bytes_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_tensors(const NamedTensors& sections) {
  std::set<std::string> seen;
  std::size_t table = 12;
  for (const auto& [name, t] : sections) {
    validate_name(name);
    if (!seen.insert(name).second) fail(ErrorKind::Parameter, "duplicate section name '" + name + "'");
    if (t.rank() > 255) fail(ErrorKind::Parameter, "rank too large for section '" + name + "'");
    table += 2 + name.size() + 2 + 8 * t.rank() + 8;
  }

  std::vector<char> out;
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(sections.size()));
  std::uint64_t offset = table;
  for (const auto& [name, t] : sections) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, offset);
    offset += t.numel() * dtype_size(t.dtype());
  }
  for (const auto& [name, t] : sections) {
    switch (t.dtype()) {
      case DType::F32:
        for (double v : t.values()) put<float>(out, static_cast<float>(v));
        break;
      case DType::F64:
        for (double v : t.values()) put<double>(out, v);
        break;
      case DType::I32:
        for (double v : t.values()) put<std::int32_t>(out, static_cast<std::int32_t>(v));
        break;
    }
  }
  return out;
}

NamedTensors decode_tensors(const std::vector<char>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    fail(ErrorKind::BadMagic, origin + ": not a DTEN container");
  }
  Reader r(bytes, origin);
  r.take<std::uint32_t>("magic");
  const auto version = r.take<std::uint32_t>("version");
  if (version != kContainerVersion) {
    fail(ErrorKind::BadVersion, origin + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.take<std::uint32_t>("section count");

  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::set<std::string> seen;
  for (std::uint32_t s = 0; s < count; ++s) {
    Entry e;
    const auto len = r.take<std::uint16_t>("section name length");
    e.name = r.take_string(len);
    if (!seen.insert(e.name).second) fail(ErrorKind::OffsetOverflow, origin + ": duplicate section '" + e.name + "'");
    const auto dt = r.take<std::uint8_t>("dtype");
    if (dt > 2) fail(ErrorKind::BadVersion, origin + ": unknown dtype " + std::to_string(dt) + " in '" + e.name + "'");
    e.dtype = static_cast<DType>(dt);
    const auto rank = r.take<std::uint8_t>("rank");
    for (std::uint8_t i = 0; i < rank; ++i) {
      const auto d = r.take<std::uint64_t>("dims");
      if (d == 0) fail(ErrorKind::OffsetOverflow, origin + ": zero extent in '" + e.name + "'");
      e.shape.push_back(static_cast<std::size_t>(d));
    }
    e.offset = r.take<std::uint64_t>("payload offset");
    entries.push_back(std::move(e));
  }

  const std::uint64_t table_end = r.pos();
  const std::uint64_t file_size = bytes.size();
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  for (const auto& e : entries) {
    std::uint64_t n = 1;
    for (auto d : e.shape) {
      if (n > kMax / d) fail(ErrorKind::OffsetOverflow, origin + ": extent overflow in '" + e.name + "'");
      n *= d;
    }
    const auto width = dtype_size(e.dtype);
    if (n > kMax / width) fail(ErrorKind::OffsetOverflow, origin + ": payload size overflow in '" + e.name + "'");
    const std::uint64_t nbytes = n * width;
    if (e.offset < table_end || e.offset > kMax - nbytes) {
      fail(ErrorKind::OffsetOverflow, origin + ": bad payload offset for '" + e.name + "'");
    }
    if (e.offset + nbytes > file_size) {
      fail(ErrorKind::Truncated, origin + ": payload of section '" + e.name + "' is truncated");
    }
  }

  NamedTensors out;
  for (const auto& e : entries) {
    const auto n = shape_numel(e.shape);
    std::vector<double> data(n);
    const char* p = bytes.data() + e.offset;
    for (std::size_t i = 0; i < n; ++i) {
      switch (e.dtype) {
        case DType::F32: {
          float f;
          std::memcpy(&f, p + 4 * i, 4);
          data[i] = f;
          break;
        }
        case DType::F64:
          std::memcpy(&data[i], p + 8 * i, 8);
          break;
        case DType::I32: {
          std::int32_t v;
          std::memcpy(&v, p + 4 * i, 4);
          data[i] = v;
          break;
        }
      }
    }
    out.emplace_back(e.name, Tensor(e.shape, std::move(data), e.dtype));
  }
  return out;
}

namespace {

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  return tmp;
}

void write_bytes_atomic(const std::filesystem::path& path, const char* data, std::size_t size) {
  const auto tmp = temp_sibling(path);
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    f.write(data, static_cast<std::streamsize>(size));
    f.flush();
    if (!f) fail(ErrorKind::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorKind::Io, "cannot rename into " + path.string());
  }
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const NamedTensors& sections) {
  const auto bytes = encode_tensors(sections);
  write_bytes_atomic(path, bytes.data(), bytes.size());
}

NamedTensors read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes, path.string());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_bytes_atomic(path, text.data(), text.size());
}

const Tensor* find_section_or_null(const NamedTensors& sections, const std::string& name) {
  for (const auto& [n, t] : sections) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor& find_section(const NamedTensors& sections, const std::string& name) {
  const Tensor* t = find_section_or_null(sections, name);
  if (!t) fail(ErrorKind::Config, "missing section '" + name + "'");
  return *t;
}

}  // namespace declip
