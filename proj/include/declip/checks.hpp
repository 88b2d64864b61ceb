#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace declip {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Central finite differences (h = 1e-5, relative tolerance 1e-4) over every
/// differentiable building block and loss, on seeded instances with at most
/// 9 tokens and 8 channels.
std::vector<CheckResult> gradient_suite(std::uint64_t seed);

/// The worked examples of every module, each checked against its hand-derived
/// value.
std::vector<CheckResult> selftest();

/// One `PASS|FAIL name detail` line per result.
std::string format_checks(const std::vector<CheckResult>& results);
bool all_passed(const std::vector<CheckResult>& results);

}  // namespace declip
