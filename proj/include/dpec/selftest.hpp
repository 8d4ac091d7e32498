#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dpec {

struct SuiteResult {
  std::string name;
  int passed = 0;
  int total = 0;
  std::vector<std::string> failures;

  bool ok() const { return passed == total; }
};

/// Gradient checks, selective-scan oracle, histogram mass and checkpoint round trip.
/// With `checkpoint`, also verifies that file loads and its configuration parses.
std::vector<SuiteResult> run_selftest(const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

void print_selftest(std::ostream& out, const std::vector<SuiteResult>& suites);

}  // namespace dpec
