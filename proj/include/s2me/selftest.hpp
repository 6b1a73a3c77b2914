#pragma once

#include <string>
#include <vector>

namespace s2me::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Runs every built-in verification check whose name contains `filter`
// (all of them for an empty filter): gradient checks for the operator
// vocabulary and the hybrid loss, FFT contracts, fusion algebra, loss hand
// values, schedules, and the metric oracles.
std::vector<CheckResult> run_checks(const std::string& filter = "");

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace s2me::selftest
