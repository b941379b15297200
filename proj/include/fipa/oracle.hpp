#pragma once

#include <string>
#include <vector>

namespace fipa {

struct OracleSuiteResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;  // largest error seen, in the suite's own measure
  double tolerance = 0.0;
  int checks = 0;
};

// Suite names, in run order.
std::vector<std::string> oracle_suite_names();

// Runs every suite at fixed seeds. `perturb` names a suite whose computed
// side is scaled by 1 + 10 * tolerance (negative control); empty for none.
std::vector<OracleSuiteResult> run_oracle_suites(const std::string& perturb = "");

}  // namespace fipa
