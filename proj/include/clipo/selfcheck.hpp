#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace clipo {

struct CheckResult {
  std::string suite;
  std::string name;
  double tolerance = 0.0;
  double measured = 0.0;
  bool passed = false;
};

struct SelfcheckOptions {
  int gradient_seeds = 50;
  // Test fixture: routes the similarity matrix of the contrastive gradient
  // checks through an identity op whose backward is off by 0.1%.
  bool perturb_backward = false;
};

// Gradient checks, loss identities, surrogate equivalences and a hand-traced
// single-group step.
std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opts = {});

// One line per check: suite, name, tolerance, measured value, PASS/FAIL.
void print_report(std::ostream& os, const std::vector<CheckResult>& results);

}  // namespace clipo
