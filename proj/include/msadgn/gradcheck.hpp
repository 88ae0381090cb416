#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace msadgn {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  long checked = 0;  // number of parameter entries perturbed
};

// Central differences against autodiff for every differentiable operation
// and for the full training loss on a two-samples-per-domain micro-batch.
std::vector<GradCheckResult> run_gradient_suite(double eps = 1e-5, std::uint64_t seed = 7);

}  // namespace msadgn
