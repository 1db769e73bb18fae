#pragma once

// Randomized finite-difference cases for every differentiable op and both
// block forwards. Each case reduces its op to a scalar through a fixed random
// projection so every output element contributes to the gradient.

#include <cstdint>
#include <string>
#include <vector>

#include "parsearch/tensor.hpp"

namespace parsearch {

struct GradcheckCase {
  std::string name;
  ScalarFn f;
  Tensor x;
};

// One case per (op, differentiated input) for the given seed. Shapes are
// drawn per seed, up to 16 x 64 for the element-wise and matrix ops.
std::vector<GradcheckCase> gradcheck_cases(std::uint64_t seed);

struct GradcheckSummary {
  std::string name;
  double max_error = 0;
  std::size_t cases = 0;
};

inline constexpr double kGradcheckEps = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-5;

// Worst grad_check error per case name over seeds [0, seeds).
std::vector<GradcheckSummary> run_gradcheck_suite(std::size_t seeds, double eps = kGradcheckEps);

}  // namespace parsearch
