#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvthead/numerics/grad_check.hpp"

namespace cvthead::numerics {

// One named gradient check; `run(seed)` draws seeded random inputs and
// returns the finite-difference report.
struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, const GradCheckOptions&)> run;
};

// Cases for every differentiable primitive in ops.hpp, in 64-bit mode.
std::vector<GradCheckCase> primitive_grad_checks();

}  // namespace cvthead::numerics
