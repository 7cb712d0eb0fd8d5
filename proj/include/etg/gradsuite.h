#pragma once

#include <functional>
#include <string>
#include <vector>

namespace etg {

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Finite-difference verification of every differentiable operation against
// seeded fixtures: elementary tape ops, head deformation, the rig, the
// intra-oral residual, the renderer, screen-space normals, the modulation
// and encoder/decoder blocks, and all losses. quick trims the elementary-op
// sweep from 100 random inputs to 10.
std::vector<GradCheckResult> run_gradient_suite(bool quick = false);

// Prints one line per check to stdout; returns true when everything passed.
bool print_gradient_suite(bool quick = false);

}  // namespace etg
