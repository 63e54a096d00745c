#pragma once

#include <functional>
#include <string>
#include <vector>

namespace cape {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Self-contained invariant suite over the pose, encoding, attention,
/// diffusion, and metric modules; needs no dataset or checkpoint.
/// Returns one result per property.
std::vector<PropertyResult> run_verify_suite(std::uint64_t seed);

}  // namespace cape
