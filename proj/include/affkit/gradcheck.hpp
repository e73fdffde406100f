#pragma once

// Finite-difference verification suites over losses, backbone, heads and the
// deviation module.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "affkit/finite_diff.hpp"

namespace affkit::trainer {

struct GradcheckReport {
  std::string suite;
  std::uint64_t seed = 0;
  std::vector<finite_diff::Result> components;
  // Largest |gradient| that reached the frozen deviation twin; must be 0.
  bool frozen_checked = false;
  double frozen_grad_max_abs = 0.0;
  double seconds = 0.0;

  bool passed() const;
  /// One line per component plus the frozen block and an overall verdict.
  std::string to_text() const;
};

/// Suites: losses, backbone, heads, deviation, full (all of them plus an
/// end-to-end MTL model).
const std::vector<std::string_view>& gradcheck_suites();
GradcheckReport gradient_check(std::string_view suite, std::uint64_t seed = 0);

}  // namespace affkit::trainer
