#pragma once

#include <functional>
#include <string>
#include <vector>

#include "charmt/parameters.hpp"

namespace charmt {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  /// Coordinates that failed at step h but agreed at h / 100.
  std::size_t refined = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t refined = 0;
  bool passed = false;
};

/// Compares the reverse-mode gradient of the scalar `f` against central
/// differences for every scalar of every parameter. The relative error of a
/// coordinate is |a - n| / max(|a|, |n|, abs_floor). Throws std::runtime_error
/// if two forward evaluations at the same point disagree.
///
/// ReLU makes the loss piecewise smooth, and a kink within h of the point
/// spoils the central difference. With `refine` set, a failing coordinate is
/// re-measured at h / 100 and judged on that; such coordinates are counted.
GradCheckReport grad_check(const std::function<Tensor()>& f, ParameterSet& params, double h = 1e-5,
                           double tol = 1e-4, double abs_floor = 1e-6, bool refine = false);

}  // namespace charmt
