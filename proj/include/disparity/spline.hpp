#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace disparity {

// Natural cubic spline basis (no intercept) with `df` = interior knots + 1
// columns. The basis is the truncated-power construction with the natural
// boundary constraints absorbed, evaluated on x rescaled to [0, 1] over the
// boundary knots, and shifted so that every column is zero at `center`.
struct SplineSpec {
  std::vector<double> knots;  // interior, strictly increasing
  std::pair<double, double> boundary{0.0, 1.0};
  int df = 1;
  double center = 0.0;

  // Throws InvalidInput if the knot layout is invalid.
  void validate() const;
};

// Interior knots at equally spaced quantiles of `values` (boundary knots at
// min/max, centering point at the median). Falls back to quantiles of the
// distinct values when ties collapse the knots onto each other.
SplineSpec make_spline_spec(std::span<const double> values, int df);

// Spec with explicit knots; the centering point defaults to the lower boundary.
SplineSpec make_spline_spec(std::vector<double> knots, std::pair<double, double> boundary,
                            std::optional<double> center = std::nullopt);

Eigen::VectorXd evaluate(const SplineSpec& spec, double x);
void evaluate_into(const SplineSpec& spec, double x, Eigen::Ref<Eigen::VectorXd> out);

// Basis without the centering shift.
Eigen::VectorXd evaluate_uncentered(const SplineSpec& spec, double x);

}  // namespace disparity
