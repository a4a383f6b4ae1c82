#include "disparity/spline.hpp"

#include <algorithm>
#include <cmath>

#include "disparity/error.hpp"
#include "disparity/stats.hpp"

namespace disparity {

void SplineSpec::validate() const {
  if (df < 1 || static_cast<std::size_t>(df) != knots.size() + 1) {
    throw InvalidInput("spline df must equal the number of interior knots + 1");
  }
  if (!(boundary.first < boundary.second)) throw InvalidInput("cannot place knots: empty boundary range");
  double prev = boundary.first;
  for (const double k : knots) {
    if (!(k > prev)) throw InvalidInput("cannot place knots: knots must be strictly increasing inside the boundary");
    prev = k;
  }
  if (!(boundary.second > prev)) throw InvalidInput("cannot place knots: last knot must lie below the upper boundary");
}

namespace {

std::vector<double> quantile_knots(std::span<const double> sorted, int count) {
  std::vector<double> knots;
  for (int j = 1; j <= count; ++j) knots.push_back(stats::quantile_sorted(sorted, static_cast<double>(j) / (count + 1)));
  return knots;
}

bool strictly_inside(const std::vector<double>& knots, double lo, double hi) {
  double prev = lo;
  for (const double k : knots) {
    if (!(k > prev)) return false;
    prev = k;
  }
  return hi > prev;
}

}  // namespace

SplineSpec make_spline_spec(std::span<const double> values, int df) {
  if (df < 2) throw InvalidInput("spline df must be at least 2");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> distinct = sorted;
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < static_cast<std::size_t>(df) + 1) {
    throw InvalidInput("cannot place knots: need at least df + 1 distinct values");
  }
  SplineSpec spec;
  spec.df = df;
  spec.boundary = {sorted.front(), sorted.back()};
  spec.knots = quantile_knots(sorted, df - 1);
  if (!strictly_inside(spec.knots, spec.boundary.first, spec.boundary.second)) {
    spec.knots = quantile_knots(distinct, df - 1);
  }
  if (!strictly_inside(spec.knots, spec.boundary.first, spec.boundary.second)) {
    throw InvalidInput("cannot place knots");
  }
  spec.center = stats::quantile_sorted(sorted, 0.5);
  spec.validate();
  return spec;
}

SplineSpec make_spline_spec(std::vector<double> knots, std::pair<double, double> boundary, std::optional<double> center) {
  SplineSpec spec;
  spec.df = static_cast<int>(knots.size()) + 1;
  spec.knots = std::move(knots);
  spec.boundary = boundary;
  spec.center = center.value_or(boundary.first);
  spec.validate();
  return spec;
}

namespace {

void raw_basis(const SplineSpec& spec, double x, Eigen::Ref<Eigen::VectorXd> out) {
  const double lo = spec.boundary.first;
  const double width = spec.boundary.second - lo;
  const double u = (x - lo) / width;
  // Scaled knot sequence xi_1 = 0 < interior ... < xi_K = 1.
  const std::size_t k_interior = spec.knots.size();
  auto xi = [&](std::size_t j) -> double {
    if (j == 0) return 0.0;
    if (j == k_interior + 1) return 1.0;
    return (spec.knots[j - 1] - lo) / width;
  };
  const std::size_t K = k_interior + 2;
  auto cube_plus = [](double v) { return v > 0.0 ? v * v * v : 0.0; };
  const double last = cube_plus(u - xi(K - 1));
  auto d = [&](std::size_t j) { return (cube_plus(u - xi(j)) - last) / (xi(K - 1) - xi(j)); };
  out[0] = u;
  const double d_penultimate = d(K - 2);
  for (std::size_t j = 0; j + 2 < K; ++j) out[static_cast<Eigen::Index>(j + 1)] = d(j) - d_penultimate;
}

}  // namespace

void evaluate_into(const SplineSpec& spec, double x, Eigen::Ref<Eigen::VectorXd> out) {
  raw_basis(spec, x, out);
  Eigen::VectorXd c(spec.df);
  raw_basis(spec, spec.center, c);
  out -= c;
}

Eigen::VectorXd evaluate(const SplineSpec& spec, double x) {
  Eigen::VectorXd out(spec.df);
  evaluate_into(spec, x, out);
  return out;
}

Eigen::VectorXd evaluate_uncentered(const SplineSpec& spec, double x) {
  Eigen::VectorXd out(spec.df);
  raw_basis(spec, x, out);
  return out;
}

}  // namespace disparity
