#pragma once

#include <span>
#include <vector>

namespace disparity::stats {

double normal_cdf(double z);
// log Phi(z), accurate far into the lower tail.
double normal_log_cdf(double z);
double normal_pdf(double z);
double normal_quantile(double p);

// Upper tail probability of a chi-square variable with `df` degrees of freedom.
double chi_square_sf(double statistic, double df);

// Linear-interpolation sample quantile (R type 7). `sorted` must be ascending.
double quantile_sorted(std::span<const double> sorted, double p);
// Inverse-ECDF quantile (R type 1): the ceil(n p)-th order statistic.
double order_statistic_quantile(std::span<const double> sorted, double p);

double mean(std::span<const double> x);
// Population standard deviation (divides by n).
double population_sd(std::span<const double> x);

struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double r_squared = 0.0;
};

// Ordinary least squares line through (x, y); needs at least two distinct x.
LineFit fit_line(std::span<const double> x, std::span<const double> y);

}  // namespace disparity::stats
