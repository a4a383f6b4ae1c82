#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "disparity/cox.hpp"

namespace disparity {

struct SmoothPoint {
  double time = 0.0;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

// Score test of zero slope of the coefficients in a block against g(t) = t.
// df is the rank of the block's efficient information: slopes the model
// already contains (a covariate with its own time interaction) add nothing.
struct PhTest {
  std::string name;
  std::vector<std::size_t> columns;
  double chi2 = 0.0;
  int df = 0;
  double p_value = 1.0;
};

struct SchoenfeldReport {
  std::vector<std::string> columns;
  std::vector<int> event_time;  // one entry per default, ascending
  Eigen::MatrixXd residuals;    // defaults x columns
  Eigen::MatrixXd scaled;       // beta + d V r
  std::vector<PhTest> tests;    // one per covariate block
  PhTest global;
  std::vector<std::vector<SmoothPoint>> smooth;  // per column, over the event-time range
};

// `blocks[j]` names the covariate block of column j; columns sharing a name
// are tested jointly.
SchoenfeldReport schoenfeld(const CoxProblem& problem, const Eigen::VectorXd& beta,
                            const std::vector<std::string>& blocks, int smooth_points = 45);
SchoenfeldReport schoenfeld(const FittedHazardModel& model, std::span<const SurvivalSample> samples);

// Local linear smoother with a Gaussian kernel (sd = bandwidth) and pointwise
// 95% normal bands.
std::vector<SmoothPoint> local_linear(std::span<const double> x, std::span<const double> y, double bandwidth,
                                      std::span<const double> grid);

struct CoxSnellReport {
  std::vector<double> residual;           // input order
  std::vector<std::uint8_t> event;
  std::vector<double> cumulative_hazard;  // Nelson-Aalen estimate at each residual
  std::vector<double> check_quantile;     // residual quantiles 0.05, 0.10, ..., 0.95
  std::vector<double> check_hazard;       // Nelson-Aalen estimate at those quantiles
  double max_deviation = 0.0;
};

// Residual of loan i: sum of h_i(s) over the months it was at risk, including
// the default month.
CoxSnellReport cox_snell(std::span<const HazardCurve> curves, std::span<const int> time,
                         std::span<const std::uint8_t> event);
CoxSnellReport cox_snell(const FittedHazardModel& model, std::span<const SurvivalSample> samples);

struct RankMonth {
  int month = 0;
  std::size_t defaults = 0;
  std::size_t at_risk = 0;
  double mean_rank = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

// Normalized rank of each defaulted loan's hazard within its month's risk
// set (0 = lowest, 1 = highest, ties count half); months without defaults
// are omitted.
std::vector<RankMonth> default_rank(std::span<const HazardCurve> curves, std::span<const int> time,
                                    std::span<const std::uint8_t> event);
std::vector<RankMonth> default_rank(const FittedHazardModel& model, std::span<const SurvivalSample> samples);

struct HazardPlotRow {
  int month = 0;
  double baseline = 0.0;
  double male = 0.0;    // mean predicted hazard among male loans at risk
  double female = 0.0;
};
std::vector<HazardPlotRow> hazard_plot(const FittedHazardModel& model, std::span<const SurvivalSample> samples);

}  // namespace disparity
