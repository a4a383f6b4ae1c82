#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "disparity/design.hpp"
#include "disparity/loan.hpp"
#include "disparity/rng.hpp"

namespace disparity {

// Discrete-time Cox partial likelihood with Efron ties over the months
// 0..11. Row i is at risk in month t when tau_i > t, or tau_i == t and it
// defaults then. Time interactions make the covariate vector in month t
// z_i(t) = [x_i, x_i[src_k] * F(t, m_k)], so one row of `x` stands for the
// whole per-month episode split of a loan.
class CoxProblem {
 public:
  struct Evaluation {
    double loglik = 0.0;
    Eigen::VectorXd score;
    Eigen::MatrixXd information;  // negative Hessian
  };

  // Per event month: number of defaults, Efron-averaged covariate mean of the
  // risk set and log of the summed risk weights exp(eta).
  struct EventMonth {
    int month = 0;
    int events = 0;
    Eigen::VectorXd mean;
    double log_weight = 0.0;
  };

  CoxProblem(RowMatrix x, std::vector<int> time, std::vector<std::uint8_t> event,
             std::vector<InteractionColumn> interactions = {}, Eigen::MatrixXd time_basis = {},
             std::vector<std::string> column_names = {});

  std::size_t rows() const { return order_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(x_.cols()) + interactions_.size(); }
  std::size_t events() const { return n_events_; }
  int distinct_event_times() const;
  const std::vector<std::string>& column_names() const { return names_; }
  // True when rows are aggregated by interaction pattern (the fast path).
  bool grouped() const { return grouped_; }

  Evaluation evaluate(const Eigen::VectorXd& beta, bool derivatives = true) const;
  // Same quantities from a plain per-month pass over rows; used as a cross-check.
  Evaluation evaluate_reference(const Eigen::VectorXd& beta) const;

  // Breslow baseline hazard at z = 0, clamped to [0, 1]; months without
  // events get 0.
  std::array<double, kTermMonths> baseline_hazard(const Eigen::VectorXd& beta) const;
  std::vector<EventMonth> event_months(const Eigen::VectorXd& beta) const;
  // Efron score residuals, one row per input row in input order.
  Eigen::MatrixXd score_residuals(const Eigen::VectorXd& beta) const;

  // Schoenfeld residuals z_i(t) - abar(t), one row per default, ordered by
  // month; `rows` holds the input row of each default.
  struct Schoenfeld {
    std::vector<int> month;
    std::vector<std::size_t> rows;
    Eigen::MatrixXd residuals;
  };
  Schoenfeld schoenfeld_residuals(const Eigen::VectorXd& beta) const;
  // Contribution of each event month to the information matrix.
  std::vector<std::pair<int, Eigen::MatrixXd>> month_information(const Eigen::VectorXd& beta) const;

  // z_i(t) for input row i.
  Eigen::VectorXd covariates_at(std::size_t row, int month) const;
  int time(std::size_t row) const { return time_in_[row]; }
  bool event(std::size_t row) const { return event_in_[row] != 0; }

  // Throws RankDeficient naming collinear columns when the information matrix
  // at beta = 0 is singular.
  void check_rank() const;

 private:
  struct MonthSums;
  Eigen::MatrixXd month_map(int month) const;  // M_t, size() x main
  void month_sums_general(const Eigen::VectorXd& beta, int month, bool second, MonthSums& out) const;

  RowMatrix x_;  // rows sorted by (bucket, pattern)
  std::vector<std::size_t> order_;  // sorted position -> input row
  std::vector<int> time_in_;
  std::vector<std::uint8_t> event_in_;
  std::vector<std::size_t> bucket_begin_;  // 2 * 13 + 1 offsets; bucket = 2 tau + event
  std::vector<InteractionColumn> interactions_;
  Eigen::MatrixXd time_basis_;
  std::vector<std::string> names_;
  std::size_t n_events_ = 0;

  bool grouped_ = false;
  struct Group {
    int bucket;
    int pattern;
    std::size_t begin;
    std::size_t end;
  };
  std::vector<Group> groups_;
  Eigen::MatrixXd patterns_;  // pattern x interaction: value of x[src_k]
};

struct CoxFitOptions {
  int max_iterations = 50;
  double tolerance = 1e-9;  // relative log-likelihood change
};

struct CoxFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd information;
  double loglik = 0.0;
  std::vector<double> loglik_trace;  // accepted iterates, starting at beta = 0
  int iterations = 0;
  double gradient_norm = 0.0;  // max |score| at the solution
};

// Newton-Raphson with step halving.
CoxFit newton_fit(const CoxProblem& problem, const CoxFitOptions& options = {});

// Sandwich covariance I^-1 (R'R) I^-1 from per-row score residuals.
Eigen::MatrixXd robust_covariance(const CoxProblem& problem, const CoxFit& fit);

using HazardCurve = std::array<double, kTermMonths>;

struct FittedHazardModel {
  HazardDesign design;
  Eigen::VectorXd beta;  // main effects, then time interactions
  HazardCurve baseline{};
  Eigen::MatrixXd covariance;         // inverse information
  Eigen::MatrixXd robust_covariance;  // empty when not computed
  double loglik = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;
  std::optional<double> concordance;
  std::size_t samples = 0;
  std::size_t events = 0;

  Eigen::VectorXd beta_main() const;
  Eigen::VectorXd beta_time() const;

  // Linear predictor from expanded main columns.
  double linear_predictor_main(const Eigen::Ref<const Eigen::VectorXd>& main, int month) const;
  double linear_predictor(const Eigen::Ref<const Eigen::VectorXd>& raw, int month) const;
  // h0(t) exp(eta), clamped to [0, 1].
  double hazard(const Eigen::Ref<const Eigen::VectorXd>& raw, int month) const;
  HazardCurve hazard_curve(const Eigen::Ref<const Eigen::VectorXd>& raw) const;
  HazardCurve hazard_curve_main(const Eigen::Ref<const Eigen::VectorXd>& main) const;
};

struct HazardFitOptions {
  CoxFitOptions newton;
  bool robust = true;
  bool concordance = true;
};

CoxProblem make_cox_problem(const HazardDesign& design, std::span<const SurvivalSample> samples);

// Fits with a prebuilt design (knots already placed).
FittedHazardModel fit_hazard_model(std::span<const SurvivalSample> samples, const HazardDesign& design,
                                   const HazardFitOptions& options = {});
// Places knots on `samples` first.
FittedHazardModel fit_hazard_model(std::span<const SurvivalSample> samples, const FeatureSchema& schema,
                                   const DesignConfig& config, const HazardFitOptions& options = {});

// Procedure 1: starting at `start_month`, default in month t with probability
// min(1, multiplier * h(t)); lambda = t / 12 at the first default, 1 if none.
RepaymentOutcome predict_repayment(const HazardCurve& curve, double rate, int start_month, Stream& rng,
                                   double multiplier = 1.0);
RepaymentOutcome predict_repayment(const FittedHazardModel& model, const Eigen::Ref<const Eigen::VectorXd>& raw,
                                   double rate, int start_month, Stream& rng, double multiplier = 1.0);

// Probability of defaulting at some month of the term.
double default_probability(const HazardCurve& curve);

// Harrell's C. Pair (i, j) is comparable when i defaults at tau_i and j is
// known to survive month tau_i (tau_j > tau_i); it is concordant when
// risk_i > risk_j and counts 0.5 on ties. Throws if no pair is comparable.
double concordance_index(std::span<const double> risk, std::span<const int> time, std::span<const std::uint8_t> event);
double concordance(const FittedHazardModel& model, std::span<const SurvivalSample> samples);

}  // namespace disparity
