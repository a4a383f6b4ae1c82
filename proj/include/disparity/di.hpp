#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "disparity/cox.hpp"
#include "disparity/loan.hpp"
#include "disparity/stats.hpp"

namespace disparity {

// A loan with its return rate filled in: observed for fully repaid or
// defaulted funded loans, drawn from the hazard model otherwise.
struct CompletedLoan {
  std::size_t source = 0;  // index into the loan list it came from
  Gender gender = Gender::male;
  bool funded = false;
  double rate = 0.0;
  int default_time = kTermMonths;
  double lambda = 1.0;
  double y = 0.0;
  bool imputed = false;
};

// Imputation keys: one counter-based stream per loan. The default keys hash
// the loan id, so reordering loans does not change any draw.
std::vector<std::uint64_t> loan_keys(std::span<const LoanRecord> loans, std::uint64_t seed);

// Unfunded loans: Procedure-1 draw from month 0 with hazards scaled by
// `multiplier`. Right-censored funded loans: draw continuing from the first
// unobserved month with multiplier 1. Other loans keep their actual outcome.
std::vector<CompletedLoan> impute_returns(const FittedHazardModel& model, std::span<const LoanRecord> loans,
                                          std::span<const std::uint64_t> keys, double multiplier = 1.0,
                                          unsigned threads = 1);
std::vector<CompletedLoan> impute_returns(const FittedHazardModel& model, std::span<const LoanRecord> loans,
                                          std::uint64_t seed, double multiplier = 1.0, unsigned threads = 1);

// Completed loans from known outcomes (every loan carries its true default time).
std::vector<CompletedLoan> complete_with_truth(std::span<const LoanRecord> loans, std::span<const int> default_times);

// Bin edges [e_0, e_1), [e_1, e_2), ...; must be strictly increasing.
std::vector<double> uniform_edges(double lo, double hi, double width);
std::vector<double> parse_edges(const std::string& text);  // "lo:hi:width" or "e0,e1,e2,..."
// Index of the bin containing y, tolerant to rounding at the edges.
std::optional<std::size_t> bin_index(std::span<const double> edges, double y);

struct DiBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t male = 0;
  std::size_t female = 0;
  std::size_t male_funded = 0;
  std::size_t female_funded = 0;
  std::optional<double> male_rate;
  std::optional<double> female_rate;
  std::optional<double> di;  // male_rate - female_rate; missing if a gender is absent
  std::optional<double> ci_low;
  std::optional<double> ci_high;
};

struct DiEstimate {
  std::vector<double> edges;
  std::vector<DiBin> bins;
  double average_di = 0.0;
  double average_se = 0.0;  // binomial approximation, no first-stage noise
  std::optional<double> ci_low;
  std::optional<double> ci_high;
  std::size_t loans = 0;
  std::size_t out_of_range = 0;
  std::size_t n_bootstrap = 0;
  std::size_t failed_replicates = 0;
};

// Average DI weights each valid bin by its pooled (both genders) count.
DiEstimate nonparametric_di(std::span<const CompletedLoan> loans, std::span<const double> edges);

enum class OlsKind { di, di_controls, dt };
std::string to_string(OlsKind kind);
OlsKind parse_ols_kind(const std::string& text);

struct OlsOptions {
  int y_df = 12;             // natural-spline df for the return rate
  bool aic_selection = true;  // backward elimination over the controls
};

struct OlsResult {
  OlsKind kind = OlsKind::di;
  double gender_coef = 0.0;  // coefficient on the male indicator
  double gender_se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::vector<std::string> included;    // controls kept
  std::vector<std::string> eliminated;  // controls dropped by AIC
  double aic = 0.0;
  std::size_t n = 0;
};

// Linear-probability regression of funding on the male indicator plus
// f_ns(Y) (di), f_ns(Y) and X (di_controls), or X only (dt). Controls are
// the loan features other than gender and the interest rate.
OlsResult ols_second_stage(std::span<const CompletedLoan> completed, std::span<const LoanRecord> loans,
                           const FeatureSchema& schema, OlsKind kind, const OlsOptions& options = {});

// Share of the DI explained by observed covariates: 1 - coef(di_controls) / coef(di).
double decomposition_share(double coef_di, double coef_di_controls);

struct BootstrapConfig {
  std::size_t replicates = 500;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  HazardFitOptions fit{{}, false, false};
  double max_failure_share = 0.10;
};

// Resampled data for one bootstrap replicate, imputed under each requested
// hazard multiplier with a first stage refitted on the resample.
struct Replicate {
  std::size_t index = 0;
  std::vector<std::size_t> sample;  // positions into the original loans
  std::vector<std::vector<CompletedLoan>> imputed;  // per multiplier; source = position in `sample`
};

struct BootstrapRun {
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::vector<bool> ok;  // per replicate
};

// Runs `fn` once per successful replicate (possibly concurrently; write only
// to slot replicate.index). Refits reuse the knots of `model`.
BootstrapRun run_bootstrap(std::span<const LoanRecord> loans, const FittedHazardModel& model,
                           std::span<const double> multipliers, const BootstrapConfig& config,
                           const std::function<void(const Replicate&)>& fn);

// Point estimate from `model` plus percentile CIs across replicates.
DiEstimate bootstrap_di(std::span<const LoanRecord> loans, const FittedHazardModel& model, std::span<const double> edges,
                        const BootstrapConfig& config, double multiplier = 1.0);

// Subset filters: "name=expr" with expr a conjunction of comparisons joined by
// '&', e.g. "young_single=age<30&married==0". Fields are the loan covariates,
// gender (m/f) and rate.
struct SubsetFilter {
  struct Clause {
    std::string field;
    std::string op;
    double value = 0.0;
  };
  std::string name;
  std::vector<Clause> clauses;

  bool matches(const LoanRecord& loan) const;
};
SubsetFilter parse_subset(const std::string& text);

struct SubsetEstimate {
  std::string name;
  std::size_t loans = 0;
  std::optional<DiEstimate> estimate;  // missing when a gender is absent
};
std::vector<SubsetEstimate> disaggregate_di(std::span<const CompletedLoan> completed, std::span<const LoanRecord> loans,
                                            std::span<const SubsetFilter> filters, std::span<const double> edges);

struct SensitivityResult {
  std::vector<double> multipliers;
  std::vector<double> average_di;
  std::optional<stats::LineFit> fit;
  std::optional<double> root;  // multiplier where the fitted line crosses zero
};

// Least-squares line through (multiplier, DI) and its root.
SensitivityResult extrapolate(std::span<const double> multipliers, std::span<const double> average_di);
SensitivityResult sensitivity_sweep(const FittedHazardModel& model, std::span<const LoanRecord> loans,
                                    std::span<const double> multipliers, std::uint64_t seed,
                                    std::span<const double> edges, unsigned threads = 1);

}  // namespace disparity
