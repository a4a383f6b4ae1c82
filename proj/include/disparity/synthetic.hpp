#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "disparity/cox.hpp"
#include "disparity/decision.hpp"
#include "disparity/di.hpp"
#include "disparity/loan.hpp"

namespace disparity {

inline constexpr int kMarketSpecVersion = 1;

struct GenderCovariates {
  double married = 0.5;
  double repeated = 0.5;
  double app = 0.2;
  double express = 0.02;
  std::array<double, kEmploymentLevels> employment{0.2, 0.2, 0.2, 0.2, 0.2};
  std::array<double, kEducationLevels> education{0.2, 0.2, 0.2, 0.2, 0.2};
  double age_mean = 28.0;
  double age_sd = 6.0;
  double amount_log_mean = 1.1;  // log thousand RMB
  double amount_log_sd = 0.5;
  double past_ontime_mean = 8.0;  // repeated borrowers only
};

// Interest rate = min + step * Binomial(steps, p_gender).
struct RateSpec {
  double min = 0.16;
  double step = 0.01;
  int steps = 20;
  double male_p = 0.495;
  double female_p = 0.385;
};

// h(t | x) = min(1, baseline[t] exp(sum_j coef_j profile_j[t] (x_j - center_j)))
// over the named loan features.
struct HazardSpec {
  std::array<double, kTermMonths> baseline{};
  std::map<std::string, double> coefficients;
  std::map<std::string, double> centers;
  std::map<std::string, std::array<double, kTermMonths>> time_profiles;  // default all ones
};

struct GaussianGroup {
  double mu = 0.95;
  double sigma0 = 0.2;
};

// Decision parameters of one gender. mu and sigma0 default to the moments
// of the generated repayment ratios; pi may instead be solved from a target
// funding rate.
struct DecisionGroupSpec {
  double sigma1 = 0.5;
  std::optional<double> pi;
  std::optional<double> funding_rate;
  std::optional<double> mu;
  std::optional<double> sigma0;
};

enum class SignalKind { lambda, expected };
enum class RepaymentMode { hazard, gaussian };

struct DecisionSpec {
  SignalKind signal = SignalKind::expected;
  std::map<std::string, double> signal_shift;  // linear in the loan features
  double signal_offset = 0.0;
  DecisionGroupSpec male;
  DecisionGroupSpec female;
};

// Replaces the investor model: fund iff Y >= threshold (true Y), or with a
// fixed probability.
struct FundingRule {
  enum class Kind { threshold, bernoulli } kind = Kind::threshold;
  double male = 0.0;
  double female = 0.0;
};

struct MarketSpec {
  std::size_t n = 100000;
  std::optional<std::uint64_t> seed;
  double male_share = 0.767;
  int provinces = 4;
  RepaymentMode repayment = RepaymentMode::hazard;
  GenderCovariates male_covariates;
  GenderCovariates female_covariates;
  RateSpec rates;
  HazardSpec hazard;
  GaussianGroup gaussian_male{0.934, 0.205};
  GaussianGroup gaussian_female{0.957, 0.167};
  DecisionSpec decision;
  std::optional<FundingRule> rule;
  double censor_fraction = 0.0;

  // The calibrated default market.
  static MarketSpec calibrated();
  void validate() const;
};

nlohmann::json spec_to_json(const MarketSpec& spec);
// Missing fields keep the calibrated defaults.
MarketSpec spec_from_json(const nlohmann::json& j);

// Every latent quantity of every loan.
struct GroundTruth {
  std::vector<int> default_time;        // 0..12, 12 = no default
  std::vector<double> lambda;           // unclipped in gaussian mode
  std::vector<double> expected_lambda;  // E[lambda | x]
  std::vector<double> signal;           // lambda_hat
  std::vector<double> posterior;        // lambda_tilde
  std::vector<std::uint8_t> funded;
  GroupDecisionParams male;
  GroupDecisionParams female;
};

struct Market {
  std::vector<LoanRecord> loans;
  GroundTruth truth;
};

Market generate(const MarketSpec& spec, unsigned threads = 1);

// Hazard of the generating model for one loan.
HazardCurve true_hazard_curve(const HazardSpec& hazard, const FeatureSchema& schema, const LoanRecord& loan);

// DI computed from the true outcome of every loan.
DiEstimate true_di(const Market& market, std::span<const double> edges);

// First-stage bias b_{g,r}(l) = P_g(lambda_hat = l | D=0, R=r) - P_g(lambda = l | D=0, R=r).
struct FirstStageBias {
  Gender gender = Gender::male;
  double rate = 0.0;
  int twelfths = 0;
  std::size_t unfunded = 0;  // loans in the (gender, rate) cell
  double imputed_share = 0.0;
  double true_share = 0.0;
  double bias = 0.0;
};

struct BiasBin {
  double lo = 0.0;
  double hi = 0.0;
  double b_male = 0.0;    // average first-stage bias sum_r P(R=r|D=0) b_{g,r}(y/r) over the bin
  double b_female = 0.0;
  double scale_male = 0.0;  // P_g(D=0) / (A (1 + Bhat/A)(1 + B/A)), A = P_g(Y in bin, D=1)
  double scale_female = 0.0;
  std::optional<double> predicted;  // scale_f b_f - scale_m b_m
  std::optional<double> measured;   // DI-hat - DI computed directly
  std::optional<double> se;         // binomial Monte Carlo error of the 2SPS bin estimate
};

struct BiasReport {
  std::vector<FirstStageBias> cells;
  std::vector<BiasBin> bins;
  std::size_t excluded_cells = 0;  // (gender, rate) cells without unfunded loans
  std::size_t funded_imputed = 0;  // funded loans whose outcome was imputed (ignored)
};

// `imputed` and the market loans must be aligned. Funded loans enter with
// their true outcome.
BiasReport bias_oracle(const Market& market, std::span<const CompletedLoan> imputed, std::span<const double> edges);
BiasReport bias_oracle(const Market& market, const FittedHazardModel& model, std::span<const double> edges,
                       std::uint64_t seed, double multiplier = 1.0, unsigned threads = 1);

// id,gender,default_time,lambda,expected_lambda,signal,posterior,funded
void write_truth_csv(std::ostream& out, const Market& market);

}  // namespace disparity
