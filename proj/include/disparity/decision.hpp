#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "disparity/di.hpp"
#include "disparity/loan.hpp"
#include "disparity/mcmc.hpp"

namespace disparity {

// Investors see a noisy signal lambda_hat = lambda + sigma1 * eps of the
// repayment ratio lambda ~ N(mu, sigma0^2), form the posterior mean
// lambda_tilde = (1 - gamma) mu + gamma lambda_hat and fund iff
// lambda_tilde (1 + R) >= pi.
struct GroupDecisionParams {
  double mu = 1.0;
  double sigma0 = 0.0;
  double sigma1 = 1.0;
  double pi = 1.0;

  double gamma() const;
  void validate() const;
};

// gamma = sigma1^-2 / (sigma0^-2 + sigma1^-2) = sigma0^2 / (sigma0^2 + sigma1^2).
double signal_reliability(double sigma0, double sigma1);

// P(fund | lambda, R) = Phi(lambda_coef * lambda + inv_rate_coef / (1 + R) + intercept).
struct LikelihoodForm {
  double lambda_coef = 0.0;    // 1 / sigma1
  double inv_rate_coef = 0.0;  // -(1 / sigma1) pi / gamma
  double intercept = 0.0;      // (1 / sigma1) (1 / gamma - 1) mu
};
LikelihoodForm likelihood_form(const GroupDecisionParams& params);
// Inverse of likelihood_form given the plug-in sigma0.
GroupDecisionParams params_from_form(const LikelihoodForm& form, double sigma0);

// sigma1 = 0 reduces to the step 1[lambda (1 + R) >= pi]; sigma0 = 0 to
// 1[mu (1 + R) >= pi].
double success_probability(double lambda, double rate, const GroupDecisionParams& params);

struct GroupMoments {
  double mu = 0.0;
  double sigma0 = 0.0;  // population standard deviation
  std::size_t n = 0;
};
struct DecisionMoments {
  GroupMoments male;
  GroupMoments female;
  const GroupMoments& operator[](Gender g) const { return g == Gender::male ? male : female; }
};
DecisionMoments moments(std::span<const CompletedLoan> loans);

struct BinomialCell {
  Gender gender = Gender::male;
  int twelfths = 12;  // lambda = twelfths / 12
  double rate = 0.0;
  std::size_t trials = 0;
  std::size_t successes = 0;

  double lambda() const { return twelfths / 12.0; }
};
// Groups loans by (gender, lambda, exact R); sorted by that key.
std::vector<BinomialCell> collapse_binomial(std::span<const CompletedLoan> loans);

// Parameter-dependent log-likelihood of one gender's funding outcomes at
// theta = (1 / sigma1, pi). The optional gradient is with respect to theta.
double collapsed_loglik(std::span<const BinomialCell> cells, Gender gender, const GroupMoments& m,
                        const Eigen::Vector2d& theta, Eigen::Vector2d* gradient = nullptr);
double bernoulli_loglik(std::span<const CompletedLoan> loans, Gender gender, const GroupMoments& m,
                        const Eigen::Vector2d& theta);

// Half-normal(0, 2) priors on 1 / sigma1 and pi; -inf outside the support.
double log_posterior(std::span<const BinomialCell> cells, Gender gender, const GroupMoments& m,
                     const Eigen::Vector2d& theta, Eigen::Vector2d* gradient = nullptr);

struct ThresholdConfig {
  McmcConfig mcmc;
  std::uint64_t seed = 0;
};

struct GroupPosterior {
  Gender gender = Gender::male;
  GroupMoments moments;
  std::vector<Eigen::MatrixXd> chains;  // draws x (1 / sigma1, pi)
  Eigen::Vector2d rhat = Eigen::Vector2d::Ones();
  Eigen::Vector2d ess = Eigen::Vector2d::Zero();
  std::vector<double> acceptance;
  int extensions = 0;

  // All draws of one column (0 = 1/sigma1, 1 = pi), chains concatenated.
  Eigen::VectorXd column(int j) const;
  Eigen::VectorXd sigma1() const;
  Eigen::VectorXd gamma() const;
};

struct ThresholdPosterior {
  GroupPosterior male;
  GroupPosterior female;
  std::size_t replicates = 1;

  const GroupPosterior& operator[](Gender g) const { return g == Gender::male ? male : female; }
};

struct ParameterSummary {
  std::string name;  // e.g. "pi_f"
  double mean = 0.0;
  double sd = 0.0;
  double lower = 0.0;  // 2.5% quantile
  double upper = 0.0;  // 97.5% quantile
  double rhat = 1.0;
  double ess = 0.0;
};
// mu, sigma0 (plug-in), inv_sigma1, sigma1, gamma and pi for each gender.
std::vector<ParameterSummary> summarize(const ThresholdPosterior& posterior);

// Posterior P(pi_f > pi_m), pairing independent draws by index.
double prob_female_threshold_higher(const ThresholdPosterior& posterior);

ThresholdPosterior infer(std::span<const BinomialCell> cells, const DecisionMoments& m, const ThresholdConfig& config);

// Uniform mixture over replicates; each contributes the same number of draws
// per chain (the last ones when lengths differ). R-hat and ESS report the
// worst replicate.
ThresholdPosterior pool_posteriors(std::span<const ThresholdPosterior> replicates);

// Long-format trace: gender,chain,draw,inv_sigma1,pi
void write_trace_csv(std::ostream& out, const ThresholdPosterior& posterior);

}  // namespace disparity
