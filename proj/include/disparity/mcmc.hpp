#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>

namespace disparity {

struct McmcConfig {
  int chains = 4;
  int warmup = 5000;
  int draws = 5000;
  int max_draws = 20000;  // per chain, after extensions
  double max_rhat = 1.01;
  double min_ess = 400.0;
  double target_acceptance = 0.3;
  unsigned threads = 1;
};

struct McmcResult {
  std::vector<Eigen::MatrixXd> chains;  // draws x parameters, post warmup
  std::vector<double> acceptance;       // per chain, post warmup
  Eigen::VectorXd rhat;
  Eigen::VectorXd ess;
  int extensions = 0;
};

using LogDensity = std::function<double(const Eigen::VectorXd&)>;

// Adaptive random-walk Metropolis: during warmup the proposal covariance
// tracks the empirical covariance of the chain and its scale is tuned toward
// the target acceptance; both are frozen afterwards. Chains start from
// `starts` (one per chain) and use independent streams derived from `key`.
// Draws are extended until split R-hat and ESS meet the config, or
// ConvergenceError is thrown.
McmcResult adaptive_metropolis(const LogDensity& log_density, const std::vector<Eigen::VectorXd>& starts,
                               const Eigen::MatrixXd& initial_covariance, const McmcConfig& config, std::uint64_t key);

// Split R-hat for one parameter (each chain split in halves).
double split_rhat(const std::vector<Eigen::VectorXd>& chains);
// Multi-chain effective sample size with Geyer's initial monotone sequence.
double effective_sample_size(const std::vector<Eigen::VectorXd>& chains);

}  // namespace disparity
