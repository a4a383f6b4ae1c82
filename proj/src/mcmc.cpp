#include "disparity/mcmc.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Cholesky>

#include "disparity/error.hpp"
#include "disparity/parallel.hpp"
#include "disparity/rng.hpp"

namespace disparity {

namespace {

struct ChainState {
  Eigen::VectorXd x;
  double logp = 0.0;
  Eigen::MatrixXd chol;  // proposal Cholesky factor (scale included)
  std::uint64_t key = 0;
  std::uint64_t steps = 0;
  std::vector<Eigen::VectorXd> draws;
  std::size_t accepted = 0;
};

// One Metropolis step using stream position `steps` of the chain.
bool step(const LogDensity& f, ChainState& c) {
  Stream s(derive_key(c.key, c.steps++));
  const auto d = c.x.size();
  Eigen::VectorXd z(d);
  for (Eigen::Index j = 0; j < d; ++j) z[j] = s.normal();
  const Eigen::VectorXd prop = c.x + c.chol * z;
  const double lp = f(prop);
  if (std::isfinite(lp) && std::log(s.uniform()) < lp - c.logp) {
    c.x = prop;
    c.logp = lp;
    return true;
  }
  return false;
}

Eigen::MatrixXd safe_cholesky(const Eigen::MatrixXd& cov) {
  const auto d = cov.rows();
  Eigen::MatrixXd m = 0.5 * (cov + cov.transpose());
  double jitter = 1e-12 * std::max(1.0, m.diagonal().maxCoeff());
  for (int attempt = 0; attempt < 20; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(m + jitter * Eigen::MatrixXd::Identity(d, d));
    if (llt.info() == Eigen::Success) return llt.matrixL();
    jitter *= 10.0;
  }
  throw ConvergenceError("mcmc: proposal covariance is not positive definite");
}

void run_warmup(const LogDensity& f, ChainState& c, const Eigen::MatrixXd& cov0, const McmcConfig& cfg) {
  const auto d = c.x.size();
  double log_scale = std::log(2.38 * 2.38 / static_cast<double>(d));
  Eigen::MatrixXd cov = cov0;
  Eigen::VectorXd mean = c.x;
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
  const int adapt_start = std::min(500, cfg.warmup / 4);
  c.chol = safe_cholesky(std::exp(log_scale) * cov);
  for (int it = 0; it < cfg.warmup; ++it) {
    const bool acc = step(f, c);
    // Welford update of the chain's running covariance.
    const double n = it + 1.0;
    const Eigen::VectorXd delta = c.x - mean;
    mean += delta / n;
    m2 += delta * (c.x - mean).transpose();
    // Robbins-Monro on the log scale.
    log_scale += (acc ? 1.0 - cfg.target_acceptance : -cfg.target_acceptance) / std::pow(n, 0.6);
    if (it >= adapt_start && it % 50 == 0) cov = m2 / (n - 1.0) + 1e-10 * Eigen::MatrixXd::Identity(d, d);
    if (it % 10 == 0 || it + 1 == cfg.warmup) c.chol = safe_cholesky(std::exp(log_scale) * cov);
  }
}

void run_draws(const LogDensity& f, ChainState& c, int count) {
  for (int it = 0; it < count; ++it) {
    c.accepted += step(f, c) ? 1 : 0;
    c.draws.push_back(c.x);
  }
}

std::vector<Eigen::VectorXd> column(const std::vector<ChainState>& chains, Eigen::Index j) {
  std::vector<Eigen::VectorXd> out;
  for (const auto& c : chains) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(c.draws.size()));
    for (std::size_t k = 0; k < c.draws.size(); ++k) v[static_cast<Eigen::Index>(k)] = c.draws[k][j];
    out.push_back(std::move(v));
  }
  return out;
}

double mean_of(const Eigen::VectorXd& v) { return v.mean(); }

double var_of(const Eigen::VectorXd& v) {
  const double m = v.mean();
  return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

}  // namespace

double split_rhat(const std::vector<Eigen::VectorXd>& chains) {
  std::vector<Eigen::VectorXd> halves;
  for (const auto& c : chains) {
    const Eigen::Index h = c.size() / 2;
    if (h < 2) throw InvalidInput("split_rhat: chains too short");
    halves.push_back(c.head(h));
    halves.push_back(c.segment(c.size() - h, h));
  }
  const auto m = static_cast<double>(halves.size());
  const auto n = static_cast<double>(halves[0].size());
  double grand = 0.0;
  for (const auto& h : halves) grand += mean_of(h);
  grand /= m;
  double b = 0.0, w = 0.0;
  for (const auto& h : halves) {
    b += (mean_of(h) - grand) * (mean_of(h) - grand);
    w += var_of(h);
  }
  b *= n / (m - 1.0);
  w /= m;
  if (w <= 0.0) return b > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

double effective_sample_size(const std::vector<Eigen::VectorXd>& chains) {
  const auto m = static_cast<double>(chains.size());
  Eigen::Index n = chains[0].size();
  for (const auto& c : chains) n = std::min(n, c.size());
  if (n < 4) throw InvalidInput("effective_sample_size: chains too short");
  // Autocovariances per chain via direct sums (lags are cut off early).
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    means.push_back(c.head(n).mean());
    vars.push_back(var_of(c.head(n)));
  }
  double grand = 0.0;
  for (const double mu : means) grand += mu;
  grand /= m;
  double b = 0.0, w = 0.0;
  for (std::size_t k = 0; k < chains.size(); ++k) {
    b += (means[k] - grand) * (means[k] - grand);
    w += vars[k];
  }
  const double nn = static_cast<double>(n);
  b *= nn / (m - 1.0);
  w /= m;
  const double var_plus = (nn - 1.0) / nn * w + (m > 1 ? b / nn : 0.0);
  if (var_plus <= 0.0) return m * nn;
  auto autocov = [&](Eigen::Index lag) {
    double s = 0.0;
    for (std::size_t k = 0; k < chains.size(); ++k) {
      const auto c = chains[k].head(n).array() - means[k];
      s += (c.head(n - lag) * c.tail(n - lag)).sum() / nn;
    }
    return s / m;
  };
  auto rho = [&](Eigen::Index lag) { return 1.0 - (w - autocov(lag)) / var_plus; };
  // Geyer: sum of adjacent pairs while positive, forced monotone.
  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t + 1 < n; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (t == 0) pair = 1.0 + rho(1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(std::max(10.0, m * nn)));
  return m * nn / tau;
}

McmcResult adaptive_metropolis(const LogDensity& log_density, const std::vector<Eigen::VectorXd>& starts,
                               const Eigen::MatrixXd& initial_covariance, const McmcConfig& config, std::uint64_t key) {
  if (config.chains < 2) throw InvalidInput("mcmc: at least two chains are needed for R-hat");
  if (config.draws < 10 || config.warmup < 0) throw InvalidInput("mcmc: draws must be at least 10");
  if (static_cast<int>(starts.size()) != config.chains) throw InvalidInput("mcmc: one start per chain required");
  const auto d = initial_covariance.rows();
  std::vector<ChainState> chains(static_cast<std::size_t>(config.chains));
  for (std::size_t c = 0; c < chains.size(); ++c) {
    if (starts[c].size() != d) throw InvalidInput("mcmc: start has wrong dimension");
    chains[c].x = starts[c];
    chains[c].logp = log_density(starts[c]);
    if (!std::isfinite(chains[c].logp)) throw InvalidInput("mcmc: start outside the support");
    chains[c].key = derive_key(key, c);
  }
  parallel_for(chains.size(), config.threads, [&](std::size_t c) {
    run_warmup(log_density, chains[c], initial_covariance, config);
    run_draws(log_density, chains[c], config.draws);
  });

  McmcResult res;
  for (;;) {
    res.rhat.resize(d);
    res.ess.resize(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto col = column(chains, j);
      res.rhat[j] = split_rhat(col);
      res.ess[j] = effective_sample_size(col);
    }
    const bool ok = res.rhat.maxCoeff() <= config.max_rhat && res.ess.minCoeff() >= config.min_ess;
    const int have = static_cast<int>(chains[0].draws.size());
    if (ok) break;
    if (have + config.draws > config.max_draws) {
      std::ostringstream msg;
      msg << "mcmc did not converge after " << have << " draws per chain: max r-hat " << res.rhat.maxCoeff()
          << ", min ess " << res.ess.minCoeff();
      throw ConvergenceError(msg.str());
    }
    ++res.extensions;
    parallel_for(chains.size(), config.threads, [&](std::size_t c) { run_draws(log_density, chains[c], config.draws); });
  }
  for (const auto& c : chains) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(c.draws.size()), d);
    for (std::size_t k = 0; k < c.draws.size(); ++k) m.row(static_cast<Eigen::Index>(k)) = c.draws[k].transpose();
    res.chains.push_back(std::move(m));
    res.acceptance.push_back(static_cast<double>(c.accepted) / static_cast<double>(c.draws.size()));
  }
  return res;
}

}  // namespace disparity
