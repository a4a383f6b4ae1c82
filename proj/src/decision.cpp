#include "disparity/decision.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <ostream>
#include <tuple>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "disparity/loan_csv.hpp"
#include "disparity/rng.hpp"

namespace disparity {

namespace {

constexpr double kPriorScale = 2.0;

// z = a (lambda - c) + (mu - c) / (sigma0^2 a) with c = pi / (1 + R); this is
// the probit argument of the likelihood form with gamma expanded.
struct Probit {
  double z;
  double dz_da;
  double dz_dpi;
};

Probit probit(double lambda, double rate, const GroupMoments& m, double a, double pi) {
  const double inv = 1.0 / (1.0 + rate);
  const double c = pi * inv;
  const double s2 = m.sigma0 * m.sigma0;
  return {a * (lambda - c) + (m.mu - c) / (s2 * a), (lambda - c) - (m.mu - c) / (s2 * a * a),
          -inv * (a + 1.0 / (s2 * a))};
}

// Inverse Mills ratio phi(z) / Phi(z), stable in the lower tail.
double mills(double z) {
  return std::exp(-0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi) - stats::normal_log_cdf(z));
}

}  // namespace

double signal_reliability(double sigma0, double sigma1) {
  if (!(sigma0 >= 0.0) || !(sigma1 >= 0.0)) throw InvalidInput("signal_reliability: scales must be nonnegative");
  if (sigma0 == 0.0 && sigma1 == 0.0) throw InvalidInput("signal_reliability: sigma0 and sigma1 both zero");
  if (sigma1 == 0.0) return 1.0;
  if (sigma0 == 0.0) return 0.0;
  const double p0 = 1.0 / (sigma0 * sigma0);
  const double p1 = 1.0 / (sigma1 * sigma1);
  return p1 / (p0 + p1);
}

double GroupDecisionParams::gamma() const { return signal_reliability(sigma0, sigma1); }

void GroupDecisionParams::validate() const {
  if (!std::isfinite(mu)) throw InvalidInput("decision params: mu must be finite");
  if (!(sigma0 >= 0.0) || !std::isfinite(sigma0)) throw InvalidInput("decision params: sigma0 must be >= 0");
  if (!(sigma1 >= 0.0) || !std::isfinite(sigma1)) throw InvalidInput("decision params: sigma1 must be >= 0");
  if (sigma0 == 0.0 && sigma1 == 0.0) throw InvalidInput("decision params: sigma0 and sigma1 both zero");
  if (!(pi > 0.0) || !std::isfinite(pi)) throw InvalidInput("decision params: pi must be > 0");
}

LikelihoodForm likelihood_form(const GroupDecisionParams& p) {
  p.validate();
  if (p.sigma1 == 0.0 || p.sigma0 == 0.0) throw InvalidInput("likelihood_form: degenerate step rule has no probit form");
  const double a = 1.0 / p.sigma1;
  const double g = p.gamma();
  return {a, -a * p.pi / g, a * (1.0 / g - 1.0) * p.mu};
}

GroupDecisionParams params_from_form(const LikelihoodForm& form, double sigma0) {
  if (!(form.lambda_coef > 0.0)) throw InvalidInput("params_from_form: lambda coefficient must be > 0");
  if (!(sigma0 > 0.0)) throw InvalidInput("params_from_form: sigma0 must be > 0");
  GroupDecisionParams p;
  p.sigma0 = sigma0;
  p.sigma1 = 1.0 / form.lambda_coef;
  const double g = p.gamma();
  p.pi = -form.inv_rate_coef * g / form.lambda_coef;
  p.mu = form.intercept / (form.lambda_coef * (1.0 / g - 1.0));
  return p;
}

double success_probability(double lambda, double rate, const GroupDecisionParams& p) {
  p.validate();
  if (!(rate > -1.0)) throw InvalidInput("success_probability: rate must exceed -1");
  if (p.sigma1 == 0.0) return lambda * (1.0 + rate) >= p.pi ? 1.0 : 0.0;
  if (p.sigma0 == 0.0) return p.mu * (1.0 + rate) >= p.pi ? 1.0 : 0.0;
  const double g = p.gamma();
  return stats::normal_cdf((g * lambda + (1.0 - g) * p.mu - p.pi / (1.0 + rate)) / (g * p.sigma1));
}

DecisionMoments moments(std::span<const CompletedLoan> loans) {
  std::vector<double> male, female;
  for (const auto& l : loans) (l.gender == Gender::male ? male : female).push_back(l.lambda);
  if (male.empty() || female.empty()) throw InvalidInput("moments need loans of both genders");
  return {{stats::mean(male), stats::population_sd(male), male.size()},
          {stats::mean(female), stats::population_sd(female), female.size()}};
}

std::vector<BinomialCell> collapse_binomial(std::span<const CompletedLoan> loans) {
  std::map<std::tuple<int, int, double>, std::pair<std::size_t, std::size_t>> cells;
  for (const auto& l : loans) {
    const double t = l.lambda * 12.0;
    const int k = static_cast<int>(std::lround(t));
    if (std::abs(t - k) > 1e-9 || k < 0 || k > 12) throw InvalidInput("collapse_binomial: lambda must be a multiple of 1/12");
    auto& c = cells[{static_cast<int>(l.gender), k, l.rate}];
    ++c.first;
    c.second += l.funded ? 1 : 0;
  }
  std::vector<BinomialCell> out;
  out.reserve(cells.size());
  for (const auto& [key, count] : cells) {
    out.push_back({static_cast<Gender>(std::get<0>(key)), std::get<1>(key), std::get<2>(key), count.first, count.second});
  }
  return out;
}

double collapsed_loglik(std::span<const BinomialCell> cells, Gender gender, const GroupMoments& m,
                        const Eigen::Vector2d& theta, Eigen::Vector2d* gradient) {
  if (!(m.sigma0 > 0.0)) throw InvalidInput("threshold likelihood needs sigma0 > 0");
  double ll = 0.0;
  if (gradient) gradient->setZero();
  for (const auto& c : cells) {
    if (c.gender != gender) continue;
    const Probit p = probit(c.lambda(), c.rate, m, theta[0], theta[1]);
    const auto k = static_cast<double>(c.successes);
    const auto f = static_cast<double>(c.trials - c.successes);
    if (k > 0) ll += k * stats::normal_log_cdf(p.z);
    if (f > 0) ll += f * stats::normal_log_cdf(-p.z);
    if (gradient) {
      const double dz = (k > 0 ? k * mills(p.z) : 0.0) - (f > 0 ? f * mills(-p.z) : 0.0);
      (*gradient)[0] += dz * p.dz_da;
      (*gradient)[1] += dz * p.dz_dpi;
    }
  }
  return ll;
}

double bernoulli_loglik(std::span<const CompletedLoan> loans, Gender gender, const GroupMoments& m,
                        const Eigen::Vector2d& theta) {
  if (!(m.sigma0 > 0.0)) throw InvalidInput("threshold likelihood needs sigma0 > 0");
  double ll = 0.0;
  for (const auto& l : loans) {
    if (l.gender != gender) continue;
    const double z = probit(l.lambda, l.rate, m, theta[0], theta[1]).z;
    ll += stats::normal_log_cdf(l.funded ? z : -z);
  }
  return ll;
}

double log_posterior(std::span<const BinomialCell> cells, Gender gender, const GroupMoments& m,
                     const Eigen::Vector2d& theta, Eigen::Vector2d* gradient) {
  if (!(theta[0] > 0.0) || !(theta[1] > 0.0)) return -std::numeric_limits<double>::infinity();
  const double v = kPriorScale * kPriorScale;
  double lp = collapsed_loglik(cells, gender, m, theta, gradient) - theta.squaredNorm() / (2.0 * v);
  if (gradient) *gradient -= theta / v;
  return lp;
}

// ---------------------------------------------------------------------------
// Posterior sampling

namespace {

struct Laplace {
  Eigen::Vector2d mode;
  Eigen::Matrix2d covariance;
};

// Newton ascent on the log posterior with a finite-difference Hessian of the
// analytic gradient. Falls back to the prior when there is no data or the
// curvature is not negative definite.
Laplace laplace_approximation(std::span<const BinomialCell> cells, Gender gender, const GroupMoments& m) {
  const bool has_data = std::any_of(cells.begin(), cells.end(), [&](const auto& c) { return c.gender == gender; });
  const Laplace prior{Eigen::Vector2d::Constant(kPriorScale * std::sqrt(2.0 / std::numbers::pi)),
                      Eigen::Matrix2d::Identity() * (kPriorScale * kPriorScale * (1.0 - 2.0 / std::numbers::pi))};
  if (!has_data) return prior;
  auto grad = [&](const Eigen::Vector2d& x) {
    Eigen::Vector2d g;
    log_posterior(cells, gender, m, x, &g);
    return g;
  };
  auto hessian = [&](const Eigen::Vector2d& x) {
    Eigen::Matrix2d h;
    for (int j = 0; j < 2; ++j) {
      const double step = 1e-5 * std::max(1.0, std::abs(x[j]));
      Eigen::Vector2d lo = x, hi = x;
      lo[j] -= step;
      hi[j] += step;
      h.col(j) = (grad(hi) - grad(lo)) / (2.0 * step);
    }
    return Eigen::Matrix2d(0.5 * (h + h.transpose()));
  };
  // Start at a = 1 / sd(lambda) scale and the pooled mean return rate.
  Eigen::Vector2d x(2.0, m.mu * 1.2);
  double f = log_posterior(cells, gender, m, x);
  if (!std::isfinite(f)) return prior;
  for (int it = 0; it < 100; ++it) {
    const Eigen::Vector2d g = grad(x);
    const Eigen::Matrix2d h = hessian(x);
    Eigen::Vector2d dir;
    Eigen::LLT<Eigen::Matrix2d> llt(-h);
    dir = llt.info() == Eigen::Success ? Eigen::Vector2d(llt.solve(g)) : Eigen::Vector2d(0.01 * g);
    double t = 1.0;
    bool moved = false;
    for (int half = 0; half < 60; ++half, t *= 0.5) {
      const Eigen::Vector2d cand = x + t * dir;
      const double fc = log_posterior(cells, gender, m, cand);
      if (std::isfinite(fc) && fc >= f) {
        moved = std::abs(fc - f) > 1e-12 * std::max(1.0, std::abs(f));
        x = cand;
        f = fc;
        break;
      }
    }
    if (!moved) break;
  }
  Eigen::LLT<Eigen::Matrix2d> llt(-hessian(x));
  if (llt.info() != Eigen::Success) return prior;
  return {x, llt.solve(Eigen::Matrix2d::Identity())};
}

GroupPosterior sample_group(std::span<const BinomialCell> cells, Gender gender, const GroupMoments& m,
                            const ThresholdConfig& config) {
  if (!(m.sigma0 > 0.0)) {
    throw InvalidInput(std::string("threshold test: repayment ratios of gender '") + std::string(to_string(gender)) +
                       "' have no variation");
  }
  const std::uint64_t key = derive_key(derive_key(config.seed, "threshold"), static_cast<std::uint64_t>(gender));
  const Laplace lap = laplace_approximation(cells, gender, m);
  const Eigen::Matrix2d l = Eigen::LLT<Eigen::Matrix2d>(lap.covariance).matrixL();
  auto density = [&](const Eigen::VectorXd& x) { return log_posterior(cells, gender, m, Eigen::Vector2d(x)); };
  // Overdispersed starts: mode plus two Laplace SDs of noise, kept in the support.
  std::vector<Eigen::VectorXd> starts;
  for (int c = 0; c < config.mcmc.chains; ++c) {
    Stream s(derive_key(derive_key(key, "start"), static_cast<std::uint64_t>(c)));
    Eigen::Vector2d x = lap.mode;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const Eigen::Vector2d cand = lap.mode + 2.0 * l * Eigen::Vector2d(s.normal(), s.normal());
      if (std::isfinite(density(cand))) {
        x = cand;
        break;
      }
    }
    starts.emplace_back(x);
  }
  const McmcResult r = adaptive_metropolis(density, starts, lap.covariance, config.mcmc, derive_key(key, "chains"));
  GroupPosterior out;
  out.gender = gender;
  out.moments = m;
  out.chains = r.chains;
  out.rhat = r.rhat;
  out.ess = r.ess;
  out.acceptance = r.acceptance;
  out.extensions = r.extensions;
  return out;
}

ParameterSummary summarize_draws(std::string name, const std::vector<Eigen::VectorXd>& chains) {
  std::vector<double> all;
  for (const auto& c : chains) all.insert(all.end(), c.data(), c.data() + c.size());
  ParameterSummary s;
  s.name = std::move(name);
  s.mean = stats::mean(all);
  double ss = 0.0;
  for (const double v : all) ss += (v - s.mean) * (v - s.mean);
  s.sd = all.size() > 1 ? std::sqrt(ss / static_cast<double>(all.size() - 1)) : 0.0;
  std::sort(all.begin(), all.end());
  s.lower = stats::quantile_sorted(all, 0.025);
  s.upper = stats::quantile_sorted(all, 0.975);
  return s;
}

ParameterSummary constant_summary(std::string name, double value) {
  ParameterSummary s;
  s.name = std::move(name);
  s.mean = s.lower = s.upper = value;
  s.ess = std::numeric_limits<double>::quiet_NaN();
  return s;
}

double gamma_of(double sigma0, double a) {
  const double t = sigma0 * sigma0 * a * a;
  return t / (t + 1.0);
}

}  // namespace

Eigen::VectorXd GroupPosterior::column(int j) const {
  Eigen::Index n = 0;
  for (const auto& c : chains) n += c.rows();
  Eigen::VectorXd out(n);
  Eigen::Index at = 0;
  for (const auto& c : chains) {
    out.segment(at, c.rows()) = c.col(j);
    at += c.rows();
  }
  return out;
}

Eigen::VectorXd GroupPosterior::sigma1() const { return column(0).cwiseInverse(); }

Eigen::VectorXd GroupPosterior::gamma() const {
  Eigen::VectorXd a = column(0);
  for (auto& v : a) v = gamma_of(moments.sigma0, v);
  return a;
}

std::vector<ParameterSummary> summarize(const ThresholdPosterior& posterior) {
  std::vector<ParameterSummary> out;
  for (const Gender g : {Gender::female, Gender::male}) {
    const GroupPosterior& p = posterior[g];
    const std::string suffix = "_" + std::string(to_string(g));
    out.push_back(constant_summary("mu" + suffix, p.moments.mu));
    out.push_back(constant_summary("sigma0" + suffix, p.moments.sigma0));
    // Per-chain transforms so R-hat and ESS of derived parameters are exact.
    auto transformed = [&](int j, auto fn) {
      std::vector<Eigen::VectorXd> chains;
      for (const auto& c : p.chains) {
        Eigen::VectorXd v = c.col(j);
        for (auto& x : v) x = fn(x);
        chains.push_back(std::move(v));
      }
      return chains;
    };
    const auto add = [&](const std::string& name, const std::vector<Eigen::VectorXd>& chains) {
      ParameterSummary s = summarize_draws(name + suffix, chains);
      if (posterior.replicates == 1) {
        s.rhat = split_rhat(chains);
        s.ess = effective_sample_size(chains);
      } else {
        // Mixtures of replicate posteriors are not single Markov chains.
        const bool is_pi = name == "pi";
        s.rhat = p.rhat[is_pi ? 1 : 0];
        s.ess = p.ess[is_pi ? 1 : 0];
      }
      out.push_back(std::move(s));
    };
    add("inv_sigma1", transformed(0, [](double x) { return x; }));
    add("sigma1", transformed(0, [](double x) { return 1.0 / x; }));
    const double s0 = p.moments.sigma0;
    add("gamma", transformed(0, [s0](double x) { return gamma_of(s0, x); }));
    add("pi", transformed(1, [](double x) { return x; }));
  }
  return out;
}

double prob_female_threshold_higher(const ThresholdPosterior& posterior) {
  const Eigen::VectorXd f = posterior.female.column(1);
  const Eigen::VectorXd m = posterior.male.column(1);
  const Eigen::Index n = std::min(f.size(), m.size());
  if (n == 0) throw InvalidInput("posterior has no draws");
  Eigen::Index count = 0;
  for (Eigen::Index i = 0; i < n; ++i) count += f[i] > m[i] ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(n);
}

ThresholdPosterior infer(std::span<const BinomialCell> cells, const DecisionMoments& m, const ThresholdConfig& config) {
  ThresholdPosterior out;
  out.female = sample_group(cells, Gender::female, m.female, config);
  out.male = sample_group(cells, Gender::male, m.male, config);
  return out;
}

ThresholdPosterior pool_posteriors(std::span<const ThresholdPosterior> replicates) {
  if (replicates.empty()) throw InvalidInput("pool_posteriors needs at least one replicate");
  if (replicates.size() == 1) return replicates[0];
  ThresholdPosterior out;
  out.replicates = 0;
  for (const Gender g : {Gender::female, Gender::male}) {
    Eigen::Index rows = std::numeric_limits<Eigen::Index>::max();
    for (const auto& r : replicates) {
      for (const auto& c : r[g].chains) rows = std::min(rows, c.rows());
    }
    GroupPosterior pooled;
    pooled.gender = g;
    pooled.moments = replicates[0][g].moments;
    pooled.rhat.setZero();
    pooled.ess.setConstant(std::numeric_limits<double>::infinity());
    double mu = 0.0, sigma0 = 0.0;
    for (const auto& r : replicates) {
      const GroupPosterior& p = r[g];
      for (const auto& c : p.chains) pooled.chains.push_back(c.bottomRows(rows));
      pooled.rhat = pooled.rhat.cwiseMax(p.rhat);
      pooled.ess = pooled.ess.cwiseMin(p.ess);
      pooled.acceptance.insert(pooled.acceptance.end(), p.acceptance.begin(), p.acceptance.end());
      pooled.extensions = std::max(pooled.extensions, p.extensions);
      mu += p.moments.mu;
      sigma0 += p.moments.sigma0;
    }
    // Plug-in moments are reported as replicate averages; derived gamma draws
    // in the mixture use this average.
    pooled.moments.mu = mu / static_cast<double>(replicates.size());
    pooled.moments.sigma0 = sigma0 / static_cast<double>(replicates.size());
    (g == Gender::male ? out.male : out.female) = std::move(pooled);
  }
  for (const auto& r : replicates) out.replicates += r.replicates;
  return out;
}

void write_trace_csv(std::ostream& out, const ThresholdPosterior& posterior) {
  out << "gender,chain,draw,inv_sigma1,pi\n";
  for (const Gender g : {Gender::female, Gender::male}) {
    const auto& chains = posterior[g].chains;
    for (std::size_t c = 0; c < chains.size(); ++c) {
      for (Eigen::Index i = 0; i < chains[c].rows(); ++i) {
        out << to_string(g) << ',' << c << ',' << i << ',' << format_double(chains[c](i, 0)) << ','
            << format_double(chains[c](i, 1)) << '\n';
      }
    }
  }
}

}  // namespace disparity
