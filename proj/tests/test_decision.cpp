#include <doctest.h>

#include <cmath>
#include <sstream>

#include <Eigen/LU>

#include "disparity/decision.hpp"
#include "disparity/mcmc.hpp"
#include "disparity/rng.hpp"
#include "disparity/stats.hpp"

using namespace disparity;

namespace {

CompletedLoan loan(Gender g, int twelfths, double rate, bool funded) {
  CompletedLoan c;
  c.gender = g;
  c.rate = rate;
  c.default_time = twelfths;
  c.lambda = twelfths / 12.0;
  c.y = c.lambda * (1 + rate);
  c.funded = funded;
  return c;
}

// Repayment ratios from a skewed distribution on twelfths; funding from the
// probit rule with plug-in moments of the generated ratios.
std::vector<CompletedLoan> decision_market(std::uint64_t seed, int n, double sigma1_m, double pi_m, double sigma1_f,
                                           double pi_f) {
  Stream s(seed);
  std::vector<CompletedLoan> out;
  for (int i = 0; i < n; ++i) {
    const Gender g = s.uniform() < 0.6 ? Gender::male : Gender::female;
    int t = 12;
    const double p_default = g == Gender::male ? 0.09 : 0.06;
    if (s.uniform() < p_default) t = static_cast<int>(s.below(12));
    out.push_back(loan(g, t, 0.16 + 0.01 * static_cast<double>(s.below(21)), false));
  }
  const DecisionMoments m = moments(out);
  for (auto& c : out) {
    const bool male = c.gender == Gender::male;
    const GroupDecisionParams p{m[c.gender].mu, m[c.gender].sigma0, male ? sigma1_m : sigma1_f, male ? pi_m : pi_f};
    c.funded = s.uniform() < success_probability(c.lambda, c.rate, p);
  }
  return out;
}

McmcConfig quick_mcmc() {
  McmcConfig c;
  c.warmup = 1500;
  c.draws = 1500;
  c.threads = 2;
  return c;
}

}  // namespace

TEST_CASE("signal reliability reproduces the calibration table") {
  CHECK(signal_reliability(0.167, 0.482) == doctest::Approx(0.107).epsilon(0.0005 / 0.107));
  CHECK(signal_reliability(0.205, 0.574) == doctest::Approx(0.113).epsilon(0.0005 / 0.113));
  const double s0 = 0.2, s1 = 0.5;
  CHECK(signal_reliability(s0, s1) == doctest::Approx((1 / (s1 * s1)) / (1 / (s0 * s0) + 1 / (s1 * s1))).epsilon(1e-15));
  CHECK(signal_reliability(0.3, 0.0) == 1.0);
  CHECK_THROWS_AS(signal_reliability(-1, 1), InvalidInput);
}

TEST_CASE("success probability") {
  const GroupDecisionParams f{0.957, 0.167, 0.482, 1.099};
  const double g = f.gamma();
  // Where the posterior mean return equals the threshold the probability is one half.
  const double rate = 0.237;
  const double lambda = (f.pi / (1 + rate) - (1 - g) * f.mu) / g;
  CHECK(success_probability(lambda, rate, f) == doctest::Approx(0.5).epsilon(1e-12));
  // Direct evaluation in extended precision.
  const long double gl = 0.167L * 0.167L / (0.167L * 0.167L + 0.482L * 0.482L);
  const long double z = (gl * 1.0L + (1 - gl) * 0.957L - 1.099L / 1.237L) / (gl * 0.482L);
  const double expect = 0.5 * std::erfc(-static_cast<double>(z) / std::sqrt(2.0));
  CHECK(success_probability(1.0, 0.237, f) == doctest::Approx(expect).epsilon(1e-12));
  // Monotone in lambda and rate.
  double prev = 0;
  for (int k = 0; k <= 12; ++k) {
    const double p = success_probability(k / 12.0, 0.2, f);
    CHECK(p >= prev);
    prev = p;
  }
  prev = 0;
  for (int k = 0; k <= 20; ++k) {
    const double p = success_probability(0.9, 0.16 + 0.01 * k, f);
    CHECK(p >= prev);
    prev = p;
  }
  // sigma1 = 0: deterministic threshold on the true return.
  const GroupDecisionParams step{0.9, 0.2, 0.0, 1.1};
  CHECK(success_probability(1.0, 0.1, step) == 1.0);
  CHECK(success_probability(1.0, 0.09, step) == 0.0);
}

TEST_CASE("likelihood form round trip") {
  Stream s(1);
  for (int i = 0; i < 100; ++i) {
    const GroupDecisionParams p{0.8 + 0.2 * s.uniform(), 0.05 + 0.3 * s.uniform(), 0.1 + s.uniform(), 0.8 + 0.5 * s.uniform()};
    const LikelihoodForm form = likelihood_form(p);
    const GroupDecisionParams q = params_from_form(form, p.sigma0);
    CHECK(q.sigma1 == doctest::Approx(p.sigma1).epsilon(1e-12));
    CHECK(q.pi == doctest::Approx(p.pi).epsilon(1e-12));
    CHECK(q.mu == doctest::Approx(p.mu).epsilon(1e-12));
    const double lambda = s.uniform(), rate = 0.16 + 0.2 * s.uniform();
    const double via_form =
        stats::normal_cdf(form.lambda_coef * lambda + form.inv_rate_coef / (1 + rate) + form.intercept);
    CHECK(via_form == doctest::Approx(success_probability(lambda, rate, p)).epsilon(1e-12));
  }
}

TEST_CASE("moments") {
  std::vector<CompletedLoan> ones = {loan(Gender::male, 12, 0.2, true), loan(Gender::female, 12, 0.2, false)};
  auto m = moments(ones);
  CHECK(m.male.mu == 1.0);
  CHECK(m.male.sigma0 == 0.0);
  std::vector<CompletedLoan> two = {loan(Gender::male, 0, 0.2, true), loan(Gender::male, 12, 0.2, true),
                                    loan(Gender::female, 0, 0.2, true), loan(Gender::female, 12, 0.2, true)};
  m = moments(two);
  CHECK(m.female.mu == 0.5);
  CHECK(m.female.sigma0 == 0.5);
  two.resize(2);
  CHECK_THROWS_AS(moments(two), InvalidInput);
}

TEST_CASE("binomial collapse") {
  std::vector<CompletedLoan> l = {loan(Gender::male, 12, 0.2, true), loan(Gender::male, 12, 0.2, false),
                                  loan(Gender::male, 12, 0.2, true)};
  auto cells = collapse_binomial(l);
  REQUIRE(cells.size() == 1);
  CHECK(cells[0].trials == 3);
  CHECK(cells[0].successes == 2);
  auto market = decision_market(2, 20000, 0.574, 1.079, 0.482, 1.099);
  cells = collapse_binomial(market);
  std::size_t total = 0;
  for (const auto& c : cells) total += c.trials;
  CHECK(total == market.size());
  CHECK(cells.size() <= 2 * 13 * 21);
  l[0].lambda = 0.5001;
  CHECK_THROWS_AS(collapse_binomial(l), InvalidInput);
}

TEST_CASE("collapsed likelihood equals the Bernoulli likelihood and its score matches finite differences") {
  const auto market = decision_market(3, 5000, 0.574, 1.079, 0.482, 1.099);
  const auto cells = collapse_binomial(market);
  const auto m = moments(market);
  Stream s(4);
  for (int i = 0; i < 50; ++i) {
    const Eigen::Vector2d theta(0.5 + 4 * s.uniform(), 0.7 + 0.6 * s.uniform());
    for (const Gender g : {Gender::male, Gender::female}) {
      const double a = collapsed_loglik(cells, g, m[g], theta);
      const double b = bernoulli_loglik(market, g, m[g], theta);
      CHECK(std::abs(a - b) <= 1e-10 * std::abs(b));
      Eigen::Vector2d grad;
      collapsed_loglik(cells, g, m[g], theta, &grad);
      for (int j = 0; j < 2; ++j) {
        const double h = 1e-6 * theta[j];
        Eigen::Vector2d hi = theta, lo = theta;
        hi[j] += h;
        lo[j] -= h;
        const double fd = (collapsed_loglik(cells, g, m[g], hi) - collapsed_loglik(cells, g, m[g], lo)) / (2 * h);
        CHECK(grad[j] == doctest::Approx(fd).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("mcmc on a correlated Gaussian") {
  Eigen::Matrix2d cov;
  cov << 1.0, 0.8, 0.8, 1.0;
  const Eigen::Matrix2d prec = cov.inverse();
  auto density = [&](const Eigen::VectorXd& x) { return -0.5 * x.dot(prec * x); };
  std::vector<Eigen::VectorXd> starts(4, Eigen::VectorXd::Constant(2, 2.0));
  McmcConfig cfg = quick_mcmc();
  const auto r = adaptive_metropolis(density, starts, Eigen::Matrix2d::Identity(), cfg, 7);
  REQUIRE(r.chains.size() == 4);
  Eigen::MatrixXd all(0, 2);
  for (const auto& c : r.chains) {
    Eigen::MatrixXd tmp(all.rows() + c.rows(), 2);
    tmp << all, c;
    all = tmp;
  }
  const Eigen::RowVector2d mean = all.colwise().mean();
  CHECK(std::abs(mean[0]) < 0.1);
  const Eigen::MatrixXd centered = all.rowwise() - mean;
  const Eigen::Matrix2d emp = centered.transpose() * centered / static_cast<double>(all.rows() - 1);
  CHECK(emp(0, 1) == doctest::Approx(0.8).epsilon(0.1));
  CHECK(r.rhat.maxCoeff() <= 1.01);
  CHECK(r.ess.minCoeff() >= 400);
  for (const double a : r.acceptance) {
    CHECK(a > 0.2);
    CHECK(a < 0.5);
  }
  cfg.threads = 1;
  const auto again = adaptive_metropolis(density, starts, Eigen::Matrix2d::Identity(), cfg, 7);
  CHECK((again.chains[3] - r.chains[3]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("split r-hat flags chains that disagree") {
  Stream s(5);
  std::vector<Eigen::VectorXd> chains(2, Eigen::VectorXd(1000));
  for (int i = 0; i < 1000; ++i) {
    chains[0][i] = s.normal();
    chains[1][i] = 3 + s.normal();
  }
  CHECK(split_rhat(chains) > 1.5);
  chains[1] = chains[1].array() - 3;
  CHECK(split_rhat(chains) < 1.01);
  CHECK(effective_sample_size(chains) > 1000);
}

TEST_CASE("prior-only inference returns the half-normal prior") {
  DecisionMoments m{{0.93, 0.2, 0}, {0.95, 0.17, 0}};
  ThresholdConfig cfg{quick_mcmc(), 9};
  const auto post = infer({}, m, cfg);
  const double prior_mean = 2.0 * std::sqrt(2.0 / M_PI);
  for (const Gender g : {Gender::male, Gender::female}) {
    CHECK(post[g].column(0).mean() == doctest::Approx(prior_mean).epsilon(0.05));
    CHECK(post[g].column(1).mean() == doctest::Approx(prior_mean).epsilon(0.05));
    CHECK(post[g].column(0).minCoeff() > 0.0);
  }
}

TEST_CASE("threshold test recovers generating parameters") {
  const auto market = decision_market(10, 30000, 0.574, 1.079, 0.482, 1.099);
  ThresholdConfig cfg{quick_mcmc(), 11};
  const auto post = infer(collapse_binomial(market), moments(market), cfg);
  const auto summary = summarize(post);
  auto get = [&](const std::string& name) {
    for (const auto& s : summary) {
      if (s.name == name) return s;
    }
    FAIL("missing " << name);
    return ParameterSummary{};
  };
  const std::pair<const char*, double> truth[] = {
      {"sigma1_m", 0.574}, {"pi_m", 1.079}, {"sigma1_f", 0.482}, {"pi_f", 1.099}};
  for (const auto& [name, value] : truth) {
    const auto s = get(name);
    CHECK_MESSAGE(std::abs(s.mean - value) <= 3 * s.sd, name << " mean " << s.mean << " sd " << s.sd);
    CHECK(s.rhat <= 1.01);
  }
  CHECK(get("gamma_f").mean > 0.0);
  CHECK(get("gamma_f").mean < 1.0);
  std::ostringstream trace;
  write_trace_csv(trace, post);
  CHECK(trace.str().rfind("gender,chain,draw,inv_sigma1,pi\n", 0) == 0);
}

TEST_CASE("pooling replicate posteriors") {
  ThresholdPosterior a, b;
  for (ThresholdPosterior* p : {&a, &b}) {
    for (const Gender g : {Gender::male, Gender::female}) {
      GroupPosterior& gp = g == Gender::male ? p->male : p->female;
      gp.gender = g;
      gp.moments = {0.9, 0.2, 10};
      const double v = p == &a ? 1.0 : 2.0;
      gp.chains.assign(2, Eigen::MatrixXd::Constant(10, 2, v));
    }
  }
  const std::vector<ThresholdPosterior> one = {a};
  const auto same = pool_posteriors(one);
  CHECK(same.male.column(1) == a.male.column(1));
  const std::vector<ThresholdPosterior> both = {a, b};
  const auto pooled = pool_posteriors(both);
  CHECK(pooled.replicates == 2);
  CHECK(pooled.female.column(1).mean() == doctest::Approx(1.5));
  CHECK(pooled.female.chains.size() == 4);
}
