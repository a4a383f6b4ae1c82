#include <doctest.h>

#include <cmath>
#include <sstream>

#include "disparity/loan_csv.hpp"
#include "disparity/synthetic.hpp"

using namespace disparity;

namespace {

MarketSpec small(std::size_t n, std::uint64_t seed) {
  MarketSpec s = MarketSpec::calibrated();
  s.n = n;
  s.seed = seed;
  return s;
}

// Both genders drawn from the same distributions with the same decision rule.
MarketSpec symmetric(std::size_t n, std::uint64_t seed) {
  MarketSpec s = small(n, seed);
  s.female_covariates = s.male_covariates;
  s.rates.female_p = s.rates.male_p;
  s.hazard.coefficients.erase("male");
  s.decision.female = s.decision.male;
  return s;
}

FittedHazardModel fit_funded(const Market& m) {
  std::vector<LoanRecord> funded;
  for (const auto& l : m.loans) {
    if (l.funded) funded.push_back(l);
  }
  const FeatureSchema schema = FeatureSchema::from_records(m.loans);
  DesignConfig cfg;
  cfg.default_df = 3;
  return fit_hazard_model(encode_survival(funded, schema), schema, cfg, {{}, false, false});
}

}  // namespace

TEST_CASE("generation is reproducible and independent of the thread count") {
  const auto a = generate(small(10000, 5), 1);
  const auto b = generate(small(10000, 5), 3);
  std::ostringstream sa, sb, ta, tb;
  write_loans_csv(sa, a.loans);
  write_loans_csv(sb, b.loans);
  write_truth_csv(ta, a);
  write_truth_csv(tb, b);
  CHECK(sa.str() == sb.str());
  CHECK(ta.str() == tb.str());
  const auto c = generate(small(10000, 6), 1);
  CHECK(c.truth.default_time != a.truth.default_time);
  MarketSpec no_seed = small(10, 1);
  no_seed.seed.reset();
  CHECK_THROWS_AS(generate(no_seed), InvalidInput);
}

TEST_CASE("ground truth satisfies the posterior-mean identity and the hazard outcome encoding") {
  const auto m = generate(small(5000, 7));
  for (std::size_t i = 0; i < m.loans.size(); ++i) {
    const auto& p = m.loans[i].gender == Gender::male ? m.truth.male : m.truth.female;
    const double g = p.gamma();
    CHECK(m.truth.posterior[i] == (1 - g) * p.mu + g * m.truth.signal[i]);
    CHECK(m.truth.lambda[i] == m.truth.default_time[i] / 12.0);
    CHECK(bool(m.truth.funded[i]) == m.loans[i].funded);
    if (m.loans[i].funded) CHECK(derive_outcome(m.loans[i]).default_time == m.truth.default_time[i]);
  }
  CHECK(m.truth.female.gamma() == doctest::Approx(0.107).epsilon(0.005));
}

TEST_CASE("gaussian mode with noiseless signals is the deterministic threshold rule") {
  MarketSpec s = small(5000, 8);
  s.repayment = RepaymentMode::gaussian;
  s.decision.signal = SignalKind::lambda;
  s.decision.signal_shift.clear();
  s.decision.male.sigma1 = 0.0;
  s.decision.female.sigma1 = 0.0;
  const auto m = generate(s);
  for (std::size_t i = 0; i < m.loans.size(); ++i) {
    const double pi = m.loans[i].gender == Gender::male ? 1.079 : 1.099;
    CHECK(m.loans[i].funded == (m.truth.lambda[i] * (1 + m.loans[i].rate) >= pi));
    CHECK(m.truth.default_time[i] == std::lround(12 * std::clamp(m.truth.lambda[i], 0.0, 1.0)));
  }
}

TEST_CASE("funding-rate targets are met") {
  MarketSpec s = small(40000, 9);
  s.decision.male.pi.reset();
  s.decision.male.funding_rate = 0.837;
  s.decision.female.pi.reset();
  s.decision.female.funding_rate = 0.859;
  const auto m = generate(s);
  double fm = 0, nm = 0, ff = 0, nf = 0;
  for (const auto& l : m.loans) {
    (l.gender == Gender::male ? nm : nf) += 1;
    (l.gender == Gender::male ? fm : ff) += l.funded ? 1 : 0;
  }
  CHECK(fm / nm == doctest::Approx(0.837).epsilon(0.02));
  CHECK(ff / nf == doctest::Approx(0.859).epsilon(0.02));
}

TEST_CASE("true DI: symmetric market is null, a shared return threshold gives zero") {
  const auto sym = generate(symmetric(60000, 10));
  const auto est = true_di(sym, uniform_edges(0.0, 1.5, 0.05));
  CHECK(std::abs(est.average_di) <= 3 * est.average_se);

  MarketSpec s = small(20000, 11);
  s.rule = FundingRule{FundingRule::Kind::threshold, 1.16, 1.16};
  const auto m = generate(s);
  for (const auto& b : true_di(m, parse_edges("0,0.5,1.16,1.3,1.5")).bins) {
    if (b.di) CHECK(*b.di == 0.0);
  }
  // Lower female threshold: female-favoring between the thresholds.
  s.rule = FundingRule{FundingRule::Kind::threshold, 1.2, 1.1};
  const auto t = true_di(generate(s), parse_edges("0,1.1,1.2,1.5"));
  CHECK(*t.bins[0].di == 0.0);
  CHECK(*t.bins[1].di == -1.0);
  CHECK(*t.bins[2].di == 0.0);
}

TEST_CASE("right-censored funded loans") {
  MarketSpec s = small(20000, 12);
  s.censor_fraction = 0.05;
  const auto m = generate(s);
  std::size_t censored = 0, funded = 0;
  for (std::size_t i = 0; i < m.loans.size(); ++i) {
    const auto& l = m.loans[i];
    if (!l.funded) continue;
    ++funded;
    try {
      derive_outcome(l);
    } catch (const RightCensored&) {
      ++censored;
      CHECK(observed_spell(*l.payments).paid_months <= m.truth.default_time[i]);
    }
  }
  CHECK(static_cast<double>(censored) / static_cast<double>(funded) == doctest::Approx(0.05 * 0.5).epsilon(0.5));
}

TEST_CASE("market spec JSON round trip and validation") {
  MarketSpec s = small(1234, 99);
  s.rule = FundingRule{FundingRule::Kind::bernoulli, 0.8, 0.9};
  s.hazard.time_profiles["male"].fill(-1.0);
  const auto j = spec_to_json(s);
  const auto back = spec_from_json(nlohmann::json::parse(j.dump()));
  CHECK(spec_to_json(back) == j);
  CHECK(back.n == 1234);
  CHECK(*back.seed == 99);
  // Missing fields keep the calibrated defaults.
  const auto partial = spec_from_json(nlohmann::json{{"n", 10}, {"decision", {{"male", {{"funding_rate", 0.8}}}}}});
  CHECK(partial.hazard.coefficients.at("male") == 0.408);
  CHECK(!partial.decision.male.pi.has_value());
  CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"male_share", 1.5}}), InvalidInput);
  CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"hazard", {{"coefficients", {{"height", 1.0}}}}}}), InvalidInput);
  CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"n", "many"}}), InvalidInput);
  CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"version", 7}}), InvalidInput);
}

TEST_CASE("bias oracle: identity from components and sign under a hazard multiplier") {
  const auto m = generate(small(40000, 13));
  const auto model = fit_funded(m);
  const auto edges = uniform_edges(0.0, 1.5, 0.05);
  const auto rep = bias_oracle(m, model, edges, 3, 2.0);
  std::size_t valid = 0;
  for (const auto& b : rep.bins) {
    if (!b.predicted) continue;
    ++valid;
    CHECK(*b.predicted == doctest::Approx(*b.measured).epsilon(1e-9).scale(1e-12));
  }
  CHECK(valid > 5);
  // Doubling the hazard moves unfunded mass from full repayment to early
  // default: the first-stage bias at lambda = 1 is negative for both genders.
  double full_m = 0, full_f = 0;
  for (const auto& c : rep.cells) {
    if (c.twelfths == 12) (c.gender == Gender::male ? full_m : full_f) += c.bias;
  }
  CHECK(full_m < 0);
  CHECK(full_f < 0);
  // The first stage of the generating family imputes without systematic bias.
  const auto ok = bias_oracle(m, model, edges, 3, 1.0);
  double worst = 0;
  for (const auto& b : ok.bins) {
    if (b.measured && b.se && *b.se > 0) worst = std::max(worst, std::abs(*b.measured) / *b.se);
  }
  CHECK(worst < 4.5);
}
