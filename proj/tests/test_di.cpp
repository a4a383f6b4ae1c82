#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "disparity/di.hpp"
#include "disparity/rng.hpp"

using namespace disparity;

namespace {

// Loans with a gender-dependent hazard; loans are funded with probability
// `fund_male` / `fund_female` independent of everything else.
std::vector<LoanRecord> market(std::uint64_t seed, int n, double fund_male, double fund_female) {
  Stream s(seed);
  std::vector<LoanRecord> out;
  for (int i = 0; i < n; ++i) {
    LoanRecord r;
    r.id = "L" + std::to_string(i);
    r.gender = s.uniform() < 0.5 ? Gender::male : Gender::female;
    r.x.age = 20 + static_cast<double>(s.below(30));
    r.x.amount = 1 + 10 * s.uniform();
    r.x.past_ontime = static_cast<double>(s.below(20));
    r.x.past_late = static_cast<double>(s.below(4));
    r.x.past_failed = static_cast<double>(s.below(3));
    r.x.past_aborted = static_cast<double>(s.below(3));
    r.x.married = s.uniform() < 0.5;
    r.x.repeated = s.uniform() < 0.5;
    r.x.app = s.uniform() < 0.5;
    r.x.express = s.uniform() < 0.5;
    r.x.employment = static_cast<int>(s.below(5));
    r.x.education = static_cast<int>(s.below(5));
    r.x.province = static_cast<int>(s.below(3));
    r.rate = 0.16 + 0.01 * static_cast<double>(s.below(21));
    r.funded = s.uniform() < (r.gender == Gender::male ? fund_male : fund_female);
    if (r.funded) {
      const double hr = std::exp((r.gender == Gender::male ? 0.4 : 0.0) + 3 * (r.rate - 0.25));
      PaymentHistory p{};
      bool dead = false;
      for (int t = 0; t < 12; ++t) {
        if (!dead && s.uniform() < 0.03 * hr) dead = true;
        p[static_cast<std::size_t>(t)] = dead ? PaymentStatus::defaulted : PaymentStatus::paid;
      }
      r.payments = p;
    }
    out.push_back(r);
  }
  return out;
}

FittedHazardModel fit(std::span<const LoanRecord> loans) {
  std::vector<LoanRecord> funded;
  for (const auto& l : loans) {
    if (l.funded) funded.push_back(l);
  }
  const auto schema = FeatureSchema::from_records(loans);
  DesignConfig cfg;
  cfg.default_df = 3;
  return fit_hazard_model(encode_survival(funded, schema), schema, cfg, {{}, false, false});
}

CompletedLoan completed(Gender g, int t, double rate, bool funded) {
  CompletedLoan c;
  c.gender = g;
  c.rate = rate;
  c.default_time = t;
  c.lambda = t / 12.0;
  c.y = c.lambda * (1 + rate);
  c.funded = funded;
  return c;
}

}  // namespace

TEST_CASE("bin edges") {
  const auto e = uniform_edges(0.0, 1.5, 0.1);
  CHECK(e.size() == 16);
  CHECK(e.back() == doctest::Approx(1.5));
  CHECK(parse_edges("0:1.5:0.1") == e);
  CHECK(parse_edges("0, 1.16,1.5") == std::vector<double>{0.0, 1.16, 1.5});
  CHECK_THROWS_AS(parse_edges("1,0.5"), InvalidInput);
  CHECK(bin_index(e, 0.0) == 0u);
  CHECK(bin_index(e, 0.3 - 1e-12) == 3u);  // rounding below an edge lands in the upper bin
  CHECK(!bin_index(e, 1.5).has_value());
  CHECK(!bin_index(e, -0.2).has_value());
}

TEST_CASE("identical threshold rule for both genders gives zero DI in every bin") {
  Stream s(3);
  std::vector<CompletedLoan> loans;
  for (int i = 0; i < 5000; ++i) {
    const Gender g = i % 3 == 0 ? Gender::female : Gender::male;
    const int t = static_cast<int>(s.below(13));
    const double rate = 0.16 + 0.01 * static_cast<double>(s.below(21));
    const auto c = completed(g, t, rate, false);
    loans.push_back(completed(g, t, rate, c.y >= 1.16));
  }
  const auto est = nonparametric_di(loans, parse_edges("0,1.16,1.5"));
  for (const auto& b : est.bins) {
    REQUIRE(b.di.has_value());
    CHECK(*b.di == 0.0);
  }
  CHECK(est.average_di == 0.0);
}

TEST_CASE("per-bin DI by hand") {
  std::vector<CompletedLoan> loans = {
      completed(Gender::male, 12, 0.2, true),  completed(Gender::male, 12, 0.2, false),
      completed(Gender::female, 12, 0.2, true), completed(Gender::female, 12, 0.2, true),
      completed(Gender::male, 0, 0.2, false),  completed(Gender::female, 0, 0.2, false),
  };
  const auto est = nonparametric_di(loans, parse_edges("0,0.5,1.5"));
  CHECK(*est.bins[0].di == 0.0);
  CHECK(*est.bins[1].di == doctest::Approx(-0.5));
  CHECK(est.bins[1].male == 2);
  // Pooled-count weights: 2 loans in bin 0, 4 in bin 1.
  CHECK(est.average_di == doctest::Approx(-0.5 * 4.0 / 6.0));
  std::vector<CompletedLoan> male_only(loans.begin(), loans.begin() + 2);
  CHECK_THROWS_AS(nonparametric_di(male_only, parse_edges("0,1.5")), InvalidInput);
}

TEST_CASE("fully observed loans: 2SPS equals the empirical DI exactly") {
  const auto loans = market(5, 3000, 1.0, 1.0);
  const auto model = fit(loans);
  std::vector<int> truth;
  for (const auto& l : loans) truth.push_back(derive_outcome(l).default_time);
  const auto edges = uniform_edges(0.0, 1.5, 0.1);
  const auto a = nonparametric_di(impute_returns(model, loans, 9), edges);
  const auto b = nonparametric_di(complete_with_truth(loans, truth), edges);
  CHECK(a.average_di == b.average_di);
  for (std::size_t k = 0; k < a.bins.size(); ++k) CHECK(a.bins[k].di == b.bins[k].di);
}

TEST_CASE("imputation is invariant to loan order and thread count") {
  const auto loans = market(6, 4000, 0.8, 0.85);
  const auto model = fit(loans);
  auto reversed = loans;
  std::reverse(reversed.begin(), reversed.end());
  const auto edges = uniform_edges(0.0, 1.5, 0.1);
  const auto a = nonparametric_di(impute_returns(model, loans, 17, 1.0, 1), edges);
  const auto b = nonparametric_di(impute_returns(model, reversed, 17, 1.0, 3), edges);
  CHECK(a.average_di == b.average_di);
  const auto c = nonparametric_di(impute_returns(model, loans, 18, 1.0, 1), edges);
  CHECK(a.average_di != c.average_di);
}

TEST_CASE("right-censored funded loans continue from their first unobserved month") {
  auto loans = market(7, 2000, 1.0, 1.0);
  const auto model = fit(loans);
  LoanRecord& l = loans[0];
  PaymentHistory p{};
  p.fill(PaymentStatus::paid);
  for (int t = 5; t < 12; ++t) p[static_cast<std::size_t>(t)] = PaymentStatus::unobserved;
  l.payments = p;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto c = impute_returns(model, std::span<const LoanRecord>(loans.data(), 1), seed);
    CHECK(c[0].default_time >= 5);
    CHECK(c[0].imputed);
  }
}

TEST_CASE("null market: DI is within three binomial standard errors of zero") {
  const auto loans = market(8, 20000, 0.8, 0.8);
  const auto model = fit(loans);
  const auto est = nonparametric_di(impute_returns(model, loans, 3), uniform_edges(0.0, 1.5, 0.1));
  CHECK(std::abs(est.average_di) <= 3 * est.average_se);
}

TEST_CASE("bootstrap with two replicates reports min and max") {
  const auto loans = market(9, 2000, 0.8, 0.85);
  const auto model = fit(loans);
  const auto edges = uniform_edges(0.0, 1.5, 0.1);
  BootstrapConfig cfg;
  cfg.replicates = 2;
  cfg.seed = 4;
  const auto est = bootstrap_di(loans, model, edges, cfg);
  std::vector<double> avg(2);
  const double mult[] = {1.0};
  run_bootstrap(loans, model, mult, cfg, [&](const Replicate& r) { avg[r.index] = nonparametric_di(r.imputed[0], edges).average_di; });
  CHECK(est.n_bootstrap == 2);
  CHECK(*est.ci_low == std::min(avg[0], avg[1]));
  CHECK(*est.ci_high == std::max(avg[0], avg[1]));
  cfg.threads = 2;
  const auto again = bootstrap_di(loans, model, edges, cfg);
  CHECK(*again.ci_low == *est.ci_low);
  CHECK(again.average_di == est.average_di);
}

TEST_CASE("sensitivity extrapolation and decomposition share") {
  const std::vector<double> m = {1, 2, 3};
  const std::vector<double> di = {-0.04, -0.03, -0.02};
  const auto r = extrapolate(m, di);
  REQUIRE(r.root.has_value());
  CHECK(*r.root == doctest::Approx(5.0));
  CHECK(r.fit->r_squared == doctest::Approx(1.0));
  CHECK(decomposition_share(-0.0388, -0.0244) == doctest::Approx(0.371).epsilon(0.001));
}

TEST_CASE("hazard multiplier lowers imputed returns") {
  const auto loans = market(10, 5000, 0.7, 0.7);
  const auto model = fit(loans);
  const auto a = impute_returns(model, loans, 5, 1.0);
  const auto b = impute_returns(model, loans, 5, 3.0);
  double la = 0, lb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    la += a[i].lambda;
    lb += b[i].lambda;
    if (!loans[i].funded) CHECK(b[i].default_time <= a[i].default_time);  // common random numbers
  }
  CHECK(lb < la);
  CHECK_THROWS_AS(impute_returns(model, loans, 5, 0.5), InvalidInput);
}

TEST_CASE("subsets") {
  const auto loans = market(11, 4000, 0.8, 0.85);
  const auto model = fit(loans);
  const auto completed = impute_returns(model, loans, 2);
  const auto edges = uniform_edges(0.0, 1.5, 0.1);
  const std::vector<SubsetFilter> filters = {parse_subset("all=all"), parse_subset("young=age<30&married==0"),
                                             parse_subset("men=gender==m")};
  const auto est = disaggregate_di(completed, loans, filters, edges);
  CHECK(est[0].estimate->average_di == nonparametric_di(completed, edges).average_di);
  std::size_t young = 0;
  for (const auto& l : loans) young += (l.x.age < 30 && !l.x.married) ? 1 : 0;
  CHECK(est[1].loans == young);
  CHECK(!est[2].estimate.has_value());
  CHECK_THROWS_AS(parse_subset("bad=height>3"), InvalidInput);
  CHECK_THROWS_AS(parse_subset("noexpr"), InvalidInput);
  CHECK_THROWS_AS(parse_subset("x=age=3"), InvalidInput);
}

TEST_CASE("OLS second stage") {
  const auto loans = market(12, 6000, 0.75, 0.85);
  const auto model = fit(loans);
  const auto completed = impute_returns(model, loans, 2);
  const auto schema = FeatureSchema::from_records(loans);
  const auto di = ols_second_stage(completed, loans, schema, OlsKind::di);
  // Funding is independent of Y here, so the male coefficient is the raw gap.
  CHECK(di.gender_coef == doctest::Approx(-0.10).epsilon(0.3));
  CHECK(di.ci_low < di.gender_coef);
  CHECK(di.included.empty());
  const auto dt = ols_second_stage(completed, loans, schema, OlsKind::dt);
  CHECK(dt.n == loans.size());
  CHECK(std::find(dt.included.begin(), dt.included.end(), "rate") == dt.included.end());
  CHECK(parse_ols_kind("ols-dt") == OlsKind::dt);
  CHECK_THROWS_AS(parse_ols_kind("ols"), InvalidInput);
}
