#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "disparity/cox.hpp"
#include "disparity/diagnostics.hpp"
#include "disparity/rng.hpp"
#include "disparity/synthetic.hpp"

using namespace disparity;

namespace {

struct Data {
  RowMatrix x;
  std::vector<int> time;
  std::vector<std::uint8_t> event;
};

// Discrete-time hazards h0 * exp(beta(t) . x) with beta(t) = beta for t < 6
// and flip * beta afterwards; administrative censoring at the term.
Data simulate(std::uint64_t seed, int n, double flip) {
  Stream s(seed);
  const Eigen::Vector2d beta(0.7, -0.4);
  Data d;
  d.x.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    d.x(i, 0) = s.uniform() < 0.5 ? 1.0 : 0.0;
    d.x(i, 1) = s.normal();
    int t = 0;
    for (; t < kTermMonths; ++t) {
      const double eta = (t < 6 ? 1.0 : flip) * d.x.row(i).dot(beta);
      if (s.uniform() < std::min(1.0, 0.03 * std::exp(eta))) break;
    }
    d.time.push_back(t);
    d.event.push_back(t < kTermMonths ? 1 : 0);
  }
  return d;
}

SchoenfeldReport test_ph(const Data& d) {
  CoxProblem p(d.x, d.time, d.event);
  const CoxFit fit = newton_fit(p);
  return schoenfeld(p, fit.beta, {"x1", "x2"});
}

}  // namespace

TEST_CASE("schoenfeld residuals on a hand-computed toy") {
  RowMatrix x(3, 1);
  x << 1.0, 0.0, 2.0;
  CoxProblem p(x, {0, 1, 12}, {1, 1, 0});
  const auto r = p.schoenfeld_residuals(Eigen::VectorXd::Zero(1));
  REQUIRE(r.residuals.rows() == 2);
  // Month 0: risk set {1, 0, 2}, mean 1; month 1: risk set {0, 2}, mean 1.
  CHECK(r.residuals(0, 0) == doctest::Approx(0.0));
  CHECK(r.residuals(1, 0) == doctest::Approx(-1.0));
  CHECK(r.month == std::vector<int>{0, 1});
}

TEST_CASE("schoenfeld residuals sum to the score and vanish at the estimate") {
  const Data d = simulate(11, 800, 1.0);
  CoxProblem p(d.x, d.time, d.event);
  const Eigen::VectorXd b(Eigen::Vector2d(0.3, 0.1));
  const auto r = p.schoenfeld_residuals(b);
  const Eigen::VectorXd sum = r.residuals.colwise().sum().transpose();
  CHECK((sum - p.evaluate(b).score).norm() < 1e-8);
  const CoxFit fit = newton_fit(p);
  CHECK(p.schoenfeld_residuals(fit.beta).residuals.colwise().sum().norm() < 1e-6);
}

TEST_CASE("proportional hazards test separates PH from sign-flipping effects") {
  const auto ph = test_ph(simulate(21, 4000, 1.0));
  const auto flip = test_ph(simulate(22, 4000, -1.0));
  CHECK(ph.global.df == 2);
  CHECK(ph.global.p_value > 0.001);
  CHECK(flip.global.p_value < 1e-6);
  REQUIRE(flip.tests.size() == 2);
  CHECK(flip.tests[0].name == "x1");
  CHECK(flip.tests[0].p_value < 1e-3);
  // Smoothed scaled residuals of x1 fall from about +0.7 to about -0.7.
  const auto& sm = flip.smooth[0];
  CHECK(sm.front().estimate > sm.back().estimate);
}

TEST_CASE("schoenfeld test is invariant to relabeling the loans") {
  Data d = simulate(31, 600, 1.0);
  const auto a = test_ph(d);
  std::vector<std::size_t> perm(d.time.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  Data e;
  e.x.resize(d.x.rows(), d.x.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    e.x.row(static_cast<Eigen::Index>(i)) = d.x.row(static_cast<Eigen::Index>(perm[i]));
    e.time.push_back(d.time[perm[i]]);
    e.event.push_back(d.event[perm[i]]);
  }
  const auto b = test_ph(e);
  CHECK(a.global.chi2 == doctest::Approx(b.global.chi2).epsilon(1e-8));
  CHECK(a.tests[1].chi2 == doctest::Approx(b.tests[1].chi2).epsilon(1e-8));
}

TEST_CASE("a covariate with its own time interaction contributes no PH degrees of freedom") {
  MarketSpec spec = MarketSpec::calibrated();
  spec.n = 8000;
  spec.seed = 5;
  const Market market = generate(spec);
  std::vector<LoanRecord> funded;
  for (const LoanRecord& r : market.loans) {
    if (r.funded) funded.push_back(r);
  }
  const auto schema = FeatureSchema::from_records(market.loans);
  const auto samples = encode_survival(funded, schema);
  const FittedHazardModel model = fit_hazard_model(samples, schema, DesignConfig{});
  const SchoenfeldReport r = schoenfeld(model, samples);
  const auto male = std::find_if(r.tests.begin(), r.tests.end(), [](const PhTest& t) { return t.name == "male"; });
  REQUIRE(male != r.tests.end());
  CHECK(male->df == 0);
  CHECK(male->p_value == 1.0);
  CHECK(r.global.df > 20);
  CHECK(r.global.chi2 > 0.0);
}

TEST_CASE("schoenfeld rejects data with a single default month") {
  RowMatrix x(3, 1);
  x << 1.0, 0.0, 2.0;
  CoxProblem p(x, {2, 2, 12}, {1, 1, 0});
  CHECK_THROWS_WITH_AS(schoenfeld(p, Eigen::VectorXd::Zero(1), {"x"}), doctest::Contains("one month"), Error);
}

TEST_CASE("local linear smoother reproduces a line") {
  std::vector<double> x, y;
  for (int i = 0; i < 50; ++i) {
    x.push_back(i * 0.2);
    y.push_back(3.0 - 0.5 * x.back());
  }
  const std::vector<double> grid = {0.0, 2.5, 9.8};
  const auto s = local_linear(x, y, 1.0, grid);
  for (std::size_t k = 0; k < grid.size(); ++k) CHECK(s[k].estimate == doctest::Approx(3.0 - 0.5 * grid[k]));
}

TEST_CASE("cox-snell residuals follow the unit exponential under the true constant hazard") {
  Stream s(41);
  const double h = 0.04;
  const int n = 20000;
  std::vector<HazardCurve> curves(n);
  std::vector<int> time;
  std::vector<std::uint8_t> event;
  for (int i = 0; i < n; ++i) {
    curves[static_cast<std::size_t>(i)].fill(h);
    int t = 0;
    while (t < kTermMonths && s.uniform() >= h) ++t;
    time.push_back(t);
    event.push_back(t < kTermMonths ? 1 : 0);
  }
  const auto r = cox_snell(curves, time, event);
  CHECK(r.residual[0] == doctest::Approx(h * std::min(time[0] + 1, kTermMonths)));
  CHECK(r.max_deviation <= 0.05);
  CHECK(r.check_quantile.size() == 19);
}

TEST_CASE("default rank is one half when every loan has the same hazard") {
  const Data d = simulate(51, 500, 1.0);
  std::vector<HazardCurve> curves(d.time.size());
  for (auto& c : curves) c.fill(0.05);
  for (const auto& m : default_rank(curves, d.time, d.event)) CHECK(m.mean_rank == doctest::Approx(0.5));
}

TEST_CASE("default rank is high when defaults carry the highest hazards") {
  const Data d = simulate(52, 2000, 1.0);
  std::vector<HazardCurve> curves(d.time.size());
  for (std::size_t i = 0; i < curves.size(); ++i) {
    curves[i].fill(0.03 * std::exp(0.7 * d.x(static_cast<Eigen::Index>(i), 0) - 0.4 * d.x(static_cast<Eigen::Index>(i), 1)));
  }
  double total = 0.0;
  std::size_t defaults = 0;
  for (const auto& m : default_rank(curves, d.time, d.event)) {
    total += m.mean_rank * static_cast<double>(m.defaults);
    defaults += m.defaults;
  }
  CHECK(total / static_cast<double>(defaults) > 0.55);
}
