#include <doctest.h>

#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "disparity/cox.hpp"
#include "disparity/cox_io.hpp"
#include "disparity/rng.hpp"

using namespace disparity;

namespace {

// A small problem with two main columns; column 0 interacts with a
// two-column time basis.
struct Instance {
  RowMatrix x;
  std::vector<int> time;
  std::vector<std::uint8_t> event;
  std::vector<InteractionColumn> inter;
  Eigen::MatrixXd basis;

  CoxProblem problem() const { return CoxProblem(x, time, event, inter, basis); }

  Eigen::VectorXd z(std::size_t i, int t) const {
    Eigen::VectorXd out(x.cols() + static_cast<Eigen::Index>(inter.size()));
    out.head(x.cols()) = x.row(static_cast<Eigen::Index>(i)).transpose();
    for (std::size_t k = 0; k < inter.size(); ++k) {
      out[x.cols() + static_cast<Eigen::Index>(k)] = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(inter[k].main)) * basis(t, inter[k].time);
    }
    return out;
  }
};

Eigen::MatrixXd random_basis(Stream& s, int cols) {
  Eigen::MatrixXd b(kTermMonths, cols);
  for (int t = 0; t < kTermMonths; ++t) {
    for (int c = 0; c < cols; ++c) b(t, c) = s.normal();
  }
  return b;
}

// At most `max_loans` loans whose defaults share at most `max_ties` per month.
Instance random_instance(std::uint64_t seed, int max_loans, int max_ties, bool interactions) {
  Stream s(seed);
  Instance in;
  const int n = 3 + static_cast<int>(s.below(static_cast<std::uint64_t>(max_loans - 2)));
  in.x.resize(n, 2);
  std::vector<int> ties(kTermMonths, 0);
  for (int i = 0; i < n; ++i) {
    in.x(i, 0) = s.uniform() < 0.5 ? 1.0 : 0.0;
    in.x(i, 1) = s.normal();
    int t = static_cast<int>(s.below(5));
    bool ev = s.uniform() < 0.7;
    if (ev && ties[static_cast<std::size_t>(t)] >= max_ties) ev = false;
    if (ev) ++ties[static_cast<std::size_t>(t)];
    if (!ev && s.uniform() < 0.3) t = 12;
    in.time.push_back(t);
    in.event.push_back(ev ? 1 : 0);
  }
  // Guarantee two distinct event times.
  in.time[0] = 0;
  in.event[0] = 1;
  in.time[1] = 4;
  in.event[1] = 1;
  if (interactions) {
    in.inter = {{0, 0}, {0, 1}};
    in.basis = random_basis(s, 2);
  }
  return in;
}

// Efron log partial likelihood by direct enumeration of risk sets.
double brute_force_loglik(const Instance& in, const Eigen::VectorXd& beta) {
  double ll = 0.0;
  const auto n = static_cast<std::size_t>(in.x.rows());
  for (int t = 0; t < kTermMonths; ++t) {
    double risk = 0.0, tied = 0.0, events_eta = 0.0;
    int d = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool dies = in.time[i] == t && in.event[i];
      if (in.time[i] > t || dies) risk += std::exp(beta.dot(in.z(i, t)));
      if (dies) {
        tied += std::exp(beta.dot(in.z(i, t)));
        events_eta += beta.dot(in.z(i, t));
        ++d;
      }
    }
    ll += events_eta;
    for (int l = 0; l < d; ++l) ll -= std::log(risk - static_cast<double>(l) / d * tied);
  }
  return ll;
}

Eigen::VectorXd random_beta(Stream& s, Eigen::Index p) {
  Eigen::VectorXd b(p);
  for (Eigen::Index j = 0; j < p; ++j) b[j] = 0.7 * s.normal();
  return b;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_CASE("Efron likelihood and score match brute-force enumeration and finite differences") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const Instance in = random_instance(seed, 8, 3, seed % 2 == 0);
    const CoxProblem problem = in.problem();
    Stream s(derive_key(seed, "beta"));
    const Eigen::VectorXd beta = random_beta(s, static_cast<Eigen::Index>(problem.size()));
    const auto ev = problem.evaluate(beta);
    CHECK(rel_err(ev.loglik, brute_force_loglik(in, beta)) <= 1e-8);
    const auto ref = problem.evaluate_reference(beta);
    CHECK(rel_err(ref.loglik, ev.loglik) <= 1e-12);
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
      const double h = 1e-5;
      Eigen::VectorXd up = beta, down = beta;
      up[j] += h;
      down[j] -= h;
      const double fd = (brute_force_loglik(in, up) - brute_force_loglik(in, down)) / (2 * h);
      CHECK(std::abs(ev.score[j] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
      const Eigen::VectorXd fd_info = -(problem.evaluate(up).score - problem.evaluate(down).score) / (2 * h);
      CHECK((ev.information.col(j) - fd_info).cwiseAbs().maxCoeff() <= 1e-5 * std::max(1.0, fd_info.cwiseAbs().maxCoeff()));
      CHECK((ref.information.col(j) - ev.information.col(j)).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("all-distinct event times reduce to the untied Cox likelihood") {
  Stream s(99);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 8;
    RowMatrix x(n, 1);
    std::vector<int> time(n);
    std::vector<std::uint8_t> event(n);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = s.uniform() < 0.5 ? 1.0 : 0.0;
      time[static_cast<std::size_t>(i)] = i;
      event[static_cast<std::size_t>(i)] = i < 6 ? 1 : 0;
    }
    const CoxProblem problem(x, time, event);
    Eigen::VectorXd beta(1);
    beta << s.normal();
    // Product over the six deaths of exp(b x_i) / sum_{j at risk} exp(b x_j).
    double untied = 0.0;
    for (int i = 0; i < 6; ++i) {
      double den = 0.0;
      for (int j = i; j < n; ++j) den += std::exp(beta[0] * x(j, 0));
      untied += beta[0] * x(i, 0) - std::log(den);
    }
    CHECK(std::abs(problem.evaluate(beta).loglik - untied) <= 1e-12);
  }
}

TEST_CASE("baseline hazard at beta = 0 is the empirical discrete hazard") {
  const Instance in = random_instance(1234, 40, 40, true);
  const CoxProblem problem = in.problem();
  const auto h = problem.baseline_hazard(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(problem.size())));
  for (int t = 0; t < kTermMonths; ++t) {
    int d = 0, at_risk = 0;
    for (std::size_t i = 0; i < in.time.size(); ++i) {
      if (in.time[i] > t || (in.time[i] == t && in.event[i])) ++at_risk;
      if (in.time[i] == t && in.event[i]) ++d;
    }
    const double expected = d == 0 ? 0.0 : static_cast<double>(d) / at_risk;
    CHECK(h[static_cast<std::size_t>(t)] == expected);
  }
}

TEST_CASE("grouped fast path agrees with the reference pass on larger data") {
  Stream s(5);
  const int n = 3000;
  RowMatrix x(n, 4);
  std::vector<int> time(n);
  std::vector<std::uint8_t> event(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = s.uniform() < 0.5;
    x(i, 1) = s.uniform() < 0.3;
    x(i, 2) = s.normal();
    x(i, 3) = s.uniform();
    time[static_cast<std::size_t>(i)] = static_cast<int>(s.below(13));
    event[static_cast<std::size_t>(i)] = time[static_cast<std::size_t>(i)] < 12 && s.uniform() < 0.6;
  }
  const Eigen::MatrixXd basis = random_basis(s, 3);
  const CoxProblem grouped(x, time, event, {{0, 0}, {0, 1}, {0, 2}, {1, 0}}, basis);
  const CoxProblem general(x, time, event, {{3, 0}, {3, 1}, {3, 2}, {1, 0}}, basis);
  CHECK(grouped.grouped());
  CHECK_FALSE(general.grouped());
  for (int rep = 0; rep < 3; ++rep) {
    const Eigen::VectorXd beta = 0.3 * random_beta(s, 8);
    const auto a = grouped.evaluate(beta);
    const auto b = grouped.evaluate_reference(beta);
    CHECK(rel_err(a.loglik, b.loglik) <= 1e-12);
    CHECK((a.score - b.score).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((a.information - b.information).cwiseAbs().maxCoeff() <= 1e-7);
    CHECK(general.evaluate(beta, false).loglik == doctest::Approx(general.evaluate(beta).loglik).epsilon(1e-12));
  }
}

TEST_CASE("score residuals sum to the score") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance in = random_instance(seed, 30, 5, true);
    const CoxProblem problem = in.problem();
    Stream s(seed);
    const Eigen::VectorXd beta = random_beta(s, static_cast<Eigen::Index>(problem.size()));
    const Eigen::MatrixXd r = problem.score_residuals(beta);
    const Eigen::VectorXd total = r.colwise().sum().transpose();
    CHECK((total - problem.evaluate(beta).score).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("Newton ascent is monotone and converges") {
  Stream s(17);
  const int n = 4000;
  RowMatrix x(n, 3);
  std::vector<int> time(n);
  std::vector<std::uint8_t> event(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = s.uniform() < 0.5;
    x(i, 1) = s.normal();
    x(i, 2) = s.uniform();
    const double hr = std::exp(0.5 * x(i, 0) - 0.4 * x(i, 1) + 0.3 * x(i, 2));
    int t = 0;
    while (t < 12 && s.uniform() >= 0.05 * hr) ++t;
    time[static_cast<std::size_t>(i)] = t;
    event[static_cast<std::size_t>(i)] = t < 12;
  }
  const CoxProblem problem(x, time, event);
  const CoxFit fit = newton_fit(problem);
  for (std::size_t k = 1; k < fit.loglik_trace.size(); ++k) CHECK(fit.loglik_trace[k] >= fit.loglik_trace[k - 1]);
  CHECK(fit.gradient_norm <= 1e-8 * std::abs(fit.loglik));
  CHECK(fit.beta[0] == doctest::Approx(0.5).epsilon(0.3));
  CHECK(fit.beta[1] == doctest::Approx(-0.4).epsilon(0.3));
  const Eigen::MatrixXd robust = robust_covariance(problem, fit);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(robust);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-14);
  // Robust and model-based errors agree for a correctly specified model.
  const Eigen::MatrixXd naive = fit.information.inverse();
  for (int j = 0; j < 3; ++j) CHECK(std::sqrt(robust(j, j)) == doctest::Approx(std::sqrt(naive(j, j))).epsilon(0.2));
}

TEST_CASE("rank deficiency names the collinear columns") {
  Stream s(3);
  const int n = 200;
  RowMatrix x(n, 3);
  std::vector<int> time(n);
  std::vector<std::uint8_t> event(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = s.normal();
    x(i, 1) = s.normal();
    x(i, 2) = 2 * x(i, 0) - x(i, 1);
    time[static_cast<std::size_t>(i)] = static_cast<int>(s.below(12));
    event[static_cast<std::size_t>(i)] = 1;
  }
  const CoxProblem problem(x, time, event, {}, {}, {"a", "b", "c"});
  CHECK_THROWS_WITH_AS(newton_fit(problem), doctest::Contains("'c' is collinear with 'a', 'b'"), RankDeficient);
}

TEST_CASE("a single event time is rejected") {
  RowMatrix x(4, 1);
  x << 0, 1, 0, 1;
  const CoxProblem problem(x, {2, 2, 5, 12}, {1, 1, 0, 0});
  CHECK_THROWS_AS(newton_fit(problem), InvalidInput);
}

TEST_CASE("predict_repayment limiting cases") {
  HazardCurve zero{}, one{};
  one.fill(1.0);
  Stream s(1);
  for (int i = 0; i < 100; ++i) {
    CHECK(predict_repayment(zero, 0.2, 0, s).repayment_ratio == 1.0);
    CHECK(predict_repayment(one, 0.2, 0, s).repayment_ratio == 0.0);
    CHECK(predict_repayment(one, 0.2, 4, s).default_time == 4);
  }
  HazardCurve small{};
  small.fill(0.01);
  CHECK(predict_repayment(small, 0.2, 0, s, 1000.0).default_time == 0);
  CHECK_THROWS_AS(predict_repayment(small, 0.2, 0, s, 0.5), InvalidInput);
}

TEST_CASE("predict_repayment with h = 0.5 matches the truncated geometric mean") {
  HazardCurve half{};
  half.fill(0.5);
  double expected = 0.0;
  double expected_sq = 0.0;
  for (int t = 0; t <= 12; ++t) {
    const double p = t < 12 ? std::pow(0.5, t + 1) : std::pow(0.5, 12);
    expected += p * t / 12.0;
    expected_sq += p * (t / 12.0) * (t / 12.0);
  }
  const double sd = std::sqrt(expected_sq - expected * expected);
  Stream s(derive_key(2024, "geometric"));
  const int n = 1000000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += predict_repayment(half, 0.2, 0, s).repayment_ratio;
  CHECK(std::abs(sum / n - expected) <= 3 * sd / std::sqrt(n));
}

TEST_CASE("predict_repayment is bit-reproducible for a fixed seed") {
  HazardCurve h{};
  for (int t = 0; t < 12; ++t) h[static_cast<std::size_t>(t)] = 0.02 + 0.01 * t;
  Stream a(77), b(77);
  for (int i = 0; i < 1000; ++i) CHECK(predict_repayment(h, 0.3, 0, a).default_time == predict_repayment(h, 0.3, 0, b).default_time);
}

TEST_CASE("concordance on hand-built cases") {
  const std::vector<int> t3 = {1, 2, 3};
  const std::vector<std::uint8_t> e3 = {1, 1, 1};
  CHECK(concordance_index(std::vector<double>{0.9, 0.5, 0.1}, t3, e3) == 1.0);
  CHECK(concordance_index(std::vector<double>{0.1, 0.5, 0.9}, t3, e3) == 0.0);

  // Five samples, the third censored at month 2.
  const std::vector<double> risk = {0.8, 0.3, 0.6, 0.3, 0.1};
  const std::vector<int> time = {1, 2, 2, 4, 6};
  const std::vector<std::uint8_t> event = {1, 1, 0, 1, 0};
  // Comparable pairs (i fails first, j known to survive past tau_i):
  // i=0: j=1,2,3,4 -> 0.8 beats all: 4
  // i=1 (tau=2): j=3,4 -> 0.3 vs 0.3 tie 0.5, vs 0.1 win 1
  // i=3 (tau=4): j=4 -> win 1
  // total 6.5 / 7
  CHECK(concordance_index(risk, time, event) == doctest::Approx(6.5 / 7).epsilon(1e-15));
  CHECK_THROWS_AS(concordance_index(std::vector<double>{1, 2}, std::vector<int>{3, 3},
                                    std::vector<std::uint8_t>{0, 0}),
                  InvalidInput);
}

namespace {

std::vector<LoanRecord> toy_loans(std::uint64_t seed, int n) {
  Stream s(seed);
  std::vector<LoanRecord> out;
  for (int i = 0; i < n; ++i) {
    LoanRecord r;
    r.id = std::to_string(i);
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
    r.funded = true;
    const double hr = std::exp((r.gender == Gender::male ? 0.4 : 0.0) + 3 * (r.rate - 0.25));
    PaymentHistory p{};
    bool dead = false;
    for (int t = 0; t < 12; ++t) {
      if (!dead && s.uniform() < 0.03 * hr) dead = true;
      p[static_cast<std::size_t>(t)] = dead ? PaymentStatus::defaulted : PaymentStatus::paid;
    }
    r.payments = p;
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST_CASE("fitted model: reference cell, exponential link, serialization") {
  const auto loans = toy_loans(8, 3000);
  const auto schema = FeatureSchema::from_records(loans);
  const auto samples = encode_survival(loans, schema);
  DesignConfig cfg;
  cfg.default_df = 3;
  const FittedHazardModel model = fit_hazard_model(samples, schema, cfg);
  CHECK(model.concordance.has_value());
  CHECK(*model.concordance > 0.5);
  for (const double h : model.baseline) {
    CHECK(h >= 0.0);
    CHECK(h <= 1.0);
  }
  // Reference cell: dummies zero and continuous covariates at the spline centers.
  Eigen::VectorXd ref = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(schema.size()));
  for (std::size_t j = 0; j < schema.size(); ++j) {
    if (model.design.feature_splines()[j]) ref[static_cast<Eigen::Index>(j)] = model.design.feature_splines()[j]->center;
  }
  for (int t = 0; t < 12; ++t) CHECK(model.hazard(ref, t) == doctest::Approx(model.baseline[static_cast<std::size_t>(t)]).epsilon(1e-12));
  // +ln 2 on the linear predictor doubles the hazard.
  const Eigen::VectorXd main = model.design.expand(samples[0].covariates);
  for (int t = 0; t < 12; ++t) {
    const double eta = model.linear_predictor_main(main, t);
    const double h0 = model.baseline[static_cast<std::size_t>(t)];
    CHECK(h0 * std::exp(eta + std::log(2.0)) == doctest::Approx(2 * h0 * std::exp(eta)).epsilon(1e-14));
  }

  const auto copy = model_from_json(nlohmann::json::parse(model_to_json(model).dump()));
  CHECK((copy.beta - model.beta).cwiseAbs().maxCoeff() == 0.0);
  CHECK(copy.baseline == model.baseline);
  for (const auto& s : samples) {
    CHECK(copy.hazard_curve(s.covariates) == model.hazard_curve(s.covariates));
    break;
  }
  CHECK(copy.design.column_names() == model.design.column_names());
}
