#include "disparity/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <tuple>

#include "disparity/loan_csv.hpp"
#include "disparity/parallel.hpp"
#include "disparity/rng.hpp"
#include "disparity/stats.hpp"

namespace disparity {

using nlohmann::json;

MarketSpec MarketSpec::calibrated() {
  MarketSpec s;
  s.male_covariates = {0.485, 0.484, 0.187, 0.015, {0.251, 0.037, 0.506, 0.195, 0.011},
                       {0.753, 0.011, 0.152, 0.083, 0.001}, 28.48, 6.0, 1.05, 0.5, 8.0};
  s.female_covariates = {0.506, 0.460, 0.272, 0.035, {0.338, 0.041, 0.438, 0.167, 0.016},
                         {0.717, 0.014, 0.181, 0.087, 0.001}, 27.66, 6.0, 1.11, 0.5, 8.0};
  const std::array<double, kTermMonths> shape = {0.06,  0.008, 0.008, 0.009, 0.010, 0.011,
                                                 0.012, 0.012, 0.011, 0.009, 0.006, 0.003};
  for (int t = 0; t < kTermMonths; ++t) s.hazard.baseline[static_cast<std::size_t>(t)] = 0.45 * shape[static_cast<std::size_t>(t)];
  s.hazard.coefficients = {{"male", 0.408},         {"married", -0.239},     {"repeated", -0.169},
                           {"app", 0.17},           {"express", -0.284},     {"employment_1", -0.196},
                           {"employment_2", 0.165}, {"employment_3", 0.027}, {"employment_4", -0.175},
                           {"education_1", -0.513}, {"education_2", -0.475}, {"education_3", -0.673},
                           {"education_4", -1.383}, {"rate", 3.0},           {"age", -0.01}};
  s.hazard.centers = {{"rate", 0.25}, {"age", 28.0}};
  s.decision.signal = SignalKind::expected;
  s.decision.signal_shift = {{"app", 0.6},          {"express", 1.2},        {"married", 0.36},
                             {"education_2", 0.36}, {"education_3", 0.36}, {"education_4", 0.36}};
  s.decision.male = {0.574, 1.079, std::nullopt, 0.934, 0.205};
  s.decision.female = {0.482, 1.099, std::nullopt, 0.957, 0.167};
  return s;
}

namespace {

void check_probability(double p, const std::string& what) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("market spec: " + what + " must lie in [0, 1]");
}

template <std::size_t N>
void check_distribution(const std::array<double, N>& p, const std::string& what) {
  double sum = 0.0;
  for (const double v : p) {
    check_probability(v, what);
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InvalidInput("market spec: " + what + " must sum to 1");
}

void check_covariates(const GenderCovariates& c, const std::string& who) {
  check_probability(c.married, who + ".married");
  check_probability(c.repeated, who + ".repeated");
  check_probability(c.app, who + ".app");
  check_probability(c.express, who + ".express");
  check_distribution(c.employment, who + ".employment");
  check_distribution(c.education, who + ".education");
  if (!(c.age_sd >= 0.0) || !(c.amount_log_sd >= 0.0) || !(c.past_ontime_mean >= 0.0)) {
    throw InvalidInput("market spec: " + who + " scales must be nonnegative");
  }
}

void check_decision_group(const DecisionGroupSpec& d, const std::string& who) {
  if (!(d.sigma1 >= 0.0)) throw InvalidInput("market spec: " + who + ".sigma1 must be >= 0");
  if (d.pi.has_value() == d.funding_rate.has_value()) {
    throw InvalidInput("market spec: " + who + " needs exactly one of pi and funding_rate");
  }
  if (d.pi && !(*d.pi > 0.0)) throw InvalidInput("market spec: " + who + ".pi must be > 0");
  if (d.funding_rate && !(*d.funding_rate > 0.0 && *d.funding_rate < 1.0)) {
    throw InvalidInput("market spec: " + who + ".funding_rate must lie in (0, 1)");
  }
  if (d.sigma0 && !(*d.sigma0 >= 0.0)) throw InvalidInput("market spec: " + who + ".sigma0 must be >= 0");
}

}  // namespace

void MarketSpec::validate() const {
  if (n == 0) throw InvalidInput("market spec: n must be positive");
  check_probability(male_share, "male_share");
  if (provinces < 1) throw InvalidInput("market spec: provinces must be at least 1");
  check_covariates(male_covariates, "covariates.male");
  check_covariates(female_covariates, "covariates.female");
  if (!(rates.min > -1.0) || !(rates.step >= 0.0) || rates.steps < 0) throw InvalidInput("market spec: invalid rates");
  check_probability(rates.male_p, "rates.male_p");
  check_probability(rates.female_p, "rates.female_p");
  FeatureSchema schema{provinces};
  for (const double h : hazard.baseline) check_probability(h, "hazard.baseline");
  for (const auto& [name, v] : hazard.coefficients) {
    schema.index_of(name);
    if (!std::isfinite(v)) throw InvalidInput("market spec: hazard coefficient '" + name + "' is not finite");
  }
  for (const auto& [name, v] : hazard.centers) schema.index_of(name);
  for (const auto& [name, v] : hazard.time_profiles) schema.index_of(name);
  for (const auto& [name, v] : decision.signal_shift) schema.index_of(name);
  if (!(gaussian_male.sigma0 >= 0.0) || !(gaussian_female.sigma0 >= 0.0)) {
    throw InvalidInput("market spec: gaussian sigma0 must be >= 0");
  }
  if (!rule) {
    check_decision_group(decision.male, "decision.male");
    check_decision_group(decision.female, "decision.female");
  } else if (rule->kind == FundingRule::Kind::bernoulli) {
    check_probability(rule->male, "rule.male");
    check_probability(rule->female, "rule.female");
  }
  if (!(censor_fraction >= 0.0 && censor_fraction <= 1.0)) throw InvalidInput("market spec: censor_fraction must lie in [0, 1]");
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json covariates_json(const GenderCovariates& c) {
  return {{"married", c.married},         {"repeated", c.repeated},
          {"app", c.app},                 {"express", c.express},
          {"employment", c.employment},   {"education", c.education},
          {"age_mean", c.age_mean},       {"age_sd", c.age_sd},
          {"amount_log_mean", c.amount_log_mean}, {"amount_log_sd", c.amount_log_sd},
          {"past_ontime_mean", c.past_ontime_mean}};
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("market spec: field '") + key + "': " + e.what());
  }
}

template <class T>
void read_optional(const json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v);
  out = v;
}

void covariates_from(const json& j, GenderCovariates& c) {
  read(j, "married", c.married);
  read(j, "repeated", c.repeated);
  read(j, "app", c.app);
  read(j, "express", c.express);
  read(j, "employment", c.employment);
  read(j, "education", c.education);
  read(j, "age_mean", c.age_mean);
  read(j, "age_sd", c.age_sd);
  read(j, "amount_log_mean", c.amount_log_mean);
  read(j, "amount_log_sd", c.amount_log_sd);
  read(j, "past_ontime_mean", c.past_ontime_mean);
}

json decision_group_json(const DecisionGroupSpec& d) {
  json j = {{"sigma1", d.sigma1}};
  j["pi"] = d.pi ? json(*d.pi) : json(nullptr);
  j["funding_rate"] = d.funding_rate ? json(*d.funding_rate) : json(nullptr);
  j["mu"] = d.mu ? json(*d.mu) : json(nullptr);
  j["sigma0"] = d.sigma0 ? json(*d.sigma0) : json(nullptr);
  return j;
}

void decision_group_from(const json& j, DecisionGroupSpec& d) {
  read(j, "sigma1", d.sigma1);
  // Setting one of pi / funding_rate clears the other unless both are given.
  if (j.contains("pi") && !j.contains("funding_rate")) d.funding_rate.reset();
  if (j.contains("funding_rate") && !j.contains("pi")) d.pi.reset();
  read_optional(j, "pi", d.pi);
  read_optional(j, "funding_rate", d.funding_rate);
  read_optional(j, "mu", d.mu);
  read_optional(j, "sigma0", d.sigma0);
}

}  // namespace

json spec_to_json(const MarketSpec& s) {
  json j;
  j["schema"] = "disparity.market_spec";
  j["version"] = kMarketSpecVersion;
  j["n"] = s.n;
  j["seed"] = s.seed ? json(*s.seed) : json(nullptr);
  j["male_share"] = s.male_share;
  j["provinces"] = s.provinces;
  j["repayment"] = s.repayment == RepaymentMode::hazard ? "hazard" : "gaussian";
  j["covariates"] = {{"male", covariates_json(s.male_covariates)}, {"female", covariates_json(s.female_covariates)}};
  j["rates"] = {{"min", s.rates.min},
                {"step", s.rates.step},
                {"steps", s.rates.steps},
                {"male_p", s.rates.male_p},
                {"female_p", s.rates.female_p}};
  j["hazard"] = {{"baseline", s.hazard.baseline},
                 {"coefficients", s.hazard.coefficients},
                 {"centers", s.hazard.centers},
                 {"time_profiles", s.hazard.time_profiles}};
  j["gaussian"] = {{"male", {{"mu", s.gaussian_male.mu}, {"sigma0", s.gaussian_male.sigma0}}},
                   {"female", {{"mu", s.gaussian_female.mu}, {"sigma0", s.gaussian_female.sigma0}}}};
  j["decision"] = {{"signal", s.decision.signal == SignalKind::expected ? "expected" : "lambda"},
                   {"signal_shift", s.decision.signal_shift},
                   {"signal_offset", s.decision.signal_offset},
                   {"male", decision_group_json(s.decision.male)},
                   {"female", decision_group_json(s.decision.female)}};
  if (s.rule) {
    j["rule"] = {{"type", s.rule->kind == FundingRule::Kind::threshold ? "threshold" : "bernoulli"},
                 {"male", s.rule->male},
                 {"female", s.rule->female}};
  } else {
    j["rule"] = nullptr;
  }
  j["censor_fraction"] = s.censor_fraction;
  return j;
}

MarketSpec spec_from_json(const json& j) {
  if (!j.is_object()) throw InvalidInput("market spec must be a JSON object");
  if (j.contains("schema") && j.at("schema") != "disparity.market_spec") {
    throw InvalidInput("market spec: unexpected schema " + j.at("schema").dump());
  }
  if (j.contains("version") && j.at("version") != kMarketSpecVersion) {
    throw InvalidInput("market spec: unsupported version " + j.at("version").dump());
  }
  MarketSpec s = MarketSpec::calibrated();
  read(j, "n", s.n);
  read_optional(j, "seed", s.seed);
  read(j, "male_share", s.male_share);
  read(j, "provinces", s.provinces);
  if (j.contains("repayment")) {
    const std::string mode = j.at("repayment").get<std::string>();
    if (mode == "hazard") s.repayment = RepaymentMode::hazard;
    else if (mode == "gaussian") s.repayment = RepaymentMode::gaussian;
    else throw InvalidInput("market spec: repayment must be 'hazard' or 'gaussian'");
  }
  if (j.contains("covariates")) {
    const json& c = j.at("covariates");
    if (c.contains("male")) covariates_from(c.at("male"), s.male_covariates);
    if (c.contains("female")) covariates_from(c.at("female"), s.female_covariates);
  }
  if (j.contains("rates")) {
    const json& r = j.at("rates");
    read(r, "min", s.rates.min);
    read(r, "step", s.rates.step);
    read(r, "steps", s.rates.steps);
    read(r, "male_p", s.rates.male_p);
    read(r, "female_p", s.rates.female_p);
  }
  if (j.contains("hazard")) {
    const json& h = j.at("hazard");
    read(h, "baseline", s.hazard.baseline);
    read(h, "coefficients", s.hazard.coefficients);
    read(h, "centers", s.hazard.centers);
    read(h, "time_profiles", s.hazard.time_profiles);
  }
  if (j.contains("gaussian")) {
    const json& g = j.at("gaussian");
    if (g.contains("male")) {
      read(g.at("male"), "mu", s.gaussian_male.mu);
      read(g.at("male"), "sigma0", s.gaussian_male.sigma0);
    }
    if (g.contains("female")) {
      read(g.at("female"), "mu", s.gaussian_female.mu);
      read(g.at("female"), "sigma0", s.gaussian_female.sigma0);
    }
  }
  if (j.contains("decision")) {
    const json& d = j.at("decision");
    if (d.contains("signal")) {
      const std::string kind = d.at("signal").get<std::string>();
      if (kind == "expected") s.decision.signal = SignalKind::expected;
      else if (kind == "lambda") s.decision.signal = SignalKind::lambda;
      else throw InvalidInput("market spec: decision.signal must be 'expected' or 'lambda'");
    }
    read(d, "signal_shift", s.decision.signal_shift);
    read(d, "signal_offset", s.decision.signal_offset);
    if (d.contains("male")) decision_group_from(d.at("male"), s.decision.male);
    if (d.contains("female")) decision_group_from(d.at("female"), s.decision.female);
  }
  if (j.contains("rule")) {
    const json& r = j.at("rule");
    if (r.is_null()) {
      s.rule.reset();
    } else {
      FundingRule rule;
      const std::string type = r.value("type", std::string("threshold"));
      if (type == "threshold") rule.kind = FundingRule::Kind::threshold;
      else if (type == "bernoulli") rule.kind = FundingRule::Kind::bernoulli;
      else throw InvalidInput("market spec: rule.type must be 'threshold' or 'bernoulli'");
      read(r, "male", rule.male);
      read(r, "female", rule.female);
      s.rule = rule;
    }
  }
  read(j, "censor_fraction", s.censor_fraction);
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct HazardTable {
  Eigen::VectorXd coef;
  Eigen::VectorXd center;
  Eigen::MatrixXd profile;  // months x features
};

HazardTable hazard_table(const HazardSpec& h, const FeatureSchema& schema) {
  const auto p = static_cast<Eigen::Index>(schema.size());
  HazardTable t{Eigen::VectorXd::Zero(p), Eigen::VectorXd::Zero(p), Eigen::MatrixXd::Ones(kTermMonths, p)};
  for (const auto& [name, v] : h.coefficients) t.coef[static_cast<Eigen::Index>(schema.index_of(name))] = v;
  for (const auto& [name, v] : h.centers) t.center[static_cast<Eigen::Index>(schema.index_of(name))] = v;
  for (const auto& [name, v] : h.time_profiles) {
    const auto j = static_cast<Eigen::Index>(schema.index_of(name));
    for (int m = 0; m < kTermMonths; ++m) t.profile(m, j) = v[static_cast<std::size_t>(m)];
  }
  return t;
}

HazardCurve curve_from(const HazardTable& t, const std::array<double, kTermMonths>& baseline, const Eigen::VectorXd& x) {
  const Eigen::VectorXd centered = (x - t.center).cwiseProduct(t.coef);
  HazardCurve c{};
  for (int m = 0; m < kTermMonths; ++m) {
    const double eta = t.profile.row(m).dot(centered);
    c[static_cast<std::size_t>(m)] = std::min(1.0, baseline[static_cast<std::size_t>(m)] * std::exp(eta));
  }
  return c;
}

template <std::size_t N>
int categorical(Stream& s, const std::array<double, N>& p) {
  const double u = s.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < N; ++k) {
    acc += p[k];
    if (u < acc) return static_cast<int>(k);
  }
  return static_cast<int>(N - 1);
}

int binomial(Stream& s, int trials, double p) {
  int k = 0;
  for (int i = 0; i < trials; ++i) k += s.uniform() < p ? 1 : 0;
  return k;
}

// Draws everything that does not depend on population-level quantities.
struct Draw {
  LoanRecord loan;
  double lambda = 1.0;
  int default_time = kTermMonths;
  double expected = 1.0;
  double shift = 0.0;
  double eps = 0.0;
  double rule_u = 0.0;
  double censor_u = 0.0;
  int censor_month = kTermMonths;
};

Draw draw_loan(const MarketSpec& spec, const FeatureSchema& schema, const HazardTable& table,
               const Eigen::VectorXd& shift, std::uint64_t key, std::size_t index) {
  Stream s(key);
  Draw d;
  LoanRecord& r = d.loan;
  char id[32];
  std::snprintf(id, sizeof id, "L%07zu", index);
  r.id = id;
  r.gender = s.uniform() < spec.male_share ? Gender::male : Gender::female;
  const bool male = r.gender == Gender::male;
  const GenderCovariates& c = male ? spec.male_covariates : spec.female_covariates;
  r.x.married = s.uniform() < c.married;
  r.x.repeated = s.uniform() < c.repeated;
  r.x.app = s.uniform() < c.app;
  r.x.express = s.uniform() < c.express;
  r.x.employment = categorical(s, c.employment);
  r.x.education = categorical(s, c.education);
  r.x.province = static_cast<int>(s.below(static_cast<std::uint64_t>(spec.provinces)));
  r.x.age = std::clamp(std::round(c.age_mean + c.age_sd * s.normal()), 18.0, 60.0);
  r.x.amount = std::round(100.0 * std::exp(c.amount_log_mean + c.amount_log_sd * s.normal())) / 100.0;
  if (r.x.repeated) {
    r.x.past_ontime = static_cast<double>(s.below(static_cast<std::uint64_t>(2.0 * c.past_ontime_mean) + 1));
    r.x.past_late = static_cast<double>(s.below(4));
    r.x.past_failed = static_cast<double>(s.below(3));
    r.x.past_aborted = static_cast<double>(s.below(2));
  }
  r.rate = spec.rates.min + spec.rates.step * binomial(s, spec.rates.steps, male ? spec.rates.male_p : spec.rates.female_p);
  r.rate = std::round(r.rate * 1e10) / 1e10;

  const Eigen::VectorXd x = schema.features(r);
  d.shift = shift.dot(x) + spec.decision.signal_offset;
  if (spec.repayment == RepaymentMode::hazard) {
    const HazardCurve h = curve_from(table, spec.hazard.baseline, x);
    for (int t = 0; t < kTermMonths; ++t) {
      const double u = s.uniform();
      if (d.default_time == kTermMonths && u < h[static_cast<std::size_t>(t)]) d.default_time = t;
    }
    d.lambda = d.default_time / static_cast<double>(kTermMonths);
    double surv = 1.0, e = 0.0;
    for (int t = 0; t < kTermMonths; ++t) {
      e += surv * h[static_cast<std::size_t>(t)] * t / kTermMonths;
      surv *= 1.0 - h[static_cast<std::size_t>(t)];
    }
    d.expected = e + surv;
  } else {
    const GaussianGroup& g = male ? spec.gaussian_male : spec.gaussian_female;
    d.lambda = g.mu + g.sigma0 * s.normal();
    d.default_time = static_cast<int>(std::lround(kTermMonths * std::clamp(d.lambda, 0.0, 1.0)));
    d.expected = g.mu;
  }
  d.eps = s.normal();
  d.rule_u = s.uniform();
  d.censor_u = s.uniform();
  d.censor_month = 1 + static_cast<int>(s.below(kTermMonths - 1));
  return d;
}

double funding_probability(double base, double rate, const GroupDecisionParams& p) {
  const double g = p.gamma();
  const double tilde = (1.0 - g) * p.mu + g * base;
  if (p.sigma1 == 0.0 || g == 0.0) return tilde * (1.0 + rate) >= p.pi ? 1.0 : 0.0;
  return stats::normal_cdf((tilde - p.pi / (1.0 + rate)) / (g * p.sigma1));
}

// Threshold giving the target expected funding rate, by bisection.
double solve_threshold(const std::vector<double>& base, const std::vector<double>& rate, GroupDecisionParams p,
                       double target) {
  double lo = 0.0, hi = 10.0;
  for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
    p.pi = 0.5 * (lo + hi);
    double sum = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) sum += funding_probability(base[i], rate[i], p);
    (sum / static_cast<double>(base.size()) > target ? lo : hi) = p.pi;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

HazardCurve true_hazard_curve(const HazardSpec& hazard, const FeatureSchema& schema, const LoanRecord& loan) {
  return curve_from(hazard_table(hazard, schema), hazard.baseline, schema.features(loan));
}

Market generate(const MarketSpec& spec, unsigned threads) {
  spec.validate();
  if (!spec.seed) throw InvalidInput("market spec: a seed is required");
  const FeatureSchema schema{spec.provinces};
  const HazardTable table = hazard_table(spec.hazard, schema);
  Eigen::VectorXd shift = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(schema.size()));
  for (const auto& [name, v] : spec.decision.signal_shift) shift[static_cast<Eigen::Index>(schema.index_of(name))] = v;
  const std::uint64_t root = derive_key(*spec.seed, "market");

  std::vector<Draw> draws(spec.n);
  constexpr std::size_t chunk = 4096;
  parallel_for((spec.n + chunk - 1) / chunk, threads, [&](std::size_t c) {
    const std::size_t end = std::min(spec.n, (c + 1) * chunk);
    for (std::size_t i = c * chunk; i < end; ++i) draws[i] = draw_loan(spec, schema, table, shift, derive_key(root, i), i);
  });

  Market m;
  GroundTruth& t = m.truth;
  for (const Gender g : {Gender::male, Gender::female}) {
    const bool male = g == Gender::male;
    const DecisionGroupSpec& ds = male ? spec.decision.male : spec.decision.female;
    std::vector<double> lambda, base, rate;
    for (const Draw& d : draws) {
      if (d.loan.gender != g) continue;
      lambda.push_back(d.lambda);
      base.push_back((spec.decision.signal == SignalKind::expected ? d.expected : d.lambda) + d.shift);
      rate.push_back(d.loan.rate);
    }
    GroupDecisionParams p;
    if (spec.repayment == RepaymentMode::gaussian) {
      const GaussianGroup& gg = male ? spec.gaussian_male : spec.gaussian_female;
      p.mu = gg.mu;
      p.sigma0 = gg.sigma0;
    } else if (!lambda.empty()) {
      p.mu = stats::mean(lambda);
      p.sigma0 = stats::population_sd(lambda);
    }
    if (ds.mu) p.mu = *ds.mu;
    if (ds.sigma0) p.sigma0 = *ds.sigma0;
    p.sigma1 = ds.sigma1;
    p.pi = ds.pi.value_or(1.0);
    if (!spec.rule && ds.funding_rate && !base.empty()) p.pi = solve_threshold(base, rate, p, *ds.funding_rate);
    (male ? t.male : t.female) = p;
  }

  m.loans.reserve(spec.n);
  for (Draw& d : draws) {
    const bool male = d.loan.gender == Gender::male;
    const GroupDecisionParams& p = male ? t.male : t.female;
    const double gamma = p.sigma0 == 0.0 && p.sigma1 == 0.0 ? 1.0 : p.gamma();
    const double signal = (spec.decision.signal == SignalKind::expected ? d.expected : d.lambda) + d.shift + p.sigma1 * d.eps;
    const double tilde = (1.0 - gamma) * p.mu + gamma * signal;
    bool funded = tilde * (1.0 + d.loan.rate) >= p.pi;
    if (spec.rule) {
      const double cut = male ? spec.rule->male : spec.rule->female;
      if (spec.rule->kind == FundingRule::Kind::threshold) {
        funded = d.default_time / static_cast<double>(kTermMonths) * (1.0 + d.loan.rate) >= cut - 1e-12;
      } else {
        funded = d.rule_u < cut;
      }
    }
    LoanRecord& r = d.loan;
    r.funded = funded;
    if (funded) {
      PaymentHistory h{};
      for (int k = 0; k < kTermMonths; ++k) {
        h[static_cast<std::size_t>(k)] = k < d.default_time ? PaymentStatus::paid : PaymentStatus::defaulted;
      }
      // Data cutoff before the default (or the end of the term) was observed.
      if (d.censor_u < spec.censor_fraction && d.censor_month <= d.default_time) {
        for (int k = d.censor_month; k < kTermMonths; ++k) h[static_cast<std::size_t>(k)] = PaymentStatus::unobserved;
      }
      r.payments = h;
    }
    t.default_time.push_back(d.default_time);
    t.lambda.push_back(d.lambda);
    t.expected_lambda.push_back(d.expected);
    t.signal.push_back(signal);
    t.posterior.push_back(tilde);
    t.funded.push_back(funded ? 1 : 0);
    m.loans.push_back(std::move(r));
  }
  return m;
}

DiEstimate true_di(const Market& market, std::span<const double> edges) {
  return nonparametric_di(complete_with_truth(market.loans, market.truth.default_time), edges);
}

// ---------------------------------------------------------------------------
// Bias oracle

BiasReport bias_oracle(const Market& market, std::span<const CompletedLoan> imputed, std::span<const double> edges) {
  const auto& loans = market.loans;
  if (imputed.size() != loans.size()) throw InvalidInput("bias oracle: imputed loans do not match the market");
  const auto truth = complete_with_truth(loans, market.truth.default_time);
  BiasReport rep;
  // 2SPS completion: funded loans keep their true outcome, as in the identity.
  std::vector<CompletedLoan> hat = truth;
  for (std::size_t i = 0; i < loans.size(); ++i) {
    if (imputed[i].source != i) throw InvalidInput("bias oracle: imputed loans are not aligned with the market");
    if (loans[i].funded) {
      rep.funded_imputed += imputed[i].imputed ? 1 : 0;
    } else {
      hat[i] = imputed[i];
    }
  }

  const std::size_t nb = edges.size() - 1;
  struct GenderCounts {
    double n = 0, unfunded = 0;
    std::vector<double> a, b, bhat;  // funded true, unfunded true, unfunded imputed per bin
  };
  std::array<GenderCounts, 2> gc;
  for (auto& g : gc) g.a = g.b = g.bhat = std::vector<double>(nb, 0.0);
  // (gender, rate, twelfths) -> (true count, imputed count); (gender, rate) -> unfunded count.
  std::map<std::tuple<int, double, int>, std::pair<double, double>> cell_counts;
  std::map<std::pair<int, double>, double> rate_counts;
  for (std::size_t i = 0; i < loans.size(); ++i) {
    const int g = static_cast<int>(loans[i].gender);
    GenderCounts& c = gc[static_cast<std::size_t>(g)];
    c.n += 1;
    const auto kt = bin_index(edges, truth[i].y);
    if (loans[i].funded) {
      if (kt) c.a[*kt] += 1;
      continue;
    }
    c.unfunded += 1;
    const auto kh = bin_index(edges, hat[i].y);
    if (kt) c.b[*kt] += 1;
    if (kh) c.bhat[*kh] += 1;
    rate_counts[{g, loans[i].rate}] += 1;
    cell_counts[{g, loans[i].rate, truth[i].default_time}].first += 1;
    cell_counts[{g, loans[i].rate, hat[i].default_time}].second += 1;
  }
  // Rates that occur among funded loans only have no first-stage bias cell.
  std::map<std::pair<int, double>, bool> seen_rates;
  for (const auto& l : loans) seen_rates[{static_cast<int>(l.gender), l.rate}] = true;
  for (const auto& [key, v] : seen_rates) rep.excluded_cells += rate_counts.count(key) ? 0 : 1;

  std::vector<std::array<double, 2>> avg_bias(nb, {0.0, 0.0});
  for (const auto& [key, counts] : cell_counts) {
    const auto [g, rate, twelfths] = key;
    const double u_gr = rate_counts.at({g, rate});
    FirstStageBias b;
    b.gender = static_cast<Gender>(g);
    b.rate = rate;
    b.twelfths = twelfths;
    b.unfunded = static_cast<std::size_t>(u_gr);
    b.true_share = counts.first / u_gr;
    b.imputed_share = counts.second / u_gr;
    b.bias = b.imputed_share - b.true_share;
    rep.cells.push_back(b);
    // Aggregate: sum_r P(R=r | D=0) b_{g,r}(l) over cells whose return falls in the bin.
    const auto k = bin_index(edges, twelfths / static_cast<double>(kTermMonths) * (1.0 + rate));
    if (k) avg_bias[*k][static_cast<std::size_t>(g)] += u_gr / gc[static_cast<std::size_t>(g)].unfunded * b.bias;
  }

  const DiEstimate di_true = nonparametric_di(truth, edges);
  const DiEstimate di_hat = nonparametric_di(hat, edges);
  for (std::size_t k = 0; k < nb; ++k) {
    BiasBin bin;
    bin.lo = edges[k];
    bin.hi = edges[k + 1];
    std::array<double, 2> scale{0.0, 0.0};
    for (std::size_t g = 0; g < 2; ++g) {
      const GenderCounts& c = gc[g];
      if (c.n == 0 || c.a[k] == 0) continue;  // no funded loans: both rates are zero
      const double a = c.a[k] / c.n, b = c.b[k] / c.n, bh = c.bhat[k] / c.n;
      scale[g] = (c.unfunded / c.n) / (a * (1.0 + bh / a) * (1.0 + b / a));
    }
    bin.b_male = avg_bias[k][0];
    bin.b_female = avg_bias[k][1];
    bin.scale_male = scale[0];
    bin.scale_female = scale[1];
    if (di_true.bins[k].di && di_hat.bins[k].di) {
      bin.predicted = scale[1] * bin.b_female - scale[0] * bin.b_male;
      bin.measured = *di_hat.bins[k].di - *di_true.bins[k].di;
      const DiBin& h = di_hat.bins[k];
      const double pm = *h.male_rate, pf = *h.female_rate;
      bin.se = std::sqrt(pm * (1 - pm) / static_cast<double>(h.male) + pf * (1 - pf) / static_cast<double>(h.female));
    }
    rep.bins.push_back(bin);
  }
  return rep;
}

BiasReport bias_oracle(const Market& market, const FittedHazardModel& model, std::span<const double> edges,
                       std::uint64_t seed, double multiplier, unsigned threads) {
  return bias_oracle(market, impute_returns(model, market.loans, seed, multiplier, threads), edges);
}

void write_truth_csv(std::ostream& out, const Market& market) {
  out << "id,gender,default_time,lambda,expected_lambda,signal,posterior,funded\n";
  const GroundTruth& t = market.truth;
  for (std::size_t i = 0; i < market.loans.size(); ++i) {
    out << market.loans[i].id << ',' << to_string(market.loans[i].gender) << ',' << t.default_time[i] << ','
        << format_double(t.lambda[i]) << ',' << format_double(t.expected_lambda[i]) << ','
        << format_double(t.signal[i]) << ',' << format_double(t.posterior[i]) << ',' << int{t.funded[i]} << '\n';
  }
}

}  // namespace disparity
