#include "disparity/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "disparity/cox_io.hpp"
#include "disparity/decision.hpp"
#include "disparity/di.hpp"
#include "disparity/diagnostics.hpp"
#include "disparity/loan_csv.hpp"
#include "disparity/parallel.hpp"
#include "disparity/rng.hpp"
#include "disparity/stats.hpp"
#include "disparity/synthetic.hpp"

namespace disparity::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kDefaultBins = "0:1.40:0.02";

// Options shared by every subcommand; may appear before or after it.
struct GlobalOptions {
  unsigned threads = 0;
  double winsor = 0.005;
  std::string winsor_mode = "clamp";
  double rate_floor = 0.16;

  PreprocessConfig preprocess() const {
    PreprocessConfig c;
    c.winsor_quantile = winsor;
    c.rate_floor = rate_floor;
    c.winsor_mode = winsor_mode == "drop" ? WinsorMode::drop : WinsorMode::clamp;
    return c;
  }
  unsigned workers() const { return threads == 0 ? default_threads() : threads; }
};

struct SimulateOptions {
  std::string spec;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  std::string bins = kDefaultBins;
  std::string out;
};

struct FitOptions {
  std::string loans;
  std::string out;
  int df = 4;
  int time_df = 3;
  std::vector<std::string> df_overrides;
  std::vector<std::string> time_interactions = {"male"};
  bool no_robust = false;
  int max_iterations = 50;
};

struct DiagnoseOptions {
  std::string loans;
  std::string model;
  std::string out;
  int smooth_points = 45;
};

struct EstimateOptions {
  std::string loans;
  std::string model;
  std::string out;
  std::string bins = kDefaultBins;
  std::size_t bootstrap = 500;
  std::uint64_t seed = 0;
  double multiplier = 1.0;
  std::vector<std::string> subsets;
  std::string second_stage = "nonparametric";
  int y_df = 12;
  bool no_aic = false;
};

struct DecomposeOptions {
  std::string loans;
  std::string model;
  std::string out;
  std::uint64_t seed = 0;
  double multiplier = 1.0;
  int y_df = 12;
  bool no_aic = false;
};

struct SensitivityOptions {
  std::string loans;
  std::string model;
  std::string out;
  std::string bins = kDefaultBins;
  std::uint64_t seed = 0;
  std::vector<double> multipliers = {1.0, 1.5, 2.0, 2.5, 3.0};
};

struct ThresholdOptions {
  std::string loans;
  std::string model;
  std::string out;
  std::uint64_t seed = 0;
  int chains = 4;
  int draws = 5000;
  int warmup = 5000;
  int max_draws = 20000;
  std::size_t bootstrap = 0;
};

// ---------------------------------------------------------------------------
// Output helpers

json report_header(const std::string& kind) {
  return json{{"schema", "disparity." + kind}, {"version", kReportVersion}};
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw InvalidInput("cannot create output directory: " + dir.string());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const json& j) { open_out(path) << j.dump(2) << '\n'; }

std::string num(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }
std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

json preprocess_json(const DropReport& r) {
  return {{"input", r.input},
          {"pay_after_default", r.pay_after_default},
          {"below_rate_floor", r.below_rate_floor},
          {"winsor_dropped", r.winsor_dropped},
          {"winsor_clamped", r.winsor_clamped},
          {"censored_gaps", r.censored_gaps},
          {"output", r.output}};
}

json estimate_json(const DiEstimate& e) {
  json bins = json::array();
  for (const DiBin& b : e.bins) {
    bins.push_back({{"lo", b.lo},
                    {"hi", b.hi},
                    {"male", b.male},
                    {"female", b.female},
                    {"male_funded", b.male_funded},
                    {"female_funded", b.female_funded},
                    {"male_rate", opt(b.male_rate)},
                    {"female_rate", opt(b.female_rate)},
                    {"di", opt(b.di)},
                    {"ci_low", opt(b.ci_low)},
                    {"ci_high", opt(b.ci_high)}});
  }
  return {{"average_di", e.average_di},
          {"average_se", e.average_se},
          {"ci_low", opt(e.ci_low)},
          {"ci_high", opt(e.ci_high)},
          {"loans", e.loans},
          {"out_of_range", e.out_of_range},
          {"bootstrap_replicates", e.n_bootstrap},
          {"failed_replicates", e.failed_replicates},
          {"bins", bins}};
}

// di_bins.csv: one row per return-rate bin.
void write_bins_csv(const fs::path& path, const DiEstimate& e) {
  auto out = open_out(path);
  out << "lo,hi,male,female,male_funded,female_funded,male_rate,female_rate,di,ci_low,ci_high\n";
  for (const DiBin& b : e.bins) {
    out << num(b.lo) << ',' << num(b.hi) << ',' << b.male << ',' << b.female << ',' << b.male_funded << ','
        << b.female_funded << ',' << num(b.male_rate) << ',' << num(b.female_rate) << ',' << num(b.di) << ','
        << num(b.ci_low) << ',' << num(b.ci_high) << '\n';
  }
}

json ols_json(const OlsResult& r) {
  return {{"kind", to_string(r.kind)},   {"gender_coef", r.gender_coef}, {"gender_se", r.gender_se},
          {"ci_low", r.ci_low},          {"ci_high", r.ci_high},         {"included", r.included},
          {"eliminated", r.eliminated}, {"aic", r.aic},                 {"n", r.n}};
}

json group_params_json(const GroupDecisionParams& p) {
  return {{"mu", p.mu}, {"sigma0", p.sigma0}, {"sigma1", p.sigma1}, {"pi", p.pi}, {"gamma", p.gamma()}};
}

// ---------------------------------------------------------------------------
// Input helpers

PreprocessResult load_loans(const std::string& path, const GlobalOptions& g) {
  const auto raw = read_loans_csv(fs::path(path));
  return preprocess(raw, g.preprocess());
}

void check_compatible(const FittedHazardModel& model, std::span<const LoanRecord> loans) {
  const int provinces = model.design.schema().provinces;
  for (const LoanRecord& r : loans) {
    if (r.x.province >= provinces) {
      throw InvalidInput("loan " + r.id + ": province " + std::to_string(r.x.province) +
                         " is outside the fitted model's " + std::to_string(provinces) + " provinces");
    }
  }
}

std::vector<LoanRecord> funded_only(std::span<const LoanRecord> loans) {
  std::vector<LoanRecord> out;
  for (const LoanRecord& r : loans) {
    if (r.funded) out.push_back(r);
  }
  return out;
}

void require_bootstrap(std::size_t n) {
  if (n == 1) throw InvalidInput("--bootstrap must be 0 or at least 2");
}

// ---------------------------------------------------------------------------
// Subcommands

json run_simulate(const SimulateOptions& o, const GlobalOptions& g) {
  MarketSpec spec = MarketSpec::calibrated();
  if (!o.spec.empty()) {
    std::ifstream in(o.spec);
    if (!in) throw InvalidInput("cannot open spec file: " + o.spec);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw InvalidInput("spec file " + o.spec + ": " + e.what());
    }
    spec = spec_from_json(j);
  }
  if (o.n) spec.n = *o.n;
  if (o.seed) spec.seed = *o.seed;
  if (!spec.seed) throw InvalidInput("simulate needs a seed (--seed or \"seed\" in the spec file)");
  spec.validate();
  const auto edges = parse_edges(o.bins);
  const fs::path dir(o.out);
  ensure_dir(dir);

  const Market market = generate(spec, g.workers());
  write_loans_csv(dir / "loans.csv", market.loans);
  {
    auto out = open_out(dir / "truth.csv");
    write_truth_csv(out, market);
  }
  write_json(dir / "spec.json", spec_to_json(spec));

  std::size_t male = 0, female = 0, male_funded = 0, female_funded = 0;
  for (const LoanRecord& r : market.loans) {
    const bool m = r.gender == Gender::male;
    (m ? male : female) += 1;
    if (r.funded) (m ? male_funded : female_funded) += 1;
  }
  const DiEstimate truth = true_di(market, edges);
  write_bins_csv(dir / "true_di_bins.csv", truth);

  json report = report_header("simulate_report");
  report["loans"] = market.loans.size();
  report["male"] = {{"loans", male},
                    {"funding_rate", male ? double(male_funded) / double(male) : 0.0},
                    {"decision", group_params_json(market.truth.male)}};
  report["female"] = {{"loans", female},
                      {"funding_rate", female ? double(female_funded) / double(female) : 0.0},
                      {"decision", group_params_json(market.truth.female)}};
  report["true_di"] = estimate_json(truth);
  write_json(dir / "simulate.json", report);
  return report;
}

json run_fit(const FitOptions& o, const GlobalOptions& g) {
  DesignConfig design;
  design.default_df = o.df;
  design.time_df = o.time_df;
  for (const std::string& s : o.df_overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidInput("--df-override expects name=df, got '" + s + "'");
    try {
      design.df_overrides[s.substr(0, eq)] = std::stoi(s.substr(eq + 1));
    } catch (const std::exception&) {
      throw InvalidInput("--df-override expects an integer df, got '" + s + "'");
    }
  }
  design.time_interactions.clear();
  for (const std::string& t : o.time_interactions) {
    if (t != "none") design.time_interactions.push_back(t);
  }
  HazardFitOptions fit;
  fit.robust = !o.no_robust;
  fit.newton.max_iterations = o.max_iterations;
  const fs::path dir(o.out);

  const PreprocessResult pre = load_loans(o.loans, g);
  const FeatureSchema schema = FeatureSchema::from_records(pre.records);
  for (const auto& [name, df] : design.df_overrides) {
    schema.index_of(name);
    if (df < 1) throw InvalidInput("--df-override " + name + ": df must be at least 1");
  }
  for (const std::string& t : design.time_interactions) {
    if (t != "*") schema.index_of(t);
  }
  const auto funded = funded_only(pre.records);
  if (funded.empty()) throw InvalidInput("no funded loans to fit");
  ensure_dir(dir);

  const auto samples = encode_survival(funded, schema);
  const FittedHazardModel model = fit_hazard_model(samples, schema, design, fit);
  write_model(model, dir / "model.json");

  const auto names = model.design.column_names();
  const auto blocks = model.design.column_blocks();
  const bool robust = model.robust_covariance.size() > 0;
  json coefs = json::array();
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto k = static_cast<Eigen::Index>(j);
    const double b = model.beta[k];
    const double se = std::sqrt(model.covariance(k, k));
    const double rse = robust ? std::sqrt(model.robust_covariance(k, k)) : se;
    const double z = b / rse;
    coefs.push_back({{"name", names[j]},
                     {"block", blocks[j]},
                     {"beta", b},
                     {"exp_beta", std::exp(b)},
                     {"se", se},
                     {"robust_se", robust ? json(rse) : json(nullptr)},
                     {"z", z},
                     {"p_value", 2.0 * stats::normal_cdf(-std::abs(z))}});
  }
  json report = report_header("fit_report");
  report["preprocess"] = preprocess_json(pre.report);
  report["samples"] = model.samples;
  report["events"] = model.events;
  report["loglik"] = model.loglik;
  report["iterations"] = model.iterations;
  report["gradient_norm"] = model.gradient_norm;
  report["concordance"] = opt(model.concordance);
  report["baseline_hazard"] = model.baseline;
  report["coefficients"] = coefs;
  write_json(dir / "fit.json", report);
  return report;
}

json run_diagnose(const DiagnoseOptions& o, const GlobalOptions& g) {
  if (o.smooth_points < 2) throw InvalidInput("--smooth-points must be at least 2");
  const fs::path dir(o.out);
  const FittedHazardModel model = read_model(o.model);
  const PreprocessResult pre = load_loans(o.loans, g);
  check_compatible(model, pre.records);
  const auto funded = funded_only(pre.records);
  if (funded.empty()) throw InvalidInput("no funded loans to diagnose");
  ensure_dir(dir);

  const auto samples = encode_survival(funded, model.design.schema());
  const SchoenfeldReport sch = schoenfeld(make_cox_problem(model.design, samples), model.beta,
                                          model.design.column_blocks(), o.smooth_points);
  const CoxSnellReport cs = cox_snell(model, samples);
  const auto ranks = default_rank(model, samples);
  const auto hazard = hazard_plot(model, samples);
  const double c = concordance(model, samples);

  {
    auto out = open_out(dir / "hazard.csv");
    out << "month,baseline,male,female\n";
    for (const HazardPlotRow& r : hazard) {
      out << r.month << ',' << num(r.baseline) << ',' << num(r.male) << ',' << num(r.female) << '\n';
    }
  }
  {
    auto out = open_out(dir / "schoenfeld_points.csv");
    out << "column,event_time,residual,scaled\n";
    for (Eigen::Index j = 0; j < sch.residuals.cols(); ++j) {
      for (Eigen::Index i = 0; i < sch.residuals.rows(); ++i) {
        out << sch.columns[static_cast<std::size_t>(j)] << ',' << sch.event_time[static_cast<std::size_t>(i)] << ','
            << num(sch.residuals(i, j)) << ',' << num(sch.scaled(i, j)) << '\n';
      }
    }
  }
  {
    auto out = open_out(dir / "schoenfeld_smooth.csv");
    out << "column,time,estimate,lower,upper\n";
    for (std::size_t j = 0; j < sch.smooth.size(); ++j) {
      for (const SmoothPoint& p : sch.smooth[j]) {
        out << sch.columns[j] << ',' << num(p.time) << ',' << num(p.estimate) << ',' << num(p.lower) << ','
            << num(p.upper) << '\n';
      }
    }
  }
  {
    auto out = open_out(dir / "cox_snell.csv");
    out << "residual,event,cumulative_hazard\n";
    std::vector<std::size_t> order(cs.residual.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cs.residual[a] < cs.residual[b]; });
    for (const std::size_t i : order) {
      out << num(cs.residual[i]) << ',' << int(cs.event[i]) << ',' << num(cs.cumulative_hazard[i]) << '\n';
    }
  }
  {
    auto out = open_out(dir / "default_rank.csv");
    out << "month,defaults,at_risk,mean_rank,lower,upper\n";
    for (const RankMonth& r : ranks) {
      out << r.month << ',' << r.defaults << ',' << r.at_risk << ',' << num(r.mean_rank) << ',' << num(r.lower) << ','
          << num(r.upper) << '\n';
    }
  }

  auto test_json = [](const PhTest& t) {
    return json{{"name", t.name}, {"chi2", t.chi2}, {"df", t.df}, {"p_value", t.p_value}};
  };
  json tests = json::array();
  for (const PhTest& t : sch.tests) tests.push_back(test_json(t));
  json checks = json::array();
  for (std::size_t k = 0; k < cs.check_quantile.size(); ++k) {
    checks.push_back({{"residual", cs.check_quantile[k]}, {"cumulative_hazard", cs.check_hazard[k]}});
  }
  json rank_rows = json::array();
  for (const RankMonth& r : ranks) {
    rank_rows.push_back({{"month", r.month}, {"defaults", r.defaults}, {"mean_rank", r.mean_rank}});
  }

  json report = report_header("diagnostics_report");
  report["preprocess"] = preprocess_json(pre.report);
  report["samples"] = samples.size();
  report["concordance"] = c;
  report["schoenfeld"] = {{"global", test_json(sch.global)}, {"blocks", tests}};
  report["cox_snell"] = {{"max_deviation", cs.max_deviation}, {"checks", checks}};
  report["default_rank"] = rank_rows;
  write_json(dir / "diagnostics.json", report);
  return report;
}

json run_estimate(const EstimateOptions& o, const GlobalOptions& g) {
  const auto edges = parse_edges(o.bins);
  std::vector<SubsetFilter> filters;
  for (const std::string& s : o.subsets) filters.push_back(parse_subset(s));
  const bool nonparametric = o.second_stage == "nonparametric";
  std::optional<OlsKind> kind;
  if (!nonparametric) {
    if (o.second_stage.rfind("ols-", 0) != 0) throw InvalidInput("unknown --second-stage " + o.second_stage);
    std::string k = o.second_stage.substr(4);
    std::replace(k.begin(), k.end(), '-', '_');
    kind = parse_ols_kind(k);
  }
  if (!(o.multiplier >= 1.0)) throw InvalidInput("--multiplier must be at least 1");
  require_bootstrap(o.bootstrap);
  OlsOptions ols;
  ols.y_df = o.y_df;
  ols.aic_selection = !o.no_aic;
  const fs::path dir(o.out);

  const FittedHazardModel model = read_model(o.model);
  const PreprocessResult pre = load_loans(o.loans, g);
  check_compatible(model, pre.records);
  const auto& loans = pre.records;
  ensure_dir(dir);

  BootstrapConfig boot;
  boot.replicates = o.bootstrap;
  boot.seed = o.seed;
  boot.threads = g.workers();

  json report = report_header("di_report");
  report["preprocess"] = preprocess_json(pre.report);
  report["second_stage"] = o.second_stage;
  report["multiplier"] = o.multiplier;
  report["bootstrap"] = o.bootstrap;

  const auto completed = impute_returns(model, loans, derive_key(o.seed, "impute"), o.multiplier, g.workers());
  if (nonparametric) {
    const DiEstimate est = o.bootstrap > 0 ? bootstrap_di(loans, model, edges, boot, o.multiplier)
                                           : nonparametric_di(completed, edges);
    report["estimate"] = estimate_json(est);
    write_bins_csv(dir / "di_bins.csv", est);
  } else {
    const FeatureSchema& schema = model.design.schema();
    json result = ols_json(ols_second_stage(completed, loans, schema, *kind, ols));
    if (o.bootstrap > 0) {
      std::vector<double> coef(o.bootstrap, 0.0);
      const double mult[] = {o.multiplier};
      const BootstrapRun run = run_bootstrap(loans, model, mult, boot, [&](const Replicate& rep) {
        std::vector<LoanRecord> sample;
        sample.reserve(rep.sample.size());
        for (const std::size_t i : rep.sample) sample.push_back(loans[i]);
        coef[rep.index] = ols_second_stage(rep.imputed[0], sample, schema, *kind, ols).gender_coef;
      });
      std::vector<double> v;
      for (std::size_t r = 0; r < o.bootstrap; ++r) {
        if (run.ok[r]) v.push_back(coef[r]);
      }
      std::sort(v.begin(), v.end());
      result["bootstrap_ci_low"] = stats::order_statistic_quantile(v, 0.025);
      result["bootstrap_ci_high"] = stats::order_statistic_quantile(v, 0.975);
      result["bootstrap_replicates"] = run.succeeded;
      result["failed_replicates"] = run.failed;
    }
    report["ols"] = result;
  }
  if (!filters.empty()) {
    json subsets = json::array();
    for (const SubsetEstimate& s : disaggregate_di(completed, loans, filters, edges)) {
      subsets.push_back({{"name", s.name},
                         {"loans", s.loans},
                         {"average_di", s.estimate ? json(s.estimate->average_di) : json(nullptr)},
                         {"average_se", s.estimate ? json(s.estimate->average_se) : json(nullptr)}});
    }
    report["subsets"] = subsets;
  }
  write_json(dir / "di.json", report);
  return report;
}

json run_decompose(const DecomposeOptions& o, const GlobalOptions& g) {
  if (!(o.multiplier >= 1.0)) throw InvalidInput("--multiplier must be at least 1");
  OlsOptions ols;
  ols.y_df = o.y_df;
  ols.aic_selection = !o.no_aic;
  const fs::path dir(o.out);
  const FittedHazardModel model = read_model(o.model);
  const PreprocessResult pre = load_loans(o.loans, g);
  check_compatible(model, pre.records);
  ensure_dir(dir);

  const auto completed = impute_returns(model, pre.records, derive_key(o.seed, "impute"), o.multiplier, g.workers());
  const FeatureSchema& schema = model.design.schema();
  const OlsResult di = ols_second_stage(completed, pre.records, schema, OlsKind::di, ols);
  const OlsResult dic = ols_second_stage(completed, pre.records, schema, OlsKind::di_controls, ols);
  const OlsResult dt = ols_second_stage(completed, pre.records, schema, OlsKind::dt, ols);

  json report = report_header("decomposition_report");
  report["preprocess"] = preprocess_json(pre.report);
  report["multiplier"] = o.multiplier;
  report["di"] = ols_json(di);
  report["di_controls"] = ols_json(dic);
  report["dt"] = ols_json(dt);
  report["proxy_share"] = decomposition_share(di.gender_coef, dic.gender_coef);
  write_json(dir / "decompose.json", report);
  return report;
}

json run_sensitivity(const SensitivityOptions& o, const GlobalOptions& g) {
  const auto edges = parse_edges(o.bins);
  if (o.multipliers.empty()) throw InvalidInput("--multipliers is empty");
  for (const double m : o.multipliers) {
    if (!(m >= 1.0)) throw InvalidInput("--multipliers must all be at least 1");
  }
  const fs::path dir(o.out);
  const FittedHazardModel model = read_model(o.model);
  const PreprocessResult pre = load_loans(o.loans, g);
  check_compatible(model, pre.records);
  ensure_dir(dir);

  const SensitivityResult s = sensitivity_sweep(model, pre.records, o.multipliers, o.seed, edges, g.workers());
  {
    auto out = open_out(dir / "sensitivity.csv");
    out << "multiplier,average_di,fitted\n";
    for (std::size_t k = 0; k < s.multipliers.size(); ++k) {
      out << num(s.multipliers[k]) << ',' << num(s.average_di[k]) << ',';
      if (s.fit) out << num(s.fit->intercept + s.fit->slope * s.multipliers[k]);
      out << '\n';
    }
  }
  json report = report_header("sensitivity_report");
  report["preprocess"] = preprocess_json(pre.report);
  report["multipliers"] = s.multipliers;
  report["average_di"] = s.average_di;
  if (s.fit) {
    report["fit"] = {{"intercept", s.fit->intercept}, {"slope", s.fit->slope}, {"r_squared", s.fit->r_squared}};
  } else {
    report["fit"] = nullptr;
  }
  report["root"] = opt(s.root);
  write_json(dir / "sensitivity.json", report);
  return report;
}

json run_threshold(const ThresholdOptions& o, const GlobalOptions& g) {
  if (o.chains < 2) throw InvalidInput("--chains must be at least 2");
  if (o.draws < 4 || o.warmup < 0) throw InvalidInput("--draws must be at least 4 and --warmup non-negative");
  if (o.max_draws < o.draws) throw InvalidInput("--max-draws must be at least --draws");
  require_bootstrap(o.bootstrap);
  ThresholdConfig config;
  config.seed = o.seed;
  config.mcmc.chains = o.chains;
  config.mcmc.draws = o.draws;
  config.mcmc.warmup = o.warmup;
  config.mcmc.max_draws = o.max_draws;
  config.mcmc.threads = g.workers();
  const fs::path dir(o.out);
  const FittedHazardModel model = read_model(o.model);
  const PreprocessResult pre = load_loans(o.loans, g);
  check_compatible(model, pre.records);
  ensure_dir(dir);

  ThresholdPosterior posterior;
  if (o.bootstrap == 0) {
    const auto completed = impute_returns(model, pre.records, derive_key(o.seed, "impute"), 1.0, g.workers());
    posterior = infer(collapse_binomial(completed), moments(completed), config);
  } else {
    BootstrapConfig boot;
    boot.replicates = o.bootstrap;
    boot.seed = o.seed;
    boot.threads = g.workers();
    std::vector<ThresholdPosterior> reps(o.bootstrap);
    const double mult[] = {1.0};
    const BootstrapRun run = run_bootstrap(pre.records, model, mult, boot, [&](const Replicate& rep) {
      ThresholdConfig c = config;
      c.seed = derive_key(derive_key(o.seed, "replicate"), rep.index);
      c.mcmc.threads = 1;
      reps[rep.index] = infer(collapse_binomial(rep.imputed[0]), moments(rep.imputed[0]), c);
    });
    std::vector<ThresholdPosterior> ok;
    for (std::size_t r = 0; r < o.bootstrap; ++r) {
      if (run.ok[r]) ok.push_back(std::move(reps[r]));
    }
    posterior = pool_posteriors(ok);
  }

  const auto summary = summarize(posterior);
  {
    auto out = open_out(dir / "posterior.csv");
    out << "parameter,mean,sd,lower,upper,rhat,ess\n";
    for (const ParameterSummary& s : summary) {
      out << s.name << ',' << num(s.mean) << ',' << num(s.sd) << ',' << num(s.lower) << ',' << num(s.upper) << ','
          << num(s.rhat) << ',' << num(s.ess) << '\n';
    }
  }
  {
    auto out = open_out(dir / "trace.csv");
    write_trace_csv(out, posterior);
  }
  json params = json::array();
  double max_rhat = 1.0;
  double min_ess = std::numeric_limits<double>::infinity();
  for (const ParameterSummary& s : summary) {
    params.push_back({{"name", s.name},
                      {"mean", s.mean},
                      {"sd", s.sd},
                      {"lower", s.lower},
                      {"upper", s.upper},
                      {"rhat", s.rhat},
                      {"ess", s.ess}});
  }
  json groups = json::object();
  for (const GroupPosterior* gp : {&posterior.female, &posterior.male}) {
    max_rhat = std::max({max_rhat, gp->rhat[0], gp->rhat[1]});
    min_ess = std::min({min_ess, gp->ess[0], gp->ess[1]});
    groups[std::string(to_string(gp->gender))] = {{"rhat", {{"inv_sigma1", gp->rhat[0]}, {"pi", gp->rhat[1]}}},
                                                  {"ess", {{"inv_sigma1", gp->ess[0]}, {"pi", gp->ess[1]}}},
                                                  {"acceptance", gp->acceptance},
                                                  {"extensions", gp->extensions}};
  }
  json report = report_header("threshold_report");
  report["preprocess"] = preprocess_json(pre.report);
  report["bootstrap"] = o.bootstrap;
  report["replicates"] = posterior.replicates;
  report["parameters"] = params;
  report["prob_female_threshold_higher"] = prob_female_threshold_higher(posterior);
  report["convergence"] = {{"max_rhat", max_rhat}, {"min_ess", min_ess}, {"groups", groups}};
  write_json(dir / "threshold.json", report);
  return report;
}

// ---------------------------------------------------------------------------
// Error reporting

int exit_code(const std::string& kind) {
  if (kind == "invalid_input" || kind == "right_censored") return 2;
  if (kind == "convergence" || kind == "rank_deficient") return 3;
  return 1;
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

std::string version_text() {
  std::ostringstream s;
  s << "disparity 1.0.0\n"
    << "hazard_model " << kHazardModelVersion << '\n'
    << "market_spec " << kMarketSpecVersion << '\n'
    << "report " << kReportVersion;
  return s.str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Disparate-impact measurement for lending markets", "disparity"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML or INI file of option values; command-line flags take precedence");
  app.set_version_flag("--version", version_text(), "Print program and schema versions");

  GlobalOptions g;
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->capture_default_str();
  app.add_option("--winsor", g.winsor, "Winsorizing quantile per tail")->capture_default_str()->check(CLI::Range(0.0, 0.05));
  app.add_option("--winsor-mode", g.winsor_mode, "clamp or drop out-of-range loans")
      ->capture_default_str()
      ->check(CLI::IsMember({"clamp", "drop"}));
  app.add_option("--rate-floor", g.rate_floor, "Drop loans with a lower interest rate")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));

  SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic market with known ground truth");
  simulate->add_option("--spec", sim.spec, "Market spec (JSON); calibrated defaults when omitted")
      ->check(CLI::ExistingFile);
  simulate->add_option("--n", sim.n, "Number of loans (overrides the spec)");
  simulate->add_option("--seed", sim.seed, "Master seed (overrides the spec)");
  simulate->add_option("--bins", sim.bins, "Bin edges for the true DI: lo:hi:width or e0,e1,...")->capture_default_str();
  simulate->add_option("--out", sim.out, "Output directory")->required();

  FitOptions fit;
  auto* fitc = app.add_subcommand("fit", "Fit the discrete-time hazard model to funded loans");
  fitc->add_option("--loans", fit.loans, "Loans CSV")->required()->check(CLI::ExistingFile);
  fitc->add_option("--out", fit.out, "Output directory")->required();
  fitc->add_option("--df", fit.df, "Spline df for continuous covariates")->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--time-df", fit.time_df, "Spline df for time")->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--df-override", fit.df_overrides, "Per-covariate df as name=df (1 = linear)");
  fitc->add_option("--time-interactions", fit.time_interactions, "Features interacting with time ('*' all, 'none')")
      ->capture_default_str();
  fitc->add_flag("--no-robust", fit.no_robust, "Skip the robust covariance");
  fitc->add_option("--max-iterations", fit.max_iterations, "Newton iteration cap")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  DiagnoseOptions diag;
  auto* diagnose = app.add_subcommand("diagnose", "Proportional-hazards and fit diagnostics");
  diagnose->add_option("--loans", diag.loans, "Loans CSV")->required()->check(CLI::ExistingFile);
  diagnose->add_option("--model", diag.model, "Fitted model file")->required()->check(CLI::ExistingFile);
  diagnose->add_option("--out", diag.out, "Output directory")->required();
  diagnose->add_option("--smooth-points", diag.smooth_points, "Grid size of the residual smoother")->capture_default_str();

  EstimateOptions est;
  auto* estimate = app.add_subcommand("estimate-di", "Estimate disparate impact");
  estimate->add_option("--loans", est.loans, "Loans CSV")->required()->check(CLI::ExistingFile);
  estimate->add_option("--model", est.model, "Fitted model file")->required()->check(CLI::ExistingFile);
  estimate->add_option("--out", est.out, "Output directory")->required();
  estimate->add_option("--seed", est.seed, "Master seed")->required();
  estimate->add_option("--bins", est.bins, "Bin edges: lo:hi:width or e0,e1,...")->capture_default_str();
  estimate->add_option("--bootstrap", est.bootstrap, "Bootstrap replicates (0 = none)")->capture_default_str();
  estimate->add_option("--multiplier", est.multiplier, "Hazard multiplier for unfunded loans")->capture_default_str();
  estimate->add_option("--subset", est.subsets, "Subset as name=expr, e.g. young=age<30&married==0");
  estimate->add_option("--second-stage", est.second_stage, "Second-stage estimator")
      ->capture_default_str()
      ->check(CLI::IsMember({"nonparametric", "ols-di", "ols-di-controls", "ols-dt"}));
  estimate->add_option("--y-df", est.y_df, "Spline df for the return rate (OLS)")->capture_default_str();
  estimate->add_flag("--no-aic", est.no_aic, "Keep every control (OLS)");

  DecomposeOptions dec;
  auto* decompose = app.add_subcommand("decompose", "OLS DI, DI with controls and DT, plus the proxy share");
  decompose->add_option("--loans", dec.loans, "Loans CSV")->required()->check(CLI::ExistingFile);
  decompose->add_option("--model", dec.model, "Fitted model file")->required()->check(CLI::ExistingFile);
  decompose->add_option("--out", dec.out, "Output directory")->required();
  decompose->add_option("--seed", dec.seed, "Master seed")->required();
  decompose->add_option("--multiplier", dec.multiplier, "Hazard multiplier for unfunded loans")->capture_default_str();
  decompose->add_option("--y-df", dec.y_df, "Spline df for the return rate")->capture_default_str();
  decompose->add_flag("--no-aic", dec.no_aic, "Keep every control");

  SensitivityOptions sens;
  auto* sensitivity = app.add_subcommand("sensitivity", "Average DI under scaled hazards");
  sensitivity->add_option("--loans", sens.loans, "Loans CSV")->required()->check(CLI::ExistingFile);
  sensitivity->add_option("--model", sens.model, "Fitted model file")->required()->check(CLI::ExistingFile);
  sensitivity->add_option("--out", sens.out, "Output directory")->required();
  sensitivity->add_option("--seed", sens.seed, "Master seed")->required();
  sensitivity->add_option("--bins", sens.bins, "Bin edges: lo:hi:width or e0,e1,...")->capture_default_str();
  sensitivity->add_option("--multipliers", sens.multipliers, "Hazard multipliers")
      ->capture_default_str()
      ->delimiter(',');

  ThresholdOptions thr;
  auto* threshold = app.add_subcommand("threshold-test", "Bayesian threshold test of the funding decisions");
  threshold->add_option("--loans", thr.loans, "Loans CSV")->required()->check(CLI::ExistingFile);
  threshold->add_option("--model", thr.model, "Fitted model file")->required()->check(CLI::ExistingFile);
  threshold->add_option("--out", thr.out, "Output directory")->required();
  threshold->add_option("--seed", thr.seed, "Master seed")->required();
  threshold->add_option("--chains", thr.chains, "Chains per gender")->capture_default_str();
  threshold->add_option("--draws", thr.draws, "Post-warmup draws per chain")->capture_default_str();
  threshold->add_option("--warmup", thr.warmup, "Warmup iterations per chain")->capture_default_str();
  threshold->add_option("--max-draws", thr.max_draws, "Cap on draws when extending for convergence")
      ->capture_default_str();
  threshold->add_option("--bootstrap", thr.bootstrap, "Bootstrap imputations to average over (0 = none)")
      ->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << version_text() << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what());
    return 2;
  }

  try {
    json report;
    if (simulate->parsed()) report = run_simulate(sim, g);
    if (fitc->parsed()) report = run_fit(fit, g);
    if (diagnose->parsed()) report = run_diagnose(diag, g);
    if (estimate->parsed()) report = run_estimate(est, g);
    if (decompose->parsed()) report = run_decompose(dec, g);
    if (sensitivity->parsed()) report = run_sensitivity(sens, g);
    if (threshold->parsed()) report = run_threshold(thr, g);
    out << report.dump(2) << '\n';
    return 0;
  } catch (const Error& e) {
    report_error(err, e.kind(), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
}

}  // namespace disparity::cli
