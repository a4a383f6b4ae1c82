#include "disparity/di.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include <Eigen/Cholesky>

#include "disparity/parallel.hpp"
#include "disparity/rng.hpp"
#include "disparity/spline.hpp"

namespace disparity {

std::vector<std::uint64_t> loan_keys(std::span<const LoanRecord> loans, std::uint64_t seed) {
  std::vector<std::uint64_t> keys(loans.size());
  for (std::size_t i = 0; i < loans.size(); ++i) keys[i] = derive_key(seed, loans[i].id);
  return keys;
}

std::vector<CompletedLoan> impute_returns(const FittedHazardModel& model, std::span<const LoanRecord> loans,
                                          std::span<const std::uint64_t> keys, double multiplier, unsigned threads) {
  if (keys.size() != loans.size()) throw InvalidInput("impute_returns: one key per loan required");
  if (!(multiplier >= 1.0)) throw InvalidInput("hazard multiplier must be at least 1");
  std::vector<CompletedLoan> out(loans.size());
  const FeatureSchema& schema = model.design.schema();
  constexpr std::size_t kChunk = 2048;
  const std::size_t chunks = (loans.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    Eigen::VectorXd raw(static_cast<Eigen::Index>(schema.size()));
    const std::size_t end = std::min(loans.size(), (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      const LoanRecord& r = loans[i];
      CompletedLoan& o = out[i];
      o.source = i;
      o.gender = r.gender;
      o.funded = r.funded;
      o.rate = r.rate;
      RepaymentOutcome outcome;
      int start = 0;
      double mult = multiplier;
      bool draw = true;
      if (r.funded) {
        if (!r.payments) throw InvalidInput("loan " + r.id + ": funded loan without payments");
        const ObservedSpell spell = observed_spell(*r.payments);
        if (spell.defaulted || spell.paid_months == kTermMonths) {
          outcome = outcome_from_default_time(spell.defaulted ? spell.paid_months : kTermMonths, r.rate);
          draw = false;
        } else {
          start = spell.paid_months;
          mult = 1.0;
        }
      }
      if (draw) {
        schema.fill(r, raw);
        Stream s(keys[i]);
        outcome = predict_repayment(model.hazard_curve(raw), r.rate, start, s, mult);
      }
      o.imputed = draw;
      o.default_time = outcome.default_time;
      o.lambda = outcome.repayment_ratio;
      o.y = outcome.return_rate;
    }
  });
  return out;
}

std::vector<CompletedLoan> impute_returns(const FittedHazardModel& model, std::span<const LoanRecord> loans,
                                          std::uint64_t seed, double multiplier, unsigned threads) {
  const auto keys = loan_keys(loans, seed);
  return impute_returns(model, loans, keys, multiplier, threads);
}

std::vector<CompletedLoan> complete_with_truth(std::span<const LoanRecord> loans, std::span<const int> default_times) {
  if (default_times.size() != loans.size()) throw InvalidInput("complete_with_truth: one default time per loan required");
  std::vector<CompletedLoan> out(loans.size());
  for (std::size_t i = 0; i < loans.size(); ++i) {
    const RepaymentOutcome o = outcome_from_default_time(default_times[i], loans[i].rate);
    out[i] = {i, loans[i].gender, loans[i].funded, loans[i].rate, o.default_time, o.repayment_ratio, o.return_rate, false};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bins

std::vector<double> uniform_edges(double lo, double hi, double width) {
  if (!(width > 0.0) || !(hi > lo)) throw InvalidInput("bin edges need hi > lo and a positive width");
  const auto count = static_cast<std::size_t>(std::llround((hi - lo) / width));
  if (count == 0 || std::abs(lo + static_cast<double>(count) * width - hi) > 1e-9 * std::max(1.0, std::abs(hi))) {
    throw InvalidInput("bin width must divide the range evenly");
  }
  std::vector<double> edges(count + 1);
  for (std::size_t k = 0; k <= count; ++k) edges[k] = lo + static_cast<double>(k) * width;
  edges.back() = hi;
  return edges;
}

namespace {

double parse_number(std::string_view s, const std::string& context) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw InvalidInput(context + ": '" + std::string(s) + "' is not a number");
  }
  return v;
}

void check_edges(std::span<const double> edges) {
  if (edges.size() < 2) throw InvalidInput("need at least two bin edges");
  for (std::size_t k = 1; k < edges.size(); ++k) {
    if (!(edges[k] > edges[k - 1])) throw InvalidInput("bin edges must be strictly increasing");
  }
}

}  // namespace

std::vector<double> parse_edges(const std::string& text) {
  if (text.find(':') != std::string::npos) {
    std::vector<double> parts;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ':')) parts.push_back(parse_number(item, "bins"));
    if (parts.size() != 3) throw InvalidInput("bins: expected lo:hi:width");
    return uniform_edges(parts[0], parts[1], parts[2]);
  }
  std::vector<double> edges;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) edges.push_back(parse_number(item, "bins"));
  check_edges(edges);
  return edges;
}

std::optional<std::size_t> bin_index(std::span<const double> edges, double y) {
  const double v = y + 1e-9;
  if (edges.size() < 2 || v < edges.front()) return std::nullopt;
  const auto it = std::upper_bound(edges.begin(), edges.end(), v);
  const auto k = static_cast<std::size_t>(it - edges.begin());
  if (k == 0 || k >= edges.size()) return std::nullopt;
  return k - 1;
}

DiEstimate nonparametric_di(std::span<const CompletedLoan> loans, std::span<const double> edges) {
  check_edges(edges);
  DiEstimate est;
  est.edges.assign(edges.begin(), edges.end());
  est.bins.resize(edges.size() - 1);
  est.loans = loans.size();
  bool any_male = false, any_female = false;
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
    est.bins[k].lo = edges[k];
    est.bins[k].hi = edges[k + 1];
  }
  for (const CompletedLoan& l : loans) {
    (l.gender == Gender::male ? any_male : any_female) = true;
    const auto k = bin_index(edges, l.y);
    if (!k) {
      ++est.out_of_range;
      continue;
    }
    DiBin& b = est.bins[*k];
    if (l.gender == Gender::male) {
      ++b.male;
      b.male_funded += l.funded ? 1 : 0;
    } else {
      ++b.female;
      b.female_funded += l.funded ? 1 : 0;
    }
  }
  if (!any_male || !any_female) throw InvalidInput("single-gender data: disparate impact is undefined");
  double weighted = 0.0, weight = 0.0, var = 0.0;
  for (DiBin& b : est.bins) {
    if (b.male > 0) b.male_rate = static_cast<double>(b.male_funded) / static_cast<double>(b.male);
    if (b.female > 0) b.female_rate = static_cast<double>(b.female_funded) / static_cast<double>(b.female);
    if (!b.male_rate || !b.female_rate) continue;
    b.di = *b.male_rate - *b.female_rate;
    const double n = static_cast<double>(b.male + b.female);
    weighted += *b.di * n;
    weight += n;
    const double pm = *b.male_rate, pf = *b.female_rate;
    var += n * n * (pm * (1 - pm) / static_cast<double>(b.male) + pf * (1 - pf) / static_cast<double>(b.female));
  }
  if (weight == 0.0) throw InvalidInput("no bin contains both genders");
  est.average_di = weighted / weight;
  est.average_se = std::sqrt(var) / weight;
  return est;
}

// ---------------------------------------------------------------------------
// OLS second stage

std::string to_string(OlsKind kind) {
  switch (kind) {
    case OlsKind::di: return "ols-di";
    case OlsKind::di_controls: return "ols-di-controls";
    case OlsKind::dt: return "ols-dt";
  }
  return "?";
}

OlsKind parse_ols_kind(const std::string& text) {
  if (text == "ols-di" || text == "di") return OlsKind::di;
  if (text == "ols-di-controls" || text == "di-controls" || text == "di_controls") return OlsKind::di_controls;
  if (text == "ols-dt" || text == "dt") return OlsKind::dt;
  throw InvalidInput("unknown second stage '" + text + "'");
}

namespace {

struct SubsetFit {
  Eigen::VectorXd coef;
  Eigen::MatrixXd inverse;
  double rss = 0.0;
};

// Unit-diagonal scaling makes the rank test independent of column units.
bool full_rank(const Eigen::MatrixXd& g) {
  const Eigen::VectorXd s = g.diagonal().cwiseSqrt().cwiseInverse();
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(s.asDiagonal() * g * s.asDiagonal());
  return ldlt.info() == Eigen::Success && ldlt.vectorD().minCoeff() > 1e-10;
}

SubsetFit fit_subset(const Eigen::MatrixXd& gram, const Eigen::VectorXd& aty, double yty,
                     const std::vector<Eigen::Index>& cols, const std::vector<std::string>& names) {
  const auto k = static_cast<Eigen::Index>(cols.size());
  Eigen::MatrixXd g(k, k);
  Eigen::VectorXd b(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    b[a] = aty[cols[static_cast<std::size_t>(a)]];
    for (Eigen::Index c = 0; c < k; ++c) g(a, c) = gram(cols[static_cast<std::size_t>(a)], cols[static_cast<std::size_t>(c)]);
  }
  if (!full_rank(g)) {
    Eigen::Index j = 1;
    while (j < k && full_rank(g.topLeftCorner(j + 1, j + 1))) ++j;
    throw RankDeficient("second-stage design is rank deficient at column '" +
                        names[static_cast<std::size_t>(cols[static_cast<std::size_t>(std::min(j, k - 1))])] + "'");
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
  SubsetFit f;
  f.coef = ldlt.solve(b);
  f.rss = std::max(0.0, yty - f.coef.dot(b));
  f.inverse = ldlt.solve(Eigen::MatrixXd::Identity(k, k));
  return f;
}

}  // namespace

OlsResult ols_second_stage(std::span<const CompletedLoan> completed, std::span<const LoanRecord> loans,
                           const FeatureSchema& schema, OlsKind kind, const OlsOptions& options) {
  const std::size_t n = completed.size();
  if (n == 0) throw InvalidInput("ols: no loans");
  const bool with_y = kind != OlsKind::dt;
  const bool with_x = kind != OlsKind::di;

  std::optional<SplineSpec> yspec;
  int y_cols = 0;
  if (with_y) {
    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = completed[i].y;
    std::vector<double> distinct = ys;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    const int df = std::min(options.y_df, static_cast<int>(distinct.size()) - 1);
    if (df >= 2) {
      yspec = make_spline_spec(ys, df);
      y_cols = df;
    } else {
      y_cols = 1;
    }
  }
  const auto names = schema.names();
  std::vector<std::size_t> controls;
  if (with_x) {
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (names[j] != "male" && names[j] != "rate") controls.push_back(j);
    }
  }
  const Eigen::Index p = 2 + y_cols + static_cast<Eigen::Index>(controls.size());
  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), p);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  Eigen::VectorXd raw(static_cast<Eigen::Index>(schema.size()));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const CompletedLoan& c = completed[i];
    a(r, 0) = 1.0;
    a(r, 1) = c.gender == Gender::male ? 1.0 : 0.0;
    if (with_y) {
      if (yspec) {
        a.row(r).segment(2, y_cols) = evaluate(*yspec, c.y).transpose();
      } else {
        a(r, 2) = c.y;
      }
    }
    if (with_x) {
      if (c.source >= loans.size()) throw InvalidInput("ols: completed loan refers to a missing record");
      schema.fill(loans[c.source], raw);
      for (std::size_t k = 0; k < controls.size(); ++k) a(r, 2 + y_cols + static_cast<Eigen::Index>(k)) = raw[static_cast<Eigen::Index>(controls[k])];
    }
    y[r] = c.funded ? 1.0 : 0.0;
  }
  std::vector<std::string> col_names = {"(intercept)", "male"};
  for (int c = 0; c < y_cols; ++c) col_names.push_back("ns(y)" + std::to_string(c + 1));
  for (const std::size_t j : controls) col_names.push_back(names[j]);
  const Eigen::MatrixXd gram = a.transpose() * a;
  const Eigen::VectorXd aty = a.transpose() * y;
  const double yty = y.squaredNorm();

  std::vector<Eigen::Index> fixed;
  for (Eigen::Index c = 0; c < 2 + y_cols; ++c) fixed.push_back(c);
  std::vector<Eigen::Index> kept_controls;
  OlsResult res;
  res.kind = kind;
  res.n = n;
  for (std::size_t k = 0; k < controls.size(); ++k) {
    const Eigen::Index col = 2 + y_cols + static_cast<Eigen::Index>(k);
    // Categories never observed give an all-zero column; leave it out.
    if (gram(col, col) == 0.0) {
      res.eliminated.push_back(names[controls[k]]);
      continue;
    }
    kept_controls.push_back(col);
  }
  auto columns_of = [&](const std::vector<Eigen::Index>& ctrl) {
    std::vector<Eigen::Index> cols = fixed;
    cols.insert(cols.end(), ctrl.begin(), ctrl.end());
    return cols;
  };
  const double nn = static_cast<double>(n);
  auto aic_of = [&](const SubsetFit& f, std::size_t k) {
    return nn * std::log(std::max(f.rss, 1e-300) / nn) + 2.0 * static_cast<double>(k);
  };
  SubsetFit best = fit_subset(gram, aty, yty, columns_of(kept_controls), col_names);
  double best_aic = aic_of(best, fixed.size() + kept_controls.size());
  if (options.aic_selection) {
    for (;;) {
      std::optional<std::size_t> drop;
      SubsetFit drop_fit;
      double drop_aic = best_aic;
      for (std::size_t k = 0; k < kept_controls.size(); ++k) {
        std::vector<Eigen::Index> trial = kept_controls;
        trial.erase(trial.begin() + static_cast<std::ptrdiff_t>(k));
        SubsetFit f = fit_subset(gram, aty, yty, columns_of(trial), col_names);
        const double v = aic_of(f, fixed.size() + trial.size());
        if (v < drop_aic) {
          drop_aic = v;
          drop = k;
          drop_fit = std::move(f);
        }
      }
      if (!drop) break;
      res.eliminated.push_back(names[controls[static_cast<std::size_t>(kept_controls[*drop] - 2 - y_cols)]]);
      kept_controls.erase(kept_controls.begin() + static_cast<std::ptrdiff_t>(*drop));
      best = std::move(drop_fit);
      best_aic = drop_aic;
    }
  }
  for (const Eigen::Index col : kept_controls) res.included.push_back(names[controls[static_cast<std::size_t>(col - 2 - y_cols)]]);
  const std::size_t k = fixed.size() + kept_controls.size();
  if (n <= k) throw InvalidInput("ols: more columns than loans");
  const double sigma2 = best.rss / static_cast<double>(n - k);
  res.gender_coef = best.coef[1];
  res.gender_se = std::sqrt(sigma2 * best.inverse(1, 1));
  res.ci_low = res.gender_coef - 1.96 * res.gender_se;
  res.ci_high = res.gender_coef + 1.96 * res.gender_se;
  res.aic = best_aic;
  return res;
}

double decomposition_share(double coef_di, double coef_di_controls) {
  if (coef_di == 0.0) throw InvalidInput("decomposition share undefined when the DI coefficient is zero");
  return 1.0 - coef_di_controls / coef_di;
}

// ---------------------------------------------------------------------------
// Bootstrap

BootstrapRun run_bootstrap(std::span<const LoanRecord> loans, const FittedHazardModel& model,
                           std::span<const double> multipliers, const BootstrapConfig& config,
                           const std::function<void(const Replicate&)>& fn) {
  if (loans.empty()) throw InvalidInput("bootstrap: no loans");
  if (multipliers.empty()) throw InvalidInput("bootstrap: no hazard multipliers");
  BootstrapRun run;
  run.ok.assign(config.replicates, false);
  std::vector<std::uint8_t> ok(config.replicates, 0);
  const std::uint64_t root = derive_key(config.seed, "bootstrap");
  parallel_for(config.replicates, config.threads, [&](std::size_t r) {
    const std::uint64_t key = derive_key(root, r);
    Stream s(derive_key(key, "resample"));
    Replicate rep;
    rep.index = r;
    rep.sample.resize(loans.size());
    std::vector<LoanRecord> resampled;
    resampled.reserve(loans.size());
    std::vector<LoanRecord> funded;
    for (std::size_t i = 0; i < loans.size(); ++i) {
      rep.sample[i] = static_cast<std::size_t>(s.below(loans.size()));
      resampled.push_back(loans[rep.sample[i]]);
      if (resampled.back().funded) funded.push_back(resampled.back());
    }
    FittedHazardModel refit;
    try {
      const auto samples = encode_survival(funded, model.design.schema());
      refit = fit_hazard_model(samples, model.design, config.fit);
    } catch (const Error&) {
      return;
    }
    std::vector<std::uint64_t> keys(loans.size());
    const std::uint64_t impute_key = derive_key(key, "impute");
    for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = derive_key(impute_key, i);
    for (const double m : multipliers) rep.imputed.push_back(impute_returns(refit, resampled, keys, m, 1));
    fn(rep);
    ok[r] = 1;
  });
  for (std::size_t r = 0; r < config.replicates; ++r) {
    run.ok[r] = ok[r] != 0;
    (ok[r] ? run.succeeded : run.failed) += 1;
  }
  if (static_cast<double>(run.failed) > config.max_failure_share * static_cast<double>(config.replicates)) {
    throw ConvergenceError("bootstrap: " + std::to_string(run.failed) + " of " + std::to_string(config.replicates) +
                           " replicate fits failed");
  }
  return run;
}

DiEstimate bootstrap_di(std::span<const LoanRecord> loans, const FittedHazardModel& model, std::span<const double> edges,
                        const BootstrapConfig& config, double multiplier) {
  if (config.replicates < 2) throw InvalidInput("bootstrap needs at least 2 replicates");
  const auto completed = impute_returns(model, loans, derive_key(config.seed, "impute"), multiplier, config.threads);
  DiEstimate est = nonparametric_di(completed, edges);
  const std::size_t nb = est.bins.size();
  std::vector<double> averages(config.replicates, 0.0);
  std::vector<std::vector<std::optional<double>>> per_bin(config.replicates);
  const double mult[] = {multiplier};
  const BootstrapRun run = run_bootstrap(loans, model, mult, config, [&](const Replicate& rep) {
    const DiEstimate e = nonparametric_di(rep.imputed[0], edges);
    averages[rep.index] = e.average_di;
    per_bin[rep.index].resize(nb);
    for (std::size_t k = 0; k < nb; ++k) per_bin[rep.index][k] = e.bins[k].di;
  });
  std::vector<double> avg;
  for (std::size_t r = 0; r < config.replicates; ++r) {
    if (run.ok[r]) avg.push_back(averages[r]);
  }
  std::sort(avg.begin(), avg.end());
  est.ci_low = stats::order_statistic_quantile(avg, 0.025);
  est.ci_high = stats::order_statistic_quantile(avg, 0.975);
  for (std::size_t k = 0; k < nb; ++k) {
    std::vector<double> v;
    for (std::size_t r = 0; r < config.replicates; ++r) {
      if (run.ok[r] && per_bin[r][k]) v.push_back(*per_bin[r][k]);
    }
    if (v.empty()) continue;
    std::sort(v.begin(), v.end());
    est.bins[k].ci_low = stats::order_statistic_quantile(v, 0.025);
    est.bins[k].ci_high = stats::order_statistic_quantile(v, 0.975);
  }
  est.n_bootstrap = run.succeeded;
  est.failed_replicates = run.failed;
  return est;
}

// ---------------------------------------------------------------------------
// Subsets

namespace {

const std::vector<std::string>& subset_fields() {
  static const std::vector<std::string> f = {"gender",      "married",      "age",         "repeated",  "employment",
                                             "education",   "past_failed",  "past_aborted", "past_ontime", "past_late",
                                             "amount",      "rate",         "app",         "express",   "province"};
  return f;
}

double field_value(const LoanRecord& r, const std::string& field) {
  if (field == "gender") return r.gender == Gender::male ? 1.0 : 0.0;
  if (field == "married") return r.x.married;
  if (field == "age") return r.x.age;
  if (field == "repeated") return r.x.repeated;
  if (field == "employment") return r.x.employment;
  if (field == "education") return r.x.education;
  if (field == "past_failed") return r.x.past_failed;
  if (field == "past_aborted") return r.x.past_aborted;
  if (field == "past_ontime") return r.x.past_ontime;
  if (field == "past_late") return r.x.past_late;
  if (field == "amount") return r.x.amount;
  if (field == "rate") return r.rate;
  if (field == "app") return r.x.app;
  if (field == "express") return r.x.express;
  if (field == "province") return r.x.province;
  throw InvalidInput("unknown subset field '" + field + "'");
}

std::string trim(std::string s) {
  while (!s.empty() && s.front() == ' ') s.erase(s.begin());
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

bool SubsetFilter::matches(const LoanRecord& loan) const {
  for (const Clause& c : clauses) {
    const double v = field_value(loan, c.field);
    bool ok = false;
    if (c.op == "==") ok = v == c.value;
    else if (c.op == "!=") ok = v != c.value;
    else if (c.op == "<") ok = v < c.value;
    else if (c.op == "<=") ok = v <= c.value;
    else if (c.op == ">") ok = v > c.value;
    else if (c.op == ">=") ok = v >= c.value;
    if (!ok) return false;
  }
  return true;
}

SubsetFilter parse_subset(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || (eq + 1 < text.size() && text[eq + 1] == '=')) {
    throw InvalidInput("subset must look like name=expr, got '" + text + "'");
  }
  SubsetFilter f;
  f.name = trim(text.substr(0, eq));
  const std::string expr = trim(text.substr(eq + 1));
  if (expr == "all" || expr.empty()) return f;
  std::stringstream ss(expr);
  std::string clause;
  while (std::getline(ss, clause, '&')) {
    clause = trim(clause);
    const auto pos = clause.find_first_of("<>=!");
    if (pos == std::string::npos || pos == 0) throw InvalidInput("subset clause '" + clause + "' has no comparison");
    std::size_t len = 1;
    if (pos + 1 < clause.size() && clause[pos + 1] == '=') len = 2;
    SubsetFilter::Clause c;
    c.field = trim(clause.substr(0, pos));
    c.op = clause.substr(pos, len);
    if (c.op == "=" || c.op == "!") throw InvalidInput("subset clause '" + clause + "': use == or !=");
    if (std::find(subset_fields().begin(), subset_fields().end(), c.field) == subset_fields().end()) {
      throw InvalidInput("unknown subset field '" + c.field + "'");
    }
    const std::string value = trim(clause.substr(pos + len));
    if (c.field == "gender") {
      if (c.op != "==" && c.op != "!=") throw InvalidInput("gender only supports == and !=");
      c.value = parse_gender(value) == Gender::male ? 1.0 : 0.0;
    } else {
      c.value = parse_number(value, "subset '" + f.name + "'");
    }
    f.clauses.push_back(c);
  }
  return f;
}

std::vector<SubsetEstimate> disaggregate_di(std::span<const CompletedLoan> completed, std::span<const LoanRecord> loans,
                                            std::span<const SubsetFilter> filters, std::span<const double> edges) {
  std::vector<SubsetEstimate> out;
  for (const SubsetFilter& f : filters) {
    std::vector<CompletedLoan> subset;
    for (const CompletedLoan& c : completed) {
      if (c.source >= loans.size()) throw InvalidInput("disaggregate: completed loan refers to a missing record");
      if (f.matches(loans[c.source])) subset.push_back(c);
    }
    SubsetEstimate s;
    s.name = f.name;
    s.loans = subset.size();
    try {
      s.estimate = nonparametric_di(subset, edges);
    } catch (const InvalidInput&) {
      s.estimate.reset();
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sensitivity

SensitivityResult extrapolate(std::span<const double> multipliers, std::span<const double> average_di) {
  if (multipliers.size() != average_di.size()) throw InvalidInput("extrapolate: inconsistent inputs");
  SensitivityResult r;
  r.multipliers.assign(multipliers.begin(), multipliers.end());
  r.average_di.assign(average_di.begin(), average_di.end());
  std::vector<double> distinct(multipliers.begin(), multipliers.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) return r;
  r.fit = stats::fit_line(multipliers, average_di);
  if (r.fit->slope != 0.0) r.root = -r.fit->intercept / r.fit->slope;
  return r;
}

SensitivityResult sensitivity_sweep(const FittedHazardModel& model, std::span<const LoanRecord> loans,
                                    std::span<const double> multipliers, std::uint64_t seed,
                                    std::span<const double> edges, unsigned threads) {
  if (multipliers.empty()) throw InvalidInput("sensitivity: no multipliers");
  for (const double m : multipliers) {
    if (!(m >= 1.0)) throw InvalidInput("sensitivity: multipliers must be at least 1");
  }
  // Common random numbers: every multiplier reuses the same per-loan streams.
  const auto keys = loan_keys(loans, derive_key(seed, "impute"));
  std::vector<double> di;
  for (const double m : multipliers) di.push_back(nonparametric_di(impute_returns(model, loans, keys, m, threads), edges).average_di);
  return extrapolate(multipliers, di);
}

}  // namespace disparity
