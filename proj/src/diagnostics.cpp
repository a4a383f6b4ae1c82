#include "disparity/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "disparity/stats.hpp"

namespace disparity {

namespace {

struct SampleView {
  std::vector<HazardCurve> curves;
  std::vector<int> time;
  std::vector<std::uint8_t> event;
};

SampleView view(const FittedHazardModel& model, std::span<const SurvivalSample> samples) {
  SampleView v;
  v.curves.reserve(samples.size());
  for (const SurvivalSample& s : samples) {
    v.curves.push_back(model.hazard_curve(s.covariates));
    v.time.push_back(s.observation_time);
    v.event.push_back(s.censored ? 0 : 1);
  }
  return v;
}

// Directions of the efficient information that are negligible relative to
// the unprofiled information `ref` are already spanned by the model (e.g. a
// covariate that has its own time interaction); they are dropped from the
// test and from its degrees of freedom.
PhTest block_test(const std::string& name, const std::vector<std::size_t>& cols, const Eigen::VectorXd& u,
                  const Eigen::MatrixXd& j, const Eigen::MatrixXd& ref) {
  const auto k = static_cast<Eigen::Index>(cols.size());
  Eigen::VectorXd ub(k);
  Eigen::VectorXd scale(k);
  Eigen::MatrixXd jb(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    const auto ca = static_cast<Eigen::Index>(cols[static_cast<std::size_t>(a)]);
    scale[a] = ref(ca, ca) > 0.0 ? 1.0 / std::sqrt(ref(ca, ca)) : 0.0;
    ub[a] = u[ca] * scale[a];
    for (Eigen::Index b = 0; b < k; ++b) {
      jb(a, b) = j(ca, static_cast<Eigen::Index>(cols[static_cast<std::size_t>(b)]));
    }
  }
  jb = scale.asDiagonal() * jb * scale.asDiagonal();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jb);
  PhTest t;
  t.name = name;
  t.columns = cols;
  const Eigen::VectorXd proj = eig.eigenvectors().transpose() * ub;
  for (Eigen::Index a = 0; a < k; ++a) {
    if (eig.eigenvalues()[a] <= 1e-8) continue;
    t.chi2 += proj[a] * proj[a] / eig.eigenvalues()[a];
    ++t.df;
  }
  t.p_value = t.df > 0 ? stats::chi_square_sf(t.chi2, t.df) : 1.0;
  return t;
}

}  // namespace

std::vector<SmoothPoint> local_linear(std::span<const double> x, std::span<const double> y, double bandwidth,
                                      std::span<const double> grid) {
  if (x.size() != y.size() || x.empty()) throw InvalidInput("local_linear: need matching, nonempty x and y");
  if (!(bandwidth > 0.0)) throw InvalidInput("local_linear: bandwidth must be positive");
  // Aggregate ties in x: count, sum y, sum y^2.
  std::map<double, std::array<double, 3>> agg;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto& a = agg[x[i]];
    a[0] += 1.0;
    a[1] += y[i];
    a[2] += y[i] * y[i];
  }
  auto fit_at = [&](double x0, double* kernel_sq) {
    double s0 = 0, s1 = 0, s2 = 0, t0 = 0, t1 = 0;
    for (const auto& [xm, a] : agg) {
      const double dx = xm - x0;
      const double w = std::exp(-0.5 * (dx / bandwidth) * (dx / bandwidth));
      s0 += a[0] * w;
      s1 += a[0] * w * dx;
      s2 += a[0] * w * dx * dx;
      t0 += w * a[1];
      t1 += w * dx * a[1];
    }
    const double den = s0 * s2 - s1 * s1;
    double est = 0.0;
    double lsq = 0.0;
    if (den > 1e-12 * s0 * s2 && den > 0.0) {
      est = (s2 * t0 - s1 * t1) / den;
      for (const auto& [xm, a] : agg) {
        const double dx = xm - x0;
        const double w = std::exp(-0.5 * (dx / bandwidth) * (dx / bandwidth));
        const double l = w * (s2 - s1 * dx) / den;
        lsq += a[0] * l * l;
      }
    } else {  // a single support point: local constant
      est = t0 / s0;
      for (const auto& [xm, a] : agg) {
        const double dx = xm - x0;
        const double w = std::exp(-0.5 * (dx / bandwidth) * (dx / bandwidth));
        lsq += a[0] * (w / s0) * (w / s0);
      }
    }
    if (kernel_sq) *kernel_sq = lsq;
    return est;
  };
  double rss = 0.0;
  for (const auto& [xm, a] : agg) {
    const double f = fit_at(xm, nullptr);
    rss += a[2] - 2.0 * f * a[1] + a[0] * f * f;
  }
  const double sigma2 = std::max(0.0, rss / static_cast<double>(x.size()));
  const double z = stats::normal_quantile(0.975);
  std::vector<SmoothPoint> out;
  out.reserve(grid.size());
  for (const double g : grid) {
    double lsq = 0.0;
    const double est = fit_at(g, &lsq);
    const double se = std::sqrt(sigma2 * lsq);
    out.push_back({g, est, est - z * se, est + z * se});
  }
  return out;
}

SchoenfeldReport schoenfeld(const CoxProblem& problem, const Eigen::VectorXd& beta,
                            const std::vector<std::string>& blocks, int smooth_points) {
  if (problem.distinct_event_times() < 2) throw InvalidInput("residuals undefined: all defaults share one month");
  const auto p = static_cast<Eigen::Index>(problem.size());
  if (blocks.size() != problem.size()) throw InvalidInput("schoenfeld: one block name per column required");

  SchoenfeldReport rep;
  rep.columns = problem.column_names();
  const CoxProblem::Schoenfeld sr = problem.schoenfeld_residuals(beta);
  rep.event_time = sr.month;
  rep.residuals = sr.residuals;
  const auto d = static_cast<double>(sr.month.size());

  // g(t) = t, centered at the mean over defaults.
  const double gbar = std::accumulate(sr.month.begin(), sr.month.end(), 0.0) / d;
  Eigen::VectorXd u = Eigen::VectorXd::Zero(p);
  for (std::size_t k = 0; k < sr.month.size(); ++k) u += (sr.month[k] - gbar) * sr.residuals.row(static_cast<Eigen::Index>(k)).transpose();

  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd i_gb = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd i_gg = Eigen::MatrixXd::Zero(p, p);
  for (const auto& [t, it] : problem.month_information(beta)) {
    const double g = t - gbar;
    info += it;
    i_gb += g * it;
    i_gg += g * g * it;
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
  // Efficient information for the slope terms after profiling out beta.
  const Eigen::MatrixXd j = i_gg - i_gb * ldlt.solve(i_gb.transpose());

  std::map<std::string, std::vector<std::size_t>> by_block;
  std::vector<std::string> order;
  for (std::size_t c = 0; c < blocks.size(); ++c) {
    if (!by_block.count(blocks[c])) order.push_back(blocks[c]);
    by_block[blocks[c]].push_back(c);
  }
  for (const auto& name : order) rep.tests.push_back(block_test(name, by_block[name], u, j, i_gg));
  std::vector<std::size_t> all(blocks.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  rep.global = block_test("GLOBAL", all, u, j, i_gg);

  const Eigen::MatrixXd v = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
  rep.scaled = (sr.residuals * v * d).rowwise() + beta.transpose();

  std::vector<double> x(sr.month.begin(), sr.month.end());
  const double lo = *std::min_element(x.begin(), x.end());
  const double hi = *std::max_element(x.begin(), x.end());
  std::vector<double> grid(static_cast<std::size_t>(std::max(2, smooth_points)));
  for (std::size_t k = 0; k < grid.size(); ++k) grid[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(grid.size() - 1);
  std::vector<double> y(x.size());
  for (Eigen::Index c = 0; c < p; ++c) {
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = rep.scaled(static_cast<Eigen::Index>(k), c);
    rep.smooth.push_back(local_linear(x, y, 0.2 * (hi - lo), grid));
  }
  return rep;
}

SchoenfeldReport schoenfeld(const FittedHazardModel& model, std::span<const SurvivalSample> samples) {
  const CoxProblem problem = make_cox_problem(model.design, samples);
  return schoenfeld(problem, model.beta, model.design.column_blocks());
}

CoxSnellReport cox_snell(std::span<const HazardCurve> curves, std::span<const int> time,
                         std::span<const std::uint8_t> event) {
  const std::size_t n = curves.size();
  if (time.size() != n || event.size() != n || n == 0) throw InvalidInput("cox_snell: inconsistent inputs");
  CoxSnellReport rep;
  rep.residual.resize(n);
  rep.event.assign(event.begin(), event.end());
  for (std::size_t i = 0; i < n; ++i) {
    const int stop = std::min(time[i] + (event[i] ? 1 : 0), kTermMonths);
    double e = 0.0;
    for (int t = 0; t < stop; ++t) e += curves[i][static_cast<std::size_t>(t)];
    rep.residual[i] = e;
  }
  // Nelson-Aalen estimate of the residuals' cumulative hazard.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return rep.residual[a] < rep.residual[b]; });
  std::vector<double> knots;  // distinct residual values
  std::vector<double> na;     // estimate at and after each value
  double cum = 0.0;
  std::size_t k = 0;
  while (k < n) {
    const double v = rep.residual[idx[k]];
    std::size_t e = k;
    std::size_t deaths = 0;
    while (e < n && rep.residual[idx[e]] == v) deaths += rep.event[idx[e++]];
    cum += static_cast<double>(deaths) / static_cast<double>(n - k);
    knots.push_back(v);
    na.push_back(cum);
    k = e;
  }
  auto na_at = [&](double x) {
    const auto it = std::upper_bound(knots.begin(), knots.end(), x);
    return it == knots.begin() ? 0.0 : na[static_cast<std::size_t>(it - knots.begin()) - 1];
  };
  rep.cumulative_hazard.resize(n);
  for (std::size_t i = 0; i < n; ++i) rep.cumulative_hazard[i] = na_at(rep.residual[i]);
  std::vector<double> sorted = rep.residual;
  std::sort(sorted.begin(), sorted.end());
  for (int q = 1; q <= 19; ++q) {
    const double x = stats::quantile_sorted(sorted, 0.05 * q);
    const double h = na_at(x);
    rep.check_quantile.push_back(x);
    rep.check_hazard.push_back(h);
    rep.max_deviation = std::max(rep.max_deviation, std::abs(h - x));
  }
  return rep;
}

CoxSnellReport cox_snell(const FittedHazardModel& model, std::span<const SurvivalSample> samples) {
  const SampleView v = view(model, samples);
  return cox_snell(v.curves, v.time, v.event);
}

std::vector<RankMonth> default_rank(std::span<const HazardCurve> curves, std::span<const int> time,
                                    std::span<const std::uint8_t> event) {
  const std::size_t n = curves.size();
  if (time.size() != n || event.size() != n) throw InvalidInput("default_rank: inconsistent inputs");
  std::vector<RankMonth> out;
  std::vector<double> risk;
  for (int t = 0; t < kTermMonths; ++t) {
    risk.clear();
    std::vector<double> dead;
    for (std::size_t i = 0; i < n; ++i) {
      const bool dies = time[i] == t && event[i];
      if (time[i] > t || dies) risk.push_back(curves[i][static_cast<std::size_t>(t)]);
      if (dies) dead.push_back(curves[i][static_cast<std::size_t>(t)]);
    }
    if (dead.empty() || risk.size() < 2) continue;
    std::sort(risk.begin(), risk.end());
    std::vector<double> ranks;
    for (const double h : dead) {
      const auto lo = std::lower_bound(risk.begin(), risk.end(), h);
      const auto hi = std::upper_bound(lo, risk.end(), h);
      const double below = static_cast<double>(lo - risk.begin());
      const double ties = static_cast<double>(hi - lo) - 1.0;  // excluding itself
      ranks.push_back((below + 0.5 * ties) / static_cast<double>(risk.size() - 1));
    }
    RankMonth m;
    m.month = t;
    m.defaults = dead.size();
    m.at_risk = risk.size();
    m.mean_rank = stats::mean(ranks);
    const double se = ranks.size() > 1 ? stats::population_sd(ranks) * std::sqrt(ranks.size() / (ranks.size() - 1.0)) /
                                             std::sqrt(static_cast<double>(ranks.size()))
                                       : 0.0;
    m.lower = m.mean_rank - 1.96 * se;
    m.upper = m.mean_rank + 1.96 * se;
    out.push_back(m);
  }
  return out;
}

std::vector<RankMonth> default_rank(const FittedHazardModel& model, std::span<const SurvivalSample> samples) {
  const SampleView v = view(model, samples);
  return default_rank(v.curves, v.time, v.event);
}

std::vector<HazardPlotRow> hazard_plot(const FittedHazardModel& model, std::span<const SurvivalSample> samples) {
  const SampleView v = view(model, samples);
  std::vector<HazardPlotRow> out;
  for (int t = 0; t < kTermMonths; ++t) {
    double sum[2] = {0, 0};
    double count[2] = {0, 0};
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (v.time[i] < t) continue;
      if (v.time[i] == t && !v.event[i]) continue;
      const int g = samples[i].gender == Gender::male ? 0 : 1;
      sum[g] += v.curves[i][static_cast<std::size_t>(t)];
      count[g] += 1.0;
    }
    out.push_back({t, model.baseline[static_cast<std::size_t>(t)], count[0] > 0 ? sum[0] / count[0] : 0.0,
                   count[1] > 0 ? sum[1] / count[1] : 0.0});
  }
  return out;
}

}  // namespace disparity
