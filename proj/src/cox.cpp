#include "disparity/cox.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <Eigen/Cholesky>

namespace disparity {

namespace {

constexpr int kBuckets = 2 * (kTermMonths + 1);

// Scalar sums over the Efron terms l = 0..d-1 with f = l/d and
// den_l = s0 - f e0.
struct EfronSums {
  double log_den = 0.0;
  double inv = 0.0;      // sum 1/den
  double f_inv = 0.0;    // sum f/den
  double inv2 = 0.0;     // sum 1/den^2
  double f_inv2 = 0.0;   // sum f/den^2
  double f2_inv2 = 0.0;  // sum f^2/den^2
};

EfronSums efron_sums(double s0, double e0, int d) {
  EfronSums out;
  for (int l = 0; l < d; ++l) {
    const double f = static_cast<double>(l) / d;
    const double den = s0 - f * e0;
    const double r = 1.0 / den;
    out.log_den += std::log(den);
    out.inv += r;
    out.f_inv += f * r;
    out.inv2 += r * r;
    out.f_inv2 += f * r * r;
    out.f2_inv2 += f * f * r * r;
  }
  return out;
}

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i > 0) out += ", ";
    out += "'" + names[i] + "'";
  }
  return out;
}

}  // namespace

struct CoxProblem::MonthSums {
  int d = 0;
  double log_scale = 0.0;
  double s0 = 0.0;
  double e0 = 0.0;
  Eigen::VectorXd s1, e1, xs;
  Eigen::MatrixXd s2, e2;

  void reset(Eigen::Index p, bool second) {
    d = 0;
    s0 = e0 = 0.0;
    s1.setZero(p);
    e1.setZero(p);
    xs.setZero(p);
    if (second) {
      s2.setZero(p, p);
      e2.setZero(p, p);
    }
  }
};

CoxProblem::CoxProblem(RowMatrix x, std::vector<int> time, std::vector<std::uint8_t> event,
                       std::vector<InteractionColumn> interactions, Eigen::MatrixXd time_basis,
                       std::vector<std::string> column_names)
    : time_in_(std::move(time)),
      event_in_(std::move(event)),
      interactions_(std::move(interactions)),
      time_basis_(std::move(time_basis)),
      names_(std::move(column_names)) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (time_in_.size() != n || event_in_.size() != n) throw InvalidInput("cox problem: inconsistent row counts");
  if (n == 0) throw InvalidInput("cox problem: no samples");
  const auto p1 = static_cast<std::size_t>(x.cols());
  if (!interactions_.empty() && (time_basis_.rows() != kTermMonths)) {
    throw InvalidInput("cox problem: time basis must have one row per month");
  }
  for (const auto& ic : interactions_) {
    if (ic.main >= p1 || ic.time < 0 || ic.time >= time_basis_.cols()) {
      throw InvalidInput("cox problem: interaction column out of range");
    }
  }
  if (names_.empty()) {
    for (std::size_t j = 0; j < p1 + interactions_.size(); ++j) names_.push_back("x" + std::to_string(j + 1));
  }
  if (names_.size() != p1 + interactions_.size()) throw InvalidInput("cox problem: wrong number of column names");

  std::vector<int> bucket(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int t = time_in_[i];
    if (t < 0 || t > kTermMonths) throw InvalidInput("cox problem: observation time outside 0..12");
    if (event_in_[i] && t == kTermMonths) throw InvalidInput("cox problem: default recorded after the term");
    bucket[i] = 2 * t + (event_in_[i] ? 1 : 0);
    if (event_in_[i]) ++n_events_;
  }

  // Interaction patterns: distinct values of the interacting main columns.
  std::vector<int> pattern(n, 0);
  std::vector<std::vector<double>> pattern_values;
  if (!interactions_.empty()) {
    std::map<std::vector<double>, int> ids;
    std::vector<double> key(interactions_.size());
    grouped_ = true;
    for (std::size_t i = 0; i < n && grouped_; ++i) {
      for (std::size_t k = 0; k < interactions_.size(); ++k) key[k] = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(interactions_[k].main));
      const auto [it, inserted] = ids.emplace(key, static_cast<int>(ids.size()));
      if (inserted) pattern_values.push_back(key);
      pattern[i] = it->second;
      if (ids.size() > 64) grouped_ = false;
    }
  } else {
    grouped_ = true;
    pattern_values.emplace_back();
  }

  order_.resize(n);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::stable_sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
    if (bucket[a] != bucket[b]) return bucket[a] < bucket[b];
    return grouped_ && pattern[a] < pattern[b];
  });
  x_.resize(x.rows(), x.cols());
  for (std::size_t s = 0; s < n; ++s) x_.row(static_cast<Eigen::Index>(s)) = x.row(static_cast<Eigen::Index>(order_[s]));

  bucket_begin_.assign(kBuckets + 1, n);
  for (std::size_t s = n; s-- > 0;) bucket_begin_[bucket[order_[s]]] = s;
  for (int b = kBuckets - 1; b >= 0; --b) bucket_begin_[b] = std::min(bucket_begin_[b], bucket_begin_[b + 1]);

  if (grouped_) {
    patterns_.resize(static_cast<Eigen::Index>(pattern_values.size()), static_cast<Eigen::Index>(interactions_.size()));
    for (std::size_t k = 0; k < pattern_values.size(); ++k) {
      for (std::size_t j = 0; j < interactions_.size(); ++j) patterns_(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = pattern_values[k][j];
    }
    std::size_t s = 0;
    while (s < n) {
      const std::size_t i = order_[s];
      std::size_t e = s + 1;
      while (e < n && bucket[order_[e]] == bucket[i] && pattern[order_[e]] == pattern[i]) ++e;
      groups_.push_back({bucket[i], pattern[i], s, e});
      s = e;
    }
  }
}

int CoxProblem::distinct_event_times() const {
  int count = 0;
  for (int t = 0; t < kTermMonths; ++t) count += bucket_begin_[2 * t + 2] > bucket_begin_[2 * t + 1] ? 1 : 0;
  return count;
}

Eigen::MatrixXd CoxProblem::month_map(int month) const {
  const Eigen::Index p1 = x_.cols();
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(size()), p1);
  m.topRows(p1).setIdentity();
  for (std::size_t k = 0; k < interactions_.size(); ++k) {
    m(p1 + static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(interactions_[k].main)) =
        time_basis_(month, interactions_[k].time);
  }
  return m;
}

void CoxProblem::month_sums_general(const Eigen::VectorXd& beta, int month, bool second, MonthSums& out) const {
  const Eigen::Index p1 = x_.cols();
  out.reset(p1, second);
  const std::size_t lo = bucket_begin_[2 * month + 1];
  const std::size_t ev_end = bucket_begin_[2 * month + 2];
  const std::size_t n = rows();
  out.d = static_cast<int>(ev_end - lo);
  if (out.d == 0) return;
  const Eigen::VectorXd w = month_map(month).transpose() * beta;
  const auto len = static_cast<Eigen::Index>(n - lo);
  const auto block = x_.middleRows(static_cast<Eigen::Index>(lo), len);
  Eigen::VectorXd eta = block * w;
  out.log_scale = eta.maxCoeff();
  const Eigen::VectorXd e = (eta.array() - out.log_scale).exp().matrix();
  const auto nd = static_cast<Eigen::Index>(out.d);
  out.s0 = e.sum();
  out.e0 = e.head(nd).sum();
  out.s1 = block.transpose() * e;
  out.e1 = block.topRows(nd).transpose() * e.head(nd);
  out.xs = block.topRows(nd).colwise().sum().transpose();
  if (second) {
    const RowMatrix weighted = block.array().colwise() * e.array();
    out.s2 = block.transpose() * weighted;
    out.e2 = block.topRows(nd).transpose() * weighted.topRows(nd);
  }
}

CoxProblem::Evaluation CoxProblem::evaluate(const Eigen::VectorXd& beta, bool derivatives) const {
  if (static_cast<std::size_t>(beta.size()) != size()) throw InvalidInput("cox problem: coefficient vector has wrong size");
  if (!grouped_) {
    if (derivatives) return evaluate_reference(beta);
    Evaluation ev;
    MonthSums ms;
    for (int t = 0; t < kTermMonths; ++t) {
      month_sums_general(beta, t, false, ms);
      if (ms.d == 0) continue;
      const EfronSums es = efron_sums(ms.s0, ms.e0, ms.d);
      ev.loglik += beta.dot(month_map(t) * ms.xs) - es.log_den - ms.d * ms.log_scale;
    }
    return ev;
  }

  const Eigen::Index p1 = x_.cols();
  const auto q = static_cast<Eigen::Index>(interactions_.size());
  const Eigen::Index p = p1 + q;
  const Eigen::VectorXd b1 = beta.head(p1);
  const Eigen::VectorXd xb = x_ * b1;
  const double m = xb.maxCoeff();
  const Eigen::VectorXd w = (xb.array() - m).exp().matrix();

  // Per group: sum w, sum w x, sum w x x', sum x.
  const std::size_t ng = groups_.size();
  std::vector<double> a0(ng);
  std::vector<Eigen::VectorXd> a1(ng), xs(ng);
  std::vector<Eigen::MatrixXd> a2(derivatives ? ng : 0);
  for (std::size_t g = 0; g < ng; ++g) {
    const auto& gr = groups_[g];
    const auto len = static_cast<Eigen::Index>(gr.end - gr.begin);
    const auto blk = x_.middleRows(static_cast<Eigen::Index>(gr.begin), len);
    const auto wg = w.segment(static_cast<Eigen::Index>(gr.begin), len);
    a0[g] = wg.sum();
    a1[g] = blk.transpose() * wg;
    if (gr.bucket % 2 == 1) xs[g] = blk.colwise().sum().transpose();
    if (derivatives) {
      const RowMatrix weighted = blk.array().colwise() * wg.array();
      a2[g] = blk.transpose() * weighted;
    }
  }

  Evaluation ev;
  if (derivatives) {
    ev.score.setZero(p);
    ev.information.setZero(p, p);
  }
  const Eigen::Index npat = patterns_.rows();
  Eigen::VectorXd c(npat), s(npat);
  MonthSums ms;
  for (int t = 0; t < kTermMonths; ++t) {
    const int lo = 2 * t + 1;
    if (bucket_begin_[lo + 1] == bucket_begin_[lo]) continue;
    for (Eigen::Index k = 0; k < npat; ++k) {
      double v = 0.0;
      for (Eigen::Index j = 0; j < q; ++j) {
        v += beta[p1 + j] * patterns_(k, j) * time_basis_(t, interactions_[static_cast<std::size_t>(j)].time);
      }
      c[k] = v;
    }
    const double cmax = c.maxCoeff();
    s = (c.array() - cmax).exp().matrix();
    ms.reset(p1, derivatives);
    ms.log_scale = m + cmax;
    for (std::size_t g = 0; g < ng; ++g) {
      const auto& gr = groups_[g];
      if (gr.bucket < lo) continue;
      const double sk = s[gr.pattern];
      ms.s0 += sk * a0[g];
      ms.s1.noalias() += sk * a1[g];
      if (derivatives) ms.s2.noalias() += sk * a2[g];
      if (gr.bucket == lo) {
        ms.d += static_cast<int>(gr.end - gr.begin);
        ms.e0 += sk * a0[g];
        ms.e1.noalias() += sk * a1[g];
        ms.xs += xs[g];
        if (derivatives) ms.e2.noalias() += sk * a2[g];
      }
    }
    const EfronSums es = efron_sums(ms.s0, ms.e0, ms.d);
    const Eigen::MatrixXd mt = month_map(t);
    ev.loglik += beta.dot(mt * ms.xs) - es.log_den - ms.d * ms.log_scale;
    if (derivatives) {
      const Eigen::VectorXd g = ms.xs - ms.s1 * es.inv + ms.e1 * es.f_inv;
      Eigen::MatrixXd h = ms.s2 * es.inv - ms.e2 * es.f_inv;
      h.noalias() -= ms.s1 * ms.s1.transpose() * es.inv2;
      h.noalias() += (ms.s1 * ms.e1.transpose() + ms.e1 * ms.s1.transpose()) * es.f_inv2;
      h.noalias() -= ms.e1 * ms.e1.transpose() * es.f2_inv2;
      ev.score.noalias() += mt * g;
      ev.information.noalias() += mt * h * mt.transpose();
    }
  }
  return ev;
}

CoxProblem::Evaluation CoxProblem::evaluate_reference(const Eigen::VectorXd& beta) const {
  if (static_cast<std::size_t>(beta.size()) != size()) throw InvalidInput("cox problem: coefficient vector has wrong size");
  const auto p = static_cast<Eigen::Index>(size());
  Evaluation ev;
  ev.score.setZero(p);
  ev.information.setZero(p, p);
  MonthSums ms;
  for (int t = 0; t < kTermMonths; ++t) {
    month_sums_general(beta, t, true, ms);
    if (ms.d == 0) continue;
    const EfronSums es = efron_sums(ms.s0, ms.e0, ms.d);
    const Eigen::MatrixXd mt = month_map(t);
    ev.loglik += beta.dot(mt * ms.xs) - es.log_den - ms.d * ms.log_scale;
    const Eigen::VectorXd g = ms.xs - ms.s1 * es.inv + ms.e1 * es.f_inv;
    Eigen::MatrixXd h = ms.s2 * es.inv - ms.e2 * es.f_inv;
    h.noalias() -= ms.s1 * ms.s1.transpose() * es.inv2;
    h.noalias() += (ms.s1 * ms.e1.transpose() + ms.e1 * ms.s1.transpose()) * es.f_inv2;
    h.noalias() -= ms.e1 * ms.e1.transpose() * es.f2_inv2;
    ev.score.noalias() += mt * g;
    ev.information.noalias() += mt * h * mt.transpose();
  }
  return ev;
}

std::vector<CoxProblem::EventMonth> CoxProblem::event_months(const Eigen::VectorXd& beta) const {
  std::vector<EventMonth> out;
  MonthSums ms;
  for (int t = 0; t < kTermMonths; ++t) {
    month_sums_general(beta, t, false, ms);
    if (ms.d == 0) continue;
    const EfronSums es = efron_sums(ms.s0, ms.e0, ms.d);
    EventMonth em;
    em.month = t;
    em.events = ms.d;
    em.mean = month_map(t) * ((ms.s1 * es.inv - ms.e1 * es.f_inv) / ms.d);
    em.log_weight = std::log(ms.s0) + ms.log_scale;
    out.push_back(std::move(em));
  }
  return out;
}

std::array<double, kTermMonths> CoxProblem::baseline_hazard(const Eigen::VectorXd& beta) const {
  std::array<double, kTermMonths> h{};
  MonthSums ms;
  for (int t = 0; t < kTermMonths; ++t) {
    month_sums_general(beta, t, false, ms);
    if (ms.d == 0) continue;
    h[static_cast<std::size_t>(t)] = std::clamp(ms.d / ms.s0 * std::exp(-ms.log_scale), 0.0, 1.0);
  }
  return h;
}

Eigen::VectorXd CoxProblem::covariates_at(std::size_t row, int month) const {
  const auto it = std::find(order_.begin(), order_.end(), row);
  if (it == order_.end()) throw InvalidInput("cox problem: row out of range");
  const Eigen::VectorXd x = x_.row(it - order_.begin()).transpose();
  return month_map(month) * x;
}

Eigen::MatrixXd CoxProblem::score_residuals(const Eigen::VectorXd& beta) const {
  const Eigen::Index p1 = x_.cols();
  const auto p = static_cast<Eigen::Index>(size());
  const std::size_t n = rows();
  Eigen::MatrixXd sorted = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), p);
  MonthSums ms;
  Eigen::VectorXd z(p);
  for (int t = 0; t < kTermMonths; ++t) {
    month_sums_general(beta, t, false, ms);
    if (ms.d == 0) continue;
    const EfronSums es = efron_sums(ms.s0, ms.e0, ms.d);
    const Eigen::MatrixXd mt = month_map(t);
    const Eigen::VectorXd w = mt.transpose() * beta;
    const Eigen::VectorXd abar = mt * ((ms.s1 * es.inv - ms.e1 * es.f_inv) / ms.d);
    const double a0 = es.inv;
    const Eigen::VectorXd a1 = mt * (ms.s1 * es.inv2 - ms.e1 * es.f_inv2);
    const double b0 = es.inv - es.f_inv;
    const Eigen::VectorXd b1 = mt * (ms.s1 * (es.inv2 - es.f_inv2) - ms.e1 * (es.f_inv2 - es.f2_inv2));
    const std::size_t lo = bucket_begin_[2 * t + 1];
    const std::size_t ev_end = bucket_begin_[2 * t + 2];
    for (std::size_t s = lo; s < n; ++s) {
      const auto row = x_.row(static_cast<Eigen::Index>(s));
      const double e = std::exp(row.dot(w) - ms.log_scale);
      z.head(p1) = row.transpose();
      for (std::size_t k = 0; k < interactions_.size(); ++k) {
        z[p1 + static_cast<Eigen::Index>(k)] =
            row[static_cast<Eigen::Index>(interactions_[k].main)] * time_basis_(t, interactions_[k].time);
      }
      auto r = sorted.row(static_cast<Eigen::Index>(s));
      if (s < ev_end) {
        r += (z - abar - e * (z * b0 - b1)).transpose();
      } else {
        r -= (e * (z * a0 - a1)).transpose();
      }
    }
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), p);
  for (std::size_t s = 0; s < n; ++s) out.row(static_cast<Eigen::Index>(order_[s])) = sorted.row(static_cast<Eigen::Index>(s));
  return out;
}

CoxProblem::Schoenfeld CoxProblem::schoenfeld_residuals(const Eigen::VectorXd& beta) const {
  Schoenfeld out;
  out.residuals.resize(static_cast<Eigen::Index>(n_events_), static_cast<Eigen::Index>(size()));
  Eigen::Index k = 0;
  for (const EventMonth& em : event_months(beta)) {
    const Eigen::MatrixXd mt = month_map(em.month);
    for (std::size_t s = bucket_begin_[2 * em.month + 1]; s < bucket_begin_[2 * em.month + 2]; ++s) {
      out.residuals.row(k++) = (mt * x_.row(static_cast<Eigen::Index>(s)).transpose() - em.mean).transpose();
      out.month.push_back(em.month);
      out.rows.push_back(order_[s]);
    }
  }
  return out;
}

std::vector<std::pair<int, Eigen::MatrixXd>> CoxProblem::month_information(const Eigen::VectorXd& beta) const {
  std::vector<std::pair<int, Eigen::MatrixXd>> out;
  MonthSums ms;
  for (int t = 0; t < kTermMonths; ++t) {
    month_sums_general(beta, t, true, ms);
    if (ms.d == 0) continue;
    const EfronSums es = efron_sums(ms.s0, ms.e0, ms.d);
    Eigen::MatrixXd h = ms.s2 * es.inv - ms.e2 * es.f_inv;
    h.noalias() -= ms.s1 * ms.s1.transpose() * es.inv2;
    h.noalias() += (ms.s1 * ms.e1.transpose() + ms.e1 * ms.s1.transpose()) * es.f_inv2;
    h.noalias() -= ms.e1 * ms.e1.transpose() * es.f2_inv2;
    const Eigen::MatrixXd mt = month_map(t);
    out.emplace_back(t, mt * h * mt.transpose());
  }
  return out;
}

namespace {

void rank_check(const Eigen::MatrixXd& info, const std::vector<std::string>& names) {
  const Eigen::Index p = info.rows();
  const double scale = std::max(info.diagonal().maxCoeff(), std::numeric_limits<double>::min());
  std::vector<Eigen::Index> kept;
  std::vector<std::string> problems;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double djj = info(j, j);
    if (djj <= 1e-12 * scale) {
      problems.push_back("column '" + names[static_cast<std::size_t>(j)] + "' has no variation within risk sets");
      continue;
    }
    double resid = djj;
    Eigen::VectorXd coef;
    if (!kept.empty()) {
      const auto k = static_cast<Eigen::Index>(kept.size());
      Eigen::MatrixXd ikk(k, k);
      Eigen::VectorXd ikj(k);
      for (Eigen::Index a = 0; a < k; ++a) {
        ikj[a] = info(kept[static_cast<std::size_t>(a)], j);
        for (Eigen::Index b = 0; b < k; ++b) ikk(a, b) = info(kept[static_cast<std::size_t>(a)], kept[static_cast<std::size_t>(b)]);
      }
      coef = ikk.ldlt().solve(ikj);
      resid = djj - ikj.dot(coef);
    }
    if (resid <= 1e-9 * djj) {
      std::vector<std::string> partners;
      for (Eigen::Index a = 0; a < coef.size(); ++a) {
        if (std::abs(coef[a]) > 1e-6) partners.push_back(names[static_cast<std::size_t>(kept[static_cast<std::size_t>(a)])]);
      }
      problems.push_back("column '" + names[static_cast<std::size_t>(j)] + "' is collinear with " + join_names(partners));
      continue;
    }
    kept.push_back(j);
  }
  if (!problems.empty()) {
    std::string msg = "design is rank deficient: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw RankDeficient(msg);
  }
}

}  // namespace

void CoxProblem::check_rank() const {
  rank_check(evaluate(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size()))).information, names_);
}

CoxFit newton_fit(const CoxProblem& problem, const CoxFitOptions& options) {
  if (problem.distinct_event_times() < 2) throw InvalidInput("cox fit needs at least two distinct event times");
  const auto p = static_cast<Eigen::Index>(problem.size());
  CoxFit fit;
  fit.beta = Eigen::VectorXd::Zero(p);
  CoxProblem::Evaluation ev = problem.evaluate(fit.beta);
  rank_check(ev.information, problem.column_names());
  fit.loglik_trace.push_back(ev.loglik);

  bool converged = false;
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    fit.iterations = iter;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.information);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      throw ConvergenceError("information matrix is not positive definite at iteration " + std::to_string(iter));
    }
    const Eigen::VectorXd delta = ldlt.solve(ev.score);
    double step = 1.0;
    Eigen::VectorXd candidate;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving, step *= 0.5) {
      candidate = fit.beta + step * delta;
      const double ll = problem.evaluate(candidate, false).loglik;
      if (std::isfinite(ll) && ll >= ev.loglik) {
        accepted = true;
        break;
      }
    }
    const double previous = ev.loglik;
    if (!accepted) {
      // No ascent direction left within floating-point resolution.
      converged = true;
      break;
    }
    fit.beta = candidate;
    ev = problem.evaluate(fit.beta);
    fit.loglik_trace.push_back(ev.loglik);
    if (std::abs(ev.loglik - previous) <= options.tolerance * std::abs(previous)) {
      converged = true;
      break;
    }
  }
  fit.loglik = ev.loglik;
  fit.information = ev.information;
  fit.gradient_norm = ev.score.lpNorm<Eigen::Infinity>();
  if (!converged) {
    std::ostringstream msg;
    msg << "cox fit did not converge after " << options.max_iterations << " iterations; gradient norm "
        << fit.gradient_norm;
    throw ConvergenceError(msg.str());
  }
  return fit;
}

Eigen::MatrixXd robust_covariance(const CoxProblem& problem, const CoxFit& fit) {
  const Eigen::MatrixXd r = problem.score_residuals(fit.beta);
  const auto p = fit.information.rows();
  const Eigen::MatrixXd inv = fit.information.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  Eigen::MatrixXd v = inv * (r.transpose() * r) * inv;
  return 0.5 * (v + v.transpose());
}

// ---------------------------------------------------------------------------
// Fitted model

Eigen::VectorXd FittedHazardModel::beta_main() const {
  return beta.head(static_cast<Eigen::Index>(design.main_size()));
}

Eigen::VectorXd FittedHazardModel::beta_time() const {
  return beta.tail(static_cast<Eigen::Index>(design.interactions().size()));
}

double FittedHazardModel::linear_predictor_main(const Eigen::Ref<const Eigen::VectorXd>& main, int month) const {
  const auto p1 = static_cast<Eigen::Index>(design.main_size());
  double eta = beta.head(p1).dot(main);
  const auto& inter = design.interactions();
  const auto& f = design.time_basis();
  for (std::size_t k = 0; k < inter.size(); ++k) {
    eta += beta[p1 + static_cast<Eigen::Index>(k)] * main[static_cast<Eigen::Index>(inter[k].main)] * f(month, inter[k].time);
  }
  return eta;
}

double FittedHazardModel::linear_predictor(const Eigen::Ref<const Eigen::VectorXd>& raw, int month) const {
  return linear_predictor_main(design.expand(raw), month);
}

double FittedHazardModel::hazard(const Eigen::Ref<const Eigen::VectorXd>& raw, int month) const {
  if (month < 0 || month >= kTermMonths) throw InvalidInput("hazard month must lie in 0..11");
  return std::clamp(baseline[static_cast<std::size_t>(month)] * std::exp(linear_predictor(raw, month)), 0.0, 1.0);
}

HazardCurve FittedHazardModel::hazard_curve_main(const Eigen::Ref<const Eigen::VectorXd>& main) const {
  HazardCurve h{};
  for (int t = 0; t < kTermMonths; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    h[ti] = baseline[ti] > 0.0 ? std::clamp(baseline[ti] * std::exp(linear_predictor_main(main, t)), 0.0, 1.0) : 0.0;
  }
  return h;
}

HazardCurve FittedHazardModel::hazard_curve(const Eigen::Ref<const Eigen::VectorXd>& raw) const {
  return hazard_curve_main(design.expand(raw));
}

CoxProblem make_cox_problem(const HazardDesign& design, std::span<const SurvivalSample> samples) {
  const auto width = static_cast<Eigen::Index>(design.schema().size());
  RowMatrix raw(static_cast<Eigen::Index>(samples.size()), width);
  std::vector<int> time(samples.size());
  std::vector<std::uint8_t> event(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].covariates.size() != width) throw InvalidInput("survival sample has the wrong number of covariates");
    raw.row(static_cast<Eigen::Index>(i)) = samples[i].covariates.transpose();
    time[i] = samples[i].observation_time;
    event[i] = samples[i].censored ? 0 : 1;
  }
  return CoxProblem(design.expand_rows(raw), std::move(time), std::move(event), design.interactions(),
                    design.time_basis(), design.column_names());
}

FittedHazardModel fit_hazard_model(std::span<const SurvivalSample> samples, const HazardDesign& design,
                                   const HazardFitOptions& options) {
  const CoxProblem problem = make_cox_problem(design, samples);
  const CoxFit fit = newton_fit(problem, options.newton);
  FittedHazardModel model;
  model.design = design;
  model.beta = fit.beta;
  model.baseline = problem.baseline_hazard(fit.beta);
  const auto p = fit.information.rows();
  model.covariance = fit.information.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  model.covariance = 0.5 * (model.covariance + model.covariance.transpose()).eval();
  if (options.robust) model.robust_covariance = robust_covariance(problem, fit);
  model.loglik = fit.loglik;
  model.iterations = fit.iterations;
  model.gradient_norm = fit.gradient_norm;
  model.samples = samples.size();
  model.events = problem.events();
  if (options.concordance) {
    try {
      model.concordance = concordance(model, samples);
    } catch (const InvalidInput&) {
      model.concordance.reset();
    }
  }
  return model;
}

FittedHazardModel fit_hazard_model(std::span<const SurvivalSample> samples, const FeatureSchema& schema,
                                   const DesignConfig& config, const HazardFitOptions& options) {
  if (samples.empty()) throw InvalidInput("no survival samples to fit");
  RowMatrix raw(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(schema.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (static_cast<std::size_t>(samples[i].covariates.size()) != schema.size()) {
      throw InvalidInput("survival sample has the wrong number of covariates");
    }
    raw.row(static_cast<Eigen::Index>(i)) = samples[i].covariates.transpose();
  }
  return fit_hazard_model(samples, HazardDesign::build(schema, raw, config), options);
}

RepaymentOutcome predict_repayment(const HazardCurve& curve, double rate, int start_month, Stream& rng,
                                   double multiplier) {
  if (start_month < 0 || start_month > kTermMonths) throw InvalidInput("start month must lie in 0..12");
  if (!(multiplier >= 1.0)) throw InvalidInput("hazard multiplier must be at least 1");
  for (int t = start_month; t < kTermMonths; ++t) {
    const double h = std::min(1.0, curve[static_cast<std::size_t>(t)] * multiplier);
    if (rng.uniform() < h) return outcome_from_default_time(t, rate);
  }
  return outcome_from_default_time(kTermMonths, rate);
}

RepaymentOutcome predict_repayment(const FittedHazardModel& model, const Eigen::Ref<const Eigen::VectorXd>& raw,
                                   double rate, int start_month, Stream& rng, double multiplier) {
  return predict_repayment(model.hazard_curve(raw), rate, start_month, rng, multiplier);
}

double default_probability(const HazardCurve& curve) {
  double survive = 1.0;
  for (const double h : curve) survive *= 1.0 - h;
  return 1.0 - survive;
}

double concordance_index(std::span<const double> risk, std::span<const int> time, std::span<const std::uint8_t> event) {
  const std::size_t n = risk.size();
  if (time.size() != n || event.size() != n) throw InvalidInput("concordance: inconsistent input sizes");
  double concordant = 0.0;
  double pairs = 0.0;
  std::vector<double> later;
  for (int t = 0; t < kTermMonths; ++t) {
    later.clear();
    bool any_event = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (time[j] > t) later.push_back(risk[j]);
      if (time[j] == t && event[j]) any_event = true;
    }
    if (!any_event || later.empty()) continue;
    std::sort(later.begin(), later.end());
    for (std::size_t i = 0; i < n; ++i) {
      if (time[i] != t || !event[i]) continue;
      const auto lo = std::lower_bound(later.begin(), later.end(), risk[i]);
      const auto hi = std::upper_bound(lo, later.end(), risk[i]);
      concordant += static_cast<double>(lo - later.begin()) + 0.5 * static_cast<double>(hi - lo);
      pairs += static_cast<double>(later.size());
    }
  }
  if (pairs == 0.0) throw InvalidInput("concordance: no comparable pairs");
  return concordant / pairs;
}

double concordance(const FittedHazardModel& model, std::span<const SurvivalSample> samples) {
  std::vector<double> risk(samples.size());
  std::vector<int> time(samples.size());
  std::vector<std::uint8_t> event(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    risk[i] = default_probability(model.hazard_curve(samples[i].covariates));
    time[i] = samples[i].observation_time;
    event[i] = samples[i].censored ? 0 : 1;
  }
  return concordance_index(risk, time, event);
}

}  // namespace disparity
