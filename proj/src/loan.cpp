#include "disparity/loan.hpp"

#include <algorithm>
#include <cmath>

namespace disparity {

std::string_view to_string(Gender g) { return g == Gender::male ? "m" : "f"; }

Gender parse_gender(std::string_view text) {
  if (text == "m" || text == "M") return Gender::male;
  if (text == "f" || text == "F") return Gender::female;
  throw InvalidInput("gender must be 'm' or 'f', got '" + std::string(text) + "'");
}

RepaymentOutcome outcome_from_default_time(int default_time, double rate) {
  RepaymentOutcome out;
  out.default_time = std::clamp(default_time, 0, kTermMonths);
  out.repayment_ratio = static_cast<double>(out.default_time) / kTermMonths;
  out.return_rate = out.repayment_ratio * (1.0 + rate);
  return out;
}

ObservedSpell observed_spell(const PaymentHistory& payments) {
  ObservedSpell spell;
  for (const PaymentStatus s : payments) {
    if (s == PaymentStatus::paid) {
      ++spell.paid_months;
      continue;
    }
    spell.defaulted = s == PaymentStatus::defaulted;
    break;
  }
  return spell;
}

RepaymentOutcome derive_outcome(const LoanRecord& record) {
  if (!record.funded || !record.payments) throw InvalidInput("derive_outcome needs a funded loan: " + record.id);
  const auto& p = *record.payments;
  if (std::any_of(p.begin(), p.end(), [](PaymentStatus s) { return s == PaymentStatus::unobserved; })) {
    throw RightCensored();
  }
  const ObservedSpell spell = observed_spell(p);
  return outcome_from_default_time(spell.defaulted ? spell.paid_months : kTermMonths, record.rate);
}

namespace {

bool pays_after_default(const PaymentHistory& p) {
  bool seen_default = false;
  for (const PaymentStatus s : p) {
    if (s == PaymentStatus::defaulted) seen_default = true;
    if (seen_default && s == PaymentStatus::paid) return true;
  }
  return false;
}

// Everything after the first unobserved month becomes unobserved.
bool truncate_at_gap(PaymentHistory& p) {
  bool changed = false;
  bool gap = false;
  for (PaymentStatus& s : p) {
    if (gap && s != PaymentStatus::unobserved) {
      s = PaymentStatus::unobserved;
      changed = true;
    }
    if (s == PaymentStatus::unobserved) gap = true;
  }
  return changed;
}

// Members winsorized by preprocessing.
constexpr std::array<double Covariates::*, 6> kWinsorized = {
    &Covariates::amount,      &Covariates::age,         &Covariates::past_ontime,
    &Covariates::past_late,   &Covariates::past_failed, &Covariates::past_aborted,
};

struct Bounds {
  double lo;
  double hi;
};

// Order-statistic bounds: the k-th smallest and k-th largest values with
// k = ceil(n q). Re-applying the clamp leaves these order statistics fixed.
Bounds winsor_bounds(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * q - 1e-12));
  k = std::clamp<std::size_t>(k, 1, n);
  return {values[k - 1], values[n - k]};
}

}  // namespace

PreprocessResult preprocess(std::span<const LoanRecord> records, const PreprocessConfig& config) {
  if (records.empty()) throw InvalidInput("no records");
  if (!(config.winsor_quantile >= 0.0 && config.winsor_quantile <= 0.05)) {
    throw InvalidInput("winsor_quantile must lie in [0, 0.05]");
  }
  if (!(config.rate_floor >= 0.0 && config.rate_floor < 1.0)) throw InvalidInput("rate_floor must lie in [0, 1)");

  PreprocessResult result;
  DropReport& report = result.report;
  report.input = records.size();

  // The rate floor is applied before winsorizing so that the quantiles, and
  // therefore the whole procedure, are idempotent.
  std::vector<LoanRecord> kept;
  kept.reserve(records.size());
  for (const LoanRecord& r : records) {
    if (r.funded != r.payments.has_value()) {
      throw InvalidInput("loan " + r.id + ": payments must be present iff the loan is funded");
    }
    if (r.payments && pays_after_default(*r.payments)) {
      ++report.pay_after_default;
      continue;
    }
    if (r.rate < config.rate_floor) {
      ++report.below_rate_floor;
      continue;
    }
    LoanRecord copy = r;
    if (copy.payments && truncate_at_gap(*copy.payments)) ++report.censored_gaps;
    kept.push_back(std::move(copy));
  }

  if (config.winsor_quantile > 0.0 && !kept.empty()) {
    std::array<Bounds, kWinsorized.size()> bounds{};
    for (std::size_t j = 0; j < kWinsorized.size(); ++j) {
      std::vector<double> values;
      values.reserve(kept.size());
      for (const LoanRecord& r : kept) values.push_back(r.x.*kWinsorized[j]);
      bounds[j] = winsor_bounds(std::move(values), config.winsor_quantile);
    }
    std::vector<LoanRecord> winsorized;
    winsorized.reserve(kept.size());
    for (LoanRecord& r : kept) {
      bool outside = false;
      for (std::size_t j = 0; j < kWinsorized.size(); ++j) {
        double& v = r.x.*kWinsorized[j];
        if (v < bounds[j].lo || v > bounds[j].hi) {
          outside = true;
          v = std::clamp(v, bounds[j].lo, bounds[j].hi);
        }
      }
      if (outside && config.winsor_mode == WinsorMode::drop) {
        ++report.winsor_dropped;
        continue;
      }
      if (outside) ++report.winsor_clamped;
      winsorized.push_back(std::move(r));
    }
    kept = std::move(winsorized);
  }

  report.output = kept.size();
  result.records = std::move(kept);
  return result;
}

// ---------------------------------------------------------------------------
// Feature schema

namespace {

const std::vector<std::string> kBinaryNames = {"male", "married", "repeated", "app", "express"};

}  // namespace

const std::vector<std::string>& continuous_feature_names() {
  static const std::vector<std::string> names = {"age",        "past_failed", "past_aborted", "past_ontime",
                                                 "past_late",  "amount",      "rate"};
  return names;
}

FeatureSchema FeatureSchema::from_records(std::span<const LoanRecord> records) {
  FeatureSchema schema;
  for (const LoanRecord& r : records) schema.provinces = std::max(schema.provinces, r.x.province + 1);
  return schema;
}

std::size_t FeatureSchema::size() const {
  return kBinaryNames.size() + (kEmploymentLevels - 1) + (kEducationLevels - 1) +
         static_cast<std::size_t>(provinces - 1) + continuous_feature_names().size();
}

std::vector<std::string> FeatureSchema::names() const {
  std::vector<std::string> out = kBinaryNames;
  for (int k = 1; k < kEmploymentLevels; ++k) out.push_back("employment_" + std::to_string(k));
  for (int k = 1; k < kEducationLevels; ++k) out.push_back("education_" + std::to_string(k));
  for (int k = 1; k < provinces; ++k) out.push_back("province_" + std::to_string(k));
  for (const auto& c : continuous_feature_names()) out.push_back(c);
  return out;
}

std::size_t FeatureSchema::index_of(std::string_view name) const {
  const auto all = names();
  const auto it = std::find(all.begin(), all.end(), name);
  if (it == all.end()) throw InvalidInput("unknown feature '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - all.begin());
}

bool FeatureSchema::is_continuous(std::size_t index) const {
  return index >= size() - continuous_feature_names().size() && index < size();
}

void FeatureSchema::fill(const LoanRecord& r, Eigen::Ref<Eigen::VectorXd> out) const {
  if (static_cast<std::size_t>(out.size()) != size()) throw InvalidInput("feature buffer has wrong size");
  if (r.x.employment < 0 || r.x.employment >= kEmploymentLevels || r.x.education < 0 ||
      r.x.education >= kEducationLevels || r.x.province < 0 || r.x.province >= provinces) {
    throw InvalidInput("loan " + r.id + ": categorical covariate out of range");
  }
  out.setZero();
  Eigen::Index k = 0;
  out[k++] = r.gender == Gender::male ? 1.0 : 0.0;
  out[k++] = r.x.married ? 1.0 : 0.0;
  out[k++] = r.x.repeated ? 1.0 : 0.0;
  out[k++] = r.x.app ? 1.0 : 0.0;
  out[k++] = r.x.express ? 1.0 : 0.0;
  if (r.x.employment > 0) out[k + r.x.employment - 1] = 1.0;
  k += kEmploymentLevels - 1;
  if (r.x.education > 0) out[k + r.x.education - 1] = 1.0;
  k += kEducationLevels - 1;
  if (r.x.province > 0) out[k + r.x.province - 1] = 1.0;
  k += provinces - 1;
  out[k++] = r.x.age;
  out[k++] = r.x.past_failed;
  out[k++] = r.x.past_aborted;
  out[k++] = r.x.past_ontime;
  out[k++] = r.x.past_late;
  out[k++] = r.x.amount;
  out[k++] = r.rate;
}

Eigen::VectorXd FeatureSchema::features(const LoanRecord& record) const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(size()));
  fill(record, v);
  return v;
}

std::vector<SurvivalSample> encode_survival(std::span<const LoanRecord> records, const FeatureSchema& schema) {
  std::vector<SurvivalSample> out;
  out.reserve(records.size());
  for (const LoanRecord& r : records) {
    if (!r.funded || !r.payments) throw InvalidInput("encode_survival needs funded loans; " + r.id + " is not");
    if (pays_after_default(*r.payments)) throw InvalidInput("loan " + r.id + ": payment after default");
    const ObservedSpell spell = observed_spell(*r.payments);
    SurvivalSample s;
    s.covariates = schema.features(r);
    s.gender = r.gender;
    s.observation_time = spell.paid_months;
    s.censored = !spell.defaulted;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace disparity
