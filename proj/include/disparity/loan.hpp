#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "disparity/error.hpp"

namespace disparity {

inline constexpr int kTermMonths = 12;
// Employment and education categories are coded 0..4 with 0 = unknown.
inline constexpr int kEmploymentLevels = 5;
inline constexpr int kEducationLevels = 5;

enum class Gender : std::uint8_t { male, female };

enum class PaymentStatus : std::uint8_t { paid, defaulted, unobserved };

using PaymentHistory = std::array<PaymentStatus, kTermMonths>;

std::string_view to_string(Gender g);
Gender parse_gender(std::string_view text);

struct Covariates {
  bool married = false;
  double age = 0.0;
  bool repeated = false;
  int employment = 0;
  int education = 0;
  double past_failed = 0.0;
  double past_aborted = 0.0;
  double past_ontime = 0.0;
  double past_late = 0.0;
  double amount = 0.0;  // thousand RMB
  bool app = false;
  bool express = false;
  int province = 0;
};

struct LoanRecord {
  std::string id;
  Gender gender = Gender::male;
  Covariates x;
  double rate = 0.0;
  bool funded = false;
  // Present iff funded.
  std::optional<PaymentHistory> payments;
};

// Default time T is the 0-based month of the first defaulted installment;
// kTermMonths encodes "no default within the term" (12+).
struct RepaymentOutcome {
  int default_time = kTermMonths;
  double repayment_ratio = 1.0;
  double return_rate = 0.0;

  bool defaulted() const { return default_time < kTermMonths; }
};

// Repayment ratio and return rate for a given default time.
RepaymentOutcome outcome_from_default_time(int default_time, double rate);

class RightCensored : public Error {
 public:
  RightCensored() : Error("right_censored", "right-censored; outcome undefined, use survival encoding") {}
};

// Requires a funded loan with a fully observed history.
RepaymentOutcome derive_outcome(const LoanRecord& record);

// Number of leading paid months and whether the first non-paid month is a default.
struct ObservedSpell {
  int paid_months = 0;
  bool defaulted = false;
};
ObservedSpell observed_spell(const PaymentHistory& payments);

enum class WinsorMode { clamp, drop };

struct PreprocessConfig {
  double winsor_quantile = 0.005;
  double rate_floor = 0.16;
  WinsorMode winsor_mode = WinsorMode::clamp;
};

struct DropReport {
  std::size_t input = 0;
  std::size_t pay_after_default = 0;
  std::size_t below_rate_floor = 0;
  std::size_t winsor_dropped = 0;   // drop mode only
  std::size_t winsor_clamped = 0;   // loans with at least one clamped covariate
  std::size_t censored_gaps = 0;    // histories truncated at a mid-history gap
  std::size_t output = 0;
};

struct PreprocessResult {
  std::vector<LoanRecord> records;
  DropReport report;
};

PreprocessResult preprocess(std::span<const LoanRecord> records, const PreprocessConfig& config = {});

// Numeric feature layout shared by the survival model, the OLS second stage
// and the synthetic generator. Categorical covariates are expanded to
// indicator columns with category 0 as the reference cell.
struct FeatureSchema {
  int provinces = 1;  // number of province categories (codes 0..provinces-1)

  static FeatureSchema from_records(std::span<const LoanRecord> records);

  std::size_t size() const;
  std::vector<std::string> names() const;
  // Index of a named feature; throws if unknown.
  std::size_t index_of(std::string_view name) const;
  bool is_continuous(std::size_t index) const;

  Eigen::VectorXd features(const LoanRecord& record) const;
  void fill(const LoanRecord& record, Eigen::Ref<Eigen::VectorXd> out) const;
};

// Names of the continuous covariates (spline-transformed in the hazard model).
const std::vector<std::string>& continuous_feature_names();

struct SurvivalSample {
  Eigen::VectorXd covariates;
  int observation_time = 0;  // tau in 0..12
  bool censored = true;      // C
  Gender gender = Gender::male;
};

std::vector<SurvivalSample> encode_survival(std::span<const LoanRecord> records, const FeatureSchema& schema);

}  // namespace disparity
