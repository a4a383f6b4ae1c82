#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "disparity/loan.hpp"
#include "disparity/spline.hpp"

namespace disparity {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DesignConfig {
  int default_df = 4;  // continuous covariates
  int time_df = 3;
  // Per-feature df; 1 means "enter linearly".
  std::map<std::string, int> df_overrides;
  // Raw feature names whose expanded columns interact with f_ns(t). "*" means all.
  std::vector<std::string> time_interactions = {"male"};
};

// One covariate-by-time column: main column `main` times time basis column `time`.
struct InteractionColumn {
  std::size_t main = 0;
  int time = 0;
};

// Maps raw features (FeatureSchema layout) to the hazard model's columns:
// main effects f_ns(X) followed by the time interactions f_ns(X) f_ns(t).
class HazardDesign {
 public:
  HazardDesign() = default;

  // Knots are placed on `raw` (one row per loan, FeatureSchema layout).
  static HazardDesign build(const FeatureSchema& schema, const RowMatrix& raw, const DesignConfig& config);
  // Reassemble from serialized parts.
  static HazardDesign from_parts(FeatureSchema schema, std::vector<std::optional<SplineSpec>> feature_splines,
                                 SplineSpec time_spline, std::vector<std::size_t> interacting_features);

  const FeatureSchema& schema() const { return schema_; }
  const std::vector<std::optional<SplineSpec>>& feature_splines() const { return splines_; }
  const SplineSpec& time_spline() const { return time_spline_; }
  const std::vector<std::size_t>& interacting_features() const { return interacting_; }
  const std::vector<InteractionColumn>& interactions() const { return interactions_; }

  std::size_t main_size() const { return main_names_.size(); }
  std::size_t size() const { return main_names_.size() + interactions_.size(); }

  std::vector<std::string> column_names() const;
  // Covariate block each column belongs to (e.g. "employment", "ns(age)", "male:time").
  std::vector<std::string> column_blocks() const;
  // First main column of each raw feature, and how many columns it expands to.
  std::pair<std::size_t, std::size_t> main_columns_of(std::size_t feature) const;

  void expand(const Eigen::Ref<const Eigen::VectorXd>& raw, Eigen::Ref<Eigen::VectorXd> main) const;
  Eigen::VectorXd expand(const Eigen::Ref<const Eigen::VectorXd>& raw) const;
  RowMatrix expand_rows(const RowMatrix& raw) const;

  // 12 x time_df matrix of f_ns(t), t = 0..11.
  const Eigen::MatrixXd& time_basis() const { return time_basis_; }

  // Full column vector z(t) = [main, main[src] * f(t)] for one month.
  Eigen::VectorXd at_month(const Eigen::Ref<const Eigen::VectorXd>& main, int month) const;

 private:
  void finalize();

  FeatureSchema schema_;
  std::vector<std::optional<SplineSpec>> splines_;
  SplineSpec time_spline_;
  std::vector<std::size_t> interacting_;
  std::vector<InteractionColumn> interactions_;
  std::vector<std::string> main_names_;
  std::vector<std::string> main_blocks_;
  std::vector<std::size_t> feature_offset_;
  std::vector<std::size_t> feature_width_;
  Eigen::MatrixXd time_basis_;
};

// Raw feature matrix for a set of loans.
RowMatrix raw_feature_matrix(const FeatureSchema& schema, std::span<const LoanRecord> records);

}  // namespace disparity
