#include "disparity/design.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace disparity {

namespace {

std::string block_name(const std::string& feature, bool splined) {
  for (const char* prefix : {"employment_", "education_", "province_"}) {
    const std::string p(prefix);
    if (feature.rfind(p, 0) == 0) return p.substr(0, p.size() - 1);
  }
  return splined ? "ns(" + feature + ")" : feature;
}

}  // namespace

HazardDesign HazardDesign::build(const FeatureSchema& schema, const RowMatrix& raw, const DesignConfig& config) {
  if (static_cast<std::size_t>(raw.cols()) != schema.size()) throw InvalidInput("raw feature matrix has wrong width");
  if (raw.rows() == 0) throw InvalidInput("cannot build a design from zero loans");
  const auto names = schema.names();
  for (const auto& [name, df] : config.df_overrides) {
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw InvalidInput("df override for unknown feature '" + name + "'");
    }
    if (df < 1) throw InvalidInput("df override for '" + name + "' must be positive");
  }

  HazardDesign d;
  d.schema_ = schema;
  d.splines_.resize(schema.size());
  for (std::size_t j = 0; j < schema.size(); ++j) {
    if (!schema.is_continuous(j)) continue;
    int df = config.default_df;
    if (const auto it = config.df_overrides.find(names[j]); it != config.df_overrides.end()) df = it->second;
    std::vector<double> values(raw.col(static_cast<Eigen::Index>(j)).begin(), raw.col(static_cast<Eigen::Index>(j)).end());
    std::vector<double> distinct = values;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    // Sparse counts cannot carry many knots; shrink df to what the data supports.
    df = std::min(df, static_cast<int>(distinct.size()) - 1);
    if (df >= 2) d.splines_[j] = make_spline_spec(values, df);
  }

  std::vector<double> months(kTermMonths);
  std::iota(months.begin(), months.end(), 0.0);
  if (config.time_df >= 2) {
    d.time_spline_ = make_spline_spec(months, config.time_df);
  } else {
    d.time_spline_ = make_spline_spec(std::vector<double>{}, {0.0, kTermMonths - 1.0}, 5.5);
  }

  std::set<std::size_t> inter;
  for (const auto& name : config.time_interactions) {
    if (name == "*") {
      for (std::size_t j = 0; j < schema.size(); ++j) inter.insert(j);
    } else {
      inter.insert(schema.index_of(name));
    }
  }
  d.interacting_.assign(inter.begin(), inter.end());
  d.finalize();
  return d;
}

HazardDesign HazardDesign::from_parts(FeatureSchema schema, std::vector<std::optional<SplineSpec>> feature_splines,
                                      SplineSpec time_spline, std::vector<std::size_t> interacting_features) {
  if (feature_splines.size() != schema.size()) throw InvalidInput("spline list does not match the feature schema");
  HazardDesign d;
  d.schema_ = schema;
  d.splines_ = std::move(feature_splines);
  for (const auto& s : d.splines_) {
    if (s) s->validate();
  }
  time_spline.validate();
  d.time_spline_ = std::move(time_spline);
  d.interacting_ = std::move(interacting_features);
  for (const std::size_t j : d.interacting_) {
    if (j >= d.schema_.size()) throw InvalidInput("interaction feature index out of range");
  }
  d.finalize();
  return d;
}

void HazardDesign::finalize() {
  const auto names = schema_.names();
  main_names_.clear();
  main_blocks_.clear();
  feature_offset_.assign(names.size(), 0);
  feature_width_.assign(names.size(), 0);
  for (std::size_t j = 0; j < names.size(); ++j) {
    feature_offset_[j] = main_names_.size();
    if (splines_[j]) {
      for (int k = 1; k <= splines_[j]->df; ++k) {
        main_names_.push_back("ns(" + names[j] + ")" + std::to_string(k));
        main_blocks_.push_back(block_name(names[j], true));
      }
    } else {
      main_names_.push_back(names[j]);
      main_blocks_.push_back(block_name(names[j], false));
    }
    feature_width_[j] = main_names_.size() - feature_offset_[j];
  }
  interactions_.clear();
  for (const std::size_t j : interacting_) {
    for (std::size_t c = 0; c < feature_width_[j]; ++c) {
      for (int m = 0; m < time_spline_.df; ++m) interactions_.push_back({feature_offset_[j] + c, m});
    }
  }
  time_basis_.resize(kTermMonths, time_spline_.df);
  for (int t = 0; t < kTermMonths; ++t) time_basis_.row(t) = evaluate(time_spline_, t).transpose();
}

std::vector<std::string> HazardDesign::column_names() const {
  std::vector<std::string> out = main_names_;
  for (const auto& ic : interactions_) out.push_back(main_names_[ic.main] + ":ns(t)" + std::to_string(ic.time + 1));
  return out;
}

std::vector<std::string> HazardDesign::column_blocks() const {
  std::vector<std::string> out = main_blocks_;
  for (const auto& ic : interactions_) out.push_back(main_blocks_[ic.main] + ":time");
  return out;
}

std::pair<std::size_t, std::size_t> HazardDesign::main_columns_of(std::size_t feature) const {
  return {feature_offset_.at(feature), feature_width_.at(feature)};
}

void HazardDesign::expand(const Eigen::Ref<const Eigen::VectorXd>& raw, Eigen::Ref<Eigen::VectorXd> main) const {
  for (std::size_t j = 0; j < splines_.size(); ++j) {
    const auto off = static_cast<Eigen::Index>(feature_offset_[j]);
    if (splines_[j]) {
      evaluate_into(*splines_[j], raw[static_cast<Eigen::Index>(j)], main.segment(off, splines_[j]->df));
    } else {
      main[off] = raw[static_cast<Eigen::Index>(j)];
    }
  }
}

Eigen::VectorXd HazardDesign::expand(const Eigen::Ref<const Eigen::VectorXd>& raw) const {
  Eigen::VectorXd main(static_cast<Eigen::Index>(main_size()));
  expand(raw, main);
  return main;
}

RowMatrix HazardDesign::expand_rows(const RowMatrix& raw) const {
  RowMatrix out(raw.rows(), static_cast<Eigen::Index>(main_size()));
  Eigen::VectorXd buf(static_cast<Eigen::Index>(main_size()));
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    expand(raw.row(i).transpose(), buf);
    out.row(i) = buf.transpose();
  }
  return out;
}

Eigen::VectorXd HazardDesign::at_month(const Eigen::Ref<const Eigen::VectorXd>& main, int month) const {
  Eigen::VectorXd z(static_cast<Eigen::Index>(size()));
  z.head(main.size()) = main;
  for (std::size_t k = 0; k < interactions_.size(); ++k) {
    const auto& ic = interactions_[k];
    z[main.size() + static_cast<Eigen::Index>(k)] = main[static_cast<Eigen::Index>(ic.main)] * time_basis_(month, ic.time);
  }
  return z;
}

RowMatrix raw_feature_matrix(const FeatureSchema& schema, std::span<const LoanRecord> records) {
  RowMatrix raw(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(schema.size()));
  Eigen::VectorXd buf(static_cast<Eigen::Index>(schema.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    schema.fill(records[i], buf);
    raw.row(static_cast<Eigen::Index>(i)) = buf.transpose();
  }
  return raw;
}

}  // namespace disparity
