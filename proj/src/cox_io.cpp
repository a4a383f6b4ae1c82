#include "disparity/cox_io.hpp"

#include <fstream>

namespace disparity {

using nlohmann::json;

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index n) {
  if (j.empty()) return {};
  if (static_cast<Eigen::Index>(j.size()) != n) throw InvalidInput("model file: covariance has the wrong size");
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const json& row = j.at(static_cast<std::size_t>(i));
    if (static_cast<Eigen::Index>(row.size()) != n) throw InvalidInput("model file: covariance has the wrong size");
    for (Eigen::Index k = 0; k < n; ++k) m(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
  }
  return m;
}

}  // namespace

json spline_to_json(const SplineSpec& spec) {
  return {{"knots", spec.knots},
          {"boundary", {spec.boundary.first, spec.boundary.second}},
          {"df", spec.df},
          {"center", spec.center}};
}

SplineSpec spline_from_json(const json& j) {
  SplineSpec spec;
  spec.knots = j.at("knots").get<std::vector<double>>();
  const auto b = j.at("boundary").get<std::vector<double>>();
  if (b.size() != 2) throw InvalidInput("model file: spline boundary needs two values");
  spec.boundary = {b[0], b[1]};
  spec.df = j.at("df").get<int>();
  spec.center = j.at("center").get<double>();
  spec.validate();
  return spec;
}

json model_to_json(const FittedHazardModel& model) {
  const HazardDesign& d = model.design;
  const auto names = d.schema().names();
  json splines = json::object();
  for (std::size_t j = 0; j < names.size(); ++j) {
    if (d.feature_splines()[j]) splines[names[j]] = spline_to_json(*d.feature_splines()[j]);
  }
  json interacting = json::array();
  for (const std::size_t j : d.interacting_features()) interacting.push_back(names[j]);
  const auto columns = d.column_names();
  json coefficients = json::array();
  for (std::size_t k = 0; k < columns.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    json c = {{"name", columns[k]},
              {"block", k < d.main_size() ? "main" : "time"},
              {"coef", model.beta[kk]},
              {"se", std::sqrt(model.covariance(kk, kk))}};
    if (model.robust_covariance.size() > 0) c["robust_se"] = std::sqrt(model.robust_covariance(kk, kk));
    coefficients.push_back(std::move(c));
  }
  json out = {
      {"schema", "disparity.hazard_model"},
      {"version", kHazardModelVersion},
      {"provinces", d.schema().provinces},
      {"features", names},
      {"splines", splines},
      {"time_spline", spline_to_json(d.time_spline())},
      {"time_interactions", interacting},
      {"coefficients", coefficients},
      {"baseline_hazard", model.baseline},
      {"covariance", matrix_to_json(model.covariance)},
      {"robust_covariance", matrix_to_json(model.robust_covariance)},
      {"loglik", model.loglik},
      {"iterations", model.iterations},
      {"gradient_norm", model.gradient_norm},
      {"samples", model.samples},
      {"events", model.events},
  };
  out["concordance"] = model.concordance ? json(*model.concordance) : json(nullptr);
  return out;
}

FittedHazardModel model_from_json(const json& j) {
  if (j.value("schema", "") != "disparity.hazard_model") throw InvalidInput("not a hazard model file");
  if (j.at("version").get<int>() != kHazardModelVersion) {
    throw InvalidInput("unsupported hazard model version " + std::to_string(j.at("version").get<int>()));
  }
  FeatureSchema schema;
  schema.provinces = j.at("provinces").get<int>();
  if (schema.provinces < 1) throw InvalidInput("model file: provinces must be positive");
  const auto names = schema.names();
  if (j.at("features").get<std::vector<std::string>>() != names) {
    throw InvalidInput("model file: feature list does not match the loan schema");
  }
  std::vector<std::optional<SplineSpec>> splines(names.size());
  for (const auto& [name, spec] : j.at("splines").items()) splines[schema.index_of(name)] = spline_from_json(spec);
  std::vector<std::size_t> interacting;
  for (const auto& name : j.at("time_interactions")) interacting.push_back(schema.index_of(name.get<std::string>()));

  FittedHazardModel model;
  model.design = HazardDesign::from_parts(schema, std::move(splines), spline_from_json(j.at("time_spline")),
                                          std::move(interacting));
  const auto p = static_cast<Eigen::Index>(model.design.size());
  const json& coefs = j.at("coefficients");
  if (static_cast<Eigen::Index>(coefs.size()) != p) throw InvalidInput("model file: wrong number of coefficients");
  const auto columns = model.design.column_names();
  model.beta.resize(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    const json& c = coefs.at(static_cast<std::size_t>(k));
    if (c.at("name").get<std::string>() != columns[static_cast<std::size_t>(k)]) {
      throw InvalidInput("model file: coefficient " + std::to_string(k) + " is not '" + columns[static_cast<std::size_t>(k)] + "'");
    }
    model.beta[k] = c.at("coef").get<double>();
  }
  const auto h = j.at("baseline_hazard").get<std::vector<double>>();
  if (h.size() != kTermMonths) throw InvalidInput("model file: baseline hazard needs 12 months");
  for (std::size_t t = 0; t < h.size(); ++t) {
    if (!(h[t] >= 0.0 && h[t] <= 1.0)) throw InvalidInput("model file: baseline hazard outside [0, 1]");
    model.baseline[t] = h[t];
  }
  model.covariance = matrix_from_json(j.at("covariance"), p);
  model.robust_covariance = matrix_from_json(j.at("robust_covariance"), p);
  model.loglik = j.at("loglik").get<double>();
  model.iterations = j.at("iterations").get<int>();
  model.gradient_norm = j.at("gradient_norm").get<double>();
  model.samples = j.at("samples").get<std::size_t>();
  model.events = j.at("events").get<std::size_t>();
  if (!j.at("concordance").is_null()) model.concordance = j.at("concordance").get<double>();
  return model;
}

void write_model(const FittedHazardModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write model file " + path.string());
  out << model_to_json(model).dump(2) << '\n';
}

FittedHazardModel read_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open model file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidInput("model file " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    return model_from_json(j);
  } catch (const json::exception& e) {
    throw InvalidInput("model file " + path.string() + ": " + e.what());
  }
}

}  // namespace disparity
