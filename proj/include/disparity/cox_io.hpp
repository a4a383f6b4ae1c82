#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "disparity/cox.hpp"

namespace disparity {

inline constexpr int kHazardModelVersion = 1;

nlohmann::json spline_to_json(const SplineSpec& spec);
SplineSpec spline_from_json(const nlohmann::json& j);

nlohmann::json model_to_json(const FittedHazardModel& model);
FittedHazardModel model_from_json(const nlohmann::json& j);

void write_model(const FittedHazardModel& model, const std::filesystem::path& path);
FittedHazardModel read_model(const std::filesystem::path& path);

}  // namespace disparity
