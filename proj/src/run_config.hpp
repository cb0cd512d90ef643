#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpn_model.hpp"
#include "dataio.hpp"
#include "postprocess.hpp"
#include "preprocess.hpp"

namespace cpn {

struct Paths {
  std::filesystem::path output_dir = "cpn_run";
  // Empty paths resolve to the conventional file names inside output_dir.
  std::filesystem::path annotations;
  std::filesystem::path features_dir;
  std::filesystem::path class_scores;
  std::filesystem::path model;
  std::filesystem::path proposals;
  std::filesystem::path detections;

  std::filesystem::path annotations_or_default() const;
  std::filesystem::path features_dir_or_default() const;
  std::filesystem::path class_scores_or_default() const;
  std::filesystem::path model_or_default() const;
  std::filesystem::path proposals_or_default() const;
  std::filesystem::path detections_or_default() const;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  Paths paths;
  dataio::SynthConfig synth;
  model::ModelConfig model;  // in_channels is taken from the data at train time
  preprocess::PreprocessConfig preprocess;
  post::PostprocessConfig postprocess;
  dataio::Subset infer_subset = dataio::Subset::kValidation;
  dataio::Subset eval_subset = dataio::Subset::kValidation;
  std::size_t eval_max_an = 100;
  std::vector<std::filesystem::path> ensemble_inputs;
  std::vector<double> ensemble_weights;
};

/// Every accepted key with its default value.
nlohmann::json default_config_json();

/// Overlays `user` on the defaults. Unknown keys fail with kValidation naming
/// the dotted key.
nlohmann::json merge_config(const nlohmann::json& user);

/// Sets one dotted key (e.g. "mask.p") from a JSON-encoded value; the key must
/// already exist.
void set_config_value(nlohmann::json& doc, const std::string& dotted_key,
                      const std::string& json_value);

RunConfig run_config_from_json(const nlohmann::json& merged);
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace cpn
