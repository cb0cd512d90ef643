#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "evalkit.hpp"
#include "run_config.hpp"

namespace cpn::pipeline {

// Each command reads its inputs from cfg.paths, writes into
// cfg.paths.output_dir and returns a JSON summary.

nlohmann::json run_synth(const RunConfig& cfg);
nlohmann::json run_preprocess(const RunConfig& cfg);
nlohmann::json run_train(const RunConfig& cfg);
nlohmann::json run_infer(const RunConfig& cfg);

struct Report {
  nlohmann::json json;
  std::string table;
};

Report run_eval_proposals(const RunConfig& cfg);
Report run_eval_detections(const RunConfig& cfg);
nlohmann::json run_ensemble(const RunConfig& cfg);

/// Loads every training video's features from the features directory.
model::TrainingData load_training_data(const dataio::AnnotationSet& anns,
                                       const std::filesystem::path& features_dir);

/// Proposals (after soft-NMS) and detections for one video.
struct VideoResult {
  std::vector<post::Proposal> proposals;
  std::vector<post::Detection> detections;
};

VideoResult postprocess_video(const model::NetworkOutputs& out, const bm::ProposalGrid& grid,
                              const dataio::VideoAnnotation& ann,
                              const std::vector<dataio::ClassScore>* class_scores,
                              const post::PostprocessConfig& cfg);

}  // namespace cpn::pipeline
