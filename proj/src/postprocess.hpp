#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "bm_core.hpp"
#include "cpn_model.hpp"
#include "dataio.hpp"

namespace cpn::post {

struct Proposal {
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;
  bool operator==(const Proposal&) const = default;
};

struct Detection {
  double start = 0.0;
  double end = 0.0;
  std::string label;
  double score = 0.0;
  bool operator==(const Detection&) const = default;
};

struct PostprocessConfig {
  double sigma = 0.4;
  double score_floor = 1e-4;
  std::size_t max_out = 100;
  std::size_t top_k = 2;
};

void validate(const PostprocessConfig& cfg);

/// One proposal per valid grid cell scored by the product of start, end,
/// classification and regression confidences, in seconds.
std::vector<Proposal> fuse_scores(const model::NetworkOutputs& out, const bm::ProposalGrid& grid,
                                  double duration);

/// Gaussian soft-NMS: s <- s * exp(-IoU^2 / sigma) around each selected peak.
std::vector<Proposal> soft_nms(std::vector<Proposal> props, double sigma, double score_floor,
                               std::size_t max_out);

/// Cross product of proposals with the top-k video-level classes.
std::vector<Detection> assemble_detections(std::span<const Proposal> props,
                                           std::span<const dataio::ClassScore> class_scores,
                                           std::size_t k);

/// Weighted arithmetic mean of outputs that share (T, D).
model::NetworkOutputs ensemble_maps(std::span<const model::NetworkOutputs> outputs,
                                    std::span<const double> weights);

/// Resamples outputs to a new (T, D): boundary vectors linearly, confidence
/// maps bilinearly over (D, T).
model::NetworkOutputs rescale_outputs(const model::NetworkOutputs& out, std::size_t length,
                                      std::size_t max_duration);

using ProposalResults = std::map<std::string, std::vector<Proposal>>;
using DetectionResults = std::map<std::string, std::vector<Detection>>;

std::string dump_proposals(const ProposalResults& results);
ProposalResults parse_proposals(const std::string& json_text);
std::string dump_detections(const DetectionResults& results);
DetectionResults parse_detections(const std::string& json_text);

}  // namespace cpn::post
