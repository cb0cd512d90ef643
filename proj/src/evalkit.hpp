#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bm_core.hpp"
#include "dataio.hpp"
#include "postprocess.hpp"

namespace cpn::eval {

/// tIoU grid 0.5:0.05:0.95.
inline constexpr std::array<double, 10> kDefaultThresholds = {0.5,  0.55, 0.6,  0.65, 0.7,
                                                              0.75, 0.8,  0.85, 0.9,  0.95};

/// Ground-truth segments per video for proposal evaluation.
using SegmentsByVideo = std::map<std::string, std::vector<bm::Segment>>;

SegmentsByVideo ground_truth_segments(const dataio::AnnotationSet& anns);

/// Average recall over the thresholds using each video's top-AN proposals.
/// Recall is pooled over all ground-truth instances (micro-average).
/// Proposal lists must be sorted by descending score.
double ar_at_an(const post::ProposalResults& proposals, const SegmentsByVideo& gt, std::size_t an,
                std::span<const double> thresholds = kDefaultThresholds);

struct ARCurve {
  std::vector<std::size_t> an;  // 1..max_an
  std::vector<double> ar;
};

ARCurve ar_curve(const post::ProposalResults& proposals, const SegmentsByVideo& gt,
                 std::size_t max_an = 100,
                 std::span<const double> thresholds = kDefaultThresholds);

/// Area under the AR-AN curve as a percentage (mean AR over the AN grid x 100).
double auc(const ARCurve& curve);

/// Sorts every video's proposals by descending score (stable).
void sort_by_score(post::ProposalResults& proposals);

struct ScoredSegment {
  std::string video_id;
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;
};

struct GtSegment {
  std::string video_id;
  double start = 0.0;
  double end = 0.0;
};

/// Interpolated average precision for one class at one tIoU. Detections are
/// matched greedily in score order (ties keep input order), each to the
/// highest-IoU unmatched ground truth of the same video.
double ap_at_tiou(std::span<const ScoredSegment> detections, std::span<const GtSegment> gt,
                  double threshold);

struct MapReport {
  std::vector<double> thresholds;
  std::vector<double> map;  // per threshold
  double average_map = 0.0;
  std::map<std::string, std::vector<double>> per_class_ap;  // label -> AP per threshold
};

/// mAP per threshold over classes that have ground truth. Detections for videos
/// absent from `gt` are ignored.
MapReport average_map(const post::DetectionResults& detections, const dataio::AnnotationSet& gt,
                      std::span<const double> thresholds = kDefaultThresholds);

nlohmann::json to_json(const MapReport& report);
std::string format_table(const MapReport& report);

struct ProposalReport {
  ARCurve curve;
  double auc = 0.0;
  std::map<std::size_t, double> ar_at;  // selected AN values
};

ProposalReport evaluate_proposals(const post::ProposalResults& proposals,
                                  const dataio::AnnotationSet& gt, std::size_t max_an = 100);
nlohmann::json to_json(const ProposalReport& report);
std::string format_table(const ProposalReport& report);

}  // namespace cpn::eval
