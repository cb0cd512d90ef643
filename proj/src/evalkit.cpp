#include "evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

namespace cpn::eval {

SegmentsByVideo ground_truth_segments(const dataio::AnnotationSet& anns) {
  SegmentsByVideo gt;
  for (const auto& v : anns) {
    auto& segs = gt[v.video_id];
    for (const auto& inst : v.instances) segs.push_back({inst.start, inst.end});
  }
  return gt;
}

void sort_by_score(post::ProposalResults& proposals) {
  for (auto& [id, list] : proposals)
    std::stable_sort(list.begin(), list.end(),
                     [](const post::Proposal& a, const post::Proposal& b) { return a.score > b.score; });
}

namespace {

std::size_t count_gt(const SegmentsByVideo& gt) {
  std::size_t n = 0;
  for (const auto& [id, segs] : gt) n += segs.size();
  return n;
}

double iou_or_zero(bm::Segment a, bm::Segment b) {
  if (!(a.start < a.end) || !(b.start < b.end)) return 0.0;
  return bm::segment_iou(a, b);
}

}  // namespace

ARCurve ar_curve(const post::ProposalResults& proposals, const SegmentsByVideo& gt,
                 std::size_t max_an, std::span<const double> thresholds) {
  const std::size_t total = count_gt(gt);
  if (total == 0) fail(ErrorCode::kInvalidArgument, "AR undefined: no ground-truth instances");
  if (max_an == 0 || thresholds.empty())
    fail(ErrorCode::kInvalidArgument, "AR curve needs max_an >= 1 and at least one threshold");

  // first_hit[k][r]: number of (gt, threshold) pairs first recalled at rank r.
  std::vector<std::vector<std::size_t>> first_hit(thresholds.size(),
                                                  std::vector<std::size_t>(max_an + 1, 0));
  for (const auto& [id, segs] : gt) {
    auto it = proposals.find(id);
    if (it == proposals.end()) continue;
    const auto& props = it->second;
    const std::size_t limit = std::min(max_an, props.size());
    for (const auto& g : segs) {
      std::vector<double> iou(limit);
      for (std::size_t r = 0; r < limit; ++r)
        iou[r] = iou_or_zero({props[r].start, props[r].end}, g);
      for (std::size_t k = 0; k < thresholds.size(); ++k)
        for (std::size_t r = 0; r < limit; ++r)
          if (iou[r] >= thresholds[k]) {
            ++first_hit[k][r + 1];
            break;
          }
    }
  }

  ARCurve curve;
  std::vector<std::size_t> recalled(thresholds.size(), 0);
  for (std::size_t an = 1; an <= max_an; ++an) {
    double sum = 0.0;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      recalled[k] += first_hit[k][an];
      sum += static_cast<double>(recalled[k]) / static_cast<double>(total);
    }
    curve.an.push_back(an);
    curve.ar.push_back(sum / static_cast<double>(thresholds.size()));
  }
  return curve;
}

double ar_at_an(const post::ProposalResults& proposals, const SegmentsByVideo& gt, std::size_t an,
                std::span<const double> thresholds) {
  if (an == 0) fail(ErrorCode::kInvalidArgument, "AN must be >= 1");
  return ar_curve(proposals, gt, an, thresholds).ar.back();
}

double auc(const ARCurve& curve) {
  if (curve.ar.empty()) fail(ErrorCode::kInvalidArgument, "AUC of an empty curve");
  const double sum = std::accumulate(curve.ar.begin(), curve.ar.end(), 0.0);
  return 100.0 * sum / static_cast<double>(curve.ar.size());
}

double ap_at_tiou(std::span<const ScoredSegment> detections, std::span<const GtSegment> gt,
                  double threshold) {
  if (gt.empty()) return 0.0;
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  std::map<std::string, std::vector<std::size_t>> gt_by_video;
  for (std::size_t i = 0; i < gt.size(); ++i) gt_by_video[gt[i].video_id].push_back(i);
  std::vector<bool> matched(gt.size(), false);

  std::vector<bool> is_tp(order.size(), false);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& det = detections[order[rank]];
    auto it = gt_by_video.find(det.video_id);
    if (it == gt_by_video.end()) continue;
    std::size_t best = gt.size();
    double best_iou = -1.0;
    for (std::size_t gi : it->second) {
      if (matched[gi]) continue;
      const double iou = iou_or_zero({det.start, det.end}, {gt[gi].start, gt[gi].end});
      if (iou >= threshold && iou > best_iou) {
        best_iou = iou;
        best = gi;
      }
    }
    if (best < gt.size()) {
      matched[best] = true;
      is_tp[rank] = true;
    }
  }

  std::vector<double> precision(order.size());
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    tp += is_tp[rank] ? 1 : 0;
    precision[rank] = static_cast<double>(tp) / static_cast<double>(rank + 1);
  }
  for (std::size_t rank = order.size(); rank-- > 1;)
    precision[rank - 1] = std::max(precision[rank - 1], precision[rank]);

  // Recall rises by 1/|GT| exactly at true positives.
  const double step = 1.0 / static_cast<double>(gt.size());
  double ap = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank)
    if (is_tp[rank]) ap += step * precision[rank];
  return ap;
}

MapReport average_map(const post::DetectionResults& detections, const dataio::AnnotationSet& gt,
                      std::span<const double> thresholds) {
  if (thresholds.empty()) fail(ErrorCode::kInvalidArgument, "mAP needs at least one threshold");
  std::map<std::string, std::vector<GtSegment>> gt_by_class;
  std::set<std::string> videos;
  for (const auto& v : gt) {
    videos.insert(v.video_id);
    for (const auto& inst : v.instances)
      gt_by_class[inst.label].push_back({v.video_id, inst.start, inst.end});
  }
  if (gt_by_class.empty())
    fail(ErrorCode::kInvalidArgument, "mAP undefined: no ground-truth instances");

  std::map<std::string, std::vector<ScoredSegment>> det_by_class;
  for (const auto& [id, dets] : detections) {
    if (!videos.count(id)) continue;
    for (const auto& d : dets)
      if (gt_by_class.count(d.label))
        det_by_class[d.label].push_back({id, d.start, d.end, d.score});
  }

  MapReport report;
  report.thresholds.assign(thresholds.begin(), thresholds.end());
  report.map.assign(thresholds.size(), 0.0);
  for (const auto& [label, segs] : gt_by_class) {
    const auto& dets = det_by_class[label];
    auto& row = report.per_class_ap[label];
    for (std::size_t k = 0; k < thresholds.size(); ++k) row.push_back(ap_at_tiou(dets, segs, thresholds[k]));
  }
  const auto n_classes = static_cast<double>(gt_by_class.size());
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    double sum = 0.0;
    for (const auto& [label, row] : report.per_class_ap) sum += row[k];
    report.map[k] = sum / n_classes;
  }
  report.average_map = std::accumulate(report.map.begin(), report.map.end(), 0.0) /
                       static_cast<double>(thresholds.size());
  return report;
}

nlohmann::json to_json(const MapReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [label, row] : r.per_class_ap) per_class[label] = row;
  return {{"thresholds", r.thresholds},
          {"mAP", r.map},
          {"average_mAP", r.average_map},
          {"per_class_AP", std::move(per_class)}};
}

std::string format_table(const MapReport& r) {
  std::ostringstream out;
  char buf[64];
  out << "tIoU   ";
  for (double t : r.thresholds) {
    std::snprintf(buf, sizeof(buf), "%7.2f", t);
    out << buf;
  }
  out << "\nmAP(%) ";
  for (double m : r.map) {
    std::snprintf(buf, sizeof(buf), "%7.2f", 100.0 * m);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "\naverage mAP: %.2f%%\n", 100.0 * r.average_map);
  out << buf;
  return out.str();
}

ProposalReport evaluate_proposals(const post::ProposalResults& proposals,
                                  const dataio::AnnotationSet& gt, std::size_t max_an) {
  post::ProposalResults sorted;
  for (const auto& v : gt) {
    auto it = proposals.find(v.video_id);
    if (it != proposals.end()) sorted[v.video_id] = it->second;
  }
  sort_by_score(sorted);
  ProposalReport report;
  report.curve = ar_curve(sorted, ground_truth_segments(gt), max_an);
  report.auc = auc(report.curve);
  for (std::size_t an : {1, 5, 10, 50, 100})
    if (an <= max_an) report.ar_at[an] = report.curve.ar[an - 1];
  return report;
}

nlohmann::json to_json(const ProposalReport& r) {
  nlohmann::json ar_at = nlohmann::json::object();
  for (const auto& [an, v] : r.ar_at) ar_at["AR@" + std::to_string(an)] = v;
  return {{"AUC", r.auc}, {"AR", std::move(ar_at)}, {"AR_curve", r.curve.ar}};
}

std::string format_table(const ProposalReport& r) {
  std::ostringstream out;
  char buf[64];
  for (const auto& [an, v] : r.ar_at) {
    std::snprintf(buf, sizeof(buf), "AR@%-4zu %7.2f%%\n", an, 100.0 * v);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "AUC     %7.2f\n", r.auc);
  out << buf;
  return out.str();
}

}  // namespace cpn::eval
