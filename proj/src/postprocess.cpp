#include "postprocess.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace cpn::post {

using model::NetworkOutputs;

void validate(const PostprocessConfig& cfg) {
  if (!(cfg.sigma > 0.0)) fail(ErrorCode::kValidation, "postprocess.sigma must be > 0");
  if (!(cfg.score_floor >= 0.0))
    fail(ErrorCode::kValidation, "postprocess.score_floor must be >= 0");
  if (cfg.max_out == 0) fail(ErrorCode::kValidation, "postprocess.max_out must be >= 1");
  if (cfg.top_k == 0) fail(ErrorCode::kValidation, "postprocess.top_k must be >= 1");
}

std::vector<Proposal> fuse_scores(const NetworkOutputs& out, const bm::ProposalGrid& grid,
                                  double duration) {
  if (out.p_start.size() != grid.length || out.p_end.size() != grid.length ||
      out.p_cls.rows != grid.max_duration || out.p_cls.cols != grid.length ||
      out.p_reg.rows != grid.max_duration || out.p_reg.cols != grid.length)
    fail(ErrorCode::kInvalidArgument, "fuse_scores: outputs not shaped to the grid");
  const double unit = duration / static_cast<double>(grid.length);
  std::vector<Proposal> props;
  props.reserve(grid.valid_count());
  for (std::size_t d = 0; d < grid.max_duration; ++d)
    for (std::size_t t = 0; t + d + 1 <= grid.length; ++t)
      props.push_back({static_cast<double>(t) * unit, static_cast<double>(t + d + 1) * unit,
                       out.p_start[t] * out.p_end[t + d] * out.p_cls.at(d, t) *
                           out.p_reg.at(d, t)});
  return props;
}

std::vector<Proposal> soft_nms(std::vector<Proposal> props, double sigma, double score_floor,
                               std::size_t max_out) {
  if (!(sigma > 0.0)) fail(ErrorCode::kInvalidArgument, "soft_nms: sigma must be > 0");
  std::vector<Proposal> kept;
  while (!props.empty() && kept.size() < max_out) {
    // max_element keeps the first of equal maxima.
    auto best = std::max_element(props.begin(), props.end(),
                                 [](const Proposal& a, const Proposal& b) { return a.score < b.score; });
    if (best->score < score_floor) break;
    const Proposal sel = *best;
    props.erase(best);
    kept.push_back(sel);
    for (auto& p : props) {
      const double iou = bm::segment_iou({sel.start, sel.end}, {p.start, p.end});
      if (iou > 0.0) p.score *= std::exp(-(iou * iou) / sigma);
    }
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
  return kept;
}

std::vector<Detection> assemble_detections(std::span<const Proposal> props,
                                           std::span<const dataio::ClassScore> class_scores,
                                           std::size_t k) {
  if (class_scores.empty())
    fail(ErrorCode::kInvalidArgument, "assemble_detections: empty class scores");
  const std::size_t classes = std::min(k, class_scores.size());
  std::vector<Detection> dets;
  dets.reserve(props.size() * classes);
  for (const auto& p : props)
    for (std::size_t c = 0; c < classes; ++c)
      dets.push_back({p.start, p.end, class_scores[c].label, p.score * class_scores[c].score});
  return dets;
}

NetworkOutputs ensemble_maps(std::span<const NetworkOutputs> outputs,
                             std::span<const double> weights) {
  if (outputs.empty()) fail(ErrorCode::kInvalidArgument, "ensemble_maps: no inputs");
  if (weights.size() != outputs.size())
    fail(ErrorCode::kInvalidArgument, "ensemble_maps: one weight per input required");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) fail(ErrorCode::kInvalidArgument, "ensemble_maps: weights must be >= 0");
    total += w;
  }
  if (!(total > 0.0)) fail(ErrorCode::kInvalidArgument, "ensemble_maps: weights sum to zero");

  const std::size_t len = outputs[0].length();
  const std::size_t dur = outputs[0].max_duration();
  for (const auto& o : outputs)
    if (o.length() != len || o.max_duration() != dur || o.p_end.size() != len ||
        o.p_reg.rows != dur)
      fail(ErrorCode::kInvalidArgument, "ensemble_maps: inputs differ in (T, D); rescale first");

  NetworkOutputs out;
  out.p_start.assign(len, 0.0);
  out.p_end.assign(len, 0.0);
  out.p_cls = bm::GridMap(dur, len);
  out.p_reg = bm::GridMap(dur, len);
  for (std::size_t m = 0; m < outputs.size(); ++m) {
    const double w = weights[m] / total;
    if (w == 0.0) continue;
    const auto& o = outputs[m];
    for (std::size_t i = 0; i < len; ++i) {
      out.p_start[i] += w * o.p_start[i];
      out.p_end[i] += w * o.p_end[i];
    }
    for (std::size_t i = 0; i < out.p_cls.values.size(); ++i) {
      out.p_cls.values[i] += w * o.p_cls.values[i];
      out.p_reg.values[i] += w * o.p_reg.values[i];
    }
  }
  return out;
}

namespace {

struct LinearTap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

// Same align-corners convention as feature rescaling.
std::vector<LinearTap> linear_taps(std::size_t from, std::size_t to) {
  std::vector<LinearTap> taps(to);
  for (std::size_t i = 0; i < to; ++i) {
    const double pos = to == 1 ? 0.5 * static_cast<double>(from - 1)
                               : static_cast<double>(i) * static_cast<double>(from - 1) /
                                     static_cast<double>(to - 1);
    std::size_t lo = std::min(static_cast<std::size_t>(std::floor(pos)), from - 1);
    taps[i] = {lo, std::min(lo + 1, from - 1), pos - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

NetworkOutputs rescale_outputs(const NetworkOutputs& in, std::size_t length,
                               std::size_t max_duration) {
  if (length == 0 || max_duration == 0)
    fail(ErrorCode::kInvalidArgument, "rescale_outputs: target shape must be positive");
  if (in.length() == length && in.max_duration() == max_duration) return in;
  const auto tt = linear_taps(in.length(), length);
  const auto dt = linear_taps(in.max_duration(), max_duration);
  NetworkOutputs out;
  auto lerp1 = [&](const std::vector<double>& v, const LinearTap& k) {
    return v[k.lo] * (1.0 - k.frac) + v[k.hi] * k.frac;
  };
  for (const auto& k : tt) {
    out.p_start.push_back(lerp1(in.p_start, k));
    out.p_end.push_back(lerp1(in.p_end, k));
  }
  auto bilinear = [&](const bm::GridMap& m) {
    bm::GridMap r(max_duration, length);
    for (std::size_t d = 0; d < max_duration; ++d)
      for (std::size_t t = 0; t < length; ++t) {
        const auto& a = dt[d];
        const auto& b = tt[t];
        const double top = m.at(a.lo, b.lo) * (1.0 - b.frac) + m.at(a.lo, b.hi) * b.frac;
        const double bot = m.at(a.hi, b.lo) * (1.0 - b.frac) + m.at(a.hi, b.hi) * b.frac;
        r.at(d, t) = top * (1.0 - a.frac) + bot * a.frac;
      }
    return r;
  };
  out.p_cls = bilinear(in.p_cls);
  out.p_reg = bilinear(in.p_reg);
  return out;
}

std::string dump_proposals(const ProposalResults& results) {
  nlohmann::json res = nlohmann::json::object();
  for (const auto& [id, props] : results) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : props) arr.push_back({{"score", p.score}, {"segment", {p.start, p.end}}});
    res[id] = std::move(arr);
  }
  return nlohmann::json{{"results", std::move(res)}}.dump(1);
}

ProposalResults parse_proposals(const std::string& json_text) {
  ProposalResults out;
  try {
    const auto doc = nlohmann::json::parse(json_text);
    for (const auto& [id, arr] : doc.at("results").items()) {
      auto& list = out[id];
      for (const auto& e : arr) {
        const auto& seg = e.at("segment");
        list.push_back({seg.at(0).get<double>(), seg.at(1).get<double>(),
                        e.at("score").get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed proposal JSON: ") + e.what());
  }
  return out;
}

std::string dump_detections(const DetectionResults& results) {
  nlohmann::json res = nlohmann::json::object();
  for (const auto& [id, dets] : results) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : dets)
      arr.push_back({{"label", d.label}, {"score", d.score}, {"segment", {d.start, d.end}}});
    res[id] = std::move(arr);
  }
  nlohmann::json doc = {{"version", "VERSION 1.3"},
                        {"results", std::move(res)},
                        {"external_data", nlohmann::json::object()}};
  return doc.dump(1);
}

DetectionResults parse_detections(const std::string& json_text) {
  DetectionResults out;
  try {
    const auto doc = nlohmann::json::parse(json_text);
    for (const auto& [id, arr] : doc.at("results").items()) {
      auto& list = out[id];
      for (const auto& e : arr) {
        const auto& seg = e.at("segment");
        list.push_back({seg.at(0).get<double>(), seg.at(1).get<double>(),
                        e.at("label").get<std::string>(), e.at("score").get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed detection JSON: ") + e.what());
  }
  return out;
}

}  // namespace cpn::post
