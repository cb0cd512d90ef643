#include "preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace cpn::preprocess {

using dataio::AnnotationSet;
using dataio::FeatureSequence;
using dataio::VideoAnnotation;

void validate(const PreprocessConfig& cfg) {
  if (!(cfg.theta_long > 0.0 && cfg.theta_long <= 1.0))
    fail(ErrorCode::kValidation, "preprocess.theta_long must lie in (0, 1]");
  if (!(cfg.theta_short >= 0.0))
    fail(ErrorCode::kValidation, "preprocess.theta_short must be >= 0");
  if (cfg.repeat_factor < 1) fail(ErrorCode::kValidation, "preprocess.repeat_factor must be >= 1");
  if (!(cfg.resize_lo > 0.0 && cfg.resize_lo <= cfg.resize_hi))
    fail(ErrorCode::kValidation, "preprocess.resize_lo/resize_hi must satisfy 0 < lo <= hi");
  if (!(cfg.shift_fraction >= 0.0 && cfg.shift_fraction <= 0.5))
    fail(ErrorCode::kValidation, "preprocess.shift_fraction must lie in [0, 0.5]");
}

double coverage(const VideoAnnotation& video) {
  std::vector<std::pair<double, double>> iv;
  for (const auto& inst : video.instances) iv.emplace_back(inst.start, inst.end);
  std::sort(iv.begin(), iv.end());
  double covered = 0.0;
  double cur_s = 0.0, cur_e = -1.0;
  bool open = false;
  for (const auto& [s, e] : iv) {
    if (open && s <= cur_e) {
      cur_e = std::max(cur_e, e);
    } else {
      if (open) covered += cur_e - cur_s;
      cur_s = s;
      cur_e = e;
      open = true;
    }
  }
  if (open) covered += cur_e - cur_s;
  return covered / video.duration;
}

AnnotationSet remove_long_coverage(const AnnotationSet& anns, double theta_long) {
  AnnotationSet kept;
  for (const auto& v : anns) {
    if (v.subset == dataio::Subset::kTraining && coverage(v) > theta_long) continue;
    kept.push_back(v);
  }
  return kept;
}

std::vector<std::string> resample_short(const AnnotationSet& anns, double theta_short,
                                        std::size_t repeat_factor) {
  if (repeat_factor < 1) fail(ErrorCode::kInvalidArgument, "repeat_factor must be >= 1");
  std::vector<std::string> epoch;
  for (const auto& v : anns) {
    if (v.subset != dataio::Subset::kTraining) continue;
    const bool has_short = std::any_of(v.instances.begin(), v.instances.end(), [&](const auto& i) {
      return (i.end - i.start) / v.duration < theta_short;
    });
    const std::size_t copies = has_short ? repeat_factor : 1;
    for (std::size_t r = 0; r < copies; ++r) epoch.push_back(v.video_id);
  }
  return epoch;
}

ResizeResult resize_instance_with(const FeatureSequence& seq, const VideoAnnotation& ann,
                                  std::size_t instance, double factor) {
  if (instance >= ann.instances.size())
    fail(ErrorCode::kInvalidArgument, "resize_instance: instance index out of range");
  if (!(factor > 0.0)) fail(ErrorCode::kInvalidArgument, "resize_instance: factor must be > 0");

  const auto t_len = static_cast<long>(seq.length());
  const double stride = ann.duration / static_cast<double>(t_len);
  const auto& chosen = ann.instances[instance];
  const long span_s = std::clamp(std::lround(chosen.start / stride), 0L, t_len);
  const long span_e = std::clamp(std::lround(chosen.end / stride), 0L, t_len);
  const long old_len = span_e - span_s;
  if (old_len < 2) return {seq, ann};

  const long new_len =
      std::max(1L, std::lround(static_cast<double>(old_len) * factor));
  if (new_len == old_len) return {seq, ann};

  const auto channels = seq.channels();
  FeatureSequence span(static_cast<std::size_t>(old_len), channels);
  for (long t = 0; t < old_len; ++t)
    std::copy_n(seq.row(static_cast<std::size_t>(span_s + t)).begin(), channels,
                span.row(static_cast<std::size_t>(t)).begin());
  const FeatureSequence stretched = dataio::rescale_features(span, static_cast<std::size_t>(new_len));

  const long delta = new_len - old_len;
  FeatureSequence out(static_cast<std::size_t>(t_len + delta), channels);
  for (long t = 0; t < static_cast<long>(out.length()); ++t) {
    std::span<const float> src;
    if (t < span_s)
      src = seq.row(static_cast<std::size_t>(t));
    else if (t < span_s + new_len)
      src = stretched.row(static_cast<std::size_t>(t - span_s));
    else
      src = seq.row(static_cast<std::size_t>(t - delta));
    std::copy(src.begin(), src.end(), out.row(static_cast<std::size_t>(t)).begin());
  }

  // Piecewise-linear time warp applied to every boundary keeps instance order
  // and start < end intact.
  const double s_sec = static_cast<double>(span_s) * stride;
  const double e_sec = static_cast<double>(span_e) * stride;
  const double ratio = static_cast<double>(new_len) / static_cast<double>(old_len);
  auto warp = [&](double b) {
    if (b <= s_sec) return b;
    if (b >= e_sec) return b + static_cast<double>(delta) * stride;
    return s_sec + (b - s_sec) * ratio;
  };

  VideoAnnotation warped = ann;
  warped.duration = static_cast<double>(out.length()) * stride;
  for (auto& inst : warped.instances) {
    inst.start = warp(inst.start);
    inst.end = std::min(warp(inst.end), warped.duration);
  }
  return {std::move(out), std::move(warped)};
}

ResizeResult resize_instance(const FeatureSequence& seq, const VideoAnnotation& ann, double lo,
                             double hi, Rng& rng) {
  if (ann.instances.empty()) return {seq, ann};
  const std::size_t idx = uniform_index(rng, ann.instances.size());
  const double factor = uniform(rng, lo, hi);
  return resize_instance_with(seq, ann, idx, factor);
}

FeatureSequence temporal_shift(const FeatureSequence& seq, double shift_fraction) {
  const std::size_t t_len = seq.length();
  const std::size_t channels = seq.channels();
  const auto fold = static_cast<std::size_t>(
      std::floor(shift_fraction * static_cast<double>(channels)));
  if (fold == 0) return seq;
  if (2 * fold > channels)
    fail(ErrorCode::kInvalidArgument, "temporal_shift: shift_fraction must be <= 0.5");

  FeatureSequence out = seq;
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t c = 0; c < fold; ++c)
      out.at(t, c) = t == 0 ? 0.0f : seq.at(t - 1, c);
    for (std::size_t c = fold; c < 2 * fold; ++c)
      out.at(t, c) = t + 1 == t_len ? 0.0f : seq.at(t + 1, c);
  }
  return out;
}

}  // namespace cpn::preprocess
