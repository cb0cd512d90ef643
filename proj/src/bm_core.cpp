#include "bm_core.hpp"

#include <algorithm>
#include <cmath>

namespace cpn::bm {

std::size_t ProposalGrid::valid_count() const {
  std::size_t count = 0;
  for (std::size_t k = 1; k <= max_duration && k <= length; ++k) count += length - k + 1;
  return count;
}

ProposalGrid proposal_grid(std::size_t length, std::size_t max_duration) {
  if (length == 0 || max_duration == 0)
    fail(ErrorCode::kInvalidArgument, "proposal grid needs T >= 1 and D >= 1");
  if (max_duration > length)
    fail(ErrorCode::kInvalidArgument, "proposal grid needs D <= T (D=" +
                                          std::to_string(max_duration) +
                                          ", T=" + std::to_string(length) + ")");
  return {length, max_duration};
}

double segment_iou(Segment a, Segment b) {
  if (!(a.start < a.end) || !(b.start < b.end))
    fail(ErrorCode::kInvalidArgument, "segment_iou: degenerate segment");
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return inter / uni;
}

GridMap gt_iou_map(const ProposalGrid& grid, const dataio::VideoAnnotation& ann) {
  GridMap map(grid.max_duration, grid.length);
  if (ann.instances.empty()) return map;
  const double scale = static_cast<double>(grid.length) / ann.duration;
  std::vector<Segment> gts;
  for (const auto& inst : ann.instances) gts.push_back({inst.start * scale, inst.end * scale});

  for (std::size_t d = 0; d < grid.max_duration; ++d) {
    for (std::size_t t = 0; t < grid.length; ++t) {
      if (!grid.valid(d, t)) continue;
      const Segment cell{static_cast<double>(t), static_cast<double>(t + d + 1)};
      double best = 0.0;
      for (const auto& g : gts) best = std::max(best, segment_iou(cell, g));
      map.at(d, t) = best;
    }
  }
  return map;
}

SamplingMatrix::SamplingMatrix(const ProposalGrid& grid, std::size_t samples, double expansion)
    : grid_(grid), samples_(samples), expansion_(expansion), taps_(grid.cells() * samples) {
  if (samples < 2) fail(ErrorCode::kInvalidArgument, "sampling matrix needs N >= 2");
  if (!(expansion >= 0.0)) fail(ErrorCode::kInvalidArgument, "sampling expansion must be >= 0");

  const auto last = static_cast<double>(grid.length - 1);
  for (std::size_t d = 0; d < grid.max_duration; ++d) {
    for (std::size_t t = 0; t < grid.length; ++t) {
      if (!grid.valid(d, t)) continue;
      const auto k = static_cast<double>(d + 1);
      const double lo = static_cast<double>(t) - expansion * k;
      const double hi = static_cast<double>(t) + k + expansion * k;
      const double step = (hi - lo) / static_cast<double>(samples - 1);
      for (std::size_t n = 0; n < samples; ++n) {
        const double x = n + 1 == samples ? hi : lo + step * static_cast<double>(n);
        SampleTap& tap = taps_[grid.index(d, t) * samples + n];
        if (x < 0.0 || x > last) continue;
        const double base = std::floor(x);
        const double frac = x - base;
        tap.lo = static_cast<std::int32_t>(base);
        tap.w_lo = 1.0 - frac;
        tap.w_hi = frac;
      }
    }
  }
}

std::vector<double> SamplingMatrix::dense_row(std::size_t d, std::size_t t, std::size_t n) const {
  std::vector<double> row(grid_.length, 0.0);
  const SampleTap& s = tap(d, t, n);
  if (s.lo < 0) return row;
  const auto lo = static_cast<std::size_t>(s.lo);
  row[lo] += s.w_lo;
  if (lo + 1 < grid_.length) row[lo + 1] += s.w_hi;
  return row;
}

SamplingMatrix build_sampling_matrix(std::size_t length, std::size_t max_duration,
                                     std::size_t samples, double expansion) {
  return SamplingMatrix(proposal_grid(length, max_duration), samples, expansion);
}

ProposalTensor sample_proposal_features(std::span<const double> hidden, std::size_t channels,
                                        const SamplingMatrix& sm) {
  const ProposalGrid& grid = sm.grid();
  const std::size_t t_len = grid.length;
  if (channels == 0 || hidden.size() != channels * t_len)
    fail(ErrorCode::kInvalidArgument, "sample_proposal_features: hidden map must be C_h x " +
                                          std::to_string(t_len));
  const std::size_t n_samples = sm.samples();
  ProposalTensor out(channels, n_samples, grid.max_duration, t_len);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* h = hidden.data() + c * t_len;
    for (std::size_t d = 0; d < grid.max_duration; ++d) {
      for (std::size_t t = 0; t + d + 1 <= t_len; ++t) {
        for (std::size_t n = 0; n < n_samples; ++n) {
          const SampleTap& s = sm.tap(d, t, n);
          if (s.lo < 0) continue;
          const auto lo = static_cast<std::size_t>(s.lo);
          double v = s.w_lo * h[lo];
          if (s.w_hi != 0.0) v += s.w_hi * h[lo + 1];
          out.at(c, n, d, t) = v;
        }
      }
    }
  }
  return out;
}

void sample_proposal_features_backward(const ProposalTensor& grad_out, const SamplingMatrix& sm,
                                       std::span<double> grad_hidden) {
  const ProposalGrid& grid = sm.grid();
  const std::size_t t_len = grid.length;
  if (grad_hidden.size() != grad_out.channels * t_len)
    fail(ErrorCode::kInvalidArgument, "sampling backward: gradient shape mismatch");
  for (std::size_t c = 0; c < grad_out.channels; ++c) {
    double* g = grad_hidden.data() + c * t_len;
    for (std::size_t d = 0; d < grid.max_duration; ++d) {
      for (std::size_t t = 0; t + d + 1 <= t_len; ++t) {
        for (std::size_t n = 0; n < sm.samples(); ++n) {
          const SampleTap& s = sm.tap(d, t, n);
          if (s.lo < 0) continue;
          const double go = grad_out.at(c, n, d, t);
          const auto lo = static_cast<std::size_t>(s.lo);
          g[lo] += s.w_lo * go;
          if (s.w_hi != 0.0) g[lo + 1] += s.w_hi * go;
        }
      }
    }
  }
}

std::string to_string(MaskGranularity g) {
  return g == MaskGranularity::kProposal ? "proposal" : "channel";
}

MaskGranularity parse_granularity(const std::string& s) {
  if (s == "proposal") return MaskGranularity::kProposal;
  if (s == "channel") return MaskGranularity::kChannel;
  fail(ErrorCode::kValidation, "mask.granularity must be \"proposal\" or \"channel\", got '" + s + "'");
}

void validate(const MaskConfig& cfg) {
  if (!(cfg.p_mask >= 0.0 && cfg.p_mask < 1.0))
    fail(ErrorCode::kValidation, "mask.p must lie in [0, 1)");
}

Mask draw_mask(const MaskConfig& cfg, std::size_t channels, const ProposalGrid& grid, Rng& rng) {
  validate(cfg);
  Mask mask;
  mask.granularity = cfg.granularity;
  mask.scale = 1.0 / (1.0 - cfg.p_mask);
  if (cfg.granularity == MaskGranularity::kProposal) {
    mask.keep.assign(grid.cells(), 1);
    for (std::size_t d = 0; d < grid.max_duration; ++d)
      for (std::size_t t = 0; t < grid.length; ++t)
        if (grid.valid(d, t)) mask.keep[grid.index(d, t)] = uniform01(rng) >= cfg.p_mask;
  } else {
    mask.keep.assign(channels, 1);
    for (auto& k : mask.keep) k = uniform01(rng) >= cfg.p_mask;
  }
  return mask;
}

void apply_mask(ProposalTensor& tensor, const Mask& mask) {
  const std::size_t cells = tensor.rows * tensor.cols;
  for (std::size_t c = 0; c < tensor.channels; ++c)
    for (std::size_t n = 0; n < tensor.samples; ++n) {
      double* block = tensor.values.data() + (c * tensor.samples + n) * cells;
      for (std::size_t i = 0; i < cells; ++i) block[i] *= mask.factor(c, i);
    }
}

ProposalTensor mask_proposals(const ProposalTensor& tensor, const ProposalGrid& grid,
                              const MaskConfig& cfg, bool training, Rng& rng) {
  validate(cfg);
  if (!training || cfg.p_mask == 0.0) return tensor;
  ProposalTensor out = tensor;
  apply_mask(out, draw_mask(cfg, tensor.channels, grid, rng));
  return out;
}

}  // namespace cpn::bm
