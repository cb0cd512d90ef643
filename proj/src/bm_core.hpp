#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "dataio.hpp"

namespace cpn::bm {

/// Dense (duration, start) lattice. Cell (d, t) is the segment [t, t+d+1) in
/// snippet units; it is valid iff it ends inside the sequence.
struct ProposalGrid {
  std::size_t length = 0;        // T
  std::size_t max_duration = 0;  // D

  bool valid(std::size_t d, std::size_t t) const { return t + d + 1 <= length; }
  std::size_t cells() const { return length * max_duration; }
  std::size_t valid_count() const;
  std::size_t index(std::size_t d, std::size_t t) const { return d * length + t; }
};

ProposalGrid proposal_grid(std::size_t length, std::size_t max_duration);

struct Segment {
  double start = 0.0;
  double end = 0.0;
};

double segment_iou(Segment a, Segment b);

/// Row-major D x T map over the proposal grid.
struct GridMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  GridMap() = default;
  GridMap(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  double& at(std::size_t d, std::size_t t) { return values[d * cols + t]; }
  double at(std::size_t d, std::size_t t) const { return values[d * cols + t]; }
  bool operator==(const GridMap&) const = default;
};

/// Max IoU of each valid cell against the video's instances (snippet units,
/// scale T / duration); invalid cells are 0.
GridMap gt_iou_map(const ProposalGrid& grid, const dataio::VideoAnnotation& ann);

/// Interpolation tap of one sample point: weights on input positions `lo`
/// and `lo + 1`. `lo < 0` marks an out-of-range point (all-zero row).
struct SampleTap {
  std::int32_t lo = -1;
  double w_lo = 0.0;
  double w_hi = 0.0;
};

class SamplingMatrix {
 public:
  SamplingMatrix(const ProposalGrid& grid, std::size_t samples, double expansion);

  const ProposalGrid& grid() const { return grid_; }
  std::size_t input_length() const { return grid_.length; }
  std::size_t samples() const { return samples_; }
  double expansion() const { return expansion_; }

  const SampleTap& tap(std::size_t d, std::size_t t, std::size_t n) const {
    return taps_[(grid_.index(d, t)) * samples_ + n];
  }

  /// Dense weight row of one sample point over the T input positions.
  std::vector<double> dense_row(std::size_t d, std::size_t t, std::size_t n) const;

 private:
  ProposalGrid grid_;
  std::size_t samples_;
  double expansion_;
  std::vector<SampleTap> taps_;
};

SamplingMatrix build_sampling_matrix(std::size_t length, std::size_t max_duration,
                                     std::size_t samples, double expansion);

/// C_h x N x D x T tensor, row-major in that axis order.
struct ProposalTensor {
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::size_t rows = 0;  // D
  std::size_t cols = 0;  // T
  std::vector<double> values;

  ProposalTensor() = default;
  ProposalTensor(std::size_t c, std::size_t n, std::size_t d, std::size_t t)
      : channels(c), samples(n), rows(d), cols(t), values(c * n * d * t, 0.0) {}

  std::size_t index(std::size_t c, std::size_t n, std::size_t d, std::size_t t) const {
    return ((c * samples + n) * rows + d) * cols + t;
  }
  double& at(std::size_t c, std::size_t n, std::size_t d, std::size_t t) {
    return values[index(c, n, d, t)];
  }
  double at(std::size_t c, std::size_t n, std::size_t d, std::size_t t) const {
    return values[index(c, n, d, t)];
  }
};

/// hidden is C_h x T, row-major.
ProposalTensor sample_proposal_features(std::span<const double> hidden, std::size_t channels,
                                        const SamplingMatrix& sm);

/// Transpose of the sampling map: accumulates d(out)/d(hidden) into grad_hidden.
void sample_proposal_features_backward(const ProposalTensor& grad_out, const SamplingMatrix& sm,
                                       std::span<double> grad_hidden);

enum class MaskGranularity { kProposal, kChannel };

std::string to_string(MaskGranularity g);
MaskGranularity parse_granularity(const std::string& s);

struct MaskConfig {
  double p_mask = 0.1;
  MaskGranularity granularity = MaskGranularity::kProposal;
};

void validate(const MaskConfig& cfg);

/// A realized drop pattern. `keep` is indexed by grid cell (proposal
/// granularity) or by channel (channel granularity). Survivors are multiplied
/// by `scale`.
struct Mask {
  MaskGranularity granularity = MaskGranularity::kProposal;
  std::vector<std::uint8_t> keep;
  double scale = 1.0;

  /// Multiplier applied at (channel, cell).
  double factor(std::size_t channel, std::size_t cell) const {
    const std::size_t i = granularity == MaskGranularity::kProposal ? cell : channel;
    return keep[i] ? scale : 0.0;
  }
};

Mask draw_mask(const MaskConfig& cfg, std::size_t channels, const ProposalGrid& grid, Rng& rng);

void apply_mask(ProposalTensor& tensor, const Mask& mask);

/// Dropout over the sampled proposal tensor; identity unless training.
ProposalTensor mask_proposals(const ProposalTensor& tensor, const ProposalGrid& grid,
                              const MaskConfig& cfg, bool training, Rng& rng);

}  // namespace cpn::bm
