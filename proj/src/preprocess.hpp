#pragma once

#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "dataio.hpp"

namespace cpn::preprocess {

struct PreprocessConfig {
  double theta_long = 0.98;
  double theta_short = 0.05;
  std::size_t repeat_factor = 2;
  double resize_lo = 0.8;
  double resize_hi = 1.25;
  double shift_fraction = 0.125;
  bool enable_remove_long = true;
  bool enable_resample_short = true;
  bool enable_resize = true;
  bool enable_shift = true;
  // Per-sample probability of applying the on-the-fly augmentations.
  double resize_probability = 0.5;
  double shift_probability = 0.5;
};

void validate(const PreprocessConfig& cfg);

/// Fraction of the video covered by the union of its instance intervals.
double coverage(const dataio::VideoAnnotation& video);

/// Drops training videos whose instance coverage exceeds theta_long.
dataio::AnnotationSet remove_long_coverage(const dataio::AnnotationSet& anns, double theta_long);

/// Training epoch list: each training video once, videos holding an instance
/// shorter than theta_short (relative to duration) repeat_factor times, with the
/// repeats placed right after the original.
std::vector<std::string> resample_short(const dataio::AnnotationSet& anns, double theta_short,
                                        std::size_t repeat_factor);

struct ResizeResult {
  dataio::FeatureSequence features;
  dataio::VideoAnnotation annotation;
};

/// Picks one instance uniformly, stretches its snippet span by a factor drawn
/// from [lo, hi] and splices it back between the untouched flanks.
ResizeResult resize_instance(const dataio::FeatureSequence& seq,
                             const dataio::VideoAnnotation& ann, double lo, double hi, Rng& rng);

/// Same, with the instance index and factor given explicitly.
ResizeResult resize_instance_with(const dataio::FeatureSequence& seq,
                                  const dataio::VideoAnnotation& ann, std::size_t instance,
                                  double factor);

/// Channel-block shift: first floor(f*C) channels move forward one snippet,
/// the next floor(f*C) move backward, vacated positions zero-filled.
dataio::FeatureSequence temporal_shift(const dataio::FeatureSequence& seq, double shift_fraction);

}  // namespace cpn::preprocess
