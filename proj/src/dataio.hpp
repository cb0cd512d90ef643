#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace cpn::dataio {

enum class Subset { kTraining, kValidation, kTesting };

std::string to_string(Subset s);
Subset parse_subset(const std::string& s);

struct Instance {
  double start = 0.0;
  double end = 0.0;
  std::string label;
};

struct VideoAnnotation {
  std::string video_id;
  double duration = 0.0;
  Subset subset = Subset::kTraining;
  std::vector<Instance> instances;
};

using AnnotationSet = std::vector<VideoAnnotation>;

/// Throws kValidation naming the video and instance index on the first
/// violated invariant (positive duration, 0 <= start < end <= duration,
/// unique ids).
void validate(const VideoAnnotation& video);
void validate(const AnnotationSet& set);

AnnotationSet load_annotations(const std::filesystem::path& path);
void save_annotations(const AnnotationSet& set, const std::filesystem::path& path);
AnnotationSet parse_annotations(const std::string& json_text);
std::string dump_annotations(const AnnotationSet& set);

/// T x C matrix, time-major. Stored as float32 so the on-disk format
/// round-trips bit-exactly.
class FeatureSequence {
 public:
  FeatureSequence() = default;
  FeatureSequence(std::size_t length, std::size_t channels, float fill = 0.0f);
  FeatureSequence(std::size_t length, std::size_t channels, std::vector<float> data);

  std::size_t length() const { return length_; }
  std::size_t channels() const { return channels_; }

  float& at(std::size_t t, std::size_t c) { return data_[t * channels_ + c]; }
  float at(std::size_t t, std::size_t c) const { return data_[t * channels_ + c]; }

  std::span<float> row(std::size_t t) { return {data_.data() + t * channels_, channels_}; }
  std::span<const float> row(std::size_t t) const {
    return {data_.data() + t * channels_, channels_};
  }

  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  bool operator==(const FeatureSequence&) const = default;

 private:
  std::size_t length_ = 0;
  std::size_t channels_ = 0;
  std::vector<float> data_;
};

FeatureSequence load_features(const std::filesystem::path& path);
void save_features(const FeatureSequence& seq, const std::filesystem::path& path);
std::string encode_features(const FeatureSequence& seq);
FeatureSequence decode_features(std::string_view bytes);

/// Linear resampling along time; output snippet i reads the input at
/// i*(T-1)/(target-1), or the temporal midpoint when target == 1.
FeatureSequence rescale_features(const FeatureSequence& seq, std::size_t target_length);

struct ClassScore {
  std::string label;
  double score = 0.0;
};

// Per video, sorted by descending score.
using ClassScores = std::map<std::string, std::vector<ClassScore>>;

ClassScores load_class_scores(const std::filesystem::path& path);
void save_class_scores(const ClassScores& scores, const std::filesystem::path& path);
ClassScores parse_class_scores(const std::string& json_text);

struct SynthConfig {
  std::size_t n_videos = 250;
  double val_fraction = 0.2;
  std::size_t t_raw_min = 110;
  std::size_t t_raw_max = 130;
  std::size_t channels = 16;
  std::size_t n_classes = 3;
  std::size_t instances_min = 1;
  std::size_t instances_max = 2;
  double min_fraction = 0.08;
  double max_fraction = 0.4;
  double noise_std = 0.5;
  double snippet_seconds = 1.0;
  std::uint64_t seed = 0;
};

struct SyntheticDataset {
  AnnotationSet annotations;
  std::map<std::string, FeatureSequence> features;
  ClassScores class_scores;
};

SyntheticDataset synth_dataset(const SynthConfig& cfg);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace cpn::dataio
