#include "dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cpn::dataio {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kFeatureMagic[4] = {'C', 'P', 'N', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;
constexpr std::size_t kFeatureHeaderBytes = 16;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

double normal(Rng& rng) {
  // Box-Muller on the portable uniform draw.
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

std::string to_string(Subset s) {
  switch (s) {
    case Subset::kTraining: return "training";
    case Subset::kValidation: return "validation";
    case Subset::kTesting: return "testing";
  }
  return "training";
}

Subset parse_subset(const std::string& s) {
  if (s == "training") return Subset::kTraining;
  if (s == "validation") return Subset::kValidation;
  if (s == "testing") return Subset::kTesting;
  fail(ErrorCode::kValidation, "unknown subset '" + s + "'");
}

void validate(const VideoAnnotation& video) {
  if (!(video.duration > 0.0) || !std::isfinite(video.duration))
    fail(ErrorCode::kValidation, "video '" + video.video_id + "': duration must be > 0");
  for (std::size_t i = 0; i < video.instances.size(); ++i) {
    const auto& inst = video.instances[i];
    if (!(inst.start >= 0.0 && inst.start < inst.end && inst.end <= video.duration)) {
      std::ostringstream msg;
      msg << "video '" << video.video_id << "' instance " << i << ": segment [" << inst.start
          << ", " << inst.end << "] violates 0 <= start < end <= " << video.duration;
      fail(ErrorCode::kValidation, msg.str());
    }
  }
}

void validate(const AnnotationSet& set) {
  std::set<std::string> seen;
  for (const auto& v : set) {
    if (!seen.insert(v.video_id).second)
      fail(ErrorCode::kValidation, "duplicate video_id '" + v.video_id + "'");
    validate(v);
  }
}

AnnotationSet parse_annotations(const std::string& json_text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed annotation JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("database") || !doc["database"].is_object())
    fail(ErrorCode::kFormat, "annotation JSON must contain a \"database\" object");

  AnnotationSet set;
  try {
    for (const auto& [id, entry] : doc["database"].items()) {
      VideoAnnotation v;
      v.video_id = id;
      v.duration = entry.at("duration").get<double>();
      v.subset = parse_subset(entry.value("subset", std::string("training")));
      if (entry.contains("annotations")) {
        for (const auto& a : entry.at("annotations")) {
          const auto& seg = a.at("segment");
          if (!seg.is_array() || seg.size() != 2)
            fail(ErrorCode::kFormat, "video '" + id + "': segment must be [start, end]");
          v.instances.push_back({seg[0].get<double>(), seg[1].get<double>(),
                                 a.at("label").get<std::string>()});
        }
      }
      set.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed annotation entry: ") + e.what());
  }
  validate(set);
  return set;
}

std::string dump_annotations(const AnnotationSet& set) {
  ordered_json db = ordered_json::object();
  for (const auto& v : set) {
    ordered_json anns = ordered_json::array();
    for (const auto& inst : v.instances)
      anns.push_back({{"segment", {inst.start, inst.end}}, {"label", inst.label}});
    db[v.video_id] = {{"duration", v.duration},
                      {"subset", to_string(v.subset)},
                      {"annotations", std::move(anns)}};
  }
  ordered_json doc;
  doc["database"] = std::move(db);
  return doc.dump(1);
}

AnnotationSet load_annotations(const fs::path& path) {
  return parse_annotations(read_file(path));
}

void save_annotations(const AnnotationSet& set, const fs::path& path) {
  write_file(path, dump_annotations(set));
}

FeatureSequence::FeatureSequence(std::size_t length, std::size_t channels, float fill)
    : length_(length), channels_(channels), data_(length * channels, fill) {}

FeatureSequence::FeatureSequence(std::size_t length, std::size_t channels,
                                 std::vector<float> data)
    : length_(length), channels_(channels), data_(std::move(data)) {
  if (data_.size() != length_ * channels_)
    fail(ErrorCode::kInvalidArgument, "feature data size does not match T*C");
}

std::string encode_features(const FeatureSequence& seq) {
  if (seq.length() == 0 || seq.channels() == 0)
    fail(ErrorCode::kInvalidArgument, "feature sequence must have T >= 1 and C >= 1");
  std::string out(kFeatureMagic, 4);
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<std::uint32_t>(seq.length()));
  put_u32(out, static_cast<std::uint32_t>(seq.channels()));
  out.reserve(kFeatureHeaderBytes + 4 * seq.data().size());
  for (float v : seq.data()) {
    if (!std::isfinite(v)) fail(ErrorCode::kInvalidArgument, "non-finite feature value");
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

FeatureSequence decode_features(std::string_view bytes) {
  if (bytes.size() < kFeatureHeaderBytes)
    fail(ErrorCode::kFormat, "feature file truncated: header incomplete");
  if (bytes.substr(0, 4) != std::string_view(kFeatureMagic, 4))
    fail(ErrorCode::kFormat, "feature file has bad magic");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kFeatureVersion)
    fail(ErrorCode::kFormat, "feature file version " + std::to_string(version) +
                                 " unsupported (expected 1)");
  const std::size_t t = get_u32(bytes, 8);
  const std::size_t c = get_u32(bytes, 12);
  if (t == 0 || c == 0) fail(ErrorCode::kFormat, "feature file declares T or C = 0");
  const std::size_t count = t * c;
  if (bytes.size() - kFeatureHeaderBytes < 4 * count)
    fail(ErrorCode::kFormat, "feature file truncated: expected " + std::to_string(count) +
                                 " floats, found " +
                                 std::to_string((bytes.size() - kFeatureHeaderBytes) / 4));
  if (bytes.size() - kFeatureHeaderBytes > 4 * count)
    fail(ErrorCode::kFormat, "feature file has trailing bytes");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_u32(bytes, kFeatureHeaderBytes + 4 * i));
    if (!std::isfinite(data[i]))
      fail(ErrorCode::kFormat, "feature file contains a non-finite value at index " +
                                   std::to_string(i));
  }
  return FeatureSequence(t, c, std::move(data));
}

FeatureSequence load_features(const fs::path& path) { return decode_features(read_file(path)); }

void save_features(const FeatureSequence& seq, const fs::path& path) {
  write_file(path, encode_features(seq));
}

FeatureSequence rescale_features(const FeatureSequence& seq, std::size_t target_length) {
  if (target_length == 0) fail(ErrorCode::kInvalidArgument, "rescale target must be >= 1");
  const std::size_t t_in = seq.length();
  const std::size_t c = seq.channels();
  if (t_in == 0) fail(ErrorCode::kInvalidArgument, "cannot rescale an empty sequence");
  if (target_length == t_in) return seq;

  FeatureSequence out(target_length, c);
  for (std::size_t i = 0; i < target_length; ++i) {
    const double pos = target_length == 1
                           ? 0.5 * static_cast<double>(t_in - 1)
                           : static_cast<double>(i) * static_cast<double>(t_in - 1) /
                                 static_cast<double>(target_length - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= t_in - 1) lo = t_in - 1;
    const std::size_t hi = std::min(lo + 1, t_in - 1);
    const double frac = pos - static_cast<double>(lo);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = seq.at(lo, ch);
      const double b = seq.at(hi, ch);
      out.at(i, ch) = static_cast<float>(frac == 0.0 ? a : a + (b - a) * frac);
    }
  }
  return out;
}

ClassScores parse_class_scores(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed class-score JSON: ") + e.what());
  }
  if (!doc.is_object()) fail(ErrorCode::kFormat, "class-score JSON must be an object");
  ClassScores scores;
  try {
    for (const auto& [id, list] : doc.items()) {
      std::vector<ClassScore> entries;
      std::set<std::string> labels;
      for (const auto& e : list) {
        ClassScore cs{e.at("label").get<std::string>(), e.at("score").get<double>()};
        if (!(cs.score >= 0.0 && cs.score <= 1.0))
          fail(ErrorCode::kValidation, "video '" + id + "': class score outside [0,1]");
        if (!labels.insert(cs.label).second)
          fail(ErrorCode::kValidation, "video '" + id + "': duplicate label '" + cs.label + "'");
        entries.push_back(std::move(cs));
      }
      std::stable_sort(entries.begin(), entries.end(),
                       [](const ClassScore& a, const ClassScore& b) { return a.score > b.score; });
      scores[id] = std::move(entries);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed class-score entry: ") + e.what());
  }
  return scores;
}

ClassScores load_class_scores(const fs::path& path) {
  return parse_class_scores(read_file(path));
}

void save_class_scores(const ClassScores& scores, const fs::path& path) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [id, list] : scores) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& cs : list) arr.push_back({{"label", cs.label}, {"score", cs.score}});
    doc[id] = std::move(arr);
  }
  write_file(path, doc.dump(1));
}

SyntheticDataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.channels == 0 || cfg.n_classes == 0 || cfg.instances_min == 0 ||
      cfg.instances_min > cfg.instances_max || cfg.t_raw_min == 0 ||
      cfg.t_raw_min > cfg.t_raw_max)
    fail(ErrorCode::kValidation, "synth config: counts must be positive and ranges ordered");
  if (!(cfg.min_fraction > 0.0 && cfg.min_fraction <= cfg.max_fraction &&
        cfg.max_fraction <= 1.0))
    fail(ErrorCode::kValidation, "synth config: instance fraction range must lie in (0, 1]");
  if (cfg.min_fraction * static_cast<double>(cfg.instances_max) > 1.0)
    fail(ErrorCode::kValidation,
         "synth config infeasible: min_fraction * instances_max > 1");
  if (!(cfg.noise_std >= 0.0) || !(cfg.snippet_seconds > 0.0) ||
      !(cfg.val_fraction >= 0.0 && cfg.val_fraction <= 1.0))
    fail(ErrorCode::kValidation, "synth config: bad noise_std, snippet_seconds or val_fraction");

  SyntheticDataset ds;
  if (cfg.n_videos == 0) return ds;

  Rng pattern_rng(derive_seed(cfg.seed, 0x9a77));
  std::vector<std::vector<double>> patterns(cfg.n_classes, std::vector<double>(cfg.channels));
  for (auto& p : patterns) {
    double norm = 0.0;
    for (auto& v : p) {
      v = normal(pattern_rng);
      norm += v * v;
    }
    // Unit RMS per entry keeps the signal-to-noise ratio independent of C.
    const double scale = std::sqrt(static_cast<double>(cfg.channels) / std::max(norm, 1e-12));
    for (auto& v : p) v *= scale;
  }
  std::vector<std::string> class_names;
  for (std::size_t k = 0; k < cfg.n_classes; ++k) class_names.push_back("class_" + std::to_string(k));

  const auto n_val = static_cast<std::size_t>(
      std::llround(cfg.val_fraction * static_cast<double>(cfg.n_videos)));
  const std::size_t n_train = cfg.n_videos - std::min(n_val, cfg.n_videos);

  for (std::size_t vi = 0; vi < cfg.n_videos; ++vi) {
    Rng rng(derive_seed(cfg.seed, 0x51de0, vi));
    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "v_%05zu", vi);
    const std::string id(id_buf);

    const std::size_t t_raw = cfg.t_raw_min + uniform_index(rng, cfg.t_raw_max - cfg.t_raw_min + 1);
    const std::size_t k = cfg.instances_min +
                          uniform_index(rng, cfg.instances_max - cfg.instances_min + 1);
    const auto t_d = static_cast<double>(t_raw);
    const auto len_min = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(cfg.min_fraction * t_d - 1e-9)));
    const auto len_max = static_cast<std::size_t>(std::floor(cfg.max_fraction * t_d + 1e-9));
    if (len_min > len_max || k * len_min > t_raw)
      fail(ErrorCode::kInvalidArgument,
           "synth config infeasible at T_raw=" + std::to_string(t_raw));

    std::vector<std::size_t> lengths(k);
    std::size_t used = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t reserve = len_min * (k - i - 1);
      const std::size_t hi = std::min(len_max, t_raw - used - reserve);
      lengths[i] = len_min + uniform_index(rng, hi - len_min + 1);
      used += lengths[i];
    }
    // Distribute the free snippets over the k+1 gaps.
    const std::size_t free = t_raw - used;
    std::vector<std::size_t> cuts(k);
    for (auto& c : cuts) c = uniform_index(rng, free + 1);
    std::sort(cuts.begin(), cuts.end());

    VideoAnnotation ann;
    ann.video_id = id;
    ann.duration = t_d * cfg.snippet_seconds;
    ann.subset = vi < n_train ? Subset::kTraining : Subset::kValidation;

    FeatureSequence seq(t_raw, cfg.channels);
    for (auto& v : seq.data()) v = static_cast<float>(cfg.noise_std * normal(rng));

    std::set<std::size_t> present;
    std::size_t cursor = 0;
    std::size_t prev_cut = 0;
    for (std::size_t i = 0; i < k; ++i) {
      cursor += cuts[i] - prev_cut;
      prev_cut = cuts[i];
      const std::size_t cls = uniform_index(rng, cfg.n_classes);
      present.insert(cls);
      for (std::size_t t = cursor; t < cursor + lengths[i]; ++t)
        for (std::size_t c = 0; c < cfg.channels; ++c)
          seq.at(t, c) = static_cast<float>(patterns[cls][c] + cfg.noise_std * normal(rng));
      ann.instances.push_back({static_cast<double>(cursor) * cfg.snippet_seconds,
                               static_cast<double>(cursor + lengths[i]) * cfg.snippet_seconds,
                               class_names[cls]});
      cursor += lengths[i];
    }

    std::vector<ClassScore> scores;
    for (std::size_t cls = 0; cls < cfg.n_classes; ++cls)
      scores.push_back({class_names[cls], present.count(cls) ? 1.0 : uniform(rng, 0.0, 0.3)});
    std::stable_sort(scores.begin(), scores.end(),
                     [](const ClassScore& a, const ClassScore& b) { return a.score > b.score; });

    ds.class_scores[id] = std::move(scores);
    ds.features.emplace(id, std::move(seq));
    ds.annotations.push_back(std::move(ann));
  }
  validate(ds.annotations);
  return ds;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

}  // namespace cpn::dataio
