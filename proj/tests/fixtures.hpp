#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "common.hpp"
#include "cpn_model.hpp"
#include "dataio.hpp"
#include "evalkit.hpp"
#include "oracles.hpp"
#include "postprocess.hpp"

namespace fixture {

using cpn::Rng;
using cpn::dataio::AnnotationSet;
using cpn::dataio::FeatureSequence;
using cpn::dataio::VideoAnnotation;

inline VideoAnnotation video(const std::string& id, double duration,
                             std::vector<cpn::dataio::Instance> instances = {},
                             cpn::dataio::Subset subset = cpn::dataio::Subset::kTraining) {
  return {id, duration, subset, std::move(instances)};
}

inline FeatureSequence random_features(std::size_t t, std::size_t c, Rng& rng) {
  FeatureSequence f(t, c);
  for (auto& v : f.data()) v = static_cast<float>(cpn::uniform(rng, -1.0, 1.0));
  return f;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cpn_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Random segment inside [0, duration]; on a quarter-unit lattice when `lattice`
// so that ties and exact threshold hits occur.
inline std::pair<double, double> random_segment(Rng& rng, double duration, bool lattice) {
  double a = cpn::uniform(rng, 0.0, duration);
  double b = cpn::uniform(rng, 0.0, duration);
  if (lattice) {
    a = std::round(a * 4.0) / 4.0;
    b = std::round(b * 4.0) / 4.0;
  }
  if (a > b) std::swap(a, b);
  if (b - a < 0.25) b = std::min(duration, a + 0.25 + (lattice ? 0.0 : 0.01));
  if (b <= a) a = b - 0.25;
  return {a, b};
}

struct MetricProblem {
  AnnotationSet gt;
  cpn::post::DetectionResults detections;
  cpn::post::ProposalResults proposals;  // sorted by score
};

// `videos` small videos with at most 4 GT and 6 detections each.
inline MetricProblem random_metric_problem(std::uint64_t seed, std::size_t videos, bool lattice) {
  Rng rng(seed);
  const std::vector<std::string> labels = {"a", "b", "c"};
  MetricProblem p;
  for (std::size_t v = 0; v < videos; ++v) {
    const std::string id = "v" + std::to_string(v);
    const double dur = 20.0;
    VideoAnnotation ann = video(id, dur);
    const std::size_t n_gt = cpn::uniform_index(rng, 5);
    for (std::size_t g = 0; g < n_gt; ++g) {
      auto [s, e] = random_segment(rng, dur, lattice);
      ann.instances.push_back({s, e, labels[cpn::uniform_index(rng, labels.size())]});
    }
    std::vector<cpn::post::Detection> dets;
    std::vector<cpn::post::Proposal> props;
    const std::size_t n_det = cpn::uniform_index(rng, 7);
    for (std::size_t k = 0; k < n_det; ++k) {
      double s, e;
      if (!ann.instances.empty() && cpn::uniform01(rng) < 0.6) {
        // Jittered copy of a GT so that matches are common.
        const auto& g = ann.instances[cpn::uniform_index(rng, ann.instances.size())];
        const double j = lattice ? 0.25 * static_cast<double>(cpn::uniform_index(rng, 3)) : cpn::uniform(rng, 0.0, 1.5);
        s = std::max(0.0, g.start - j);
        e = g.end + (lattice ? 0.25 * static_cast<double>(cpn::uniform_index(rng, 3)) : cpn::uniform(rng, 0.0, 1.5));
      } else {
        std::tie(s, e) = random_segment(rng, dur, lattice);
      }
      double score = cpn::uniform01(rng);
      if (lattice) score = std::round(score * 4.0) / 4.0;  // forces score ties
      dets.push_back({s, e, labels[cpn::uniform_index(rng, labels.size())], score});
      props.push_back({s, e, score});
    }
    std::stable_sort(props.begin(), props.end(),
                     [](const auto& a, const auto& b) { return a.score > b.score; });
    p.gt.push_back(std::move(ann));
    p.detections[id] = std::move(dets);
    p.proposals[id] = std::move(props);
  }
  return p;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

inline cpn::model::ModelConfig gradcheck_config() {
  cpn::model::ModelConfig cfg;
  cfg.in_channels = 3;
  cfg.hidden_channels = 4;
  cfg.length = 8;
  cfg.max_duration = 8;
  cfg.samples = 4;
  cfg.mask.p_mask = 0.0;
  return cfg;
}

// Analytic vs central-difference gradient of one sample's total loss.
// `masked` freezes a drawn proposal mask (p = 0.3) into the sample.
inline GradCheck gradient_check(std::uint64_t seed, bool masked,
                                cpn::bm::MaskGranularity granularity =
                                    cpn::bm::MaskGranularity::kProposal) {
  using namespace cpn::model;
  ModelConfig cfg = gradcheck_config();
  cfg.seed = seed;
  const Network net(cfg);
  Rng rng(cpn::derive_seed(seed, 0x9c));
  ModelParams params = init_params(cfg);
  // Nonzero biases keep activations away from the ReLU kink at exactly 0.
  for (auto& t : params.tensors)
    if (t.shape.size() == 1)
      for (auto& v : t.data) v = cpn::uniform(rng, -0.3, 0.3);

  const auto feats = random_features(8, 3, rng);
  const double s = cpn::uniform(rng, 0.5, 3.0);
  const double e = cpn::uniform(rng, s + 1.5, 7.8);
  const auto ann = video("g", 8.0, {{s, e, "x"}});
  TrainSample sample = make_sample(net, feats, ann, cpn::derive_seed(seed, 0x5a));
  if (masked) {
    cpn::bm::MaskConfig mc{0.3, granularity};
    Rng mrng(cpn::derive_seed(seed, 0x3f));
    sample.mask = cpn::bm::draw_mask(mc, cfg.hidden_channels, net.grid(), mrng);
  }

  ModelParams analytic = zero_params(cfg);
  sample_loss(net, params, sample, &analytic);
  const auto numeric = oracle::finite_difference(
      params, [&](const ModelParams& p) { return sample_loss(net, p, sample, nullptr).total; },
      1e-5);

  GradCheck r;
  for (std::size_t p = 0; p < params.tensors.size(); ++p)
    for (std::size_t i = 0; i < params.tensors[p].data.size(); ++i) {
      const double a = analytic.tensors[p].data[i];
      const double n = numeric.tensors[p].data[i];
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
      r.max_rel_error = std::max(r.max_rel_error, rel);
      ++r.entries;
    }
  return r;
}

}  // namespace fixture
