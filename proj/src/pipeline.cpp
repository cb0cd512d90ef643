#include "pipeline.hpp"

#include <thread>

#include <spdlog/spdlog.h>

namespace cpn::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_file(const fs::path& p, const char* key) {
  if (!fs::is_regular_file(p))
    fail(ErrorCode::kIo, std::string("missing input ") + key + " = '" + p.string() + "'");
}

void require_dir(const fs::path& p, const char* key) {
  if (!fs::is_directory(p))
    fail(ErrorCode::kIo, std::string("missing input ") + key + " = '" + p.string() + "'");
}

fs::path feature_path(const fs::path& dir, const std::string& id) { return dir / (id + ".cpnf"); }
fs::path outputs_path(const fs::path& dir, const std::string& id) {
  return dir / "outputs" / (id + ".cpno");
}

dataio::AnnotationSet subset_of(const dataio::AnnotationSet& anns, dataio::Subset s) {
  dataio::AnnotationSet out;
  for (const auto& v : anns)
    if (v.subset == s) out.push_back(v);
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; results are written
// by index so output never depends on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

json write_results(const RunConfig& cfg, const dataio::AnnotationSet& videos,
                   const std::vector<model::NetworkOutputs>& outputs,
                   const bm::ProposalGrid& grid, const dataio::ClassScores& scores) {
  post::ProposalResults proposals;
  post::DetectionResults detections;
  std::size_t n_props = 0, n_dets = 0;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const auto& v = videos[i];
    dataio::write_file(outputs_path(cfg.paths.output_dir, v.video_id),
                       model::encode_outputs(outputs[i]));
    auto it = scores.find(v.video_id);
    const auto* cs = it == scores.end() || it->second.empty() ? nullptr : &it->second;
    VideoResult r = postprocess_video(outputs[i], grid, v, cs, cfg.postprocess);
    n_props += r.proposals.size();
    n_dets += r.detections.size();
    proposals[v.video_id] = std::move(r.proposals);
    detections[v.video_id] = std::move(r.detections);
  }
  const fs::path prop_path = cfg.paths.output_dir / "proposals.json";
  const fs::path det_path = cfg.paths.output_dir / "detections.json";
  dataio::write_file(prop_path, post::dump_proposals(proposals));
  dataio::write_file(det_path, post::dump_detections(detections));
  return {{"videos", videos.size()},
          {"proposals", n_props},
          {"detections", n_dets},
          {"proposals_file", prop_path.string()},
          {"detections_file", det_path.string()}};
}

}  // namespace

VideoResult postprocess_video(const model::NetworkOutputs& out, const bm::ProposalGrid& grid,
                              const dataio::VideoAnnotation& ann,
                              const std::vector<dataio::ClassScore>* class_scores,
                              const post::PostprocessConfig& cfg) {
  VideoResult r;
  r.proposals = post::soft_nms(post::fuse_scores(out, grid, ann.duration), cfg.sigma,
                               cfg.score_floor, cfg.max_out);
  if (class_scores) r.detections = post::assemble_detections(r.proposals, *class_scores, cfg.top_k);
  return r;
}

model::TrainingData load_training_data(const dataio::AnnotationSet& anns,
                                       const fs::path& features_dir) {
  model::TrainingData data;
  for (const auto& v : anns) {
    if (v.subset != dataio::Subset::kTraining) continue;
    data.annotations.push_back(v);
    data.features.emplace(v.video_id, dataio::load_features(feature_path(features_dir, v.video_id)));
  }
  return data;
}

json run_synth(const RunConfig& cfg) {
  const auto ds = dataio::synth_dataset(cfg.synth);
  const fs::path out = cfg.paths.output_dir;
  fs::create_directories(out / "features");
  dataio::save_annotations(ds.annotations, out / "annotations.json");
  dataio::save_class_scores(ds.class_scores, out / "class_scores.json");
  for (const auto& [id, seq] : ds.features) dataio::save_features(seq, feature_path(out / "features", id));
  spdlog::info("synth: wrote {} videos to {}", ds.annotations.size(), out.string());
  return {{"videos", ds.annotations.size()}, {"output_dir", out.string()}};
}

json run_preprocess(const RunConfig& cfg) {
  const fs::path ann_path = cfg.paths.annotations_or_default();
  require_file(ann_path, "paths.annotations");
  const auto anns = dataio::load_annotations(ann_path);
  const auto& pp = cfg.preprocess;
  const auto kept = pp.enable_remove_long ? preprocess::remove_long_coverage(anns, pp.theta_long) : anns;
  const auto epoch = preprocess::resample_short(kept, pp.theta_short,
                                                pp.enable_resample_short ? pp.repeat_factor : 1);
  dataio::save_annotations(kept, cfg.paths.output_dir / "annotations_filtered.json");
  dataio::write_file(cfg.paths.output_dir / "epoch_list.json", json(epoch).dump(1));
  return {{"videos_in", anns.size()},
          {"videos_kept", kept.size()},
          {"removed_long", anns.size() - kept.size()},
          {"epoch_length", epoch.size()}};
}

json run_train(const RunConfig& cfg) {
  const fs::path ann_path = cfg.paths.annotations_or_default();
  const fs::path feat_dir = cfg.paths.features_dir_or_default();
  require_file(ann_path, "paths.annotations");
  require_dir(feat_dir, "paths.features_dir");
  const auto anns = dataio::load_annotations(ann_path);
  const auto data = load_training_data(anns, feat_dir);
  if (data.features.empty()) fail(ErrorCode::kInvalidArgument, "train: no training videos");

  model::ModelConfig mc = cfg.model;
  mc.in_channels = data.features.begin()->second.channels();
  const auto result = model::train(data, mc, cfg.preprocess, cfg.threads);

  const fs::path model_path = cfg.paths.output_dir / "model.cpnm";
  model::save_model(mc, result.params, model_path);
  json epochs = json::array();
  for (const auto& e : result.log)
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"samples", e.samples}});
  json log = {{"model", model_path.string()}, {"epochs", std::move(epochs)}};
  dataio::write_file(cfg.paths.output_dir / "train_log.json", log.dump(1));
  return log;
}

json run_infer(const RunConfig& cfg) {
  const fs::path ann_path = cfg.paths.annotations_or_default();
  const fs::path feat_dir = cfg.paths.features_dir_or_default();
  const fs::path model_path = cfg.paths.model_or_default();
  const fs::path scores_path = cfg.paths.class_scores_or_default();
  require_file(ann_path, "paths.annotations");
  require_dir(feat_dir, "paths.features_dir");
  require_file(model_path, "paths.model");
  require_file(scores_path, "paths.class_scores");

  const auto mf = model::load_model(model_path);
  const model::Network net(mf.config);
  const auto videos = subset_of(dataio::load_annotations(ann_path), cfg.infer_subset);
  const auto scores = dataio::load_class_scores(scores_path);

  std::vector<model::NetworkOutputs> outputs(videos.size());
  parallel_for(videos.size(), cfg.threads, [&](std::size_t i) {
    const auto raw = dataio::load_features(feature_path(feat_dir, videos[i].video_id));
    const auto seq = dataio::rescale_features(raw, mf.config.length);
    Rng unused(0);
    outputs[i] = model::forward(net, mf.params, seq, /*training=*/false, unused);
  });
  return write_results(cfg, videos, outputs, net.grid(), scores);
}

Report run_eval_proposals(const RunConfig& cfg) {
  const fs::path ann_path = cfg.paths.annotations_or_default();
  const fs::path prop_path = cfg.paths.proposals_or_default();
  require_file(ann_path, "paths.annotations");
  require_file(prop_path, "paths.proposals");
  const auto gt = subset_of(dataio::load_annotations(ann_path), cfg.eval_subset);
  const auto props = post::parse_proposals(dataio::read_file(prop_path));
  const auto report = eval::evaluate_proposals(props, gt, cfg.eval_max_an);
  Report r{eval::to_json(report), eval::format_table(report)};
  dataio::write_file(cfg.paths.output_dir / "proposal_report.json", r.json.dump(1));
  return r;
}

Report run_eval_detections(const RunConfig& cfg) {
  const fs::path ann_path = cfg.paths.annotations_or_default();
  const fs::path det_path = cfg.paths.detections_or_default();
  require_file(ann_path, "paths.annotations");
  require_file(det_path, "paths.detections");
  const auto gt = subset_of(dataio::load_annotations(ann_path), cfg.eval_subset);
  const auto dets = post::parse_detections(dataio::read_file(det_path));
  const auto report = eval::average_map(dets, gt);
  Report r{eval::to_json(report), eval::format_table(report)};
  dataio::write_file(cfg.paths.output_dir / "detection_report.json", r.json.dump(1));
  return r;
}

json run_ensemble(const RunConfig& cfg) {
  if (cfg.ensemble_inputs.empty())
    fail(ErrorCode::kValidation, "ensemble.inputs must list at least one inference directory");
  std::vector<double> weights = cfg.ensemble_weights;
  if (weights.empty()) weights.assign(cfg.ensemble_inputs.size(), 1.0);
  if (weights.size() != cfg.ensemble_inputs.size())
    fail(ErrorCode::kValidation, "ensemble.weights must have one entry per input");

  const fs::path ann_path = cfg.paths.annotations_or_default();
  const fs::path scores_path = cfg.paths.class_scores_or_default();
  require_file(ann_path, "paths.annotations");
  require_file(scores_path, "paths.class_scores");
  for (const auto& dir : cfg.ensemble_inputs) require_dir(dir / "outputs", "ensemble.inputs");

  const auto videos = subset_of(dataio::load_annotations(ann_path), cfg.infer_subset);
  const auto scores = dataio::load_class_scores(scores_path);
  const auto grid = bm::proposal_grid(cfg.model.length, cfg.model.max_duration);

  std::vector<model::NetworkOutputs> fused(videos.size());
  parallel_for(videos.size(), cfg.threads, [&](std::size_t i) {
    std::vector<model::NetworkOutputs> members;
    for (const auto& dir : cfg.ensemble_inputs) {
      const auto o = model::decode_outputs(dataio::read_file(outputs_path(dir, videos[i].video_id)));
      members.push_back(post::rescale_outputs(o, grid.length, grid.max_duration));
    }
    fused[i] = post::ensemble_maps(members, weights);
  });
  json summary = write_results(cfg, videos, fused, grid, scores);
  summary["members"] = cfg.ensemble_inputs.size();
  return summary;
}

}  // namespace cpn::pipeline
