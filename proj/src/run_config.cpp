#include "run_config.hpp"

namespace cpn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path or_default(const fs::path& p, const fs::path& dir, const char* name) {
  return p.empty() ? dir / name : p;
}

void merge_strict(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object())
    fail(ErrorCode::kValidation, "config section '" + (prefix.empty() ? "<root>" : prefix) +
                                     "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string dotted = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) fail(ErrorCode::kValidation, "unknown config key '" + dotted + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, dotted);
    } else {
      const bool number_ok = slot.is_number() && value.is_number();
      if (!number_ok && slot.type() != value.type() && !(slot.is_array() && value.is_array()))
        fail(ErrorCode::kValidation, "config key '" + dotted + "' has the wrong type");
      slot = value;
    }
  }
}

template <typename T>
T get(const json& doc, const char* section, const char* key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kValidation,
         std::string("config key '") + section + "." + key + "': " + e.what());
  }
}

}  // namespace

fs::path Paths::annotations_or_default() const {
  return or_default(annotations, output_dir, "annotations.json");
}
fs::path Paths::features_dir_or_default() const {
  return or_default(features_dir, output_dir, "features");
}
fs::path Paths::class_scores_or_default() const {
  return or_default(class_scores, output_dir, "class_scores.json");
}
fs::path Paths::model_or_default() const { return or_default(model, output_dir, "model.cpnm"); }
fs::path Paths::proposals_or_default() const {
  return or_default(proposals, output_dir, "proposals.json");
}
fs::path Paths::detections_or_default() const {
  return or_default(detections, output_dir, "detections.json");
}

json default_config_json() {
  const dataio::SynthConfig s;
  const model::ModelConfig m;
  const preprocess::PreprocessConfig p;
  const post::PostprocessConfig q;
  return {
      {"seed", 0},
      {"threads", 1},
      {"paths",
       {{"output_dir", "cpn_run"},
        {"annotations", ""},
        {"features_dir", ""},
        {"class_scores", ""},
        {"model", ""},
        {"proposals", ""},
        {"detections", ""}}},
      {"synth",
       {{"n_videos", s.n_videos},
        {"val_fraction", s.val_fraction},
        {"t_raw_min", s.t_raw_min},
        {"t_raw_max", s.t_raw_max},
        {"channels", s.channels},
        {"n_classes", s.n_classes},
        {"instances_min", s.instances_min},
        {"instances_max", s.instances_max},
        {"min_fraction", s.min_fraction},
        {"max_fraction", s.max_fraction},
        {"noise_std", s.noise_std},
        {"snippet_seconds", s.snippet_seconds}}},
      {"grid", {{"T", m.length}, {"D", m.max_duration}, {"N", m.samples}, {"expansion", m.expansion}}},
      {"mask", {{"p", m.mask.p_mask}, {"granularity", bm::to_string(m.mask.granularity)}}},
      {"model",
       {{"hidden_channels", m.hidden_channels},
        {"base_kernel", m.base_kernel},
        {"tem_kernel", m.tem_kernel},
        {"pem_kernel", m.pem_kernel},
        {"lambda_cls", m.lambda_cls},
        {"lambda_reg", m.lambda_reg},
        {"positive_iou", m.positive_iou},
        {"reg_high_iou", m.reg_high_iou},
        {"reg_low_iou", m.reg_low_iou},
        {"learning_rate", m.learning_rate},
        {"momentum", m.momentum},
        {"epochs", m.epochs},
        {"batch_size", m.batch_size}}},
      {"preprocess",
       {{"theta_long", p.theta_long},
        {"theta_short", p.theta_short},
        {"repeat_factor", p.repeat_factor},
        {"resize_lo", p.resize_lo},
        {"resize_hi", p.resize_hi},
        {"shift_fraction", p.shift_fraction},
        {"resize_probability", p.resize_probability},
        {"shift_probability", p.shift_probability},
        {"enable_remove_long", p.enable_remove_long},
        {"enable_resample_short", p.enable_resample_short},
        {"enable_resize", p.enable_resize},
        {"enable_shift", p.enable_shift}}},
      {"postprocess",
       {{"sigma", q.sigma}, {"score_floor", q.score_floor}, {"max_out", q.max_out}, {"top_k", q.top_k}}},
      {"infer", {{"subset", "validation"}}},
      {"eval", {{"subset", "validation"}, {"max_an", 100}}},
      {"ensemble", {{"inputs", json::array()}, {"weights", json::array()}}},
  };
}

json merge_config(const json& user) {
  json base = default_config_json();
  merge_strict(base, user, "");
  return base;
}

void set_config_value(json& doc, const std::string& dotted_key, const std::string& json_value) {
  json value;
  try {
    value = json::parse(json_value);
  } catch (const json::exception&) {
    value = json_value;  // bare strings need no quoting on the command line
  }
  json patch = value;
  std::string rest = dotted_key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_strict(doc, patch, "");
}

RunConfig run_config_from_json(const json& d) {
  RunConfig c;
  try {
    c.seed = d.at("seed").get<std::uint64_t>();
    c.threads = d.at("threads").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kValidation, std::string("config seed/threads: ") + e.what());
  }
  if (c.threads == 0) fail(ErrorCode::kValidation, "threads must be >= 1");

  c.paths.output_dir = get<std::string>(d, "paths", "output_dir");
  c.paths.annotations = get<std::string>(d, "paths", "annotations");
  c.paths.features_dir = get<std::string>(d, "paths", "features_dir");
  c.paths.class_scores = get<std::string>(d, "paths", "class_scores");
  c.paths.model = get<std::string>(d, "paths", "model");
  c.paths.proposals = get<std::string>(d, "paths", "proposals");
  c.paths.detections = get<std::string>(d, "paths", "detections");

  auto& s = c.synth;
  s.n_videos = get<std::size_t>(d, "synth", "n_videos");
  s.val_fraction = get<double>(d, "synth", "val_fraction");
  s.t_raw_min = get<std::size_t>(d, "synth", "t_raw_min");
  s.t_raw_max = get<std::size_t>(d, "synth", "t_raw_max");
  s.channels = get<std::size_t>(d, "synth", "channels");
  s.n_classes = get<std::size_t>(d, "synth", "n_classes");
  s.instances_min = get<std::size_t>(d, "synth", "instances_min");
  s.instances_max = get<std::size_t>(d, "synth", "instances_max");
  s.min_fraction = get<double>(d, "synth", "min_fraction");
  s.max_fraction = get<double>(d, "synth", "max_fraction");
  s.noise_std = get<double>(d, "synth", "noise_std");
  s.snippet_seconds = get<double>(d, "synth", "snippet_seconds");
  s.seed = c.seed;

  auto& m = c.model;
  m.length = get<std::size_t>(d, "grid", "T");
  m.max_duration = get<std::size_t>(d, "grid", "D");
  m.samples = get<std::size_t>(d, "grid", "N");
  m.expansion = get<double>(d, "grid", "expansion");
  m.mask.p_mask = get<double>(d, "mask", "p");
  m.mask.granularity = bm::parse_granularity(get<std::string>(d, "mask", "granularity"));
  m.hidden_channels = get<std::size_t>(d, "model", "hidden_channels");
  m.base_kernel = get<std::size_t>(d, "model", "base_kernel");
  m.tem_kernel = get<std::size_t>(d, "model", "tem_kernel");
  m.pem_kernel = get<std::size_t>(d, "model", "pem_kernel");
  m.lambda_cls = get<double>(d, "model", "lambda_cls");
  m.lambda_reg = get<double>(d, "model", "lambda_reg");
  m.positive_iou = get<double>(d, "model", "positive_iou");
  m.reg_high_iou = get<double>(d, "model", "reg_high_iou");
  m.reg_low_iou = get<double>(d, "model", "reg_low_iou");
  m.learning_rate = get<double>(d, "model", "learning_rate");
  m.momentum = get<double>(d, "model", "momentum");
  m.epochs = get<std::size_t>(d, "model", "epochs");
  m.batch_size = get<std::size_t>(d, "model", "batch_size");
  m.seed = c.seed;
  model::validate(m);

  auto& p = c.preprocess;
  p.theta_long = get<double>(d, "preprocess", "theta_long");
  p.theta_short = get<double>(d, "preprocess", "theta_short");
  p.repeat_factor = get<std::size_t>(d, "preprocess", "repeat_factor");
  p.resize_lo = get<double>(d, "preprocess", "resize_lo");
  p.resize_hi = get<double>(d, "preprocess", "resize_hi");
  p.shift_fraction = get<double>(d, "preprocess", "shift_fraction");
  p.resize_probability = get<double>(d, "preprocess", "resize_probability");
  p.shift_probability = get<double>(d, "preprocess", "shift_probability");
  p.enable_remove_long = get<bool>(d, "preprocess", "enable_remove_long");
  p.enable_resample_short = get<bool>(d, "preprocess", "enable_resample_short");
  p.enable_resize = get<bool>(d, "preprocess", "enable_resize");
  p.enable_shift = get<bool>(d, "preprocess", "enable_shift");
  preprocess::validate(p);

  auto& q = c.postprocess;
  q.sigma = get<double>(d, "postprocess", "sigma");
  q.score_floor = get<double>(d, "postprocess", "score_floor");
  q.max_out = get<std::size_t>(d, "postprocess", "max_out");
  q.top_k = get<std::size_t>(d, "postprocess", "top_k");
  post::validate(q);

  c.infer_subset = dataio::parse_subset(get<std::string>(d, "infer", "subset"));
  c.eval_subset = dataio::parse_subset(get<std::string>(d, "eval", "subset"));
  c.eval_max_an = get<std::size_t>(d, "eval", "max_an");
  if (c.eval_max_an == 0) fail(ErrorCode::kValidation, "eval.max_an must be >= 1");
  for (const auto& p_in : get<std::vector<std::string>>(d, "ensemble", "inputs"))
    c.ensemble_inputs.emplace_back(p_in);
  c.ensemble_weights = get<std::vector<double>>(d, "ensemble", "weights");
  return c;
}

RunConfig parse_run_config(const std::string& json_text) {
  json user;
  try {
    user = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed config JSON: ") + e.what());
  }
  return run_config_from_json(merge_config(user));
}

RunConfig load_run_config(const fs::path& path) {
  return parse_run_config(dataio::read_file(path));
}

}  // namespace cpn
