#include "cpn/cpn.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>

#include <spdlog/spdlog.h>

#include "pipeline.hpp"

struct cpn_config {
  nlohmann::json doc;  // merged with defaults
};

struct cpn_model {
  cpn::model::ModelFile file;
  cpn::model::Network net;
};

struct cpn_features {
  cpn::dataio::FeatureSequence seq;
};

namespace {

thread_local std::string g_last_error;

cpn_status to_status(cpn::ErrorCode code) { return static_cast<cpn_status>(code); }

template <typename Fn>
cpn_status guarded(Fn&& fn) {
  try {
    fn();
    return CPN_OK;
  } catch (const cpn::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return CPN_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CPN_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return CPN_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

void require(const void* p, const char* what) {
  if (!p) cpn::fail(cpn::ErrorCode::kInvalidArgument, std::string(what) + " is NULL");
}

cpn::RunConfig resolve(const cpn_config* cfg) {
  require(cfg, "config");
  return cpn::run_config_from_json(cfg->doc);
}

struct LogInit {
  LogInit() {
    const char* env = std::getenv("CPN_LOG");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
  }
};
const LogInit g_log_init;

}  // namespace

extern "C" {

const char* cpn_version(void) { return "1.0.0"; }

const char* cpn_status_name(cpn_status status) {
  switch (status) {
    case CPN_OK: return "ok";
    case CPN_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case CPN_ERR_IO: return "io";
    case CPN_ERR_FORMAT: return "format";
    case CPN_ERR_VALIDATION: return "validation";
    case CPN_ERR_DIVERGED: return "diverged";
    case CPN_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* cpn_last_error(void) { return g_last_error.c_str(); }

void cpn_string_free(char* s) { std::free(s); }

cpn_status cpn_set_log_level(const char* level) {
  return guarded([&] {
    require(level, "level");
    const std::string name(level);
    const auto lvl = spdlog::level::from_str(name);
    if (lvl == spdlog::level::off && name != "off")
      cpn::fail(cpn::ErrorCode::kInvalidArgument, "unknown log level '" + name + "'");
    spdlog::set_level(lvl);
  });
}

cpn_status cpn_config_create(const char* json_text, cpn_config** out) {
  return guarded([&] {
    require(out, "out");
    nlohmann::json user = nlohmann::json::object();
    if (json_text) {
      try {
        user = nlohmann::json::parse(json_text);
      } catch (const nlohmann::json::exception& e) {
        cpn::fail(cpn::ErrorCode::kFormat, std::string("malformed config JSON: ") + e.what());
      }
    }
    auto cfg = std::make_unique<cpn_config>(cpn_config{cpn::merge_config(user)});
    cpn::run_config_from_json(cfg->doc);
    *out = cfg.release();
  });
}

cpn_status cpn_config_load(const char* path, cpn_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    const std::string text = cpn::dataio::read_file(path);
    cpn_status st = cpn_config_create(text.c_str(), out);
    if (st != CPN_OK) throw cpn::Error(static_cast<cpn::ErrorCode>(st), g_last_error);
  });
}

cpn_status cpn_config_set(cpn_config* cfg, const char* dotted_key, const char* value) {
  return guarded([&] {
    require(cfg, "config");
    require(dotted_key, "key");
    require(value, "value");
    nlohmann::json candidate = cfg->doc;
    cpn::set_config_value(candidate, dotted_key, value);
    cpn::run_config_from_json(candidate);
    cfg->doc = std::move(candidate);
  });
}

cpn_status cpn_config_set_many(cpn_config* cfg, const char* const* dotted_keys,
                               const char* const* values, size_t n) {
  return guarded([&] {
    require(cfg, "config");
    if (n > 0) {
      require(dotted_keys, "keys");
      require(values, "values");
    }
    nlohmann::json candidate = cfg->doc;
    for (size_t i = 0; i < n; ++i) {
      require(dotted_keys[i], "key");
      require(values[i], "value");
      cpn::set_config_value(candidate, dotted_keys[i], values[i]);
    }
    cpn::run_config_from_json(candidate);
    cfg->doc = std::move(candidate);
  });
}

cpn_status cpn_config_to_json(const cpn_config* cfg, char** out_json) {
  return guarded([&] {
    require(cfg, "config");
    require(out_json, "out_json");
    *out_json = dup_string(cfg->doc.dump(2));
  });
}

void cpn_config_free(cpn_config* cfg) { delete cfg; }

cpn_status cpn_run_synth(const cpn_config* cfg, char** summary_json) {
  return guarded([&] { emit(summary_json, cpn::pipeline::run_synth(resolve(cfg)).dump()); });
}

cpn_status cpn_run_preprocess(const cpn_config* cfg, char** summary_json) {
  return guarded([&] { emit(summary_json, cpn::pipeline::run_preprocess(resolve(cfg)).dump()); });
}

cpn_status cpn_run_train(const cpn_config* cfg, char** log_json) {
  return guarded([&] { emit(log_json, cpn::pipeline::run_train(resolve(cfg)).dump()); });
}

cpn_status cpn_run_infer(const cpn_config* cfg, char** summary_json) {
  return guarded([&] { emit(summary_json, cpn::pipeline::run_infer(resolve(cfg)).dump()); });
}

cpn_status cpn_run_eval_proposals(const cpn_config* cfg, char** report_json, char** table_text) {
  return guarded([&] {
    const auto r = cpn::pipeline::run_eval_proposals(resolve(cfg));
    emit(report_json, r.json.dump());
    emit(table_text, r.table);
  });
}

cpn_status cpn_run_eval_detections(const cpn_config* cfg, char** report_json, char** table_text) {
  return guarded([&] {
    const auto r = cpn::pipeline::run_eval_detections(resolve(cfg));
    emit(report_json, r.json.dump());
    emit(table_text, r.table);
  });
}

cpn_status cpn_run_ensemble(const cpn_config* cfg, char** summary_json) {
  return guarded([&] { emit(summary_json, cpn::pipeline::run_ensemble(resolve(cfg)).dump()); });
}

cpn_status cpn_features_create(size_t length, size_t channels, const float* data,
                               cpn_features** out) {
  return guarded([&] {
    require(data, "data");
    require(out, "out");
    if (length == 0 || channels == 0)
      cpn::fail(cpn::ErrorCode::kInvalidArgument, "features need T >= 1 and C >= 1");
    std::vector<float> values(data, data + length * channels);
    for (float v : values)
      if (!std::isfinite(v)) cpn::fail(cpn::ErrorCode::kInvalidArgument, "non-finite feature value");
    *out = new cpn_features{cpn::dataio::FeatureSequence(length, channels, std::move(values))};
  });
}

cpn_status cpn_features_load(const char* path, cpn_features** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new cpn_features{cpn::dataio::load_features(path)};
  });
}

cpn_status cpn_features_save(const cpn_features* f, const char* path) {
  return guarded([&] {
    require(f, "features");
    require(path, "path");
    cpn::dataio::save_features(f->seq, path);
  });
}

size_t cpn_features_length(const cpn_features* f) { return f ? f->seq.length() : 0; }
size_t cpn_features_channels(const cpn_features* f) { return f ? f->seq.channels() : 0; }
const float* cpn_features_data(const cpn_features* f) { return f ? f->seq.data().data() : nullptr; }
void cpn_features_free(cpn_features* f) { delete f; }

cpn_status cpn_model_load(const char* path, cpn_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto file = cpn::model::load_model(path);
    cpn::model::Network net(file.config);
    *out = new cpn_model{std::move(file), std::move(net)};
  });
}

size_t cpn_model_length(const cpn_model* m) { return m ? m->file.config.length : 0; }
size_t cpn_model_max_duration(const cpn_model* m) { return m ? m->file.config.max_duration : 0; }
size_t cpn_model_in_channels(const cpn_model* m) { return m ? m->file.config.in_channels : 0; }

cpn_status cpn_model_infer(const cpn_model* m, const cpn_features* f, double* p_start,
                           double* p_end, double* p_cls, double* p_reg) {
  return guarded([&] {
    require(m, "model");
    require(f, "features");
    const auto seq = cpn::dataio::rescale_features(f->seq, m->file.config.length);
    cpn::Rng unused(0);
    const auto out = cpn::model::forward(m->net, m->file.params, seq, false, unused);
    if (p_start) std::copy(out.p_start.begin(), out.p_start.end(), p_start);
    if (p_end) std::copy(out.p_end.begin(), out.p_end.end(), p_end);
    if (p_cls) std::copy(out.p_cls.values.begin(), out.p_cls.values.end(), p_cls);
    if (p_reg) std::copy(out.p_reg.values.begin(), out.p_reg.values.end(), p_reg);
  });
}

void cpn_model_free(cpn_model* m) { delete m; }

cpn_status cpn_segment_iou(double a_start, double a_end, double b_start, double b_end,
                           double* out) {
  return guarded([&] {
    require(out, "out");
    *out = cpn::bm::segment_iou({a_start, a_end}, {b_start, b_end});
  });
}

cpn_status cpn_soft_nms(const double* starts, const double* ends, const double* scores, size_t n,
                        double sigma, double score_floor, size_t max_out, double* out_starts,
                        double* out_ends, double* out_scores, size_t* out_n) {
  return guarded([&] {
    require(out_n, "out_n");
    if (n > 0) {
      require(starts, "starts");
      require(ends, "ends");
      require(scores, "scores");
    }
    std::vector<cpn::post::Proposal> props;
    for (size_t i = 0; i < n; ++i) {
      if (!(starts[i] < ends[i]))
        cpn::fail(cpn::ErrorCode::kInvalidArgument, "soft_nms: segment " + std::to_string(i) +
                                                        " has start >= end");
      props.push_back({starts[i], ends[i], scores[i]});
    }
    const auto kept = cpn::post::soft_nms(std::move(props), sigma, score_floor, max_out);
    if (!kept.empty()) {
      require(out_starts, "out_starts");
      require(out_ends, "out_ends");
      require(out_scores, "out_scores");
    }
    for (size_t i = 0; i < kept.size(); ++i) {
      out_starts[i] = kept[i].start;
      out_ends[i] = kept[i].end;
      out_scores[i] = kept[i].score;
    }
    *out_n = kept.size();
  });
}

}  // extern "C"
