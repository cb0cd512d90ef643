#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bm_core.hpp"
#include "common.hpp"
#include "dataio.hpp"
#include "preprocess.hpp"

namespace cpn::model {

struct ModelConfig {
  std::size_t in_channels = 16;
  std::size_t hidden_channels = 8;
  std::size_t base_kernel = 3;
  std::size_t tem_kernel = 3;
  std::size_t pem_kernel = 3;
  std::size_t length = 100;        // T
  std::size_t max_duration = 100;  // D
  std::size_t samples = 32;        // N
  double expansion = 0.25;
  bm::MaskConfig mask;
  double lambda_cls = 1.0;
  double lambda_reg = 10.0;
  double positive_iou = 0.9;
  double reg_high_iou = 0.7;
  double reg_low_iou = 0.3;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

void validate(const ModelConfig& cfg);
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t size() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

// Declaration order of the parameter tensors; also their on-disk order.
enum Param : std::size_t {
  kBase1W, kBase1B, kBase2W, kBase2B,
  kStartW, kStartB, kEndW, kEndB,
  kReduceW, kReduceB, kPemW, kPemB,
  kClsW, kClsB, kRegW, kRegB,
  kParamCount
};

struct ModelParams {
  std::vector<Tensor> tensors;

  Tensor& operator[](Param p) { return tensors[p]; }
  const Tensor& operator[](Param p) const { return tensors[p]; }
  std::size_t total_size() const;
  bool operator==(const ModelParams&) const = default;
};

/// Zero-filled parameters shaped for cfg.
ModelParams zero_params(const ModelConfig& cfg);
/// Glorot-uniform weights, zero biases, seeded by cfg.seed.
ModelParams init_params(const ModelConfig& cfg);

struct NetworkOutputs {
  std::vector<double> p_start;
  std::vector<double> p_end;
  bm::GridMap p_cls;
  bm::GridMap p_reg;

  std::size_t length() const { return p_start.size(); }
  std::size_t max_duration() const { return p_cls.rows; }
  bool operator==(const NetworkOutputs&) const = default;
};

std::string encode_outputs(const NetworkOutputs& out);
NetworkOutputs decode_outputs(std::string_view bytes);

struct BoundaryLabels {
  std::vector<double> start;
  std::vector<double> end;
};

BoundaryLabels boundary_labels(const dataio::VideoAnnotation& ann, std::size_t length);

/// Holds the immutable per-configuration machinery (grid, sampling matrix).
class Network {
 public:
  explicit Network(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const bm::ProposalGrid& grid() const { return sampler_.grid(); }
  const bm::SamplingMatrix& sampler() const { return sampler_; }

 private:
  ModelConfig cfg_;
  bm::SamplingMatrix sampler_;
};

/// Inference when training is false (no masking, no rng use). In training
/// mode a fresh mask is drawn from rng.
NetworkOutputs forward(const Network& net, const ModelParams& params,
                       const dataio::FeatureSequence& seq, bool training, Rng& rng);

/// Forward pass with an explicit, already realized mask.
NetworkOutputs forward_with_mask(const Network& net, const ModelParams& params,
                                 const dataio::FeatureSequence& seq, const bm::Mask* mask);

struct LossTerms {
  double tem = 0.0;
  double cls = 0.0;  // unweighted
  double reg = 0.0;  // unweighted
  double total = 0.0;
};

/// Balanced logistic loss over both boundary vectors.
double tem_loss(std::span<const double> p_start, std::span<const double> p_end,
                const BoundaryLabels& labels);

struct PemLoss {
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

struct PemThresholds {
  double positive = 0.9;
  double high = 0.7;
  double low = 0.3;
};

PemLoss pem_loss(const bm::GridMap& p_cls, const bm::GridMap& p_reg, const bm::GridMap& gt,
                 const bm::ProposalGrid& grid, double lambda_cls, double lambda_reg,
                 const PemThresholds& th, Rng& rng);

/// Cells used by the regression term: every cell above `high` plus equal-size
/// uniform draws from the middle and low strata.
std::vector<std::size_t> regression_cells(const bm::GridMap& gt, const bm::ProposalGrid& grid,
                                          const PemThresholds& th, Rng& rng);

/// One prepared training example. `noise_seed` drives the mask and the
/// regression-cell draw; `mask` overrides the drawn mask when set.
struct TrainSample {
  dataio::FeatureSequence features;  // already at length T
  BoundaryLabels labels;
  bm::GridMap gt_iou;
  std::uint64_t noise_seed = 0;
  std::optional<bm::Mask> mask;
};

TrainSample make_sample(const Network& net, const dataio::FeatureSequence& seq,
                        const dataio::VideoAnnotation& ann, std::uint64_t noise_seed);

/// Loss of one sample in training mode; accumulates its gradient into grad
/// when non-null.
LossTerms sample_loss(const Network& net, const ModelParams& params, const TrainSample& sample,
                      ModelParams* grad);

struct BatchGradient {
  double loss = 0.0;  // mean over the batch
  ModelParams grad;   // gradient of the mean loss
};

/// Mean loss and its exact gradient over the batch. Per-sample work may run on
/// `threads` workers; the reduction order is fixed.
BatchGradient compute_gradients(const Network& net, const ModelParams& params,
                                std::span<const TrainSample> batch, std::size_t threads = 1);

struct TrainingData {
  dataio::AnnotationSet annotations;
  std::map<std::string, dataio::FeatureSequence> features;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t samples = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

TrainResult train(const TrainingData& data, const ModelConfig& cfg,
                  const preprocess::PreprocessConfig& pp, std::size_t threads = 1,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

struct ModelFile {
  ModelConfig config;
  ModelParams params;
};

std::string encode_model(const ModelConfig& cfg, const ModelParams& params);
ModelFile decode_model(std::string_view bytes);
void save_model(const ModelConfig& cfg, const ModelParams& params,
                const std::filesystem::path& path);
ModelFile load_model(const std::filesystem::path& path);

/// Converts a time-major feature sequence into the channel-major layout the
/// network consumes.
std::vector<double> channel_major(const dataio::FeatureSequence& seq);

}  // namespace cpn::model
