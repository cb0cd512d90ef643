#include "cpn_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

namespace cpn::model {

using bm::GridMap;
using dataio::FeatureSequence;

namespace {

constexpr double kProbEps = 1e-7;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_positive(std::size_t v, const char* name) {
  if (v == 0) fail(ErrorCode::kValidation, std::string("model.") + name + " must be positive");
}

void check_odd(std::size_t v, const char* name) {
  if (v % 2 == 0) fail(ErrorCode::kValidation, std::string("model.") + name + " must be odd");
}

// out (C_out x T) = W * in + b with zero padding; W is [C_out][C_in][k].
void conv1d(const double* in, std::size_t c_in, std::size_t len, const Tensor& w, const Tensor& b,
            double* out) {
  const std::size_t c_out = w.shape[0];
  const std::size_t k = w.shape[2];
  const auto pad = static_cast<long>(k / 2);
  const auto n = static_cast<long>(len);
  for (std::size_t co = 0; co < c_out; ++co) {
    double* o = out + co * len;
    std::fill(o, o + len, b.data[co]);
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      const double* x = in + ci * len;
      for (std::size_t j = 0; j < k; ++j) {
        const double wv = w.data[(co * c_in + ci) * k + j];
        const long off = static_cast<long>(j) - pad;
        const long t0 = std::max(0L, -off);
        const long t1 = std::min(n, n - off);
        for (long t = t0; t < t1; ++t) o[t] += wv * x[t + off];
      }
    }
  }
}

void conv1d_backward(const double* in, std::size_t c_in, std::size_t len, const Tensor& w,
                     const double* dout, Tensor& dw, Tensor& db, double* din) {
  const std::size_t c_out = w.shape[0];
  const std::size_t k = w.shape[2];
  const auto pad = static_cast<long>(k / 2);
  const auto n = static_cast<long>(len);
  for (std::size_t co = 0; co < c_out; ++co) {
    const double* g = dout + co * len;
    db.data[co] += std::accumulate(g, g + len, 0.0);
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      const double* x = in + ci * len;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t wi = (co * c_in + ci) * k + j;
        const long off = static_cast<long>(j) - pad;
        const long t0 = std::max(0L, -off);
        const long t1 = std::min(n, n - off);
        double acc = 0.0;
        for (long t = t0; t < t1; ++t) acc += g[t] * x[t + off];
        dw.data[wi] += acc;
        if (din) {
          const double wv = w.data[wi];
          double* dx = din + ci * len;
          for (long t = t0; t < t1; ++t) dx[t + off] += wv * g[t];
        }
      }
    }
  }
}

// k x k convolution over the (D, T) plane, evaluated at valid grid cells only.
// Layout of in/out: [C][D][T]. W is [C_out][C_in][k][k].
void conv2d_valid(const double* in, std::size_t c_in, const bm::ProposalGrid& grid,
                  const Tensor& w, const Tensor& b, double* out) {
  const std::size_t c_out = w.shape[0];
  const std::size_t k = w.shape[2];
  const auto pad = static_cast<long>(k / 2);
  const auto rows = static_cast<long>(grid.max_duration);
  const auto cols = static_cast<long>(grid.length);
  const std::size_t plane = grid.cells();
  for (std::size_t co = 0; co < c_out; ++co) {
    double* o = out + co * plane;
    std::fill(o, o + plane, 0.0);
    for (long d = 0; d < rows; ++d) {
      const long t_end = cols - d;  // valid t in [0, t_end)
      if (t_end <= 0) continue;
      std::fill(o + d * cols, o + d * cols + t_end, b.data[co]);
    }
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      const double* x = in + ci * plane;
      for (std::size_t kd = 0; kd < k; ++kd) {
        const long dd = static_cast<long>(kd) - pad;
        for (std::size_t kt = 0; kt < k; ++kt) {
          const long dt = static_cast<long>(kt) - pad;
          const double wv = w.data[((co * c_in + ci) * k + kd) * k + kt];
          if (wv == 0.0) continue;
          for (long d = std::max(0L, -dd); d < rows && d + dd < rows; ++d) {
            const long t_end = std::min(cols - d, cols - dt);
            const double* xr = x + (d + dd) * cols + dt;
            double* orow = o + d * cols;
            for (long t = std::max(0L, -dt); t < t_end; ++t) orow[t] += wv * xr[t];
          }
        }
      }
    }
  }
}

void conv2d_valid_backward(const double* in, std::size_t c_in, const bm::ProposalGrid& grid,
                           const Tensor& w, const double* dout, Tensor& dw, Tensor& db,
                           double* din) {
  const std::size_t c_out = w.shape[0];
  const std::size_t k = w.shape[2];
  const auto pad = static_cast<long>(k / 2);
  const auto rows = static_cast<long>(grid.max_duration);
  const auto cols = static_cast<long>(grid.length);
  const std::size_t plane = grid.cells();
  for (std::size_t co = 0; co < c_out; ++co) {
    const double* g = dout + co * plane;
    double bsum = 0.0;
    for (long d = 0; d < rows; ++d)
      for (long t = 0; t < cols - d; ++t) bsum += g[d * cols + t];
    db.data[co] += bsum;
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      const double* x = in + ci * plane;
      double* dx = din ? din + ci * plane : nullptr;
      for (std::size_t kd = 0; kd < k; ++kd) {
        const long dd = static_cast<long>(kd) - pad;
        for (std::size_t kt = 0; kt < k; ++kt) {
          const long dt = static_cast<long>(kt) - pad;
          const std::size_t wi = ((co * c_in + ci) * k + kd) * k + kt;
          const double wv = w.data[wi];
          double acc = 0.0;
          for (long d = std::max(0L, -dd); d < rows && d + dd < rows; ++d) {
            const long t_end = std::min(cols - d, cols - dt);
            const double* xr = x + (d + dd) * cols + dt;
            const double* grow = g + d * cols;
            for (long t = std::max(0L, -dt); t < t_end; ++t) acc += grow[t] * xr[t];
            if (dx) {
              double* dxr = dx + (d + dd) * cols + dt;
              for (long t = std::max(0L, -dt); t < t_end; ++t) dxr[t] += wv * grow[t];
            }
          }
          dw.data[wi] += acc;
        }
      }
    }
  }
}

// Balanced logistic loss over the entries listed in idx. Adds weight * dL/dz
// (z = logit of p) into grad_z when non-null.
double balanced_logistic(const double* p, const double* labels, std::span<const std::size_t> idx,
                         double weight, double* grad_z) {
  const auto m = static_cast<double>(idx.size());
  if (idx.empty()) return 0.0;
  double n_pos = 0.0;
  for (std::size_t i : idx) n_pos += labels[i] > 0.5 ? 1.0 : 0.0;
  const double n_neg = m - n_pos;
  const double a_pos = n_pos > 0.0 ? m / n_pos : 0.0;
  const double a_neg = n_neg > 0.0 ? m / n_neg : 0.0;
  double loss = 0.0;
  for (std::size_t i : idx) {
    const bool positive = labels[i] > 0.5;
    const double pc = std::clamp(p[i], kProbEps, 1.0 - kProbEps);
    loss -= positive ? a_pos * std::log(pc) : a_neg * std::log(1.0 - pc);
    if (grad_z && pc == p[i]) {
      const double g = positive ? -a_pos * (1.0 - p[i]) : a_neg * p[i];
      grad_z[i] += weight * g / m;
    }
  }
  return loss / m;
}

std::vector<std::size_t> valid_cells(const bm::ProposalGrid& grid) {
  std::vector<std::size_t> cells;
  cells.reserve(grid.valid_count());
  for (std::size_t d = 0; d < grid.max_duration; ++d)
    for (std::size_t t = 0; t + d + 1 <= grid.length; ++t) cells.push_back(grid.index(d, t));
  return cells;
}

// Uniform draw of min(k, pool.size()) elements without replacement, in pool
// order after a partial Fisher-Yates shuffle.
void draw_without_replacement(std::vector<std::size_t>& pool, std::size_t k, Rng& rng,
                              std::vector<std::size_t>& out) {
  const std::size_t take = std::min(k, pool.size());
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
}

Tensor make_tensor(std::string name, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return {std::move(name), std::move(shape), std::vector<double>(n, 0.0)};
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(std::string_view bytes, const char* what) : bytes_(bytes), what_(what) {}

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorCode::kFormat, std::string(what_) + " truncated");
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  double f64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

// Intermediate values of one forward pass, kept for the backward pass.
struct Activations {
  std::vector<double> x, a1, h1, a2, h;
  std::vector<double> z_start, z_end;
  bm::ProposalTensor sampled;  // after masking
  std::vector<double> reduced, a3, q;
  NetworkOutputs out;
};

void run_forward(const Network& net, const ModelParams& prm, const FeatureSequence& seq,
                 const bm::Mask* mask, Activations& act) {
  const ModelConfig& cfg = net.config();
  const bm::ProposalGrid& grid = net.grid();
  const std::size_t len = cfg.length;
  const std::size_t ch = cfg.hidden_channels;
  if (seq.length() != len || seq.channels() != cfg.in_channels)
    fail(ErrorCode::kInvalidArgument,
         "forward: expected features of shape " + std::to_string(len) + "x" +
             std::to_string(cfg.in_channels) + ", got " + std::to_string(seq.length()) + "x" +
             std::to_string(seq.channels()));

  act.x = channel_major(seq);
  act.a1.assign(ch * len, 0.0);
  conv1d(act.x.data(), cfg.in_channels, len, prm[kBase1W], prm[kBase1B], act.a1.data());
  act.h1 = act.a1;
  for (auto& v : act.h1) v = std::max(v, 0.0);
  act.a2.assign(ch * len, 0.0);
  conv1d(act.h1.data(), ch, len, prm[kBase2W], prm[kBase2B], act.a2.data());
  act.h = act.a2;
  for (auto& v : act.h) v = std::max(v, 0.0);

  act.z_start.assign(len, 0.0);
  act.z_end.assign(len, 0.0);
  conv1d(act.h.data(), ch, len, prm[kStartW], prm[kStartB], act.z_start.data());
  conv1d(act.h.data(), ch, len, prm[kEndW], prm[kEndB], act.z_end.data());
  act.out.p_start.resize(len);
  act.out.p_end.resize(len);
  for (std::size_t t = 0; t < len; ++t) {
    act.out.p_start[t] = sigmoid(act.z_start[t]);
    act.out.p_end[t] = sigmoid(act.z_end[t]);
  }

  act.sampled = bm::sample_proposal_features(act.h, ch, net.sampler());
  if (mask) bm::apply_mask(act.sampled, *mask);

  const std::size_t plane = grid.cells();
  const std::size_t n_samples = cfg.samples;
  act.reduced.assign(ch * plane, 0.0);
  const Tensor& rw = prm[kReduceW];
  const Tensor& rb = prm[kReduceB];
  for (std::size_t c = 0; c < ch; ++c) {
    double* r = act.reduced.data() + c * plane;
    for (std::size_t d = 0; d < grid.max_duration; ++d)
      for (std::size_t t = 0; t + d + 1 <= len; ++t) r[grid.index(d, t)] = rb.data[c];
    for (std::size_t n = 0; n < n_samples; ++n) {
      const double wv = rw.data[c * n_samples + n];
      const double* s = act.sampled.values.data() + (c * n_samples + n) * plane;
      for (std::size_t d = 0; d < grid.max_duration; ++d) {
        const std::size_t row = d * len;
        for (std::size_t t = 0; t + d + 1 <= len; ++t) r[row + t] += wv * s[row + t];
      }
    }
  }

  act.a3.assign(ch * plane, 0.0);
  conv2d_valid(act.reduced.data(), ch, grid, prm[kPemW], prm[kPemB], act.a3.data());
  act.q = act.a3;
  for (auto& v : act.q) v = std::max(v, 0.0);

  act.out.p_cls = GridMap(grid.max_duration, len);
  act.out.p_reg = GridMap(grid.max_duration, len);
  const Tensor& cw = prm[kClsW];
  const Tensor& gw = prm[kRegW];
  for (std::size_t i = 0; i < plane; ++i) {
    double zc = prm[kClsB].data[0];
    double zr = prm[kRegB].data[0];
    for (std::size_t c = 0; c < ch; ++c) {
      zc += cw.data[c] * act.q[c * plane + i];
      zr += gw.data[c] * act.q[c * plane + i];
    }
    act.out.p_cls.values[i] = sigmoid(zc);
    act.out.p_reg.values[i] = sigmoid(zr);
  }
}

struct OutputGrads {
  std::vector<double> z_start, z_end, z_cls, z_reg;
};

void run_backward(const Network& net, const ModelParams& prm, const Activations& act,
                  const bm::Mask* mask, const OutputGrads& og, ModelParams& grad) {
  const ModelConfig& cfg = net.config();
  const bm::ProposalGrid& grid = net.grid();
  const std::size_t len = cfg.length;
  const std::size_t ch = cfg.hidden_channels;
  const std::size_t plane = grid.cells();
  const std::size_t n_samples = cfg.samples;
  const auto cells = valid_cells(grid);

  // 1x1 heads.
  std::vector<double> dq(ch * plane, 0.0);
  for (std::size_t i : cells) {
    const double gc = og.z_cls[i];
    const double gr = og.z_reg[i];
    grad[kClsB].data[0] += gc;
    grad[kRegB].data[0] += gr;
    for (std::size_t c = 0; c < ch; ++c) {
      const double qv = act.q[c * plane + i];
      grad[kClsW].data[c] += gc * qv;
      grad[kRegW].data[c] += gr * qv;
      dq[c * plane + i] = prm[kClsW].data[c] * gc + prm[kRegW].data[c] * gr;
    }
  }
  for (std::size_t i = 0; i < dq.size(); ++i)
    if (act.a3[i] <= 0.0) dq[i] = 0.0;

  std::vector<double> dreduced(ch * plane, 0.0);
  conv2d_valid_backward(act.reduced.data(), ch, grid, prm[kPemW], dq.data(), grad[kPemW],
                        grad[kPemB], dreduced.data());

  // Reduction over the sample axis, then the mask, then the sampling map.
  bm::ProposalTensor dsampled(ch, n_samples, grid.max_duration, len);
  for (std::size_t c = 0; c < ch; ++c) {
    const double* dr = dreduced.data() + c * plane;
    for (std::size_t i : cells) grad[kReduceB].data[c] += dr[i];
    for (std::size_t n = 0; n < n_samples; ++n) {
      const std::size_t wi = c * n_samples + n;
      const double wv = prm[kReduceW].data[wi];
      const double* s = act.sampled.values.data() + wi * plane;
      double* ds = dsampled.values.data() + wi * plane;
      double acc = 0.0;
      for (std::size_t i : cells) {
        acc += dr[i] * s[i];
        ds[i] = dr[i] * wv;
      }
      grad[kReduceW].data[wi] += acc;
    }
  }
  if (mask) bm::apply_mask(dsampled, *mask);

  std::vector<double> dh(ch * len, 0.0);
  bm::sample_proposal_features_backward(dsampled, net.sampler(), dh);
  conv1d_backward(act.h.data(), ch, len, prm[kStartW], og.z_start.data(), grad[kStartW],
                  grad[kStartB], dh.data());
  conv1d_backward(act.h.data(), ch, len, prm[kEndW], og.z_end.data(), grad[kEndW], grad[kEndB],
                  dh.data());

  for (std::size_t i = 0; i < dh.size(); ++i)
    if (act.a2[i] <= 0.0) dh[i] = 0.0;
  std::vector<double> dh1(ch * len, 0.0);
  conv1d_backward(act.h1.data(), ch, len, prm[kBase2W], dh.data(), grad[kBase2W], grad[kBase2B],
                  dh1.data());
  for (std::size_t i = 0; i < dh1.size(); ++i)
    if (act.a1[i] <= 0.0) dh1[i] = 0.0;
  conv1d_backward(act.x.data(), cfg.in_channels, len, prm[kBase1W], dh1.data(), grad[kBase1W],
                  grad[kBase1B], nullptr);
}

void add_into(ModelParams& dst, const ModelParams& src) {
  for (std::size_t p = 0; p < kParamCount; ++p)
    for (std::size_t i = 0; i < dst.tensors[p].data.size(); ++i)
      dst.tensors[p].data[i] += src.tensors[p].data[i];
}

std::string describe(const LossTerms& l) {
  std::ostringstream s;
  s << "tem=" << l.tem << " cls=" << l.cls << " reg=" << l.reg;
  return s.str();
}

}  // namespace

void validate(const ModelConfig& cfg) {
  check_positive(cfg.in_channels, "in_channels");
  check_positive(cfg.hidden_channels, "hidden_channels");
  check_positive(cfg.base_kernel, "base_kernel");
  check_positive(cfg.tem_kernel, "tem_kernel");
  check_positive(cfg.pem_kernel, "pem_kernel");
  check_odd(cfg.base_kernel, "base_kernel");
  check_odd(cfg.tem_kernel, "tem_kernel");
  check_odd(cfg.pem_kernel, "pem_kernel");
  check_positive(cfg.batch_size, "batch_size");
  if (cfg.length == 0 || cfg.max_duration == 0 || cfg.max_duration > cfg.length)
    fail(ErrorCode::kValidation, "grid: need 1 <= D <= T");
  if (cfg.samples < 2) fail(ErrorCode::kValidation, "grid.N must be >= 2");
  if (!(cfg.expansion >= 0.0)) fail(ErrorCode::kValidation, "grid.expansion must be >= 0");
  bm::validate(cfg.mask);
  if (!(cfg.lambda_cls >= 0.0 && cfg.lambda_reg >= 0.0))
    fail(ErrorCode::kValidation, "model loss weights must be >= 0");
  if (!(cfg.learning_rate > 0.0)) fail(ErrorCode::kValidation, "model.learning_rate must be > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
    fail(ErrorCode::kValidation, "model.momentum must lie in [0, 1)");
  if (!(cfg.reg_low_iou <= cfg.reg_high_iou))
    fail(ErrorCode::kValidation, "model: reg_low_iou must not exceed reg_high_iou");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"in_channels", c.in_channels},
      {"hidden_channels", c.hidden_channels},
      {"base_kernel", c.base_kernel},
      {"tem_kernel", c.tem_kernel},
      {"pem_kernel", c.pem_kernel},
      {"T", c.length},
      {"D", c.max_duration},
      {"N", c.samples},
      {"expansion", c.expansion},
      {"mask_p", c.mask.p_mask},
      {"mask_granularity", bm::to_string(c.mask.granularity)},
      {"lambda_cls", c.lambda_cls},
      {"lambda_reg", c.lambda_reg},
      {"positive_iou", c.positive_iou},
      {"reg_high_iou", c.reg_high_iou},
      {"reg_low_iou", c.reg_low_iou},
      {"learning_rate", c.learning_rate},
      {"momentum", c.momentum},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.hidden_channels = j.at("hidden_channels").get<std::size_t>();
    c.base_kernel = j.at("base_kernel").get<std::size_t>();
    c.tem_kernel = j.at("tem_kernel").get<std::size_t>();
    c.pem_kernel = j.at("pem_kernel").get<std::size_t>();
    c.length = j.at("T").get<std::size_t>();
    c.max_duration = j.at("D").get<std::size_t>();
    c.samples = j.at("N").get<std::size_t>();
    c.expansion = j.at("expansion").get<double>();
    c.mask.p_mask = j.at("mask_p").get<double>();
    c.mask.granularity = bm::parse_granularity(j.at("mask_granularity").get<std::string>());
    c.lambda_cls = j.at("lambda_cls").get<double>();
    c.lambda_reg = j.at("lambda_reg").get<double>();
    c.positive_iou = j.at("positive_iou").get<double>();
    c.reg_high_iou = j.at("reg_high_iou").get<double>();
    c.reg_low_iou = j.at("reg_low_iou").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("model config: ") + e.what());
  }
  validate(c);
  return c;
}

std::size_t ModelParams::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

ModelParams zero_params(const ModelConfig& cfg) {
  const std::size_t ci = cfg.in_channels;
  const std::size_t ch = cfg.hidden_channels;
  ModelParams p;
  p.tensors = {
      make_tensor("base1.weight", {ch, ci, cfg.base_kernel}),
      make_tensor("base1.bias", {ch}),
      make_tensor("base2.weight", {ch, ch, cfg.base_kernel}),
      make_tensor("base2.bias", {ch}),
      make_tensor("start.weight", {1, ch, cfg.tem_kernel}),
      make_tensor("start.bias", {1}),
      make_tensor("end.weight", {1, ch, cfg.tem_kernel}),
      make_tensor("end.bias", {1}),
      make_tensor("reduce.weight", {ch, cfg.samples}),
      make_tensor("reduce.bias", {ch}),
      make_tensor("pem.weight", {ch, ch, cfg.pem_kernel, cfg.pem_kernel}),
      make_tensor("pem.bias", {ch}),
      make_tensor("cls.weight", {1, ch}),
      make_tensor("cls.bias", {1}),
      make_tensor("reg.weight", {1, ch}),
      make_tensor("reg.bias", {1}),
  };
  return p;
}

ModelParams init_params(const ModelConfig& cfg) {
  validate(cfg);
  ModelParams p = zero_params(cfg);
  Rng rng(derive_seed(cfg.seed, 0x1417));
  auto glorot = [&](Tensor& t, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t.data) v = uniform(rng, -a, a);
  };
  const auto ci = static_cast<double>(cfg.in_channels);
  const auto ch = static_cast<double>(cfg.hidden_channels);
  const auto kb = static_cast<double>(cfg.base_kernel);
  const auto kt = static_cast<double>(cfg.tem_kernel);
  const auto kp = static_cast<double>(cfg.pem_kernel * cfg.pem_kernel);
  glorot(p[kBase1W], ci * kb, ch * kb);
  glorot(p[kBase2W], ch * kb, ch * kb);
  glorot(p[kStartW], ch * kt, kt);
  glorot(p[kEndW], ch * kt, kt);
  glorot(p[kReduceW], static_cast<double>(cfg.samples), 1.0);
  glorot(p[kPemW], ch * kp, ch * kp);
  glorot(p[kClsW], ch, 1.0);
  glorot(p[kRegW], ch, 1.0);
  return p;
}

std::string encode_outputs(const NetworkOutputs& o) {
  const std::size_t len = o.p_start.size();
  const std::size_t dur = o.p_cls.rows;
  if (o.p_end.size() != len || o.p_cls.cols != len || o.p_reg.rows != dur || o.p_reg.cols != len)
    fail(ErrorCode::kInvalidArgument, "network outputs have inconsistent shapes");
  std::string out = "CPNO";
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(len));
  put_u32(out, static_cast<std::uint32_t>(dur));
  for (double v : o.p_start) put_f64(out, v);
  for (double v : o.p_end) put_f64(out, v);
  for (double v : o.p_cls.values) put_f64(out, v);
  for (double v : o.p_reg.values) put_f64(out, v);
  return out;
}

NetworkOutputs decode_outputs(std::string_view bytes) {
  Reader r(bytes, "outputs file");
  if (r.take(4) != "CPNO") fail(ErrorCode::kFormat, "outputs file has bad magic");
  if (r.u32() != 1) fail(ErrorCode::kFormat, "outputs file version unsupported");
  const std::size_t len = r.u32();
  const std::size_t dur = r.u32();
  NetworkOutputs o;
  o.p_start.resize(len);
  o.p_end.resize(len);
  o.p_cls = GridMap(dur, len);
  o.p_reg = GridMap(dur, len);
  for (auto& v : o.p_start) v = r.f64();
  for (auto& v : o.p_end) v = r.f64();
  for (auto& v : o.p_cls.values) v = r.f64();
  for (auto& v : o.p_reg.values) v = r.f64();
  if (!r.done()) fail(ErrorCode::kFormat, "outputs file has trailing bytes");
  return o;
}

BoundaryLabels boundary_labels(const dataio::VideoAnnotation& ann, std::size_t length) {
  BoundaryLabels labels{std::vector<double>(length, 0.0), std::vector<double>(length, 0.0)};
  const double scale = static_cast<double>(length) / ann.duration;
  for (const auto& inst : ann.instances) {
    const double s = inst.start * scale;
    const double e = inst.end * scale;
    const double delta = std::max(0.5, 0.05 * (e - s));
    for (std::size_t t = 0; t < length; ++t) {
      const double center = static_cast<double>(t) + 0.5;
      if (std::abs(center - s) <= delta) labels.start[t] = 1.0;
      if (std::abs(center - e) <= delta) labels.end[t] = 1.0;
    }
  }
  return labels;
}

Network::Network(ModelConfig cfg)
    : cfg_((validate(cfg), cfg)),
      sampler_(bm::proposal_grid(cfg_.length, cfg_.max_duration), cfg_.samples, cfg_.expansion) {}

std::vector<double> channel_major(const FeatureSequence& seq) {
  std::vector<double> x(seq.length() * seq.channels());
  for (std::size_t t = 0; t < seq.length(); ++t)
    for (std::size_t c = 0; c < seq.channels(); ++c) x[c * seq.length() + t] = seq.at(t, c);
  return x;
}

NetworkOutputs forward_with_mask(const Network& net, const ModelParams& params,
                                 const FeatureSequence& seq, const bm::Mask* mask) {
  Activations act;
  run_forward(net, params, seq, mask, act);
  return std::move(act.out);
}

NetworkOutputs forward(const Network& net, const ModelParams& params, const FeatureSequence& seq,
                       bool training, Rng& rng) {
  const auto& mc = net.config().mask;
  if (!training || mc.p_mask == 0.0) return forward_with_mask(net, params, seq, nullptr);
  const bm::Mask mask = bm::draw_mask(mc, net.config().hidden_channels, net.grid(), rng);
  return forward_with_mask(net, params, seq, &mask);
}

double tem_loss(std::span<const double> p_start, std::span<const double> p_end,
                const BoundaryLabels& labels) {
  if (p_start.size() != labels.start.size() || p_end.size() != labels.end.size())
    fail(ErrorCode::kInvalidArgument, "tem_loss: shape mismatch");
  std::vector<std::size_t> idx(p_start.size());
  std::iota(idx.begin(), idx.end(), 0);
  return balanced_logistic(p_start.data(), labels.start.data(), idx, 0.0, nullptr) +
         balanced_logistic(p_end.data(), labels.end.data(), idx, 0.0, nullptr);
}

std::vector<std::size_t> regression_cells(const GridMap& gt, const bm::ProposalGrid& grid,
                                          const PemThresholds& th, Rng& rng) {
  std::vector<std::size_t> high, mid, low;
  for (std::size_t i : valid_cells(grid)) {
    const double g = gt.values[i];
    if (g > th.high)
      high.push_back(i);
    else if (g > th.low)
      mid.push_back(i);
    else
      low.push_back(i);
  }
  std::vector<std::size_t> chosen = high;
  const std::size_t k = high.size();
  draw_without_replacement(mid, k, rng, chosen);
  draw_without_replacement(low, k, rng, chosen);
  return chosen;
}

namespace {

// PEM loss plus (optionally) its logit gradients, scaled by lambda.
PemLoss pem_loss_impl(const GridMap& p_cls, const GridMap& p_reg, const GridMap& gt,
                      const bm::ProposalGrid& grid, double lambda_cls, double lambda_reg,
                      const PemThresholds& th, Rng& rng, double* gz_cls, double* gz_reg) {
  if (p_cls.values.size() != grid.cells() || p_reg.values.size() != grid.cells() ||
      gt.values.size() != grid.cells())
    fail(ErrorCode::kInvalidArgument, "pem_loss: maps must be D x T");
  const auto cells = valid_cells(grid);
  std::vector<double> positive(grid.cells(), 0.0);
  for (std::size_t i : cells) positive[i] = gt.values[i] > th.positive ? 1.0 : 0.0;

  PemLoss l;
  l.cls = balanced_logistic(p_cls.values.data(), positive.data(), cells, lambda_cls, gz_cls);

  const auto reg_cells = regression_cells(gt, grid, th, rng);
  if (!reg_cells.empty()) {
    const auto m = static_cast<double>(reg_cells.size());
    double sum = 0.0;
    for (std::size_t i : reg_cells) {
      const double p = p_reg.values[i];
      const double diff = p - gt.values[i];
      sum += diff * diff;
      if (gz_reg) gz_reg[i] += lambda_reg * 2.0 * diff / m * p * (1.0 - p);
    }
    l.reg = sum / m;
  }
  l.total = lambda_cls * l.cls + lambda_reg * l.reg;
  return l;
}

}  // namespace

PemLoss pem_loss(const GridMap& p_cls, const GridMap& p_reg, const GridMap& gt,
                 const bm::ProposalGrid& grid, double lambda_cls, double lambda_reg,
                 const PemThresholds& th, Rng& rng) {
  return pem_loss_impl(p_cls, p_reg, gt, grid, lambda_cls, lambda_reg, th, rng, nullptr, nullptr);
}

TrainSample make_sample(const Network& net, const FeatureSequence& seq,
                        const dataio::VideoAnnotation& ann, std::uint64_t noise_seed) {
  TrainSample s;
  s.features = dataio::rescale_features(seq, net.config().length);
  s.labels = boundary_labels(ann, net.config().length);
  s.gt_iou = bm::gt_iou_map(net.grid(), ann);
  s.noise_seed = noise_seed;
  return s;
}

LossTerms sample_loss(const Network& net, const ModelParams& params, const TrainSample& sample,
                      ModelParams* grad) {
  const ModelConfig& cfg = net.config();
  const bm::ProposalGrid& grid = net.grid();

  std::optional<bm::Mask> drawn;
  const bm::Mask* mask = nullptr;
  if (sample.mask) {
    mask = &*sample.mask;
  } else if (cfg.mask.p_mask > 0.0) {
    Rng mask_rng(derive_seed(sample.noise_seed, 0xa5c));
    drawn = bm::draw_mask(cfg.mask, cfg.hidden_channels, grid, mask_rng);
    mask = &*drawn;
  }

  Activations act;
  run_forward(net, params, sample.features, mask, act);

  const std::size_t len = cfg.length;
  OutputGrads og;
  og.z_start.assign(len, 0.0);
  og.z_end.assign(len, 0.0);
  og.z_cls.assign(grid.cells(), 0.0);
  og.z_reg.assign(grid.cells(), 0.0);
  const bool want = grad != nullptr;

  std::vector<std::size_t> idx(len);
  std::iota(idx.begin(), idx.end(), 0);
  LossTerms terms;
  terms.tem = balanced_logistic(act.out.p_start.data(), sample.labels.start.data(), idx, 1.0,
                                want ? og.z_start.data() : nullptr) +
              balanced_logistic(act.out.p_end.data(), sample.labels.end.data(), idx, 1.0,
                                want ? og.z_end.data() : nullptr);

  Rng reg_rng(derive_seed(sample.noise_seed, 0x7e9));
  const PemThresholds th{cfg.positive_iou, cfg.reg_high_iou, cfg.reg_low_iou};
  const PemLoss pem =
      pem_loss_impl(act.out.p_cls, act.out.p_reg, sample.gt_iou, grid, cfg.lambda_cls,
                    cfg.lambda_reg, th, reg_rng, want ? og.z_cls.data() : nullptr,
                    want ? og.z_reg.data() : nullptr);
  terms.cls = pem.cls;
  terms.reg = pem.reg;
  terms.total = terms.tem + pem.total;

  if (grad) run_backward(net, params, act, mask, og, *grad);
  return terms;
}

BatchGradient compute_gradients(const Network& net, const ModelParams& params,
                                std::span<const TrainSample> batch, std::size_t threads) {
  if (batch.empty()) fail(ErrorCode::kInvalidArgument, "compute_gradients: empty batch");
  const std::size_t n = batch.size();
  std::vector<ModelParams> grads(n, zero_params(net.config()));
  std::vector<LossTerms> losses(n);

  auto work = [&](std::size_t worker, std::size_t stride) {
    for (std::size_t i = worker; i < n; i += stride)
      losses[i] = sample_loss(net, params, batch[i], &grads[i]);
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, n);
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w, workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  BatchGradient out{0.0, zero_params(net.config())};
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(losses[i].total))
      fail(ErrorCode::kDiverged, "non-finite loss at batch sample " + std::to_string(i) + " (" +
                                     describe(losses[i]) + ")");
    out.loss += losses[i].total;
    add_into(out.grad, grads[i]);
  }
  const double inv = 1.0 / static_cast<double>(n);
  out.loss *= inv;
  for (auto& t : out.grad.tensors)
    for (auto& v : t.data) v *= inv;
  return out;
}

TrainResult train(const TrainingData& data, const ModelConfig& cfg,
                  const preprocess::PreprocessConfig& pp, std::size_t threads,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  validate(cfg);
  preprocess::validate(pp);
  const Network net(cfg);

  dataio::AnnotationSet anns;
  for (const auto& v : data.annotations)
    if (v.subset == dataio::Subset::kTraining) anns.push_back(v);
  if (pp.enable_remove_long) anns = preprocess::remove_long_coverage(anns, pp.theta_long);
  if (anns.empty()) fail(ErrorCode::kInvalidArgument, "train: no training videos");

  std::map<std::string, const dataio::VideoAnnotation*> by_id;
  for (const auto& v : anns) {
    if (!data.features.count(v.video_id))
      fail(ErrorCode::kIo, "train: missing features for video '" + v.video_id + "'");
    by_id[v.video_id] = &v;
  }
  const std::vector<std::string> base_list =
      pp.enable_resample_short ? preprocess::resample_short(anns, pp.theta_short, pp.repeat_factor)
                               : preprocess::resample_short(anns, pp.theta_short, 1);

  TrainResult result{init_params(cfg), {}};
  ModelParams& params = result.params;
  ModelParams velocity = zero_params(cfg);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::string> order = base_list;
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5f1, epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[uniform_index(shuffle_rng, i)]);

    double loss_sum = 0.0;
    std::size_t step = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<TrainSample> batch;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& ann = *by_id.at(order[i]);
        const auto& raw = data.features.at(order[i]);
        Rng aug(derive_seed(cfg.seed, 0xa06, epoch, i));
        FeatureSequence feats = raw;
        dataio::VideoAnnotation a = ann;
        if (pp.enable_resize && !a.instances.empty() && uniform01(aug) < pp.resize_probability) {
          auto resized = preprocess::resize_instance(feats, a, pp.resize_lo, pp.resize_hi, aug);
          feats = std::move(resized.features);
          a = std::move(resized.annotation);
        }
        TrainSample s = make_sample(net, feats, a, derive_seed(cfg.seed, 0x715e, epoch, i));
        if (pp.enable_shift && uniform01(aug) < pp.shift_probability)
          s.features = preprocess::temporal_shift(s.features, pp.shift_fraction);
        batch.push_back(std::move(s));
      }

      BatchGradient bg;
      try {
        bg = compute_gradients(net, params, batch, threads);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kDiverged) throw;
        fail(ErrorCode::kDiverged, "training diverged at epoch " + std::to_string(epoch) +
                                       ", step " + std::to_string(step) + ": " + e.what());
      }
      loss_sum += bg.loss * static_cast<double>(batch.size());

      for (std::size_t p = 0; p < kParamCount; ++p) {
        auto& v = velocity.tensors[p].data;
        auto& w = params.tensors[p].data;
        const auto& g = bg.grad.tensors[p].data;
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i];
          w[i] -= cfg.learning_rate * v[i];
        }
      }
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(order.size()), order.size()};
    spdlog::info("epoch {} mean loss {:.6f} ({} samples)", epoch, entry.mean_loss, entry.samples);
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

std::string encode_model(const ModelConfig& cfg, const ModelParams& params) {
  std::string out = "CPNM";
  put_u32(out, 1);
  const std::string blob = to_json(cfg).dump();
  put_u32(out, static_cast<std::uint32_t>(blob.size()));
  out += blob;
  for (const auto& t : params.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) put_f64(out, v);
  }
  return out;
}

ModelFile decode_model(std::string_view bytes) {
  Reader r(bytes, "model file");
  if (r.take(4) != "CPNM") fail(ErrorCode::kFormat, "model file has bad magic");
  if (r.u32() != 1) fail(ErrorCode::kFormat, "model file version unsupported");
  const std::size_t blob_len = r.u32();
  const std::string_view blob = r.take(blob_len);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("model file config blob: ") + e.what());
  }
  ModelFile mf{model_config_from_json(j), {}};
  mf.params = zero_params(mf.config);
  for (auto& t : mf.params.tensors) {
    const std::size_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.u32();
    if (shape != t.shape) fail(ErrorCode::kFormat, "model file: shape mismatch for " + t.name);
    for (auto& v : t.data) {
      v = r.f64();
      if (!std::isfinite(v)) fail(ErrorCode::kFormat, "model file: non-finite value in " + t.name);
    }
  }
  if (!r.done()) fail(ErrorCode::kFormat, "model file has trailing bytes");
  return mf;
}

void save_model(const ModelConfig& cfg, const ModelParams& params,
                const std::filesystem::path& path) {
  dataio::write_file(path, encode_model(cfg, params));
}

ModelFile load_model(const std::filesystem::path& path) {
  return decode_model(dataio::read_file(path));
}

}  // namespace cpn::model
