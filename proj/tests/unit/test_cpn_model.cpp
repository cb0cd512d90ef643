#include <doctest.h>

#include <cmath>

#include "cpn_model.hpp"
#include "fixtures.hpp"

using namespace cpn;
using namespace cpn::model;
using fixture::video;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg = fixture::gradcheck_config();
  cfg.mask.p_mask = 0.1;
  return cfg;
}

TrainingData tiny_data(std::size_t videos, std::uint64_t seed) {
  dataio::SynthConfig sc;
  sc.n_videos = videos;
  sc.val_fraction = 0.0;
  sc.t_raw_min = 12;
  sc.t_raw_max = 16;
  sc.channels = 3;
  sc.seed = seed;
  const auto ds = dataio::synth_dataset(sc);
  return {ds.annotations, ds.features};
}

}  // namespace

TEST_CASE("boundary labels") {
  const auto none = boundary_labels(video("v", 8.0), 8);
  for (double v : none.start) CHECK(v == 0.0);
  for (double v : none.end) CHECK(v == 0.0);

  const auto l = boundary_labels(video("v", 8.0, {{2.0, 6.0, "a"}}), 8);
  const std::vector<double> start = {0, 1, 1, 0, 0, 0, 0, 0};
  const std::vector<double> end = {0, 0, 0, 0, 0, 1, 1, 0};
  CHECK(l.start == start);
  CHECK(l.end == end);

  const auto full = boundary_labels(video("v", 8.0, {{0.0, 8.0, "a"}}), 8);
  CHECK(full.start[0] == 1.0);
  CHECK(full.end[7] == 1.0);
  for (std::size_t t = 1; t < 8; ++t) CHECK(full.start[t] == 0.0);
  for (std::size_t t = 0; t < 7; ++t) CHECK(full.end[t] == 0.0);
}

TEST_CASE("zero parameters give one half everywhere") {
  const ModelConfig cfg = tiny_config();
  const Network net(cfg);
  Rng rng(1);
  const auto out = forward(net, zero_params(cfg), fixture::random_features(8, 3, rng), false, rng);
  for (double v : out.p_start) CHECK(v == 0.5);
  for (double v : out.p_end) CHECK(v == 0.5);
  for (std::size_t d = 0; d < 8; ++d)
    for (std::size_t t = 0; t + d + 1 <= 8; ++t) {
      CHECK(out.p_cls.at(d, t) == 0.5);
      CHECK(out.p_reg.at(d, t) == 0.5);
    }
}

TEST_CASE("inference is deterministic and unaffected by masking") {
  ModelConfig cfg = tiny_config();
  cfg.mask.p_mask = 0.5;
  const Network net(cfg);
  const auto params = init_params(cfg);
  Rng rng(2);
  const auto x = fixture::random_features(8, 3, rng);
  Rng r1(10), r2(99);
  const auto a = forward(net, params, x, false, r1);
  const auto b = forward(net, params, x, false, r2);
  CHECK(a == b);
  CHECK(forward_with_mask(net, params, x, nullptr) == a);

  cfg.mask.p_mask = 0.0;
  const Network plain(cfg);
  Rng r3(4);
  CHECK(forward(plain, params, x, true, r3) == a);

  // A real mask changes the training-mode outputs.
  Rng r4(4);
  CHECK_FALSE(forward(net, params, x, true, r4) == a);
}

TEST_CASE("balanced boundary loss closed forms") {
  BoundaryLabels zeros{std::vector<double>(10, 0.0), std::vector<double>(10, 0.0)};
  const std::vector<double> half(10, 0.5);
  CHECK(tem_loss(half, half, zeros) == doctest::Approx(2.0 * std::log(2.0)));

  // T=10 with two positives: alpha+ = 5, alpha- = 1.25. With p=0.5 on the
  // positives and 0.2 on the negatives the loss is ln 2 - ln 0.8 per head.
  BoundaryLabels two = zeros;
  two.start[3] = two.start[4] = 1.0;
  two.end[3] = two.end[4] = 1.0;
  std::vector<double> p(10, 0.2);
  p[3] = p[4] = 0.5;
  const double per_head = std::log(2.0) - std::log(0.8);
  CHECK(tem_loss(p, p, two) == doctest::Approx(2.0 * per_head).epsilon(1e-12));

  // Perfect (clamped) prediction.
  std::vector<double> perfect(10, 0.0);
  perfect[3] = perfect[4] = 1.0;
  CHECK(tem_loss(perfect, perfect, two) < 1e-5);
  CHECK(std::isfinite(tem_loss(perfect, perfect, two)));
}

TEST_CASE("proposal loss closed forms") {
  const auto grid = bm::proposal_grid(6, 6);
  const PemThresholds th;
  Rng rng(3);
  bm::GridMap gt(6, 6, 0.0);
  bm::GridMap half(6, 6, 0.5);
  const auto zero_gt = pem_loss(half, half, gt, grid, 1.0, 1.0, th, rng);
  CHECK(zero_gt.cls == doctest::Approx(std::log(2.0)));
  CHECK(zero_gt.reg == 0.0);

  const auto g = bm::gt_iou_map(grid, video("v", 6.0, {{1.0, 4.0, "a"}}));
  const auto exact = pem_loss(half, g, g, grid, 1.0, 10.0, th, rng);
  CHECK(exact.reg == 0.0);
  CHECK(exact.total == doctest::Approx(exact.cls));

  const auto off = pem_loss(half, half, g, grid, 0.0, 0.0, th, rng);
  CHECK(off.total == 0.0);
}

TEST_CASE("regression cells cover every high cell and balance the strata") {
  const auto grid = bm::proposal_grid(30, 30);
  const auto gt = bm::gt_iou_map(grid, video("v", 30.0, {{5.0, 15.0, "a"}, {20.0, 26.0, "b"}}));
  const PemThresholds th;
  Rng rng(5);
  const auto cells = regression_cells(gt, grid, th, rng);
  std::size_t high = 0, mid = 0, low = 0, total_high = 0;
  for (std::size_t d = 0; d < 30; ++d)
    for (std::size_t t = 0; t + d + 1 <= 30; ++t) total_high += gt.at(d, t) > 0.7;
  std::set<std::size_t> unique(cells.begin(), cells.end());
  CHECK(unique.size() == cells.size());
  for (std::size_t i : cells) {
    const double v = gt.values[i];
    high += v > 0.7;
    mid += v > 0.3 && v <= 0.7;
    low += v <= 0.3;
  }
  CHECK(high == total_high);
  CHECK(mid == total_high);
  CHECK(low == total_high);
}

TEST_CASE("analytic gradients match finite differences") {
  for (std::uint64_t seed : {1u, 2u}) {
    CHECK(fixture::gradient_check(seed, false).max_rel_error < 1e-4);
    CHECK(fixture::gradient_check(seed, true).max_rel_error < 1e-4);
    CHECK(fixture::gradient_check(seed, true, bm::MaskGranularity::kChannel).max_rel_error < 1e-4);
  }
}

TEST_CASE("a fully dropped mask cuts the reduction weights off the loss") {
  const ModelConfig cfg = tiny_config();
  const Network net(cfg);
  Rng rng(6);
  const auto sample_src = fixture::random_features(8, 3, rng);
  TrainSample s = make_sample(net, sample_src, video("v", 8.0, {{1.0, 5.0, "a"}}), 77);
  s.mask = bm::Mask{bm::MaskGranularity::kChannel, std::vector<std::uint8_t>(4, 0), 1.0};
  ModelParams grad = zero_params(cfg);
  sample_loss(net, init_params(cfg), s, &grad);
  for (double v : grad[kReduceW].data) CHECK(v == 0.0);
  double tem_grad = 0.0;
  for (double v : grad[kStartW].data) tem_grad += std::abs(v);
  CHECK(tem_grad > 0.0);
}

TEST_CASE("batch gradient is the mean of sample gradients regardless of threads") {
  const ModelConfig cfg = tiny_config();
  const Network net(cfg);
  const auto params = init_params(cfg);
  Rng rng(7);
  std::vector<TrainSample> batch;
  for (int i = 0; i < 5; ++i)
    batch.push_back(make_sample(net, fixture::random_features(11, 3, rng),
                                video("v", 11.0, {{2.0, 6.5, "a"}}), 100 + i));
  const auto one = compute_gradients(net, params, batch, 1);
  const auto three = compute_gradients(net, params, batch, 3);
  CHECK(one.loss == three.loss);
  CHECK(one.grad == three.grad);

  ModelParams sum = zero_params(cfg);
  double loss = 0.0;
  for (const auto& s : batch) loss += sample_loss(net, params, s, &sum).total;
  CHECK(one.loss == doctest::Approx(loss / 5.0).epsilon(1e-12));
  CHECK(one.grad[kClsW].data[0] == doctest::Approx(sum[kClsW].data[0] / 5.0).epsilon(1e-10));
}

TEST_CASE("training with zero epochs returns the initialization") {
  ModelConfig cfg = tiny_config();
  cfg.epochs = 0;
  const auto r = train(tiny_data(4, 1), cfg, {});
  CHECK(r.params == init_params(cfg));
  CHECK(r.log.empty());
}

TEST_CASE("training is reproducible, thread-independent and lowers the loss") {
  ModelConfig cfg = tiny_config();
  cfg.epochs = 6;
  cfg.batch_size = 4;
  cfg.seed = 3;
  const auto data = tiny_data(12, 2);
  const auto a = train(data, cfg, {}, 1);
  const auto b = train(data, cfg, {}, 1);
  const auto c = train(data, cfg, {}, 2);
  CHECK(a.params == b.params);
  CHECK(a.params == c.params);
  REQUIRE(a.log.size() == 6);
  CHECK(a.log.back().mean_loss < a.log.front().mean_loss);

  cfg.seed = 4;
  CHECK_FALSE(train(data, cfg, {}, 1).params == a.params);
}

TEST_CASE("training reports each epoch through the callback") {
  ModelConfig cfg = tiny_config();
  cfg.epochs = 2;
  std::vector<std::size_t> seen;
  train(tiny_data(3, 5), cfg, {}, 1, [&](const EpochLog& e) { seen.push_back(e.epoch); });
  CHECK(seen == std::vector<std::size_t>{0, 1});
}

TEST_CASE("model config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(validate(cfg));
  cfg.max_duration = cfg.length + 1;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = {};
  cfg.base_kernel = 2;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = {};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = {};
  cfg.seed = 12345678901234ULL;
  cfg.mask.granularity = bm::MaskGranularity::kChannel;
  const auto back = model_config_from_json(to_json(cfg));
  CHECK(back.seed == cfg.seed);
  CHECK(back.mask.granularity == bm::MaskGranularity::kChannel);
  CHECK(back.lambda_reg == cfg.lambda_reg);
}

TEST_CASE("model file round trip and errors") {
  ModelConfig cfg = tiny_config();
  cfg.seed = 9;
  const auto params = init_params(cfg);
  const auto bytes = encode_model(cfg, params);
  CHECK(bytes.substr(0, 4) == "CPNM");
  const auto back = decode_model(bytes);
  CHECK(back.params == params);
  CHECK(back.config.hidden_channels == cfg.hidden_channels);
  CHECK(encode_model(back.config, back.params) == bytes);

  CHECK_THROWS_AS(decode_model("XXXX" + bytes.substr(4)), Error);
  CHECK_THROWS_AS(decode_model(bytes.substr(0, bytes.size() - 3)), Error);
  CHECK_THROWS_AS(decode_model(bytes + "z"), Error);

  const auto dir = fixture::temp_dir("model");
  save_model(cfg, params, dir / "m.cpnm");
  CHECK(load_model(dir / "m.cpnm").params == params);
}

TEST_CASE("network outputs round trip") {
  const ModelConfig cfg = tiny_config();
  const Network net(cfg);
  Rng rng(12);
  const auto out = forward(net, init_params(cfg), fixture::random_features(8, 3, rng), false, rng);
  const auto bytes = encode_outputs(out);
  CHECK(decode_outputs(bytes) == out);
  CHECK_THROWS_AS(decode_outputs(bytes.substr(0, 20)), Error);
}

TEST_CASE("glorot initialization stays within its bound") {
  ModelConfig cfg;
  cfg.seed = 1;
  const auto p = init_params(cfg);
  const auto& w = p[kBase1W];  // [C_h][C_in][k]
  const double fan_in = static_cast<double>(w.shape[1] * w.shape[2]);
  const double fan_out = static_cast<double>(w.shape[0] * w.shape[2]);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (double v : w.data) CHECK(std::abs(v) <= bound);
  for (double v : p[kBase1B].data) CHECK(v == 0.0);
  CHECK(p.total_size() > 0);
}
