#include <doctest.h>

#include <cmath>

#include "bm_core.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cpn;
using namespace cpn::bm;
using fixture::video;

TEST_CASE("proposal grid valid cell counts") {
  CHECK(proposal_grid(4, 4).valid_count() == 10);
  CHECK(proposal_grid(1, 1).valid_count() == 1);
  const auto g = proposal_grid(4, 1);
  CHECK(g.valid_count() == 4);
  for (std::size_t t = 0; t < 4; ++t) CHECK(g.valid(0, t));
  CHECK(proposal_grid(100, 100).valid_count() == 5050);
  CHECK(proposal_grid(64, 32).valid_count() == 32 * 64 - 31 * 32 / 2);
  CHECK_THROWS_AS(proposal_grid(3, 4), Error);
  CHECK_THROWS_AS(proposal_grid(0, 0), Error);
}

TEST_CASE("segment iou") {
  CHECK(segment_iou({2, 7}, {2, 7}) == 1.0);
  CHECK(segment_iou({0, 10}, {20, 30}) == 0.0);
  CHECK(segment_iou({0, 10}, {5, 15}) == doctest::Approx(1.0 / 3.0));
  CHECK(segment_iou({0, 10}, {10, 20}) == 0.0);
  CHECK_THROWS_AS(segment_iou({1, 1}, {0, 2}), Error);
}

TEST_CASE("gt iou map examples") {
  const auto grid = proposal_grid(4, 4);
  const auto none = gt_iou_map(grid, video("v", 4.0));
  for (double v : none.values) CHECK(v == 0.0);

  const auto m = gt_iou_map(grid, video("v", 4.0, {{0.0, 2.0, "a"}}));
  CHECK(m.at(1, 0) == 1.0);
  CHECK(m.at(3, 0) == 0.5);
  CHECK(m.at(3, 1) == 0.0);  // invalid cell

  // Seconds are converted with T / duration.
  const auto scaled = gt_iou_map(grid, video("v", 8.0, {{2.0, 6.0, "a"}}));
  CHECK(scaled.at(1, 1) == 1.0);
}

TEST_CASE("gt iou map matches a brute-force oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t t = 5 + uniform_index(rng, 20);
    const std::size_t d = 1 + uniform_index(rng, t);
    const double dur = uniform(rng, 5.0, 60.0);
    auto v = video("v", dur);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto [s, e] = fixture::random_segment(rng, dur, false);
      v.instances.push_back({s, e, "a"});
    }
    const auto grid = proposal_grid(t, d);
    const auto got = gt_iou_map(grid, v);
    const auto want = oracle::iou_map(t, d, v);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.values[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("sampling endpoints with zero expansion") {
  const auto sm = build_sampling_matrix(5, 4, 2, 0.0);
  // Cell (d=1, t=1) is [1, 3): points at 1.0 and 3.0.
  const auto& a = sm.tap(1, 1, 0);
  const auto& b = sm.tap(1, 1, 1);
  CHECK(a.lo == 1);
  CHECK(a.w_lo == 1.0);
  CHECK(b.lo == 3);
  CHECK(b.w_lo == 1.0);

  std::vector<double> hidden = {10, 11, 12, 13, 14};
  const auto out = sample_proposal_features(hidden, 1, sm);
  CHECK(out.at(0, 0, 1, 1) == 11.0);
  CHECK(out.at(0, 1, 1, 1) == 13.0);
}

TEST_CASE("out-of-range sample points get a zero row") {
  const auto sm = build_sampling_matrix(4, 4, 5, 0.25);
  // Cell (d=3, t=0) is [0, 4); the left expanded point is -1.
  CHECK(sm.tap(3, 0, 0).lo < 0);
  for (double w : sm.dense_row(3, 0, 0)) CHECK(w == 0.0);
  // The right point 5.0 is past T-1 as well.
  CHECK(sm.tap(3, 0, 4).lo < 0);
}

TEST_CASE("sampling rows sum to one for in-range points") {
  const auto sm = build_sampling_matrix(100, 100, 32, 0.25);
  std::vector<double> ones(100, 1.0);
  const auto out = sample_proposal_features(ones, 1, sm);
  std::size_t in_range = 0;
  for (std::size_t d = 0; d < 100; ++d)
    for (std::size_t t = 0; t + d + 1 <= 100; ++t)
      for (std::size_t n = 0; n < 32; ++n) {
        const auto& tap = sm.tap(d, t, n);
        if (tap.lo < 0) {
          CHECK(out.at(0, n, d, t) == 0.0);
          continue;
        }
        ++in_range;
        double sum = 0.0;
        for (double w : sm.dense_row(d, t, n)) sum += w;
        if (std::abs(sum - 1.0) > 1e-12) CHECK(sum == doctest::Approx(1.0));
        if (std::abs(out.at(0, n, d, t) - 1.0) > 1e-12) CHECK(out.at(0, n, d, t) == 1.0);
      }
  CHECK(in_range > 0);
}

TEST_CASE("sampling matches the naive interpolation loop") {
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t t = 6 + uniform_index(rng, 10);
    const std::size_t d = 1 + uniform_index(rng, t);
    const std::size_t n = 2 + uniform_index(rng, 6);
    const double e = uniform(rng, 0.0, 0.5);
    const std::size_t c = 3;
    std::vector<double> hidden(c * t);
    for (auto& v : hidden) v = uniform(rng, -2.0, 2.0);
    const auto sm = build_sampling_matrix(t, d, n, e);
    const auto got = sample_proposal_features(hidden, c, sm);
    const auto want = oracle::sample(hidden, c, t, d, n, e);
    double worst = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got.values[i] - want[i]));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("sampling is linear and its backward pass is the transpose") {
  Rng rng(8);
  const std::size_t t = 9, c = 2;
  const auto sm = build_sampling_matrix(t, 6, 5, 0.25);
  std::vector<double> x(c * t), y(c * t), mix(c * t);
  for (auto& v : x) v = uniform(rng, -1, 1);
  for (auto& v : y) v = uniform(rng, -1, 1);
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = 2.5 * x[i] - 0.5 * y[i];
  const auto sx = sample_proposal_features(x, c, sm);
  const auto sy = sample_proposal_features(y, c, sm);
  const auto sm_mix = sample_proposal_features(mix, c, sm);
  for (std::size_t i = 0; i < sx.values.size(); ++i)
    CHECK(sm_mix.values[i] == doctest::Approx(2.5 * sx.values[i] - 0.5 * sy.values[i]).epsilon(1e-12));

  // <S x, g> == <x, S^T g>
  ProposalTensor g(c, 5, 6, t);
  for (auto& v : g.values) v = uniform(rng, -1, 1);
  std::vector<double> back(c * t, 0.0);
  sample_proposal_features_backward(g, sm, back);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < g.values.size(); ++i) lhs += sx.values[i] * g.values[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * back[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("sampling requires at least two points") {
  CHECK_THROWS_AS(build_sampling_matrix(4, 4, 1, 0.0), Error);
}

TEST_CASE("masking is the identity at p=0 and in inference") {
  const auto grid = proposal_grid(6, 6);
  ProposalTensor x(2, 3, 6, 6);
  Rng rng(1);
  for (auto& v : x.values) v = uniform(rng, -1, 1);
  CHECK(mask_proposals(x, grid, {0.0, MaskGranularity::kProposal}, true, rng).values == x.values);
  CHECK(mask_proposals(x, grid, {0.5, MaskGranularity::kProposal}, false, rng).values == x.values);
  CHECK(mask_proposals(x, grid, {0.5, MaskGranularity::kChannel}, false, rng).values == x.values);
}

TEST_CASE("proposal mask zeroes whole cells across channels and samples") {
  const auto grid = proposal_grid(10, 10);
  ProposalTensor x(3, 4, 10, 10);
  for (auto& v : x.values) v = 1.0;
  Rng rng(5);
  const auto y = mask_proposals(x, grid, {0.3, MaskGranularity::kProposal}, true, rng);
  std::size_t dropped = 0;
  for (std::size_t d = 0; d < 10; ++d)
    for (std::size_t t = 0; t < 10; ++t) {
      const double ref = y.at(0, 0, d, t);
      CHECK((ref == 0.0 || ref == doctest::Approx(1.0 / 0.7)));
      dropped += ref == 0.0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t n = 0; n < 4; ++n) CHECK(y.at(c, n, d, t) == ref);
    }
  CHECK(dropped > 0);
}

TEST_CASE("channel mask zeroes whole channels") {
  const auto grid = proposal_grid(5, 5);
  ProposalTensor x(40, 2, 5, 5);
  for (auto& v : x.values) v = 1.0;
  Rng rng(6);
  const auto y = mask_proposals(x, grid, {0.5, MaskGranularity::kChannel}, true, rng);
  std::size_t dropped = 0;
  for (std::size_t c = 0; c < 40; ++c) {
    const double ref = y.at(c, 0, 0, 0);
    dropped += ref == 0.0;
    for (std::size_t i = 0; i < 2 * 25; ++i) CHECK(y.values[c * 50 + i] == ref);
  }
  CHECK(dropped > 0);
  CHECK(dropped < 40);
}

TEST_CASE("mask config validation and names") {
  CHECK_THROWS_AS(validate(MaskConfig{1.0, MaskGranularity::kProposal}), Error);
  CHECK_THROWS_AS(validate(MaskConfig{-0.1, MaskGranularity::kProposal}), Error);
  CHECK(parse_granularity(to_string(MaskGranularity::kChannel)) == MaskGranularity::kChannel);
  CHECK(parse_granularity("proposal") == MaskGranularity::kProposal);
  CHECK_THROWS_AS(parse_granularity("cell"), Error);
}
