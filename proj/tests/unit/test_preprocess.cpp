#include <doctest.h>

#include <algorithm>
#include <map>

#include "fixtures.hpp"
#include "preprocess.hpp"

using namespace cpn;
using namespace cpn::preprocess;
using dataio::FeatureSequence;
using dataio::Subset;
using fixture::video;

TEST_CASE("coverage and long-coverage removal") {
  const auto long_vid = video("long", 10.0, {{0.0, 9.9, "a"}});
  CHECK(coverage(long_vid) == doctest::Approx(0.99));
  const auto empty = video("empty", 10.0);
  CHECK(coverage(empty) == 0.0);
  const auto overlap = video("ov", 10.0, {{0.0, 6.0, "a"}, {4.0, 8.0, "b"}});
  CHECK(coverage(overlap) == doctest::Approx(0.8));

  const auto kept = remove_long_coverage({long_vid, empty, overlap}, 0.98);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].video_id == "empty");
  CHECK(kept[1].video_id == "ov");
}

TEST_CASE("long-coverage removal only touches training videos") {
  auto val = video("val", 10.0, {{0.0, 10.0, "a"}}, Subset::kValidation);
  CHECK(remove_long_coverage({val}, 0.98).size() == 1);
}

TEST_CASE("short-instance resampling") {
  const auto short_vid = video("short", 100.0, {{0.0, 2.0, "a"}});
  const auto plain = video("plain", 100.0, {{10.0, 50.0, "a"}});
  const auto val = video("val", 100.0, {{0.0, 1.0, "a"}}, Subset::kValidation);

  const auto once = resample_short({plain, short_vid}, 0.05, 1);
  CHECK(once == std::vector<std::string>{"plain", "short"});

  const auto thrice = resample_short({plain, short_vid, val}, 0.05, 3);
  CHECK(thrice == std::vector<std::string>{"plain", "short", "short", "short"});

  CHECK(resample_short({plain}, 0.05, 4) == std::vector<std::string>{"plain"});
}

TEST_CASE("resize with factor one is the identity") {
  Rng rng(1);
  const auto f = fixture::random_features(20, 3, rng);
  const auto ann = video("v", 20.0, {{3.0, 9.0, "a"}, {12.0, 15.0, "b"}});
  const auto r = resize_instance(f, ann, 1.0, 1.0, rng);
  CHECK(r.features == f);
  CHECK(r.annotation.instances[0].end == 9.0);
  CHECK(r.annotation.duration == 20.0);
}

TEST_CASE("resize doubles a four-snippet instance") {
  FeatureSequence f(10, 1);
  for (std::size_t t = 0; t < 10; ++t) f.at(t, 0) = static_cast<float>(t);
  const auto ann = video("v", 10.0, {{2.0, 6.0, "a"}, {7.0, 9.0, "b"}});
  const auto r = resize_instance_with(f, ann, 0, 2.0);
  REQUIRE(r.features.length() == 14);
  CHECK(r.annotation.duration == doctest::Approx(14.0));
  CHECK(r.annotation.instances[0].start == doctest::Approx(2.0));
  CHECK(r.annotation.instances[0].end == doctest::Approx(10.0));
  CHECK(r.annotation.instances[1].start == doctest::Approx(11.0));
  CHECK(r.annotation.instances[1].end == doctest::Approx(13.0));
  // Flanks are untouched, the tail is shifted by four snippets.
  CHECK(r.features.at(0, 0) == 0.0f);
  CHECK(r.features.at(1, 0) == 1.0f);
  CHECK(r.features.at(10, 0) == 6.0f);
  CHECK(r.features.at(13, 0) == 9.0f);
  CHECK(r.features.at(2, 0) == 2.0f);
  CHECK(r.features.at(9, 0) == 5.0f);
}

TEST_CASE("resize leaves a one-snippet instance alone") {
  Rng rng(2);
  const auto f = fixture::random_features(10, 2, rng);
  const auto ann = video("v", 10.0, {{4.0, 5.0, "a"}});
  const auto r = resize_instance_with(f, ann, 0, 1.25);
  CHECK(r.features == f);
  CHECK(r.annotation.instances[0].start == 4.0);
}

TEST_CASE("resize keeps annotations valid on random inputs") {
  Rng rng(44);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 8 + uniform_index(rng, 40);
    const double stride = uniform(rng, 0.5, 2.0);
    const double dur = static_cast<double>(t) * stride;
    auto ann = video("v", dur);
    double cursor = 0.0;
    while (true) {
      const double s = cursor + uniform(rng, 0.0, dur * 0.3);
      const double e = s + uniform(rng, 0.1, dur * 0.4);
      if (e > dur) break;
      ann.instances.push_back({s, e, "a"});
      cursor = e;
    }
    if (ann.instances.empty()) continue;
    const auto f = fixture::random_features(t, 2, rng);
    const auto r = resize_instance(f, ann, 0.8, 1.25, rng);
    CHECK_NOTHROW(dataio::validate(r.annotation));
    CHECK(r.annotation.duration == doctest::Approx(static_cast<double>(r.features.length()) * stride));
    CHECK(r.annotation.instances.size() == ann.instances.size());
    // The prefix before any change is untouched.
    CHECK(r.features.at(0, 0) == f.at(0, 0));
  }
}

TEST_CASE("temporal shift") {
  Rng rng(9);
  const auto f = fixture::random_features(6, 8, rng);
  CHECK(temporal_shift(f, 0.0) == f);

  const auto g = temporal_shift(f, 0.125);
  for (std::size_t t = 0; t < 6; ++t) {
    CHECK(g.at(t, 0) == (t == 0 ? 0.0f : f.at(t - 1, 0)));
    CHECK(g.at(t, 1) == (t == 5 ? 0.0f : f.at(t + 1, 1)));
    for (std::size_t c = 2; c < 8; ++c) CHECK(g.at(t, c) == f.at(t, c));
  }

  const auto one = fixture::random_features(1, 8, rng);
  const auto h = temporal_shift(one, 0.25);
  for (std::size_t c = 0; c < 4; ++c) CHECK(h.at(0, c) == 0.0f);
  for (std::size_t c = 4; c < 8; ++c) CHECK(h.at(0, c) == one.at(0, c));
}

TEST_CASE("preprocess config validation") {
  PreprocessConfig cfg;
  CHECK_NOTHROW(validate(cfg));
  cfg.theta_long = 0.0;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = {};
  cfg.resize_lo = 2.0;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = {};
  cfg.shift_fraction = 0.6;
  CHECK_THROWS_AS(validate(cfg), Error);
}

// Randomized invariants, also exercised by the acceptance suite.
TEST_CASE("property: coverage equals a dense point count") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    auto v = video("v", 50.0);
    const std::size_t n = uniform_index(rng, 6);
    for (std::size_t i = 0; i < n; ++i) {
      const auto [s, e] = fixture::random_segment(rng, 50.0, true);
      v.instances.push_back({s, e, "a"});
    }
    // Lattice endpoints on quarters: count covered eighth-points.
    std::size_t covered = 0;
    for (std::size_t k = 0; k < 400; ++k) {
      const double x = (static_cast<double>(k) + 0.5) / 8.0;
      for (const auto& inst : v.instances)
        if (inst.start <= x && x < inst.end) {
          ++covered;
          break;
        }
    }
    CHECK(coverage(v) == doctest::Approx(static_cast<double>(covered) / 400.0).epsilon(1e-12));
  }
}

TEST_CASE("property: epoch list length and adjacency") {
  Rng rng(202);
  for (int trial = 0; trial < 50; ++trial) {
    dataio::AnnotationSet anns;
    std::size_t n_short = 0, n_train = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      auto v = video("v" + std::to_string(i), 100.0);
      v.subset = uniform01(rng) < 0.2 ? Subset::kValidation : Subset::kTraining;
      const bool is_short = uniform01(rng) < 0.4;
      v.instances.push_back({10.0, is_short ? 12.0 : 40.0, "a"});
      if (v.subset == Subset::kTraining) {
        ++n_train;
        n_short += is_short;
      }
      anns.push_back(v);
    }
    const std::size_t r = 1 + uniform_index(rng, 4);
    const auto list = resample_short(anns, 0.05, r);
    CHECK(list.size() == n_train + (r - 1) * n_short);
    std::map<std::string, std::size_t> count;
    for (const auto& id : list) ++count[id];
    for (std::size_t i = 0; i + 1 < list.size(); ++i)
      if (list[i] != list[i + 1]) {
        // Once a video's run ends it never reappears.
        CHECK(std::count(list.begin() + static_cast<long>(i) + 1, list.end(), list[i]) == 0);
      }
  }
}
