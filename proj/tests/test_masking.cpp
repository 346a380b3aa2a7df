#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "mam/masking.hpp"

using namespace mam;
using Catch::Approx;

TEST_CASE("splitmix64 reference stream") {
  // Frozen from the published splitmix64 recipe.
  SplitMix64 g0(0);
  CHECK(g0.next() == 0xE220A8397B1DCDAFull);
  CHECK(g0.next() == 0x6E789E6AA1B965F4ull);
  SplitMix64 g1(1234567);
  CHECK(g1.next() == 6457827717110365317ull);
  CHECK(g1.next() == 3203168211198807973ull);
}

TEST_CASE("mask_frame: trivial endpoints") {
  CHECK(mask_frame(10, 0.0, 1).spans.empty());
  CHECK(mask_frame(10, 0.3, 1).total_masked() == 3);
  CHECK(mask_frame(10, 1.0, 1).total_masked() == 10);
  CHECK_THROWS_AS(mask_frame(10, 1.5, 1), ConfigError);
  CHECK_THROWS_AS(mask_frame(10, -0.1, 1), ConfigError);
}

TEST_CASE("mask_frame: reference stream indices") {
  // Frozen by executing the documented recipe (splitmix64 + rejection
  // sampling + partial Fisher-Yates) independently.
  auto plan = mask_frame(5, 0.4, 7);
  CHECK(plan.masked_frames() == std::vector<int>{1, 2});
  auto plan2 = mask_frame(10, 0.3, 42);
  CHECK(plan2.masked_frames() == std::vector<int>{2, 3, 4});
}

TEST_CASE("mask_frame: exact count for every n and lambda") {
  for (int n = 1; n <= 200; ++n)
    for (double lambda : {0.0, 0.1, 0.3, 1.0}) {
      auto plan = mask_frame(n, lambda, 1234 + static_cast<uint64_t>(n));
      CHECK(plan.total_masked() ==
            static_cast<int>(std::lround(lambda * n)));
      auto frames = plan.masked_frames();
      std::set<int> uniq(frames.begin(), frames.end());
      CHECK(uniq.size() == frames.size());
      for (int f : frames) {
        CHECK(f >= 0);
        CHECK(f < n);
      }
    }
}

TEST_CASE("mask_frame and mask_span are deterministic per seed") {
  for (uint64_t seed : {0u, 9u, 77u}) {
    auto a = mask_frame(50, 0.3, seed);
    auto b = mask_frame(50, 0.3, seed);
    CHECK(a.spans == b.spans);
    auto c = mask_span(50, 0.3, seed);
    auto d = mask_span(50, 0.3, seed);
    CHECK(c.spans == d.spans);
  }
  CHECK(mask_frame(50, 0.3, 1).spans != mask_frame(50, 0.3, 2).spans);
}

TEST_CASE("mask_span: trivial endpoints and the stop rule") {
  CHECK(mask_span(20, 0.0, 3).spans.empty());
  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto plan = mask_span(20, 0.3, seed);
    int target = static_cast<int>(std::lround(0.3 * 20));
    CHECK(plan.total_masked() >= target);
    CHECK(plan.total_masked() <= target + 9);
    // disjoint
    auto frames = plan.masked_frames();
    std::set<int> uniq(frames.begin(), frames.end());
    CHECK(uniq.size() == frames.size());
  }
}

TEST_CASE("mask_span: reference stream intervals") {
  // Frozen by executing the documented sampling recipe step by step.
  auto plan = mask_span(30, 0.3, 11, 3.0);
  std::vector<std::pair<int, int>> expected = {{3, 1},  {5, 3},  {9, 1},
                                               {23, 1}, {25, 1}, {28, 2}};
  CHECK(plan.spans == expected);
  CHECK(plan.total_masked() == 9);
}

TEST_CASE("mask_span: masked fraction statistics over 1000 seeds") {
  double total = 0.0;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    auto plan = mask_span(100, 0.3, seed);
    auto frames = plan.masked_frames();
    std::set<int> uniq(frames.begin(), frames.end());
    REQUIRE(uniq.size() == frames.size());  // zero overlap violations
    total += plan.total_masked();
  }
  double mean_fraction = total / 1000.0 / 100.0;
  CHECK(mean_fraction >= 0.28);
  CHECK(mean_fraction <= 0.35);
}

TEST_CASE("apply_plan: pointwise contract") {
  SplitMix64 rng(5);
  Spectrogram spec;
  spec.frames = testutil::random_tensor<float>({3, 4}, rng);
  Epsilon eps;
  eps.vector = {9.0f, 8.0f, 7.0f, 6.0f};

  MaskPlan empty;
  Spectrogram same = apply_plan(spec, empty, eps);
  CHECK(std::memcmp(same.frames.data.data(), spec.frames.data.data(),
                    spec.frames.data.size() * 4) == 0);

  MaskPlan middle;
  middle.spans = {{1, 1}};
  Spectrogram masked = apply_plan(spec, middle, eps);
  for (int c = 0; c < 4; ++c) {
    CHECK(masked.frames.at(0, c) == spec.frames.at(0, c));
    CHECK(masked.frames.at(1, c) == eps.vector[static_cast<size_t>(c)]);
    CHECK(masked.frames.at(2, c) == spec.frames.at(2, c));
  }

  MaskPlan all;
  all.spans = {{0, 3}};
  Spectrogram full = apply_plan(spec, all, eps);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      CHECK(full.frames.at(r, c) == eps.vector[static_cast<size_t>(c)]);

  MaskPlan bad;
  bad.spans = {{2, 2}};
  CHECK_THROWS_AS(apply_plan(spec, bad, eps), ShapeError);
  Epsilon short_eps;
  short_eps.vector = {1.0f};
  CHECK_THROWS_AS(apply_plan(spec, middle, short_eps), ShapeError);
}

TEST_CASE("apply_plan leaves unmasked frames bit-exact") {
  SplitMix64 rng(31);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Spectrogram spec;
    spec.frames = testutil::random_tensor<float>({40, 6}, rng);
    Epsilon eps;
    eps.vector.assign(6, 0.5f);
    auto plan = mask_span(40, 0.4, seed);
    Spectrogram masked = apply_plan(spec, plan, eps);
    auto frames = plan.masked_frames();
    std::set<int> masked_set(frames.begin(), frames.end());
    for (int r = 0; r < 40; ++r)
      for (int c = 0; c < 6; ++c) {
        if (masked_set.count(r))
          CHECK(masked.frames.at(r, c) == 0.5f);
        else
          CHECK(std::memcmp(&masked.frames.at(r, c), &spec.frames.at(r, c),
                            4) == 0);
      }
  }
}
