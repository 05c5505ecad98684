#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mstage/augmentation.hpp"
#include "support/oracles.hpp"

using namespace mstage;
using namespace mstage::testing;

TEST_CASE("jitter") {
  std::mt19937_64 gen(1);
  auto w = random_window(gen, 1, 10000);
  Rng rng(5);
  CHECK(bit_identical(jitter(w, 0.0, rng).values, w.values));
  auto j = jitter(w, 0.3, rng);
  double mean = 0, sq = 0;
  for (std::size_t i = 0; i < w.values.size(); ++i) mean += j.values[i] - w.values[i];
  mean /= double(w.values.size());
  for (std::size_t i = 0; i < w.values.size(); ++i) {
    const double d = j.values[i] - w.values[i] - mean;
    sq += d * d;
  }
  const double std = std::sqrt(sq / double(w.values.size()));
  CHECK(std::abs(std - 0.3) < 0.03);
  CHECK(std::abs(mean) < 0.02);
  CHECK_THROWS_AS(jitter(w, -0.1, rng), std::invalid_argument);
}

TEST_CASE("scale") {
  std::mt19937_64 gen(2);
  auto w = random_window(gen, 3, 64);
  Rng rng(6);
  CHECK(bit_identical(scale(w, 0.0, rng).values, w.values));

  Rng a(77);
  auto s = scale(w, 0.2, a);
  Rng replay(77);
  std::normal_distribution<double> factor(1.0, 0.2);
  for (std::size_t c = 0; c < 3; ++c) {
    const double f = factor(replay);
    for (std::size_t t = 0; t < 64; ++t) CHECK(s.channel(c)[t] == w.channel(c)[t] * f);
  }
}

TEST_CASE("permute_segments") {
  std::mt19937_64 gen(3);
  auto w = random_window(gen, 2, 50);
  Rng rng(7);
  CHECK(bit_identical(permute_segments(w, 1, rng).values, w.values));
  CHECK_THROWS_AS(permute_segments(w, 51, rng), std::invalid_argument);

  CHECK(segment_bounds(10, 4) == std::vector<std::size_t>{0, 2, 5, 7, 10});

  Rng a(123);
  auto p = permute_segments(w, 4, a);
  Rng replay(123);
  std::vector<std::size_t> order(4);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), replay);
  const auto b = segment_bounds(50, 4);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> expected;
    for (auto seg : order)
      for (std::size_t t = b[seg]; t < b[seg + 1]; ++t) expected.push_back(w.channel(c)[t]);
    CHECK(std::equal(expected.begin(), expected.end(), p.channel(c).begin()));
  }
}

TEST_CASE("cubic spline is the natural interpolant") {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (std::size_t n : {2u, 3u, 4u, 7u}) {
    auto x = knot_positions(101, n);
    std::vector<double> y(n);
    for (auto& v : y) v = u(gen);
    CubicSpline s(x, y);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(s(x[i]) - y[i]) < 1e-12);
    const double h = 1e-4;
    auto d1 = [&](double t, int side) { return side < 0 ? (s(t) - s(t - h)) / h : (s(t + h) - s(t)) / h; };
    auto d2 = [&](double t, int side) {
      return side < 0 ? (s(t) - 2 * s(t - h) + s(t - 2 * h)) / (h * h) : (s(t + 2 * h) - 2 * s(t + h) + s(t)) / (h * h);
    };
    for (std::size_t i = 1; i + 1 < n; ++i) {
      CHECK(std::abs(d1(x[i], -1) - d1(x[i], 1)) < 1e-3);
      CHECK(std::abs(d2(x[i], -1) - d2(x[i], 1)) < 1e-2);
    }
    CHECK(std::abs(d2(x.front(), 1)) < 1e-2);
    CHECK(std::abs(d2(x.back(), -1)) < 1e-2);
  }
}

TEST_CASE("magnitude_warp") {
  std::mt19937_64 gen(5);
  auto w = random_window(gen, 2, 80);
  Rng rng(8);
  CHECK(bit_identical(magnitude_warp(w, 0.0, 4, rng).values, w.values));

  Rng a(99);
  auto m = magnitude_warp(w, 0.1, 5, a);
  Rng replay(99);
  std::normal_distribution<double> knot(1.0, 0.1);
  const auto xs = knot_positions(80, 5);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> drawn(5);
    for (auto& v : drawn) v = knot(replay);
    CubicSpline curve(xs, drawn);
    for (std::size_t t = 0; t < 80; ++t) {
      CHECK(std::abs(m.channel(c)[t] - w.channel(c)[t] * curve(double(t))) < 1e-12);
      CHECK(std::signbit(m.channel(c)[t]) == std::signbit(w.channel(c)[t]));
    }
    CHECK(std::abs(curve(xs.front()) - drawn.front()) < 1e-12);
    CHECK(std::abs(curve(xs.back()) - drawn.back()) < 1e-12);
  }
}

TEST_CASE("time_warp") {
  std::mt19937_64 gen(6);
  auto w = random_window(gen, 3, 128);
  Rng rng(9);
  CHECK(bit_identical(time_warp(w, 0.0, 4, rng).values, w.values));

  SUBCASE("warp map is strictly increasing with fixed endpoints over 1k seeds") {
    int failures = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      Rng r(seed);
      std::normal_distribution<double> speed(1.0, 0.8);  // heavy warp forces the speed floor
      std::vector<double> k(6);
      for (auto& v : k) v = speed(r);
      auto pos = time_warp_map(128, k);
      if (pos.front() != 0.0 || pos.back() != 127.0) ++failures;
      for (std::size_t t = 1; t < pos.size(); ++t)
        if (!(pos[t] > pos[t - 1])) ++failures;
    }
    CHECK(failures == 0);
  }
  SUBCASE("length and endpoint samples preserved") {
    Rng r(10);
    auto tw = time_warp(w, 0.3, 4, r);
    CHECK(tw.values.shape() == w.values.shape());
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(tw.channel(c)[0] == w.channel(c)[0]);
      CHECK(tw.channel(c)[127] == w.channel(c)[127]);
    }
  }
  SUBCASE("linear signals stay inside their range") {
    std::vector<double> ramp(64);
    std::iota(ramp.begin(), ramp.end(), 0.0);
    auto lw = make_window("ramp", {ramp}, 50.0);
    Rng r(11);
    auto tw = time_warp(lw, 0.3, 4, r);
    for (std::size_t t = 1; t < 64; ++t) CHECK(tw.channel(0)[t] > tw.channel(0)[t - 1]);
  }
}

TEST_CASE("compose_all_five") {
  std::mt19937_64 gen(7);
  SUBCASE("neutral configuration is the bit-exact identity") {
    for (int i = 0; i < 200; ++i) {
      auto w = random_window(gen, 1 + i % 9, 8 + i % 130);
      Rng r(i);
      CHECK(bit_identical(compose_all_five(w, AugmentationConfig::neutral(), r).values, w.values));
    }
  }
  SUBCASE("deterministic and almost surely different") {
    auto w = random_window(gen, 3, 128);
    AugmentationConfig cfg;
    int same = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng a(seed), b(seed);
      auto x = compose_all_five(w, cfg, a);
      CHECK(bit_identical(x.values, compose_all_five(w, cfg, b).values));
      if (x.values == w.values) ++same;
      CHECK(x.values.shape() == w.values.shape());
    }
    CHECK(same == 0);
  }
}

TEST_CASE("balance_dataset") {
  std::mt19937_64 gen(8);
  std::vector<TimeSeriesWindow> data;
  for (int i = 0; i < 10; ++i) data.push_back(random_window(gen, 2, 32, 0, "a" + std::to_string(i)));
  for (int i = 0; i < 4; ++i) data.push_back(random_window(gen, 2, 32, 1, "b" + std::to_string(i)));

  AugmentationConfig cfg;
  cfg.seed = 3;
  auto out = balance_dataset(data, cfg);
  REQUIRE(out.size() == 20);
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(out[i].values == data[i].values);
  for (std::size_t i = 14; i < 20; ++i) {
    CHECK(out[i].label == 1);
    CHECK(out[i].provenance.augmented);
    CHECK(out[i].provenance.source_id == "b" + std::to_string((i - 14) % 4));
  }
  CHECK(balance_dataset(data, cfg) .size() == 20);
  CHECK(bit_identical(balance_dataset(data, cfg)[19].values, out[19].values));

  auto balanced = balance_dataset(out, cfg);
  CHECK(balanced.size() == out.size());
  CHECK_THROWS_AS(balance_dataset(data, cfg, 3), std::invalid_argument);

  auto expanded = expand_dataset(data, cfg, 2);
  CHECK(expanded.size() == 42);
  CHECK(expanded[14].provenance.source_id == "a0");
  CHECK(expanded[41].provenance.source_id == "b3");
}
