#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "doctest.h"
#include "mstage/transforms.hpp"
#include "support/oracles.hpp"

using namespace mstage;
using namespace mstage::testing;

namespace {

using cplx = std::complex<double>;

// Impulse response of a frequency response by a direct inverse DFT.
std::vector<cplx> impulse(const std::vector<double>& response) {
  const std::size_t n = response.size();
  std::vector<cplx> h(n);
  for (std::size_t t = 0; t < n; ++t) {
    cplx s = 0;
    for (std::size_t k = 0; k < n; ++k)
      s += response[k] * std::polar(1.0, 2.0 * std::numbers::pi * double(k * t % n) / double(n));
    h[t] = s / double(n);
  }
  return h;
}

std::vector<cplx> circular_conv(const std::vector<cplx>& x, const std::vector<cplx>& h) {
  const std::size_t n = x.size();
  std::vector<cplx> y(n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t s = 0; s < n; ++s) y[t] += x[s] * h[(t + n - s) % n];
  return y;
}

// Time-domain scattering cascade built only from the filter responses.
std::vector<double> scattering_oracle(const Scattering1D& net, const std::vector<double>& x,
                                      std::size_t step) {
  const std::size_t n = x.size();
  const auto phi = impulse(net.lowpass_response());
  std::vector<cplx> xc(x.begin(), x.end());
  std::vector<double> out;
  auto lowpass = [&](const std::vector<cplx>& u) {
    auto y = circular_conv(u, phi);
    for (std::size_t t = 0; t < n / step; ++t) out.push_back(y[t * step].real());
  };
  auto modulus = [](std::vector<cplx> v) {
    for (auto& c : v) c = std::abs(c);
    return v;
  };
  lowpass(xc);
  std::vector<std::vector<cplx>> u1;
  for (const auto& psi : net.first_order_responses()) {
    u1.push_back(modulus(circular_conv(xc, impulse(psi))));
    lowpass(u1.back());
  }
  for (std::size_t l1 = 0; l1 < u1.size() && !net.second_order_paths().empty(); ++l1)
    for (auto l2 : net.second_order_paths()[l1])
      lowpass(modulus(circular_conv(u1[l1], impulse(net.second_order_responses()[l2]))));
  return out;
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("gaf examples") {
  SUBCASE("angles at zero give an all-ones field") {
    std::vector<double> x{1, 1};
    CHECK(gramian_angular_field(x) == Tensor({2, 2}, 1.0));
  }
  SUBCASE("direct evaluation") {
    std::vector<double> x{1, 0, -1};
    auto g = gaf_transform(x);
    const double expected[3][3] = {{1, 0, -1}, {0, -1, 0}, {-1, 0, 1}};
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(g.at({i, j}) - expected[i][j]) < 1e-12);
  }
  SUBCASE("constant channel normalizes to zeros, phi = pi/2") {
    std::vector<double> x(16, 4.2);
    CHECK(minmax_normalize(x) == std::vector<double>(16, 0.0));
    auto g = gaf_transform(x);
    for (double v : g.data()) CHECK(v == doctest::Approx(-1.0).epsilon(1e-15));
  }
  SUBCASE("symmetry and diagonal identity on random inputs") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      auto x = random_series(rng, 64);
      auto xn = minmax_normalize(x);
      auto g = gaf_transform(x);
      for (std::size_t i = 0; i < 64; ++i) {
        CHECK(std::abs(g.at({i, i}) - (2 * xn[i] * xn[i] - 1)) <= 1e-12);
        for (std::size_t j = 0; j < i; ++j) CHECK(std::abs(g.at({i, j}) - g.at({j, i})) <= 1e-12);
      }
    }
  }
  SUBCASE("polar radius") {
    std::vector<double> x{0.5, -0.5, 0.0, 1.0};
    auto p = polar_encode(x, GafConfig{4.0});
    CHECK(p.radius == std::vector<double>{0.25, 0.5, 0.75, 1.0});
    CHECK(p.angle[3] == 0.0);
    CHECK_THROWS_AS(polar_encode(x, GafConfig{0.0}), std::invalid_argument);
  }
}

TEST_CASE("recurrence plot") {
  SUBCASE("constant series is fully recurrent") {
    std::vector<double> x(20, -1.5);
    CHECK(recurrence_plot(x, RecurrenceConfig{1, 1, 0.1}) == Tensor({20, 20}, 1.0));
    CHECK(recurrence_plot(x) == Tensor({20, 20}, 1.0));
  }
  SUBCASE("hand example") {
    std::vector<double> x{0, 1, 0};
    auto r = recurrence_plot(x, RecurrenceConfig{1, 1, 0.5});
    CHECK(r == Tensor({3, 3}, {1, 0, 1, 0, 1, 0, 1, 0, 1}));
  }
  SUBCASE("distance exactly eps counts") {
    std::vector<double> x{0, 0.5};
    CHECK(recurrence_plot(x, RecurrenceConfig{1, 1, 0.5}) == Tensor({2, 2}, 1.0));
  }
  SUBCASE("brute-force equivalence, symmetry, monotone in eps") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t m = 1 + trial % 3, d = 1 + trial % 2;
      auto x = random_series(rng, 40);
      RecurrenceConfig small{m, d, 0.8}, large{m, d, 1.6};
      auto r1 = recurrence_plot(x, small);
      CHECK(r1 == recurrence_oracle(x, m, d, 0.8));
      auto r2 = recurrence_plot(x, large);
      const std::size_t k = r1.dim(0);
      CHECK(k == 40 - (m - 1) * d);
      for (std::size_t i = 0; i < k; ++i) {
        CHECK(r1.at({i, i}) == 1.0);
        for (std::size_t j = 0; j < k; ++j) {
          CHECK(r1.at({i, j}) == r1.at({j, i}));
          CHECK(r1.at({i, j}) <= r2.at({i, j}));
        }
      }
    }
  }
  SUBCASE("embedding must fit") {
    std::vector<double> x(10, 0.0);
    CHECK_THROWS_AS(recurrence_plot(x, RecurrenceConfig{4, 4, 0.1}), std::invalid_argument);
    CHECK(recurrence_plot(x, RecurrenceConfig{4, 3, 0.1}).shape() == Shape{1, 1});
  }
}

TEST_CASE("scattering") {
  ScatteringConfig cfg;  // L=2, Q=8/1, J=6, T=64
  SUBCASE("zero signal gives exact zeros") {
    std::vector<double> x(128, 0.0);
    for (double v : scattering_transform(x, cfg)) CHECK(v == 0.0);
  }
  SUBCASE("constant signal: S0 is the DC gain times c, higher orders vanish") {
    const double c = 2.5;
    std::vector<double> x(128, c);
    Scattering1D net(128, cfg);
    auto s = net(x);
    // Oracle: direct time-domain averaging of a constant with the lowpass impulse response.
    auto phi = impulse(net.lowpass_response());
    std::complex<double> gain = 0;
    for (auto v : phi) gain += v;
    for (std::size_t t = 0; t < net.time_samples(); ++t)
      CHECK(std::abs(s[t] - c * gain.real()) <= 1e-3 * c);
    for (std::size_t i = net.time_samples(); i < s.size(); ++i) CHECK(std::abs(s[i]) <= 1e-3 * c);
  }
  SUBCASE("path count and output length are fixed by the configuration") {
    Scattering1D net(128, cfg);
    // 1 + J*Q1 first-order + sum over octaves j1 of Q1 * (J - 1 - j1) second-order paths.
    CHECK(net.path_count() == 1 + 48 + 8 * (5 + 4 + 3 + 2 + 1));
    CHECK(net.output_size() == net.path_count() * 2);
    ScatteringConfig first{1, 4, 1, 3, 16};
    Scattering1D f(64, first);
    CHECK(f.path_count() == 1 + 12);
    CHECK(f.output_size() == 13 * 4);
  }
  SUBCASE("fft cascade matches the time-domain oracle") {
    std::mt19937_64 rng(13);
    ScatteringConfig small{2, 4, 1, 3, 8};
    Scattering1D net(32, small);
    for (int trial = 0; trial < 5; ++trial) {
      auto x = random_series(rng, 32);
      auto got = net(x);
      auto want = scattering_oracle(net, x, 8);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-9);
    }
  }
  SUBCASE("higher orders are non-negative") {
    std::mt19937_64 rng(14);
    Scattering1D net(128, cfg);
    auto s = net(random_series(rng, 128));
    for (std::size_t i = net.time_samples(); i < s.size(); ++i) CHECK(s[i] >= -1e-12);
  }
  // The cascade convolves circularly over the window, so the shift is a rotation.
  SUBCASE("one-sample shift is a small change at lowpass scale >= 32") {
    std::mt19937_64 rng(15);
    for (std::size_t scale : {32u, 64u}) {
      ScatteringConfig c = cfg;
      c.lowpass_scale = scale;
      for (int trial = 0; trial < 10; ++trial) {
        auto a = random_series(rng, 128);
        auto b = a;
        std::rotate(b.begin(), b.begin() + 1, b.end());
        CHECK(rel_l2(scattering_transform(a, c), scattering_transform(b, c)) < 0.05);
      }
    }
  }
  SUBCASE("invalid configurations") {
    std::vector<double> x(128, 1.0);
    CHECK_THROWS_AS(scattering_transform(x, ScatteringConfig{3, 8, 1, 6, 64}), std::invalid_argument);
    CHECK_THROWS_AS(scattering_transform(x, ScatteringConfig{2, 0, 1, 6, 64}), std::invalid_argument);
    CHECK_THROWS_AS(scattering_transform(x, ScatteringConfig{2, 8, 1, 8, 64}), std::invalid_argument);
    CHECK_THROWS_AS(scattering_transform(x, ScatteringConfig{2, 8, 1, 6, 48}), std::invalid_argument);
  }
  SUBCASE("pure") {
    std::mt19937_64 rng(16);
    auto x = random_series(rng, 128);
    CHECK(scattering_transform(x, cfg) == scattering_transform(x, cfg));
  }
}

TEST_CASE("transform_window") {
  std::mt19937_64 rng(17);
  std::vector<std::vector<double>> chans;
  for (int c = 0; c < 9; ++c) chans.push_back(random_series(rng, 128));
  auto w9 = make_window("w", chans, 50.0, 1);

  CHECK(transform_window(w9, TransformKind::gaf).tensor.shape() == Shape{9, 128, 128});
  CHECK(transform_window(w9, TransformKind::recurrence).tensor.shape() == Shape{9, 128, 128});

  auto w3 = make_window("w3", {chans[0], chans[1], chans[2]}, 50.0);
  auto id = transform_window(w3, TransformKind::identity);
  CHECK(id.tensor.shape() == Shape{3, 128});
  CHECK(id.tensor == w3.values);  // raw path, no normalization
  CHECK(id.window_id == "w3");

  TransformConfig reduced;
  reduced.image_size = 32;
  CHECK(transform_window(w3, TransformKind::gaf, reduced).tensor.shape() == Shape{3, 32, 32});
  CHECK(transformed_shape(TransformKind::gaf, 3, 128, reduced) == Shape{3, 32, 32});
  CHECK(transformed_shape(TransformKind::scattering, 3, 128, {}) ==
        transform_window(w3, TransformKind::scattering).tensor.shape());

  SUBCASE("channel permutation commutes with the transform") {
    auto permuted = make_window("p", {chans[2], chans[0], chans[1]}, 50.0);
    for (auto kind : kAllTransforms) {
      auto a = transform_window(w3, kind, reduced).tensor;
      auto b = transform_window(permuted, kind, reduced).tensor;
      const std::size_t per = a.size() / 3;
      const std::size_t src_of[3] = {2, 0, 1};
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < per; ++i) CHECK(b[c * per + i] == a[src_of[c] * per + i]);
    }
  }
  SUBCASE("piecewise aggregate") {
    std::vector<double> x{1, 2, 3, 4, 5, 6};
    CHECK(piecewise_aggregate(x, 3) == std::vector<double>{1.5, 3.5, 5.5});
    CHECK(piecewise_aggregate(x, 0) == x);
    CHECK(piecewise_aggregate(x, 10) == x);
  }
  SUBCASE("short windows are rejected") {
    CHECK_THROWS_AS(make_window("s", {{1, 2, 3}}, 50.0), std::invalid_argument);
  }
  CHECK(parse_transform_kind("gaf") == TransformKind::gaf);
  CHECK_THROWS_AS(parse_transform_kind("fft"), std::invalid_argument);
}
