#pragma once

// Independent reference implementations shared by the unit suite and the
// acceptance gate. None of them call the library code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <vector>

#include "mstage/metrics.hpp"
#include "mstage/window.hpp"

namespace mstage::testing {

inline std::vector<double> random_series(std::mt19937_64& rng, std::size_t n, double lo = -3.0, double hi = 3.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> x(n);
  for (auto& v : x) v = u(rng);
  return x;
}

inline TimeSeriesWindow random_window(std::mt19937_64& rng, std::size_t channels, std::size_t length,
                                      std::optional<int> label = std::nullopt, std::string id = "w") {
  std::normal_distribution<double> n(0.0, 1.5);
  std::vector<std::vector<double>> ch(channels, std::vector<double>(length));
  for (auto& c : ch)
    for (auto& v : c) v = n(rng);
  return make_window(std::move(id), ch, 50.0, label);
}

inline bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

// Brute-force recurrence: explicit state vectors, pairwise Euclidean distances.
inline Tensor recurrence_oracle(const std::vector<double>& x, std::size_t m, std::size_t d, double eps) {
  const std::size_t k = x.size() - (m - 1) * d;
  std::vector<std::vector<double>> states(k, std::vector<double>(m));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t e = 0; e < m; ++e) states[i][e] = x[i + e * d];
  Tensor r({k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0;
      for (std::size_t e = 0; e < m; ++e) s += (states[i][e] - states[j][e]) * (states[i][e] - states[j][e]);
      r.at({i, j}) = (eps - std::sqrt(s)) >= 0.0 ? 1.0 : 0.0;
    }
  return r;
}

// Rank-sum p-value by enumerating every way to pick |a| of the pooled values.
inline double enumerate_p(const std::vector<double>& a, const std::vector<double>& b,
                          Alternative alt = Alternative::two_sided) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t N = pooled.size(), n = a.size();
  std::vector<double> rank(N);
  for (std::size_t i = 0; i < N; ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < N; ++j) {
      less += pooled[j] < pooled[i];
      equal += pooled[j] == pooled[i];
    }
    rank[i] = less + (equal + 1) / 2.0;
  }
  double w = 0;
  for (std::size_t i = 0; i < n; ++i) w += rank[i];
  const double e = double(n) * double(N + 1) / 2.0;
  double hits = 0, total = 0;
  for (std::uint32_t mask = 0; mask < (1u << N); ++mask) {
    if (std::size_t(__builtin_popcount(mask)) != n) continue;
    double s = 0;
    for (std::size_t i = 0; i < N; ++i)
      if (mask >> i & 1) s += rank[i];
    total += 1;
    const double d = s - e, o = w - e;
    if (alt == Alternative::two_sided ? std::abs(d) >= std::abs(o) - 1e-9
        : alt == Alternative::greater ? d >= o - 1e-9
                                      : d <= o + 1e-9)
      hits += 1;
  }
  return hits / total;
}

}  // namespace mstage::testing
