#include <cmath>
#include <random>

#include "doctest.h"
#include "mstage/ops.hpp"
#include "support/gradcheck.hpp"

using namespace mstage;
using mstage::testing::random_tensor;

namespace {
Tensor run(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value();
}
}  // namespace

TEST_CASE("tensor rejects inconsistent data") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  Tensor t({2, 3});
  t.at({1, 2}) = 4.0;
  CHECK(t[5] == 4.0);
}

TEST_CASE("conv1d hand examples") {
  SUBCASE("identity kernel") {
    auto y = run([](Tape& t) {
      return conv1d(t.constant(Tensor({1, 3}, {1, 2, 3})), t.constant(Tensor({1, 1, 1}, {1})),
                    std::nullopt, 1, Padding::valid);
    });
    CHECK(y == Tensor({1, 3}, {1, 2, 3}));
  }
  SUBCASE("two-tap ones") {
    auto y = run([](Tape& t) {
      return conv1d(t.constant(Tensor({1, 1, 3}, {1, 2, 3})), t.constant(Tensor({1, 1, 2}, {1, 1})),
                    std::nullopt, 1, Padding::valid);
    });
    CHECK(y == Tensor({1, 1, 2}, {3, 5}));
  }
  SUBCASE("zero kernel") {
    std::mt19937_64 rng(1);
    auto x = random_tensor({2, 3, 17}, rng);
    auto y = run([&](Tape& t) {
      return conv1d(t.constant(x), t.constant(Tensor({4, 3, 5})), std::nullopt, 2, Padding::same);
    });
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("output length law") {
    // floor((L_padded - K) / stride) + 1
    for (std::size_t len : {7u, 8u, 128u})
      for (std::size_t k : {1u, 3u, 5u})
        for (std::size_t s : {1u, 2u, 3u}) {
          auto valid = plan_padding("t", 0, len, k, s, Padding::valid);
          CHECK(valid.out == (len - k) / s + 1);
          auto same = plan_padding("t", 0, len, k, s, Padding::same);
          CHECK(same.out == (len + same.before + same.after - k) / s + 1);
          CHECK(same.out == (len + s - 1) / s);
          CHECK(same.after >= same.before);
          CHECK(same.after - same.before <= 1);
        }
  }
}

TEST_CASE("conv shape errors name the axis") {
  Tape t;
  auto x = t.constant(Tensor({2, 3, 10}));
  auto w = t.constant(Tensor({4, 2, 3}));
  try {
    conv1d(x, w, std::nullopt, 1, Padding::valid);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(e.axis() == 1);
    CHECK(e.op() == "conv1d");
  }
  CHECK_THROWS_AS(conv1d(x, t.constant(Tensor({4, 3, 11})), std::nullopt, 1, Padding::valid),
                  DimensionError);
  CHECK_THROWS_AS(conv1d(x, t.constant(Tensor({4, 3, 3})), std::nullopt, 0, Padding::valid),
                  std::invalid_argument);
}

TEST_CASE("conv2d hand examples") {
  auto ones = run([](Tape& t) {
    return conv2d(t.constant(Tensor({1, 2, 2}, {1, 2, 3, 4})), t.constant(Tensor({1, 1, 2, 2}, 1.0)),
                  std::nullopt, 1, Padding::valid);
  });
  CHECK(ones == Tensor({1, 1, 1}, {10}));

  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3, 5, 6}, rng);
  Tensor eye({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) eye.at({c, c, 0, 0}) = 1.0;
  auto same = run([&](Tape& t) { return conv2d(t.constant(x), t.constant(eye), std::nullopt, 1, Padding::same); });
  CHECK(same == x);
  auto zero = run([&](Tape& t) {
    return conv2d(t.constant(x), t.constant(Tensor({2, 3, 3, 3})), std::nullopt, 2, Padding::same);
  });
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("separable conv equals depthwise then pointwise") {
  std::mt19937_64 rng(3);
  SUBCASE("identity factorization leaves input unchanged") {
    auto x = random_tensor({2, 3, 9}, rng);
    Tensor eye({3, 3, 1});
    for (std::size_t c = 0; c < 3; ++c) eye.at({c, c, 0}) = 1.0;
    auto y = run([&](Tape& t) {
      return separable_conv1d(t.constant(x), t.constant(Tensor({3, 1}, 1.0)), t.constant(eye),
                              std::nullopt, 1, Padding::same);
    });
    CHECK(y == x);
  }
  SUBCASE("1d composition oracle") {
    // Depthwise conv built from plain per-channel conv1d calls.
    auto x = random_tensor({1, 3, 11}, rng);
    auto dw = random_tensor({3, 3}, rng);
    auto pw = random_tensor({4, 3, 1}, rng);
    auto y = run([&](Tape& t) {
      return separable_conv1d(t.constant(x), t.constant(dw), t.constant(pw), std::nullopt, 2,
                              Padding::same);
    });
    Tensor depth({1, 3, 6});
    for (std::size_t c = 0; c < 3; ++c) {
      Tensor xc({1, 1, 11}), wc({1, 1, 3});
      for (std::size_t i = 0; i < 11; ++i) xc[i] = x.at({0, c, i});
      for (std::size_t k = 0; k < 3; ++k) wc[k] = dw.at({c, k});
      auto yc = run([&](Tape& t) {
        return conv1d(t.constant(xc), t.constant(wc), std::nullopt, 2, Padding::same);
      });
      for (std::size_t i = 0; i < 6; ++i) depth.at({0, c, i}) = yc[i];
    }
    auto expected = run([&](Tape& t) {
      return conv1d(t.constant(depth), t.constant(pw), std::nullopt, 1, Padding::valid);
    });
    CHECK(y == expected);
  }
  SUBCASE("2d composition oracle") {
    auto x = random_tensor({2, 2, 5, 5}, rng);
    auto dw = random_tensor({2, 3, 3}, rng);
    auto pw = random_tensor({3, 2, 1, 1}, rng);
    auto y = run([&](Tape& t) {
      return separable_conv2d(t.constant(x), t.constant(dw), t.constant(pw), std::nullopt, 1,
                              Padding::same);
    });
    Tensor depth({2, 2, 5, 5});
    for (std::size_t c = 0; c < 2; ++c) {
      Tensor wc({2, 2, 3, 3});  // block-diagonal full kernel
      for (std::size_t i = 0; i < 9; ++i) wc[(c * 2 + c) * 9 + i] = dw[c * 9 + i];
      auto full = run([&](Tape& t) { return conv2d(t.constant(x), t.constant(wc), std::nullopt, 1, Padding::same); });
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 25; ++i) depth[(b * 2 + c) * 25 + i] = full[(b * 2 + c) * 25 + i];
    }
    auto expected = run([&](Tape& t) {
      return conv2d(t.constant(depth), t.constant(pw), std::nullopt, 1, Padding::valid);
    });
    CHECK(y == expected);
  }
  SUBCASE("zero pointwise") {
    auto x = random_tensor({1, 2, 6}, rng);
    auto y = run([&](Tape& t) {
      return separable_conv1d(t.constant(x), t.constant(random_tensor({2, 3}, rng)),
                              t.constant(Tensor({5, 2, 1})), std::nullopt, 1, Padding::same);
    });
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("channel mismatch") {
    Tape t;
    CHECK_THROWS_AS(separable_conv1d(t.constant(Tensor({1, 3, 8})), t.constant(Tensor({2, 3})),
                                     t.constant(Tensor({4, 2, 1})), std::nullopt, 1, Padding::same),
                    DimensionError);
  }
}

TEST_CASE("batch norm") {
  std::mt19937_64 rng(4);
  auto make_stats = [](std::size_t c) { return BatchNormStats{Tensor({c}, 0.0), Tensor({c}, 1.0)}; };

  SUBCASE("standardized batch passes through") {
    // eps shrinks the output by 1/sqrt(1 + eps), about 5e-6 relative.
    Tensor x({4, 1}, {1, -1, 1, -1});  // mean 0, var 1
    auto stats = make_stats(1);
    auto y = run([&](Tape& t) {
      return batch_norm(t.constant(x), t.constant(Tensor({1}, 1.0)), t.constant(Tensor({1}, 0.0)),
                        stats, NormMode::train);
    });
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::abs(y[i] - x[i]) <= 5e-6 * std::abs(x[i]));
      CHECK(y[i] == doctest::Approx(x[i] / std::sqrt(1.0 + kBatchNormEps)).epsilon(1e-15));
    }
  }
  SUBCASE("gamma zero gives beta") {
    auto x = random_tensor({5, 3, 4}, rng);
    auto stats = make_stats(3);
    Tensor beta({3}, {0.5, -2.0, 3.0});
    auto y = run([&](Tape& t) {
      return batch_norm(t.constant(x), t.constant(Tensor({3}, 0.0)), t.constant(beta), stats,
                        NormMode::train);
    });
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) CHECK(y.at({b, c, i}) == beta[c]);
  }
  SUBCASE("moments oracle") {
    auto x = random_tensor({8, 2, 6}, rng, -3.0, 5.0);
    Tensor gamma({2}, {1.7, 0.4}), beta({2}, {-0.3, 2.2});
    auto stats = make_stats(2);
    auto y = run([&](Tape& t) {
      return batch_norm(t.constant(x), t.constant(gamma), t.constant(beta), stats, NormMode::train,
                        kBatchNormMomentum, 1e-12);
    });
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, v = 0;
      for (std::size_t b = 0; b < 8; ++b)
        for (std::size_t i = 0; i < 6; ++i) m += y.at({b, c, i});
      m /= 48;
      for (std::size_t b = 0; b < 8; ++b)
        for (std::size_t i = 0; i < 6; ++i) v += (y.at({b, c, i}) - m) * (y.at({b, c, i}) - m);
      v /= 48;
      CHECK(std::abs(m - beta[c]) < 1e-6);
      CHECK(std::abs(v - gamma[c] * gamma[c]) < 1e-6);
    }
  }
  SUBCASE("running stats move toward batch stats, infer uses them") {
    Tensor x({2, 1}, {3.0, 5.0});
    auto stats = make_stats(1);
    run([&](Tape& t) {
      return batch_norm(t.constant(x), t.constant(Tensor({1}, 1.0)), t.constant(Tensor({1}, 0.0)),
                        stats, NormMode::train);
    });
    CHECK(stats.mean[0] == doctest::Approx(0.01 * 4.0));
    CHECK(stats.var[0] == doctest::Approx(0.99 + 0.01 * 1.0));
    auto before = stats.mean;
    auto y = run([&](Tape& t) {
      return batch_norm(t.constant(Tensor({1, 1}, {1.0})), t.constant(Tensor({1}, 1.0)),
                        t.constant(Tensor({1}, 0.0)), stats, NormMode::infer);
    });
    CHECK(stats.mean == before);
    CHECK(y[0] == doctest::Approx((1.0 - stats.mean[0]) / std::sqrt(stats.var[0] + 1e-5)));
  }
  SUBCASE("batch of one rejected in train mode") {
    auto stats = make_stats(2);
    Tape t;
    CHECK_THROWS_AS(batch_norm(t.constant(Tensor({1, 2})), t.constant(Tensor({2}, 1.0)),
                               t.constant(Tensor({2})), stats, NormMode::train),
                    std::invalid_argument);
    CHECK_NOTHROW(batch_norm(t.constant(Tensor({1, 2})), t.constant(Tensor({2}, 1.0)),
                             t.constant(Tensor({2})), stats, NormMode::infer));
  }
}

TEST_CASE("pooling, dense, softmax, concat") {
  auto pooled = run([](Tape& t) { return global_avg_pool(t.constant(Tensor({1, 2, 5}, 3.25))); });
  CHECK(pooled == Tensor({1, 2}, {3.25, 3.25}));

  auto sm = run([](Tape& t) { return softmax(t.constant(Tensor({1, 6}, 0.7))); });
  for (double v : sm.data()) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-15));

  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 4}, rng);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at({i, i}) = 1.0;
  auto d = run([&](Tape& t) { return dense(t.constant(x), t.constant(eye), t.constant(Tensor({4}))); });
  CHECK(d == x);

  SUBCASE("softmax rows sum to one and stay in (0,1)") {
    for (int trial = 0; trial < 50; ++trial) {
      auto logits = random_tensor({4, 7}, rng, -30.0, 30.0);
      auto p = run([&](Tape& t) { return softmax(t.constant(logits)); });
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 7; ++j) {
          s += p.at({r, j});
          CHECK(p.at({r, j}) > 0.0);
          CHECK(p.at({r, j}) < 1.0);
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
  }
  SUBCASE("shape errors") {
    Tape t;
    CHECK_THROWS_AS(residual_add(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 4}))), DimensionError);
    std::vector<Var> parts{t.constant(Tensor({2, 3})), t.constant(Tensor({3, 3}))};
    CHECK_THROWS_AS(concat(parts, 1), DimensionError);
    std::vector<Var> ok{t.constant(Tensor({2, 3}, 1.0)), t.constant(Tensor({2, 2}, 2.0))};
    CHECK(concat(ok, 1).value() == Tensor({2, 5}, {1, 1, 1, 2, 2, 1, 1, 1, 2, 2}));
  }
}

TEST_CASE("cross entropy values") {
  std::vector<int> labels{2};
  auto onehot = run([&](Tape& t) { return cross_entropy(t.constant(Tensor({1, 3}, {0, 0, 1})), labels); });
  CHECK(onehot[0] <= 1e-6);
  std::vector<int> six{0, 5};
  auto uniform = run([&](Tape& t) { return cross_entropy(t.constant(Tensor({2, 6}, 1.0 / 6.0)), six); });
  CHECK(uniform[0] == doctest::Approx(std::log(6.0)).epsilon(1e-12));
  std::vector<int> bad{3};
  Tape t;
  CHECK_THROWS_AS(cross_entropy(t.constant(Tensor({1, 3}, 1.0 / 3.0)), bad), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy(t.constant(Tensor({1, 3}, 0.5)), labels), std::invalid_argument);
}

TEST_CASE("backward contract") {
  SUBCASE("linear case: grad(w) = x") {
    Parameter w("w", Tensor({3}, {0.1, 0.2, 0.3}));
    Tensor x({3}, {4.0, -5.0, 6.0});
    Tape t;
    auto loss = sum(mul(t.param(w), t.constant(x)));
    t.backward(loss);
    CHECK(w.grad == x);
  }
  SUBCASE("disconnected parameter gets zero gradient") {
    Parameter used("u", Tensor({2}, 1.0)), unused("n", Tensor({2}, 1.0));
    Tape t;
    t.param(unused);
    auto loss = sum(t.param(used));
    t.backward(loss);
    CHECK(unused.grad == Tensor({2}, 0.0));
  }
  SUBCASE("non-trainable parameters still receive gradients") {
    Parameter w("w", Tensor({2}, {1.0, 2.0}), false);
    Tape t;
    t.backward(sum(mul(t.param(w), t.param(w))));
    CHECK(w.grad == Tensor({2}, {2.0, 4.0}));
  }
  SUBCASE("errors") {
    Tape empty;
    CHECK_THROWS_AS(empty.backward(Var{&empty, 0}), std::logic_error);
    Tape t;
    auto v = t.constant(Tensor({2}, 1.0));
    CHECK_THROWS_AS(t.backward(v), DimensionError);
  }
  SUBCASE("fan-out: a parameter used twice gets both path gradients") {
    std::mt19937_64 rng(6);
    Parameter w("w", random_tensor({4, 3}, rng));
    auto x = random_tensor({2, 4}, rng);
    Tape t1;
    auto y1 = dense(t1.constant(x), t1.param(w), std::nullopt);
    auto y2 = dense(t1.constant(x), t1.param(w), std::nullopt);
    t1.backward(sum(add(y1, y2)));
    Tensor twice = w.grad;

    w.zero_grad();
    Tape t2;
    auto y = dense(t2.constant(x), t2.param(w), std::nullopt);
    t2.backward(sum(add(y, y)));
    CHECK(w.grad == twice);

    Tensor single_doubled = w.grad;
    w.zero_grad();
    Tape t3;
    t3.backward(sum(dense(t3.constant(x), t3.param(w), std::nullopt)));
    for (std::size_t i = 0; i < w.grad.size(); ++i) CHECK(2.0 * w.grad[i] == single_doubled[i]);
  }
}

TEST_CASE("ops are deterministic") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({3, 2, 16}, rng);
  auto w = random_tensor({4, 2, 5}, rng);
  auto f = [&](Tape& t) { return relu(conv1d(t.constant(x), t.constant(w), std::nullopt, 2, Padding::same)); };
  CHECK(run(f) == run(f));
}
