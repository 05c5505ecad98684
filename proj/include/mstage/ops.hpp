#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mstage/tape.hpp"

namespace mstage {

/// `same` pads symmetrically with any odd sample on the right/bottom and
/// yields ceil(L / stride) outputs; `valid` does not pad.
enum class Padding { same, valid };

struct PadPlan {
  std::size_t before = 0;
  std::size_t after = 0;
  std::size_t out = 0;
};

/// Padding and output extent for one spatial axis. Throws DimensionError when
/// the kernel does not fit.
PadPlan plan_padding(const char* op, int axis, std::size_t length, std::size_t kernel,
                     std::size_t stride, Padding padding);

enum class NormMode { train, infer };

/// Running statistics owned by a batch-norm layer; updated only in train mode.
struct BatchNormStats {
  Tensor mean;
  Tensor var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr double kProbabilityFloor = 1e-7;

// Elementwise and reductions.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var sum(Var x);
Var relu(Var x);
Var reshape(Var x, Shape shape);

/// x[B,F] * w[F,O] + b[O].
Var dense(Var x, Var w, std::optional<Var> b);

/// x[B,C_in,L] (or unbatched [C_in,L]), w[C_out,C_in,K].
Var conv1d(Var x, Var w, std::optional<Var> b, std::size_t stride, Padding padding);
/// x[B,C,L], w[C,K]: one filter per channel.
Var depthwise_conv1d(Var x, Var w, std::size_t stride, Padding padding);
/// Depthwise w_dw[C,K] then pointwise w_pw[C_out,C,1].
Var separable_conv1d(Var x, Var w_dw, Var w_pw, std::optional<Var> b, std::size_t stride,
                     Padding padding);

/// x[B,C_in,H,W] (or unbatched [C_in,H,W]), w[C_out,C_in,Kh,Kw].
Var conv2d(Var x, Var w, std::optional<Var> b, std::size_t stride, Padding padding);
/// x[B,C,H,W], w[C,Kh,Kw].
Var depthwise_conv2d(Var x, Var w, std::size_t stride, Padding padding);
Var separable_conv2d(Var x, Var w_dw, Var w_pw, std::optional<Var> b, std::size_t stride,
                     Padding padding);

/// Per-channel normalization over every axis except axis 1.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, NormMode mode,
               double momentum = kBatchNormMomentum, double eps = kBatchNormEps);

/// x[B,C,...] -> [B,C].
Var global_avg_pool(Var x);
/// Same-shape sum, used for residual joins.
Var residual_add(Var a, Var b);
Var concat(std::span<const Var> parts, std::size_t axis = 1);
/// Row-wise softmax over x[B,C].
Var softmax(Var x);
/// Mean over the batch of -ln max(p_true, 1e-7). Rows of probs must sum to 1.
Var cross_entropy(Var probs, std::span<const int> labels);

}  // namespace mstage
