#include "mstage/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <mutex>
#include <string>
#include <vector>

#include <cblas.h>

namespace mstage {

namespace {

using Index = std::ptrdiff_t;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank())
    throw DimensionError(op, "rank " + std::to_string(a.rank()) + " vs " + std::to_string(b.rank()));
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw DimensionError(op, static_cast<int>(i), a.dim(i), b.dim(i));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(op, std::string(what) + " must have rank " + std::to_string(rank) +
                                 ", got " + shape_to_string(t.shape()));
}

// Geometry of a 2D convolution; 1D ops use H = Kh = 1.
struct ConvGeom {
  Index batch, c_in, h, w;
  Index c_out, kh, kw;
  Index sh, sw;
  Index pad_top, pad_left;
  Index oh, ow;
  bool depthwise;
};

// Output columns whose input column ow*sw + kx - pad_left lies inside [0, w).
inline void column_range(const ConvGeom& g, Index kx, Index& lo, Index& hi) {
  const Index shift = g.pad_left - kx;
  lo = shift > 0 ? (shift + g.sw - 1) / g.sw : 0;
  const Index last = g.w - 1 + shift;
  hi = last < 0 ? -1 : std::min(g.ow - 1, last / g.sw);
}

void conv_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                  double* out) {
  const Index in_plane = g.h * g.w;
  const Index out_plane = g.oh * g.ow;
  const Index kplane = g.kh * g.kw;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index co = 0; co < g.c_out; ++co) {
      double* op = out + (b * g.c_out + co) * out_plane;
      std::fill(op, op + out_plane, bias ? bias[co] : 0.0);
      const Index ci_begin = g.depthwise ? co : 0;
      const Index ci_end = g.depthwise ? co + 1 : g.c_in;
      for (Index ci = ci_begin; ci < ci_end; ++ci) {
        const double* xp = x + (b * g.c_in + ci) * in_plane;
        const double* wp = g.depthwise ? w + co * kplane : w + (co * g.c_in + ci) * kplane;
        for (Index ky = 0; ky < g.kh; ++ky) {
          for (Index kx = 0; kx < g.kw; ++kx) {
            const double wv = wp[ky * g.kw + kx];
            if (wv == 0.0) continue;
            Index lo, hi;
            column_range(g, kx, lo, hi);
            for (Index oy = 0; oy < g.oh; ++oy) {
              const Index iy = oy * g.sh + ky - g.pad_top;
              if (iy < 0 || iy >= g.h) continue;
              const double* xrow = xp + iy * g.w + kx - g.pad_left;
              double* orow = op + oy * g.ow;
              if (g.sw == 1) {
                for (Index ox = lo; ox <= hi; ++ox) orow[ox] += wv * xrow[ox];
              } else {
                for (Index ox = lo; ox <= hi; ++ox) orow[ox] += wv * xrow[ox * g.sw];
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward(const ConvGeom& g, const double* x, const double* w, const double* gout,
                   double* dx, double* dw, double* dbias) {
  const Index in_plane = g.h * g.w;
  const Index out_plane = g.oh * g.ow;
  const Index kplane = g.kh * g.kw;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index co = 0; co < g.c_out; ++co) {
      const double* gp = gout + (b * g.c_out + co) * out_plane;
      if (dbias) {
        double s = 0.0;
        for (Index i = 0; i < out_plane; ++i) s += gp[i];
        dbias[co] += s;
      }
      const Index ci_begin = g.depthwise ? co : 0;
      const Index ci_end = g.depthwise ? co + 1 : g.c_in;
      for (Index ci = ci_begin; ci < ci_end; ++ci) {
        const double* xp = x + (b * g.c_in + ci) * in_plane;
        double* dxp = dx + (b * g.c_in + ci) * in_plane;
        const Index woff = g.depthwise ? co * kplane : (co * g.c_in + ci) * kplane;
        for (Index ky = 0; ky < g.kh; ++ky) {
          for (Index kx = 0; kx < g.kw; ++kx) {
            const double wv = w[woff + ky * g.kw + kx];
            double acc = 0.0;
            Index lo, hi;
            column_range(g, kx, lo, hi);
            for (Index oy = 0; oy < g.oh; ++oy) {
              const Index iy = oy * g.sh + ky - g.pad_top;
              if (iy < 0 || iy >= g.h) continue;
              const Index base = iy * g.w + kx - g.pad_left;
              const double* grow = gp + oy * g.ow;
              for (Index ox = lo; ox <= hi; ++ox) {
                const Index xi = base + ox * g.sw;
                acc += grow[ox] * xp[xi];
                dxp[xi] += wv * grow[ox];
              }
            }
            dw[woff + ky * g.kw + kx] += acc;
          }
        }
      }
    }
  }
}

// 1x1 convolutions never pad, so each sample is one matrix product.
bool is_pointwise(const ConvGeom& g) { return !g.depthwise && g.kh == 1 && g.kw == 1; }

void single_threaded_blas() {
  // Fixed thread count keeps results reproducible; folds parallelize above this level.
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

// Strided input columns of one sample packed into [C_in, P].
const double* pack_pointwise(const ConvGeom& g, const double* xb, std::vector<double>& buf) {
  if (g.sh == 1 && g.sw == 1) return xb;
  const Index P = g.oh * g.ow;
  buf.resize(std::size_t(g.c_in * P));
  for (Index ci = 0; ci < g.c_in; ++ci)
    for (Index oy = 0; oy < g.oh; ++oy)
      for (Index ox = 0; ox < g.ow; ++ox)
        buf[std::size_t(ci * P + oy * g.ow + ox)] = xb[ci * g.h * g.w + oy * g.sh * g.w + ox * g.sw];
  return buf.data();
}

void pointwise_forward(const ConvGeom& g, const double* x, const double* w, const double* bias, double* out) {
  single_threaded_blas();
  const Index P = g.oh * g.ow;
  std::vector<double> buf;
  for (Index b = 0; b < g.batch; ++b) {
    const double* xb = pack_pointwise(g, x + b * g.c_in * g.h * g.w, buf);
    double* ob = out + b * g.c_out * P;
    for (Index co = 0; co < g.c_out; ++co) std::fill(ob + co * P, ob + (co + 1) * P, bias ? bias[co] : 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(g.c_out), int(P), int(g.c_in), 1.0, w,
                int(g.c_in), xb, int(P), 1.0, ob, int(P));
  }
}

void pointwise_backward(const ConvGeom& g, const double* x, const double* w, const double* gout, double* dx,
                        double* dw, double* dbias) {
  single_threaded_blas();
  const Index P = g.oh * g.ow;
  const bool contiguous = g.sh == 1 && g.sw == 1;
  std::vector<double> buf, dbuf;
  for (Index b = 0; b < g.batch; ++b) {
    const double* gb = gout + b * g.c_out * P;
    if (dbias)
      for (Index co = 0; co < g.c_out; ++co) {
        double s = 0.0;
        for (Index i = 0; i < P; ++i) s += gb[co * P + i];
        dbias[co] += s;
      }
    const double* xb = pack_pointwise(g, x + b * g.c_in * g.h * g.w, buf);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(g.c_out), int(g.c_in), int(P), 1.0, gb, int(P), xb,
                int(P), 1.0, dw, int(g.c_in));
    double* dxb = dx + b * g.c_in * g.h * g.w;
    if (contiguous) {
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(g.c_in), int(P), int(g.c_out), 1.0, w, int(g.c_in),
                  gb, int(P), 1.0, dxb, int(P));
      continue;
    }
    dbuf.assign(std::size_t(g.c_in * P), 0.0);
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(g.c_in), int(P), int(g.c_out), 1.0, w, int(g.c_in),
                gb, int(P), 0.0, dbuf.data(), int(P));
    for (Index ci = 0; ci < g.c_in; ++ci)
      for (Index oy = 0; oy < g.oh; ++oy)
        for (Index ox = 0; ox < g.ow; ++ox)
          dxb[ci * g.h * g.w + oy * g.sh * g.w + ox * g.sw] += dbuf[std::size_t(ci * P + oy * g.ow + ox)];
  }
}

Var record_conv(const ConvGeom& g, Var x, Var w, std::optional<Var> b, Shape out_shape) {
  Tensor out(std::move(out_shape));
  const double* bias = b ? b->value().data().data() : nullptr;
  if (is_pointwise(g))
    pointwise_forward(g, x.value().data().data(), w.value().data().data(), bias, out.data().data());
  else
    conv_forward(g, x.value().data().data(), w.value().data().data(), bias, out.data().data());

  const Tensor* xv = &x.value();
  const Tensor* wv = &w.value();
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  const bool has_bias = b.has_value();
  return x.tape->record(std::move(out), std::move(inputs),
                        [g, xv, wv, has_bias](const Tensor& gout, std::span<Tensor* const> gin) {
                          auto* backward = is_pointwise(g) ? pointwise_backward : conv_backward;
                          backward(g, xv->data().data(), wv->data().data(),
                                        gout.data().data(), gin[0]->data().data(),
                                        gin[1]->data().data(),
                                        has_bias ? gin[2]->data().data() : nullptr);
                        });
}

void check_bias(const char* op, std::optional<Var> b, std::size_t c_out) {
  if (!b) return;
  require_rank(op, b->value(), 1, "bias");
  if (b->value().dim(0) != c_out) throw DimensionError(op, 0, c_out, b->value().dim(0));
}

}  // namespace

PadPlan plan_padding(const char* op, int axis, std::size_t length, std::size_t kernel,
                     std::size_t stride, Padding padding) {
  if (stride == 0) throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
  if (kernel == 0) throw DimensionError(op, "kernel extent must be positive");
  PadPlan p;
  if (padding == Padding::same) {
    p.out = (length + stride - 1) / stride;
    const std::size_t needed = (p.out - 1) * stride + kernel;
    const std::size_t total = needed > length ? needed - length : 0;
    p.before = total / 2;
    p.after = total - p.before;
  } else {
    if (kernel > length)
      throw DimensionError(op, "kernel " + std::to_string(kernel) + " exceeds padded length " +
                                   std::to_string(length) + " on axis " + std::to_string(axis));
    p.out = (length - kernel) / stride + 1;
  }
  return p;
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> gin) {
    *gin[0] += g;
    *gin[1] += g;
  });
}

Var residual_add(Var a, Var b) {
  require_same_shape("residual_add", a.value(), b.value());
  return add(a, b);
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const Tensor* av = &a.value();
  const Tensor* bv = &b.value();
  Tensor out(av->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*av)[i] * (*bv)[i];
  return a.tape->record(std::move(out), {a, b},
                        [av, bv](const Tensor& g, std::span<Tensor* const> gin) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*gin[0])[i] += g[i] * (*bv)[i];
                            (*gin[1])[i] += g[i] * (*av)[i];
                          }
                        });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [](const Tensor& g, std::span<Tensor* const> gin) {
    for (auto& d : gin[0]->data()) d += g[0];
  });
}

Var relu(Var x) {
  const Tensor* xv = &x.value();
  Tensor out(xv->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*xv)[i] > 0.0 ? (*xv)[i] : 0.0;
  return x.tape->record(std::move(out), {x}, [xv](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*xv)[i] > 0.0) (*gin[0])[i] += g[i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> gin) {
    auto dst = gin[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var dense(Var x, Var w, std::optional<Var> b) {
  const Tensor* xv = &x.value();
  const Tensor* wv = &w.value();
  require_rank("dense", *xv, 2, "input");
  require_rank("dense", *wv, 2, "weight");
  const std::size_t batch = xv->dim(0), fin = xv->dim(1), fout = wv->dim(1);
  if (wv->dim(0) != fin) throw DimensionError("dense", 1, wv->dim(0), fin);
  check_bias("dense", b, fout);

  Tensor out({batch, fout});
  for (std::size_t r = 0; r < batch; ++r) {
    double* orow = out.data().data() + r * fout;
    if (b)
      for (std::size_t o = 0; o < fout; ++o) orow[o] = b->value()[o];
    const double* xrow = xv->data().data() + r * fin;
    for (std::size_t i = 0; i < fin; ++i) {
      const double xi = xrow[i];
      if (xi == 0.0) continue;
      const double* wrow = wv->data().data() + i * fout;
      for (std::size_t o = 0; o < fout; ++o) orow[o] += xi * wrow[o];
    }
  }
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  const bool has_bias = b.has_value();
  return x.tape->record(
      std::move(out), std::move(inputs),
      [xv, wv, batch, fin, fout, has_bias](const Tensor& g, std::span<Tensor* const> gin) {
        double* dx = gin[0]->data().data();
        double* dw = gin[1]->data().data();
        for (std::size_t r = 0; r < batch; ++r) {
          const double* grow = g.data().data() + r * fout;
          const double* xrow = xv->data().data() + r * fin;
          for (std::size_t i = 0; i < fin; ++i) {
            const double* wrow = wv->data().data() + i * fout;
            double* dwrow = dw + i * fout;
            double acc = 0.0;
            const double xi = xrow[i];
            for (std::size_t o = 0; o < fout; ++o) {
              acc += grow[o] * wrow[o];
              dwrow[o] += xi * grow[o];
            }
            dx[r * fin + i] += acc;
          }
          if (has_bias) {
            double* db = gin[2]->data().data();
            for (std::size_t o = 0; o < fout; ++o) db[o] += grow[o];
          }
        }
      });
}

Var conv1d(Var x, Var w, std::optional<Var> b, std::size_t stride, Padding padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const bool unbatched = xv.rank() == 2;
  if (!unbatched) require_rank("conv1d", xv, 3, "input");
  require_rank("conv1d", wv, 3, "kernel");
  const std::size_t batch = unbatched ? 1 : xv.dim(0);
  const std::size_t c_in = xv.dim(unbatched ? 0 : 1);
  const std::size_t len = xv.dim(unbatched ? 1 : 2);
  if (wv.dim(1) != c_in) throw DimensionError("conv1d", unbatched ? 0 : 1, wv.dim(1), c_in);
  check_bias("conv1d", b, wv.dim(0));
  const PadPlan p = plan_padding("conv1d", unbatched ? 1 : 2, len, wv.dim(2), stride, padding);
  ConvGeom g{Index(batch), Index(c_in), 1, Index(len), Index(wv.dim(0)), 1, Index(wv.dim(2)),
             1, Index(stride), 0, Index(p.before), 1, Index(p.out), false};
  Shape out = unbatched ? Shape{wv.dim(0), p.out} : Shape{batch, wv.dim(0), p.out};
  return record_conv(g, x, w, b, std::move(out));
}

Var depthwise_conv1d(Var x, Var w, std::size_t stride, Padding padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank("depthwise_conv1d", xv, 3, "input");
  require_rank("depthwise_conv1d", wv, 2, "kernel");
  const std::size_t batch = xv.dim(0), c = xv.dim(1), len = xv.dim(2);
  if (wv.dim(0) != c) throw DimensionError("depthwise_conv1d", 1, wv.dim(0), c);
  const PadPlan p = plan_padding("depthwise_conv1d", 2, len, wv.dim(1), stride, padding);
  ConvGeom g{Index(batch), Index(c), 1, Index(len), Index(c), 1, Index(wv.dim(1)),
             1, Index(stride), 0, Index(p.before), 1, Index(p.out), true};
  return record_conv(g, x, w, std::nullopt, Shape{batch, c, p.out});
}

Var separable_conv1d(Var x, Var w_dw, Var w_pw, std::optional<Var> b, std::size_t stride,
                     Padding padding) {
  if (w_pw.value().rank() != 3 || w_pw.value().dim(2) != 1)
    throw DimensionError("separable_conv1d", "pointwise kernel must be [C_out,C,1], got " +
                                                 shape_to_string(w_pw.value().shape()));
  Var depth = depthwise_conv1d(x, w_dw, stride, padding);
  return conv1d(depth, w_pw, b, 1, Padding::valid);
}

Var conv2d(Var x, Var w, std::optional<Var> b, std::size_t stride, Padding padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const bool unbatched = xv.rank() == 3;
  if (!unbatched) require_rank("conv2d", xv, 4, "input");
  require_rank("conv2d", wv, 4, "kernel");
  const std::size_t off = unbatched ? 0 : 1;
  const std::size_t batch = unbatched ? 1 : xv.dim(0);
  const std::size_t c_in = xv.dim(off), h = xv.dim(off + 1), wd = xv.dim(off + 2);
  if (wv.dim(1) != c_in) throw DimensionError("conv2d", int(off), wv.dim(1), c_in);
  check_bias("conv2d", b, wv.dim(0));
  const PadPlan ph = plan_padding("conv2d", int(off + 1), h, wv.dim(2), stride, padding);
  const PadPlan pw = plan_padding("conv2d", int(off + 2), wd, wv.dim(3), stride, padding);
  ConvGeom g{Index(batch), Index(c_in), Index(h), Index(wd), Index(wv.dim(0)), Index(wv.dim(2)),
             Index(wv.dim(3)), Index(stride), Index(stride), Index(ph.before), Index(pw.before),
             Index(ph.out), Index(pw.out), false};
  Shape out = unbatched ? Shape{wv.dim(0), ph.out, pw.out} : Shape{batch, wv.dim(0), ph.out, pw.out};
  return record_conv(g, x, w, b, std::move(out));
}

Var depthwise_conv2d(Var x, Var w, std::size_t stride, Padding padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank("depthwise_conv2d", xv, 4, "input");
  require_rank("depthwise_conv2d", wv, 3, "kernel");
  const std::size_t batch = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  if (wv.dim(0) != c) throw DimensionError("depthwise_conv2d", 1, wv.dim(0), c);
  const PadPlan ph = plan_padding("depthwise_conv2d", 2, h, wv.dim(1), stride, padding);
  const PadPlan pw = plan_padding("depthwise_conv2d", 3, wd, wv.dim(2), stride, padding);
  ConvGeom g{Index(batch), Index(c), Index(h), Index(wd), Index(c), Index(wv.dim(1)),
             Index(wv.dim(2)), Index(stride), Index(stride), Index(ph.before), Index(pw.before),
             Index(ph.out), Index(pw.out), true};
  return record_conv(g, x, w, std::nullopt, Shape{batch, c, ph.out, pw.out});
}

Var separable_conv2d(Var x, Var w_dw, Var w_pw, std::optional<Var> b, std::size_t stride,
                     Padding padding) {
  const Tensor& pw = w_pw.value();
  if (pw.rank() != 4 || pw.dim(2) != 1 || pw.dim(3) != 1)
    throw DimensionError("separable_conv2d", "pointwise kernel must be [C_out,C,1,1], got " +
                                                 shape_to_string(pw.shape()));
  Var depth = depthwise_conv2d(x, w_dw, stride, padding);
  return conv2d(depth, w_pw, b, 1, Padding::valid);
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, NormMode mode, double momentum,
               double eps) {
  const Tensor* xv = &x.value();
  if (xv->rank() < 2) throw DimensionError("batch_norm", "input must have rank >= 2");
  const std::size_t batch = xv->dim(0), c = xv->dim(1);
  const std::size_t inner = xv->size() / (batch * c);
  const std::size_t count = batch * inner;
  const Tensor* per_channel[] = {&gamma.value(), &beta.value(), &stats.mean, &stats.var};
  for (const Tensor* t : per_channel) {
    require_rank("batch_norm", *t, 1, "per-channel tensor");
    if (t->dim(0) != c) throw DimensionError("batch_norm", 1, t->dim(0), c);
  }
  if (mode == NormMode::train && batch < 2)
    throw std::invalid_argument("batch_norm: train mode needs batch size >= 2, got " +
                                std::to_string(batch));

  const Tensor* gv = &gamma.value();
  const Tensor* bv = &beta.value();
  std::vector<double> mean(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (mode == NormMode::train) {
      double m = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv->data().data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) m += p[i];
      }
      m /= double(count);
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv->data().data() + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= double(count);
      mean[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(v + eps);
      stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * m;
      stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * v;
    } else {
      mean[ch] = stats.mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.var[ch] + eps);
    }
  }

  Tensor xhat(xv->shape());
  Tensor out(xv->shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = ((*xv)[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = h;
        out[off + i] = (*gv)[ch] * h + (*bv)[ch];
      }
    }

  const bool training = mode == NormMode::train;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gv, batch, c, inner, count,
       training](const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sg += g[off + i];
              sgx += g[off + i] * xhat[off + i];
            }
          }
          (*gin[1])[ch] += sgx;
          (*gin[2])[ch] += sg;
          const double gm = (*gv)[ch];
          const double scale = gm * inv_std[ch];
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              double d = g[off + i];
              if (training) d -= (sg + xhat[off + i] * sgx) / double(count);
              (*gin[0])[off + i] += scale * d;
            }
          }
        }
      });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 3) throw DimensionError("global_avg_pool", "input must be [B,C,...]");
  const std::size_t batch = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = xv.size() / (batch * c);
  Tensor out({batch, c});
  for (std::size_t k = 0; k < batch * c; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += xv[k * inner + i];
    out[k] = s / double(inner);
  }
  return x.tape->record(std::move(out), {x},
                        [inner, n = batch * c](const Tensor& g, std::span<Tensor* const> gin) {
                          for (std::size_t k = 0; k < n; ++k) {
                            const double d = g[k] / double(inner);
                            for (std::size_t i = 0; i < inner; ++i) (*gin[0])[k * inner + i] += d;
                          }
                        });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts[0].value().shape();
  if (axis >= first.size()) throw DimensionError("concat", "axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.value().shape();
    if (s.size() != first.size())
      throw DimensionError("concat", "rank mismatch " + shape_to_string(s) + " vs " +
                                         shape_to_string(first));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) throw DimensionError("concat", int(i), first[i], s[i]);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  Tensor out(out_shape);
  std::vector<std::size_t> widths;
  std::size_t total = out_shape[axis] * inner;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t wdt = p.value().shape()[axis] * inner;
    widths.push_back(wdt);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data().data() + o * wdt, wdt, out.data().data() + o * total + col);
    col += wdt;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(
      std::move(out), std::move(inputs),
      [widths, outer, total](const Tensor& g, std::span<Tensor* const> gin) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data().data() + o * total + col;
            double* dst = gin[k]->data().data() + o * widths[k];
            for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
          }
          col += widths[k];
        }
      });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  require_rank("softmax", xv, 2, "input");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= s;
  }
  Tensor y = out;
  return x.tape->record(std::move(out), {x},
                        [y = std::move(y), rows, cols](const Tensor& g, std::span<Tensor* const> gin) {
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* yr = y.data().data() + r * cols;
                            const double* gr = g.data().data() + r * cols;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                            double* dx = gin[0]->data().data() + r * cols;
                            for (std::size_t j = 0; j < cols; ++j) dx[j] += yr[j] * (gr[j] - dot);
                          }
                        });
}

Var cross_entropy(Var probs, std::span<const int> labels) {
  const Tensor* pv = &probs.value();
  require_rank("cross_entropy", *pv, 2, "probs");
  const std::size_t rows = pv->dim(0), cols = pv->dim(1);
  if (labels.size() != rows) throw DimensionError("cross_entropy", 0, rows, labels.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || std::size_t(y) >= cols)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0," +
                              std::to_string(cols) + ")");
    double rs = 0.0;
    for (std::size_t j = 0; j < cols; ++j) rs += (*pv)[r * cols + j];
    if (std::abs(rs - 1.0) > 1e-6)
      throw std::invalid_argument("cross_entropy: probability row " + std::to_string(r) +
                                  " sums to " + std::to_string(rs));
    loss -= std::log(std::max((*pv)[r * cols + std::size_t(y)], kProbabilityFloor));
  }
  loss /= double(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  return probs.tape->record(Tensor::scalar(loss), {probs},
                            [pv, lab = std::move(lab), rows, cols](const Tensor& g,
                                                                   std::span<Tensor* const> gin) {
                              for (std::size_t r = 0; r < rows; ++r) {
                                const std::size_t k = r * cols + std::size_t(lab[r]);
                                const double p = (*pv)[k];
                                if (p >= kProbabilityFloor) (*gin[0])[k] -= g[0] / (double(rows) * p);
                              }
                            });
}

}  // namespace mstage
