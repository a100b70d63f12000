#include "etm/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Core>
#include <fmt/format.h>

namespace ETM_NS::ops {

namespace {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// Gradient buffer of input i, or nullptr when that input takes no gradient.
Tensor* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs.at(i);
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

void require_rank4(const Var& x, const char* op) {
  if (x.value().rank() != 4) {
    throw std::invalid_argument(fmt::format("{}: expected [B,C,H,W], got {}", op, shape_str(x.shape())));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(
        fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()), shape_str(b.shape())));
  }
}

struct ConvGeometry {
  std::int64_t batch, in_c, in_h, in_w, out_c, kernel, out_h, out_w;
  int stride, padding, dilation;

  std::int64_t patch() const { return in_c * kernel * kernel; }
  std::int64_t pixels() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

void im2col(const real* image, const ConvGeometry& g, real* col) {
  const std::int64_t n = g.pixels();
  for (std::int64_t c = 0; c < g.in_c; ++c) {
    const real* plane = image + c * g.in_h * g.in_w;
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        real* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
          real* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const real* src = plane + iy * g.in_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kx * g.dilation;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const real* col, const ConvGeometry& g, real* image) {
  const std::int64_t n = g.pixels();
  for (std::int64_t c = 0; c < g.in_c; ++c) {
    real* plane = image + c * g.in_h * g.in_w;
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        const real* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky * g.dilation;
          if (iy < 0 || iy >= g.in_h) continue;
          const real* src = row + oy * g.out_w;
          real* dst = plane + iy * g.in_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kx * g.dilation;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename Forward, typename Backward>
Var elementwise_unary(const Var& x, Forward fwd, Backward bwd) {
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = fwd(in[i]);
  return make_result(std::move(out), {x}, [bwd](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& in = self.inputs[0]->value;
    for (std::int64_t i = 0; i < in.numel(); ++i) (*gx)[i] += self.grad[i] * bwd(in[i]);
  });
}

}  // namespace

std::int64_t conv_output_size(std::int64_t input, int kernel, Conv2dOptions options) {
  const std::int64_t span = static_cast<std::int64_t>(options.dilation) * (kernel - 1) + 1;
  return (input + 2 * options.padding - span) / options.stride + 1;
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions options) {
  require_rank4(x, "conv2d");
  if (weight.value().rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw std::invalid_argument(fmt::format("conv2d: weight must be [Co,Ci,k,k], got {}", shape_str(weight.shape())));
  }
  if (weight.dim(1) != x.dim(1)) {
    throw std::invalid_argument(
        fmt::format("conv2d: input has {} channels, weight expects {}", x.dim(1), weight.dim(1)));
  }
  if (bias.defined() && bias.shape() != Shape{weight.dim(0)}) {
    throw std::invalid_argument(fmt::format("conv2d: bias shape {} for {} outputs", shape_str(bias.shape()), weight.dim(0)));
  }
  if (options.stride < 1 || options.dilation < 1 || options.padding < 0) {
    throw std::invalid_argument("conv2d: invalid stride/padding/dilation");
  }

  ConvGeometry g{};
  g.batch = x.dim(0);
  g.in_c = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_c = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = options.stride;
  g.padding = options.padding;
  g.dilation = options.dilation;
  g.out_h = conv_output_size(g.in_h, static_cast<int>(g.kernel), options);
  g.out_w = conv_output_size(g.in_w, static_cast<int>(g.kernel), options);
  if (g.out_h < 1 || g.out_w < 1) {
    throw std::invalid_argument(fmt::format("conv2d: input {} too small for kernel", shape_str(x.shape())));
  }

  Tensor out({g.batch, g.out_c, g.out_h, g.out_w});
  const std::int64_t k = g.patch();
  const std::int64_t n = g.pixels();
  std::vector<real> col(g.pointwise() ? 0 : static_cast<std::size_t>(k * n));
  ConstMatMap w(weight.value().ptr(), g.out_c, k);
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const real* image = x.value().ptr() + b * g.in_c * g.in_h * g.in_w;
    const real* cols = image;
    if (!g.pointwise()) {
      im2col(image, g, col.data());
      cols = col.data();
    }
    MatMap o(out.ptr() + b * g.out_c * n, g.out_c, n);
    o.noalias() = w * ConstMatMap(cols, k, n);
    if (bias.defined()) {
      for (std::int64_t c = 0; c < g.out_c; ++c) o.row(c).array() += bias.value()[c];
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out), std::move(inputs), [g](Node& self) {
    Tensor* gx = input_grad(self, 0);
    Tensor* gw = input_grad(self, 1);
    Tensor* gb = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
    const Tensor& xin = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    const std::int64_t k = g.patch();
    const std::int64_t n = g.pixels();
    std::vector<real> col(g.pointwise() ? 0 : static_cast<std::size_t>(k * n));
    std::vector<real> dcol(g.pointwise() ? 0 : static_cast<std::size_t>(k * n));
    ConstMatMap w(wv.ptr(), g.out_c, k);
    for (std::int64_t b = 0; b < g.batch; ++b) {
      ConstMatMap dout(self.grad.ptr() + b * g.out_c * n, g.out_c, n);
      const real* image = xin.ptr() + b * g.in_c * g.in_h * g.in_w;
      if (gw) {
        const real* cols = image;
        if (!g.pointwise()) {
          im2col(image, g, col.data());
          cols = col.data();
        }
        MatMap dw(gw->ptr(), g.out_c, k);
        dw.noalias() += dout * ConstMatMap(cols, k, n).transpose();
      }
      if (gb) {
        // Plain loop: Eigen's vectorised sum splits by pointer alignment, which
        // would make the result depend on where the gradient buffer landed.
        for (std::int64_t c = 0; c < g.out_c; ++c) {
          const real* row = self.grad.ptr() + (b * g.out_c + c) * n;
          real acc = 0;
          for (std::int64_t j = 0; j < n; ++j) acc += row[j];
          (*gb)[c] += acc;
        }
      }
      if (gx) {
        real* dimage = gx->ptr() + b * g.in_c * g.in_h * g.in_w;
        if (g.pointwise()) {
          MatMap dx(dimage, k, n);
          dx.noalias() += w.transpose() * dout;
        } else {
          MatMap dc(dcol.data(), k, n);
          dc.noalias() = w.transpose() * dout;
          col2im_add(dcol.data(), g, dimage);
        }
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = input_grad(self, k)) {
        for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, real factor) {
  return elementwise_unary(
      a, [factor](real v) { return v * factor; }, [factor](real) { return factor; });
}

Var relu(const Var& x) {
  return elementwise_unary(
      x, [](real v) { return v > 0.0f ? v : 0.0f; }, [](real v) { return v > 0.0f ? 1.0f : 0.0f; });
}

Var leaky_relu(const Var& x, real slope) {
  return elementwise_unary(
      x, [slope](real v) { return v > 0.0f ? v : slope * v; },
      [slope](real v) { return v > 0.0f ? 1.0f : slope; });
}

Var global_avg_pool(const Var& x) {
  require_rank4(x, "global_avg_pool");
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({b, c, 1, 1});
  for (std::int64_t p = 0; p < b * c; ++p) {
    double acc = 0.0;
    const real* plane = x.value().ptr() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) acc += plane[i];
    out[p] = static_cast<real>(acc / static_cast<double>(hw));
  }
  return make_result(std::move(out), {x}, [b, c, hw](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const real inv = 1.0f / static_cast<real>(hw);
    for (std::int64_t p = 0; p < b * c; ++p) {
      const real gv = self.grad[p] * inv;
      real* plane = gx->ptr() + p * hw;
      for (std::int64_t i = 0; i < hw; ++i) plane[i] += gv;
    }
  });
}

Var upsample_nearest(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank4(x, "upsample_nearest");
  const std::int64_t planes = x.dim(0) * x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("upsample_nearest: empty output size");
  auto src_index = [=](std::int64_t y, std::int64_t xx) {
    const std::int64_t sy = y * in_h / out_h;
    const std::int64_t sx = xx * in_w / out_w;
    return sy * in_w + sx;
  };
  Tensor out({x.dim(0), x.dim(1), out_h, out_w});
  for (std::int64_t p = 0; p < planes; ++p) {
    const real* src = x.value().ptr() + p * in_h * in_w;
    real* dst = out.ptr() + p * out_h * out_w;
    for (std::int64_t y = 0; y < out_h; ++y)
      for (std::int64_t xx = 0; xx < out_w; ++xx) dst[y * out_w + xx] = src[src_index(y, xx)];
  }
  return make_result(std::move(out), {x}, [=](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::int64_t p = 0; p < planes; ++p) {
      real* dst = gx->ptr() + p * in_h * in_w;
      const real* src = self.grad.ptr() + p * out_h * out_w;
      for (std::int64_t y = 0; y < out_h; ++y)
        for (std::int64_t xx = 0; xx < out_w; ++xx) dst[src_index(y, xx)] += src[y * out_w + xx];
    }
  });
}

Var resize_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank4(x, "resize_bilinear");
  const std::int64_t planes = x.dim(0) * x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: empty output size");

  struct Tap {
    std::int64_t lo, hi;
    real w_hi;
  };
  auto taps = [](std::int64_t in, std::int64_t out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double ratio = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    for (std::int64_t i = 0; i < out; ++i) {
      const double src = static_cast<double>(i) * ratio;
      const auto lo = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(src)), in - 1);
      const std::int64_t hi = std::min<std::int64_t>(lo + 1, in - 1);
      t[static_cast<std::size_t>(i)] = {lo, hi, static_cast<real>(src - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);

  Tensor out({x.dim(0), x.dim(1), out_h, out_w});
  for (std::int64_t p = 0; p < planes; ++p) {
    const real* src = x.value().ptr() + p * in_h * in_w;
    real* dst = out.ptr() + p * out_h * out_w;
    for (std::int64_t y = 0; y < out_h; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (std::int64_t xx = 0; xx < out_w; ++xx) {
        const Tap& b = tx[static_cast<std::size_t>(xx)];
        const real top = src[a.lo * in_w + b.lo] * (1.0f - b.w_hi) + src[a.lo * in_w + b.hi] * b.w_hi;
        const real bot = src[a.hi * in_w + b.lo] * (1.0f - b.w_hi) + src[a.hi * in_w + b.hi] * b.w_hi;
        dst[y * out_w + xx] = top * (1.0f - a.w_hi) + bot * a.w_hi;
      }
    }
  }
  return make_result(std::move(out), {x}, [=](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::int64_t p = 0; p < planes; ++p) {
      real* dst = gx->ptr() + p * in_h * in_w;
      const real* src = self.grad.ptr() + p * out_h * out_w;
      for (std::int64_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        for (std::int64_t xx = 0; xx < out_w; ++xx) {
          const Tap& b = tx[static_cast<std::size_t>(xx)];
          const real gv = src[y * out_w + xx];
          dst[a.lo * in_w + b.lo] += gv * (1.0f - a.w_hi) * (1.0f - b.w_hi);
          dst[a.lo * in_w + b.hi] += gv * (1.0f - a.w_hi) * b.w_hi;
          dst[a.hi * in_w + b.lo] += gv * a.w_hi * (1.0f - b.w_hi);
          dst[a.hi * in_w + b.hi] += gv * a.w_hi * b.w_hi;
        }
      }
    }
  });
}

namespace {

// Per-pixel softmax over channels; writes probabilities and, optionally, log-probabilities.
void channel_softmax(const Tensor& x, Tensor* prob, Tensor* logprob) {
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (std::int64_t n = 0; n < b; ++n) {
    const real* base = x.ptr() + n * c * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      real mx = base[p];
      for (std::int64_t k = 1; k < c; ++k) mx = std::max(mx, base[k * hw + p]);
      double denom = 0.0;
      for (std::int64_t k = 0; k < c; ++k) denom += std::exp(static_cast<double>(base[k * hw + p] - mx));
      const double log_denom = std::log(denom);
      for (std::int64_t k = 0; k < c; ++k) {
        const std::int64_t idx = n * c * hw + k * hw + p;
        const double shifted = static_cast<double>(base[k * hw + p] - mx);
        if (prob) (*prob)[idx] = static_cast<real>(std::exp(shifted - log_denom));
        if (logprob) (*logprob)[idx] = static_cast<real>(shifted - log_denom);
      }
    }
  }
}

}  // namespace

Var softmax_channels(const Var& x) {
  require_rank4(x, "softmax_channels");
  Tensor out(x.shape());
  channel_softmax(x.value(), &out, nullptr);
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  // The backward reads its own output, which lives in the result node.
  auto result = make_result(std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [b, c, hw](Node& self) {
      Tensor* gx = input_grad(self, 0);
      if (!gx) return;
      const Tensor& y = self.value;
      for (std::int64_t n = 0; n < b; ++n) {
        for (std::int64_t p = 0; p < hw; ++p) {
          double dot = 0.0;
          for (std::int64_t k = 0; k < c; ++k) {
            const std::int64_t idx = n * c * hw + k * hw + p;
            dot += static_cast<double>(self.grad[idx]) * y[idx];
          }
          for (std::int64_t k = 0; k < c; ++k) {
            const std::int64_t idx = n * c * hw + k * hw + p;
            (*gx)[idx] += y[idx] * static_cast<real>(self.grad[idx] - dot);
          }
        }
      }
    };
  }
  return result;
}

Var log_softmax_channels(const Var& x) {
  require_rank4(x, "log_softmax_channels");
  Tensor out(x.shape());
  channel_softmax(x.value(), nullptr, &out);
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto result = make_result(std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [b, c, hw](Node& self) {
      Tensor* gx = input_grad(self, 0);
      if (!gx) return;
      const Tensor& y = self.value;
      for (std::int64_t n = 0; n < b; ++n) {
        for (std::int64_t p = 0; p < hw; ++p) {
          double total = 0.0;
          for (std::int64_t k = 0; k < c; ++k) total += self.grad[n * c * hw + k * hw + p];
          for (std::int64_t k = 0; k < c; ++k) {
            const std::int64_t idx = n * c * hw + k * hw + p;
            (*gx)[idx] += self.grad[idx] - static_cast<real>(std::exp(static_cast<double>(y[idx])) * total);
          }
        }
      }
    };
  }
  return result;
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (real v : x.value().data()) acc += v;
  return make_result(Tensor({1}, {static_cast<real>(acc)}), {x}, [](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const real gv = self.grad[0];
    for (std::int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += gv;
  });
}

Var mean(const Var& x) {
  const auto n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (real v : x.value().data()) acc += v;
  return make_result(Tensor({1}, {static_cast<real>(acc / n)}), {x}, [n](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const auto gv = static_cast<real>(self.grad[0] / n);
    for (std::int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += gv;
  });
}

}  // namespace etm::ops
