#include "relprop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace relprop {

std::string Shape4::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor::Tensor(Shape4 shape) : shape_(shape) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor extents must all be >= 1, got " + shape.str());
  }
  v_.assign(static_cast<std::size_t>(shape.count()), 0.0);
}

Tensor::Tensor(Shape4 shape, std::vector<double> values) : Tensor(shape) {
  if (static_cast<std::int64_t>(values.size()) != shape.count()) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape.str());
  }
  v_ = std::move(values);
}

Tensor Tensor::full(Shape4 shape, double value) {
  Tensor t(shape);
  std::fill(t.v_.begin(), t.v_.end(), value);
  return t;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double x : v_) s += x;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : v_) m = std::max(m, std::abs(x));
  return m;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

static Shape4 conv_out_shape(const Shape4& in, const Shape4& k, int stride,
                             int pad) {
  if (k.c != in.c) {
    throw ShapeError("conv2d kernel expects " + std::to_string(k.c) +
                     " input channels, tensor has " + std::to_string(in.c));
  }
  const std::int64_t oh = (in.h + 2 * pad - k.h) / stride + 1;
  const std::int64_t ow = (in.w + 2 * pad - k.w) / stride + 1;
  if (in.h + 2 * pad < k.h || in.w + 2 * pad < k.w || oh < 1 || ow < 1) {
    throw ShapeError("conv2d output extent < 1 for input " + in.str() +
                     " kernel " + k.str() + " stride " +
                     std::to_string(stride) + " pad " + std::to_string(pad));
  }
  return Shape4{in.n, k.n, oh, ow};
}

Tensor conv2d(const Tensor& input, const Tensor& kernel,
              std::span<const double> bias, int stride, int pad) {
  const Shape4& in = input.shape();
  const Shape4& k = kernel.shape();
  if (!bias.empty() && static_cast<std::int64_t>(bias.size()) != k.n) {
    throw ShapeError("conv2d bias length " + std::to_string(bias.size()) +
                     " != output channels " + std::to_string(k.n));
  }
  Tensor out(conv_out_shape(in, k, stride, pad));
  const Shape4& os = out.shape();
  for (std::int64_t n = 0; n < os.n; ++n) {
    for (std::int64_t co = 0; co < os.c; ++co) {
      const double b = bias.empty() ? 0.0 : bias[co];
      for (std::int64_t oy = 0; oy < os.h; ++oy) {
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          double acc = b;
          for (std::int64_t ci = 0; ci < k.c; ++ci) {
            for (std::int64_t ky = 0; ky < k.h; ++ky) {
              const std::int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= in.h) continue;
              for (std::int64_t kx = 0; kx < k.w; ++kx) {
                const std::int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= in.w) continue;
                acc += input.at(n, ci, iy, ix) * kernel.at(co, ci, ky, kx);
              }
            }
          }
          out.at(n, co, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel,
                         int stride, int pad, const Shape4& input_shape) {
  const Shape4& gs = grad_out.shape();
  const Shape4& k = kernel.shape();
  Tensor gin(input_shape);
  for (std::int64_t n = 0; n < gs.n; ++n) {
    for (std::int64_t co = 0; co < gs.c; ++co) {
      for (std::int64_t oy = 0; oy < gs.h; ++oy) {
        for (std::int64_t ox = 0; ox < gs.w; ++ox) {
          const double g = grad_out.at(n, co, oy, ox);
          if (g == 0.0) continue;
          for (std::int64_t ci = 0; ci < k.c; ++ci) {
            for (std::int64_t ky = 0; ky < k.h; ++ky) {
              const std::int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= input_shape.h) continue;
              for (std::int64_t kx = 0; kx < k.w; ++kx) {
                const std::int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= input_shape.w) continue;
                gin.at(n, ci, iy, ix) += g * kernel.at(co, ci, ky, kx);
              }
            }
          }
        }
      }
    }
  }
  return gin;
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out,
                          int stride, int pad, const Shape4& kernel_shape) {
  const Shape4& in = input.shape();
  const Shape4& gs = grad_out.shape();
  Tensor gw(kernel_shape);
  for (std::int64_t n = 0; n < gs.n; ++n) {
    for (std::int64_t co = 0; co < gs.c; ++co) {
      for (std::int64_t oy = 0; oy < gs.h; ++oy) {
        for (std::int64_t ox = 0; ox < gs.w; ++ox) {
          const double g = grad_out.at(n, co, oy, ox);
          if (g == 0.0) continue;
          for (std::int64_t ci = 0; ci < kernel_shape.c; ++ci) {
            for (std::int64_t ky = 0; ky < kernel_shape.h; ++ky) {
              const std::int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= in.h) continue;
              for (std::int64_t kx = 0; kx < kernel_shape.w; ++kx) {
                const std::int64_t ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= in.w) continue;
                gw.at(co, ci, ky, kx) += g * input.at(n, ci, iy, ix);
              }
            }
          }
        }
      }
    }
  }
  return gw;
}

std::vector<double> conv2d_bias_grad(const Tensor& grad_out) {
  const Shape4& gs = grad_out.shape();
  std::vector<double> gb(static_cast<std::size_t>(gs.c), 0.0);
  for (std::int64_t n = 0; n < gs.n; ++n) {
    for (std::int64_t c = 0; c < gs.c; ++c) {
      for (std::int64_t y = 0; y < gs.h; ++y) {
        for (std::int64_t x = 0; x < gs.w; ++x) {
          gb[c] += grad_out.at(n, c, y, x);
        }
      }
    }
  }
  return gb;
}

static std::vector<BilinearPlan::Axis> axis_plan(std::int64_t in,
                                                 std::int64_t out,
                                                 bool align_corners) {
  std::vector<BilinearPlan::Axis> axes(static_cast<std::size_t>(out));
  for (std::int64_t i = 0; i < out; ++i) {
    double src;
    if (align_corners) {
      src = (out == 1) ? 0.0
                       : static_cast<double>(i) * static_cast<double>(in - 1) /
                             static_cast<double>(out - 1);
    } else {
      src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                static_cast<double>(out) -
            0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    }
    const std::int64_t lo = static_cast<std::int64_t>(std::floor(src));
    const std::int64_t hi = std::min(lo + 1, in - 1);
    const double t = src - static_cast<double>(lo);
    axes[static_cast<std::size_t>(i)] = {lo, hi, 1.0 - t, t};
  }
  return axes;
}

BilinearPlan make_bilinear_plan(std::int64_t in_h, std::int64_t in_w,
                                std::int64_t out_h, std::int64_t out_w,
                                bool align_corners) {
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("bilinear_resize target extents must be >= 1");
  }
  return BilinearPlan{axis_plan(in_h, out_h, align_corners),
                      axis_plan(in_w, out_w, align_corners)};
}

Tensor BilinearPlan::apply(const Tensor& input) const {
  const Shape4& in = input.shape();
  Tensor out(Shape4{in.n, in.c, static_cast<std::int64_t>(ys.size()),
                    static_cast<std::int64_t>(xs.size())});
  for (std::int64_t n = 0; n < in.n; ++n) {
    for (std::int64_t c = 0; c < in.c; ++c) {
      for (std::size_t y = 0; y < ys.size(); ++y) {
        const Axis& ay = ys[y];
        for (std::size_t x = 0; x < xs.size(); ++x) {
          const Axis& ax = xs[x];
          out.at(n, c, static_cast<std::int64_t>(y),
                 static_cast<std::int64_t>(x)) =
              ay.w_lo * (ax.w_lo * input.at(n, c, ay.lo, ax.lo) +
                         ax.w_hi * input.at(n, c, ay.lo, ax.hi)) +
              ay.w_hi * (ax.w_lo * input.at(n, c, ay.hi, ax.lo) +
                         ax.w_hi * input.at(n, c, ay.hi, ax.hi));
        }
      }
    }
  }
  return out;
}

Tensor BilinearPlan::transpose_apply(const Tensor& grad_out,
                                     const Shape4& input_shape) const {
  const Shape4& gs = grad_out.shape();
  Tensor gin(input_shape);
  for (std::int64_t n = 0; n < gs.n; ++n) {
    for (std::int64_t c = 0; c < gs.c; ++c) {
      for (std::int64_t y = 0; y < gs.h; ++y) {
        const Axis& ay = ys[static_cast<std::size_t>(y)];
        for (std::int64_t x = 0; x < gs.w; ++x) {
          const Axis& ax = xs[static_cast<std::size_t>(x)];
          const double g = grad_out.at(n, c, y, x);
          if (g == 0.0) continue;
          gin.at(n, c, ay.lo, ax.lo) += g * ay.w_lo * ax.w_lo;
          gin.at(n, c, ay.lo, ax.hi) += g * ay.w_lo * ax.w_hi;
          gin.at(n, c, ay.hi, ax.lo) += g * ay.w_hi * ax.w_lo;
          gin.at(n, c, ay.hi, ax.hi) += g * ay.w_hi * ax.w_hi;
        }
      }
    }
  }
  return gin;
}

Tensor bilinear_resize(const Tensor& input, std::int64_t out_h,
                       std::int64_t out_w, bool align_corners) {
  return make_bilinear_plan(input.shape().h, input.shape().w, out_h, out_w,
                            align_corners)
      .apply(input);
}

Tensor pointwise(const Tensor& input, Pointwise fn) {
  Tensor out(input.shape());
  auto src = input.values();
  auto dst = out.values();
  if (fn == Pointwise::Relu) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i] = src[i] > 0.0 ? src[i] : 0.0;
    }
  } else {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = sigmoid(src[i]);
  }
  return out;
}

Tensor binary(const Tensor& a, const Tensor& b, BinOp fn) {
  if (!a.same_shape(b)) {
    throw ShapeError("binary op on mismatched shapes " + a.shape().str() +
                     " vs " + b.shape().str());
  }
  Tensor out(a.shape());
  auto pa = a.values();
  auto pb = b.values();
  auto dst = out.values();
  if (fn == BinOp::Add) {
    for (std::size_t i = 0; i < pa.size(); ++i) dst[i] = pa[i] + pb[i];
  } else {
    for (std::size_t i = 0; i < pa.size(); ++i) dst[i] = pa[i] * pb[i];
  }
  return out;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_channels needs at least one part");
  }
  const Shape4& first = parts[0].shape();
  std::int64_t c_total = 0;
  for (const Tensor& p : parts) {
    const Shape4& s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels spatial/batch mismatch: " +
                       first.str() + " vs " + s.str());
    }
    c_total += s.c;
  }
  Tensor out(Shape4{first.n, c_total, first.h, first.w});
  std::int64_t c_off = 0;
  for (const Tensor& p : parts) {
    const Shape4& s = p.shape();
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (std::int64_t c = 0; c < s.c; ++c) {
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = 0; x < s.w; ++x) {
            out.at(n, c_off + c, y, x) = p.at(n, c, y, x);
          }
        }
      }
    }
    c_off += s.c;
  }
  return out;
}

ChannelVector spatial_sum(const Tensor& input) {
  const Shape4& s = input.shape();
  if (s.n != 1) {
    throw ShapeError("spatial_sum expects batch extent 1, got " + s.str());
  }
  ChannelVector cv;
  cv.values.assign(static_cast<std::size_t>(s.c), 0.0);
  for (std::int64_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        acc += input.at(0, c, y, x);
      }
    }
    cv.values[static_cast<std::size_t>(c)] = acc;
  }
  return cv;
}

}  // namespace relprop
