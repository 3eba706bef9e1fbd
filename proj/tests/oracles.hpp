// Independent reference implementations used as test oracles. These are
// deliberately written with different loop structures than the library code
// they check (scatter instead of gather, per-pixel closed forms, dense
// contribution matrices) so a shared bug cannot hide.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "relprop/rng.hpp"
#include "relprop/tensor.hpp"

namespace oracles {

using relprop::Rng;
using relprop::Shape4;
using relprop::Tensor;

inline Tensor random_tensor(Shape4 shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Scatter-form convolution: walks input elements and distributes each
// product into the output positions it contributes to.
inline Tensor conv2d_scatter(const Tensor& input, const Tensor& kernel,
                             const std::vector<double>& bias, int stride,
                             int pad) {
  const Shape4& in = input.shape();
  const Shape4& k = kernel.shape();
  const std::int64_t oh = (in.h + 2 * pad - k.h) / stride + 1;
  const std::int64_t ow = (in.w + 2 * pad - k.w) / stride + 1;
  Tensor out(Shape4{in.n, k.n, oh, ow});
  for (std::int64_t n = 0; n < in.n; ++n) {
    for (std::int64_t co = 0; co < k.n; ++co) {
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          out.at(n, co, oy, ox) = bias.empty() ? 0.0 : bias[co];
        }
      }
    }
    for (std::int64_t ci = 0; ci < in.c; ++ci) {
      for (std::int64_t iy = 0; iy < in.h; ++iy) {
        for (std::int64_t ix = 0; ix < in.w; ++ix) {
          const double v = input.at(n, ci, iy, ix);
          for (std::int64_t co = 0; co < k.n; ++co) {
            for (std::int64_t ky = 0; ky < k.h; ++ky) {
              const std::int64_t num_y = iy + pad - ky;
              if (num_y < 0 || num_y % stride != 0) continue;
              const std::int64_t oy = num_y / stride;
              if (oy >= oh) continue;
              for (std::int64_t kx = 0; kx < k.w; ++kx) {
                const std::int64_t num_x = ix + pad - kx;
                if (num_x < 0 || num_x % stride != 0) continue;
                const std::int64_t ox = num_x / stride;
                if (ox >= ow) continue;
                out.at(n, co, oy, ox) += v * kernel.at(co, ci, ky, kx);
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Per-pixel closed-form bilinear interpolation, coordinates recomputed from
// scratch for every output pixel.
inline Tensor bilinear_formula(const Tensor& input, std::int64_t out_h,
                               std::int64_t out_w, bool align_corners) {
  const Shape4& in = input.shape();
  Tensor out(Shape4{in.n, in.c, out_h, out_w});
  auto src_coord = [&](std::int64_t i, std::int64_t in_len,
                       std::int64_t out_len) {
    if (align_corners) {
      return out_len == 1 ? 0.0
                          : double(i) * double(in_len - 1) / double(out_len - 1);
    }
    double s = (double(i) + 0.5) * double(in_len) / double(out_len) - 0.5;
    return std::clamp(s, 0.0, double(in_len - 1));
  };
  for (std::int64_t n = 0; n < in.n; ++n) {
    for (std::int64_t c = 0; c < in.c; ++c) {
      for (std::int64_t y = 0; y < out_h; ++y) {
        const double sy = src_coord(y, in.h, out_h);
        const std::int64_t y0 = std::int64_t(std::floor(sy));
        const std::int64_t y1 = std::min(y0 + 1, in.h - 1);
        const double ty = sy - double(y0);
        for (std::int64_t x = 0; x < out_w; ++x) {
          const double sx = src_coord(x, in.w, out_w);
          const std::int64_t x0 = std::int64_t(std::floor(sx));
          const std::int64_t x1 = std::min(x0 + 1, in.w - 1);
          const double tx = sx - double(x0);
          out.at(n, c, y, x) =
              (1 - ty) * ((1 - tx) * input.at(n, c, y0, x0) +
                          tx * input.at(n, c, y0, x1)) +
              ty * ((1 - tx) * input.at(n, c, y1, x0) +
                    tx * input.at(n, c, y1, x1));
        }
      }
    }
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  auto pa = a.values();
  auto pb = b.values();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    m = std::max(m, std::abs(pa[i] - pb[i]));
  }
  return m;
}

}  // namespace oracles
