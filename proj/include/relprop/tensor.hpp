#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "relprop/errors.hpp"

namespace relprop {

// Extents of a rank-4 tensor in (batch, channels, height, width) order.
struct Shape4 {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t count() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

// Dense rank-4 tensor of 64-bit floats, row-major in (n, c, h, w).
// The universal value type: activations, weights (c_out, c_in, kh, kw),
// relevance maps and heatmaps all live here.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape4 shape);
  Tensor(Shape4 shape, std::vector<double> values);

  static Tensor full(Shape4 shape, double value);

  const Shape4& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }

  double& at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
    return v_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t y,
            std::int64_t x) const {
    return v_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::span<double> values() { return v_; }
  std::span<const double> values() const { return v_; }

  double sum() const;
  double max_abs() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  Shape4 shape_{};
  std::vector<double> v_;
};

// Per-channel scalar summary of one tensor (one value per feature map).
struct ChannelVector {
  std::vector<double> values;
  std::string layer_id;
};

enum class Pointwise { Relu, Sigmoid };
enum class BinOp { Add, Mul };

double sigmoid(double x);

// Cross-correlation (no kernel flip) with zero padding.
// kernel shape is (c_out, c_in, kh, kw); bias has one entry per output
// channel (empty means no bias). Output extent per axis is
// floor((in + 2*pad - k)/stride) + 1 and must stay >= 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel,
              std::span<const double> bias, int stride, int pad);

// Gradient kernels for conv2d; these are the exact transposes of the
// forward loops and are shared by the gradient pass and the LRP rules.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel,
                         int stride, int pad, const Shape4& input_shape);
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out,
                          int stride, int pad, const Shape4& kernel_shape);
std::vector<double> conv2d_bias_grad(const Tensor& grad_out);

// Precomputed either-axis interpolation weights of a bilinear resize, so
// forward, transpose and relevance passes share one coordinate map.
// With align_corners the source coordinate of output index i is
// i*(in-1)/(out-1); otherwise (i+0.5)*in/out - 0.5 clamped to the image.
struct BilinearPlan {
  struct Axis {
    std::int64_t lo, hi;  // the two source indices (hi == lo at borders)
    double w_lo, w_hi;    // convex weights, w_lo + w_hi == 1
  };
  std::vector<Axis> ys, xs;

  Tensor apply(const Tensor& input) const;
  // Scatter adjoint: maps output-shaped values back onto the input grid.
  Tensor transpose_apply(const Tensor& grad_out,
                         const Shape4& input_shape) const;
};

BilinearPlan make_bilinear_plan(std::int64_t in_h, std::int64_t in_w,
                                std::int64_t out_h, std::int64_t out_w,
                                bool align_corners);

Tensor bilinear_resize(const Tensor& input, std::int64_t out_h,
                       std::int64_t out_w, bool align_corners);

Tensor pointwise(const Tensor& input, Pointwise fn);
Tensor binary(const Tensor& a, const Tensor& b, BinOp fn);
Tensor concat_channels(std::span<const Tensor> parts);

// Per-channel sum over the spatial grid; batch extent must be 1.
ChannelVector spatial_sum(const Tensor& input);

}  // namespace relprop
