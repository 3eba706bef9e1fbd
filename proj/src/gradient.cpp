#include "relprop/gradient.hpp"

#include "relprop/errors.hpp"

namespace relprop {

GradientTape backward_gradient(
    const ForwardTape& tape, const std::map<std::string, Tensor>& head_seeds) {
  const Graph& graph = *tape.graph;
  GradientTape gt;
  gt.graph = &graph;
  gt.act_grads.reserve(graph.nodes().size());
  for (const Tensor& out : tape.outputs) {
    gt.act_grads.emplace_back(out.shape());
  }
  for (const auto& [head, seed] : head_seeds) {
    const std::size_t i = graph.index_of(head);
    if (!(seed.shape() == tape.outputs[i].shape())) {
      throw ShapeError("gradient seed for '" + head + "' has shape " +
                       seed.shape().str() + ", head produces " +
                       tape.outputs[i].shape().str());
    }
    for (std::int64_t k = 0; k < seed.size(); ++k) {
      gt.act_grads[i].values()[k] += seed.values()[k];
    }
  }

  auto accumulate = [](Tensor& dst, const Tensor& src) {
    for (std::int64_t k = 0; k < src.size(); ++k) {
      dst.values()[k] += src.values()[k];
    }
  };

  for (std::size_t i = graph.nodes().size(); i-- > 0;) {
    const Node& n = graph.nodes()[i];
    const Tensor& g = gt.act_grads[i];
    if (n.kind == NodeKind::Input) continue;
    if (g.max_abs() == 0.0 && n.kind != NodeKind::Conv2D) continue;
    switch (n.kind) {
      case NodeKind::Conv2D: {
        const std::size_t src = graph.index_of(n.inputs[0]);
        const Tensor& x = tape.outputs[src];
        accumulate(gt.act_grads[src],
                   conv2d_input_grad(g, n.weight, n.conv.stride, n.conv.pad,
                                     x.shape()));
        gt.weight_grads.emplace(
            i, conv2d_weight_grad(x, g, n.conv.stride, n.conv.pad,
                                  n.weight.shape()));
        if (!n.bias.empty()) {
          gt.bias_grads.emplace(i, conv2d_bias_grad(g));
        }
        break;
      }
      case NodeKind::ReLU: {
        const std::size_t src = graph.index_of(n.inputs[0]);
        const Tensor& x = tape.outputs[src];
        Tensor& dst = gt.act_grads[src];
        for (std::int64_t k = 0; k < g.size(); ++k) {
          if (x.values()[k] > 0.0) dst.values()[k] += g.values()[k];
        }
        break;
      }
      case NodeKind::Sigmoid: {
        const std::size_t src = graph.index_of(n.inputs[0]);
        const Tensor& s = tape.outputs[i];
        Tensor& dst = gt.act_grads[src];
        for (std::int64_t k = 0; k < g.size(); ++k) {
          const double sv = s.values()[k];
          dst.values()[k] += g.values()[k] * sv * (1.0 - sv);
        }
        break;
      }
      case NodeKind::Add: {
        accumulate(gt.act_grads[graph.index_of(n.inputs[0])], g);
        accumulate(gt.act_grads[graph.index_of(n.inputs[1])], g);
        break;
      }
      case NodeKind::GatedMul: {
        const std::size_t sig = graph.index_of(n.inputs[0]);
        const std::size_t gate = graph.index_of(n.inputs[1]);
        const Tensor& x = tape.outputs[sig];
        const Tensor& a = tape.gate_acts[i];
        // d(x*a)/dpre = +/- x * a * (1 - a); the cached activation a is
        // sigma(pre) or 1 - sigma(pre) depending on gate mode, and
        // a*(1-a) equals sigma'(pre) in both cases.
        const double sign =
            (n.gate_mode == GateMode::Sigmoid) ? 1.0 : -1.0;
        Tensor& dx = gt.act_grads[sig];
        Tensor& dp = gt.act_grads[gate];
        for (std::int64_t k = 0; k < g.size(); ++k) {
          const double av = a.values()[k];
          dx.values()[k] += g.values()[k] * av;
          dp.values()[k] +=
              sign * g.values()[k] * x.values()[k] * av * (1.0 - av);
        }
        break;
      }
      case NodeKind::ConcatC: {
        std::int64_t c_off = 0;
        const Shape4& gs = g.shape();
        for (const std::string& src_id : n.inputs) {
          const std::size_t src = graph.index_of(src_id);
          Tensor& dst = gt.act_grads[src];
          const Shape4& ds = dst.shape();
          for (std::int64_t b = 0; b < ds.n; ++b) {
            for (std::int64_t c = 0; c < ds.c; ++c) {
              for (std::int64_t y = 0; y < ds.h; ++y) {
                for (std::int64_t x = 0; x < ds.w; ++x) {
                  dst.at(b, c, y, x) += g.at(b, c_off + c, y, x);
                }
              }
            }
          }
          c_off += ds.c;
        }
        (void)gs;
        break;
      }
      case NodeKind::BilinearResize: {
        const std::size_t src = graph.index_of(n.inputs[0]);
        const Tensor& x = tape.outputs[src];
        BilinearPlan plan =
            make_bilinear_plan(x.shape().h, x.shape().w, n.resize.out_h,
                               n.resize.out_w, n.resize.align_corners);
        accumulate(gt.act_grads[src], plan.transpose_apply(g, x.shape()));
        break;
      }
      case NodeKind::Output: {
        accumulate(gt.act_grads[graph.index_of(n.inputs[0])], g);
        break;
      }
      case NodeKind::Input:
        break;
    }
  }
  return gt;
}

GradientTape backward_gradient(const ForwardTape& tape,
                               const TargetSpec& target) {
  return backward_gradient(
      tape, {{target.head, seed_gradient(tape, target)}});
}

}  // namespace relprop
