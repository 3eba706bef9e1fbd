#pragma once

#include <map>
#include <string>
#include <vector>

#include "relprop/graph.hpp"
#include "relprop/target.hpp"

namespace relprop {

// Exact reverse-mode gradients of one scalar w.r.t. every node output and
// every Conv2D parameter.
struct GradientTape {
  const Graph* graph = nullptr;
  std::vector<Tensor> act_grads;
  std::map<std::size_t, Tensor> weight_grads;
  std::map<std::size_t, std::vector<double>> bias_grads;

  const Tensor& grad_of(const std::string& id) const {
    return act_grads[graph->index_of(id)];
  }
};

// Seeds are gradients w.r.t. the named head outputs; several heads may be
// seeded at once (the trainer sums their losses).
GradientTape backward_gradient(const ForwardTape& tape,
                               const std::map<std::string, Tensor>& head_seeds);

// Gradient of the scalar described by `target`.
GradientTape backward_gradient(const ForwardTape& tape,
                               const TargetSpec& target);

}  // namespace relprop
