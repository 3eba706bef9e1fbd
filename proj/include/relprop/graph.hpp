#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relprop/tensor.hpp"

namespace relprop {

enum class NodeKind {
  Input,
  Conv2D,
  ReLU,
  Sigmoid,
  Add,
  GatedMul,
  ConcatC,
  BilinearResize,
  Output,
};

const char* node_kind_name(NodeKind kind);
std::optional<NodeKind> node_kind_from_name(const std::string& name);

// Gate convention of a GatedMul node y = x * act(g). The second input is the
// gate pre-activation; the sigmoid is applied inside the node.
enum class GateMode { Sigmoid, OneMinusSigmoid };

struct ConvParams {
  int stride = 1;
  int pad = 0;
};

struct ResizeParams {
  std::int64_t out_h = 1;
  std::int64_t out_w = 1;
  bool align_corners = true;
};

struct Node {
  std::string id;
  NodeKind kind = NodeKind::Input;
  std::vector<std::string> inputs;

  ConvParams conv;
  GateMode gate_mode = GateMode::Sigmoid;
  ResizeParams resize;
  Shape4 input_shape;  // Input nodes only

  // Conv2D parameters, widened to 64-bit on load.
  Tensor weight;             // (c_out, c_in, kh, kw)
  std::vector<double> bias;  // per output channel, may be empty
};

// Computation graph. Nodes are stored in a valid topological order (the
// loader sorts, the builders construct in order). Input nodes carry the
// declared input shapes; each declared head is one Output node.
class Graph {
 public:
  Graph() = default;

  // Appends a node; inputs must already exist. Used by the toy builders.
  Node& add(Node node);

  // Appends without checking input references (the loader accepts nodes in
  // any order and topo-sorts afterwards).
  Node& add_unordered(Node node);

  const std::vector<Node>& nodes() const { return nodes_; }
  std::vector<Node>& nodes() { return nodes_; }

  bool has_node(const std::string& id) const;
  std::size_t index_of(const std::string& id) const;  // throws DataError
  const Node& node(const std::string& id) const;

  std::vector<std::string> input_ids() const;
  const std::vector<std::string>& output_ids() const { return outputs_; }
  void declare_output(const std::string& id);

  // Free-form model metadata (task kind, head roles, class names).
  std::map<std::string, std::string> meta;

  // Re-sorts nodes topologically; throws ValidationError on cycles or
  // dangling references. Called by the loader.
  void topo_sort();

  // Full structural check: reference resolution, acyclicity, arity per
  // kind, end-to-end shape propagation. Returns every violation found.
  std::vector<std::string> validate() const;

  // Shape each node's output would have; nullopt where propagation failed.
  std::vector<std::optional<Shape4>> propagate_shapes(
      std::vector<std::string>* errors = nullptr) const;

 private:
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> outputs_;
};

// Activation record of one forward pass: one output tensor per node, plus
// the cached gate activation for GatedMul nodes.
struct ForwardTape {
  const Graph* graph = nullptr;
  std::vector<Tensor> outputs;
  std::vector<Tensor> gate_acts;  // non-empty only at GatedMul indices

  const Tensor& output_of(const std::string& id) const;
};

// Executes every node once in topological order.
ForwardTape forward(const Graph& graph, const Tensor& input);
ForwardTape forward(const Graph& graph,
                    const std::map<std::string, Tensor>& inputs);

// Re-executes only the nodes downstream of `node_id`, with that node's
// output replaced. Upstream entries are shared with the base tape.
ForwardTape forward_from(const Graph& graph, const ForwardTape& base,
                         const std::string& node_id, Tensor replacement);

}  // namespace relprop
