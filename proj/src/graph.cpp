#include "relprop/graph.hpp"

#include <algorithm>
#include <deque>

#include "relprop/errors.hpp"

namespace relprop {

const char* node_kind_name(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return "Input";
    case NodeKind::Conv2D: return "Conv2D";
    case NodeKind::ReLU: return "ReLU";
    case NodeKind::Sigmoid: return "Sigmoid";
    case NodeKind::Add: return "Add";
    case NodeKind::GatedMul: return "GatedMul";
    case NodeKind::ConcatC: return "ConcatC";
    case NodeKind::BilinearResize: return "BilinearResize";
    case NodeKind::Output: return "Output";
  }
  return "?";
}

std::optional<NodeKind> node_kind_from_name(const std::string& name) {
  static const std::map<std::string, NodeKind> table = {
      {"Input", NodeKind::Input},
      {"Conv2D", NodeKind::Conv2D},
      {"ReLU", NodeKind::ReLU},
      {"Sigmoid", NodeKind::Sigmoid},
      {"Add", NodeKind::Add},
      {"GatedMul", NodeKind::GatedMul},
      {"ConcatC", NodeKind::ConcatC},
      {"BilinearResize", NodeKind::BilinearResize},
      {"Output", NodeKind::Output},
  };
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

Node& Graph::add(Node node) {
  for (const std::string& in : node.inputs) {
    if (!index_.count(in)) {
      throw DataError("node '" + node.id + "' references unknown input '" +
                      in + "'");
    }
  }
  return add_unordered(std::move(node));
}

Node& Graph::add_unordered(Node node) {
  if (index_.count(node.id)) {
    throw DataError("duplicate node id '" + node.id + "'");
  }
  index_[node.id] = nodes_.size();
  nodes_.push_back(std::move(node));
  return nodes_.back();
}

bool Graph::has_node(const std::string& id) const { return index_.count(id); }

std::size_t Graph::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    throw DataError("unknown node id '" + id + "'");
  }
  return it->second;
}

const Node& Graph::node(const std::string& id) const {
  return nodes_[index_of(id)];
}

std::vector<std::string> Graph::input_ids() const {
  std::vector<std::string> ids;
  for (const Node& n : nodes_) {
    if (n.kind == NodeKind::Input) ids.push_back(n.id);
  }
  return ids;
}

void Graph::declare_output(const std::string& id) {
  outputs_.push_back(id);
}

void Graph::topo_sort() {
  // Kahn's algorithm over the id graph; nodes_ may arrive in any order.
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < nodes_.size(); ++i) pos[nodes_[i].id] = i;
  std::vector<std::size_t> indegree(nodes_.size(), 0);
  std::vector<std::vector<std::size_t>> consumers(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const std::string& in : nodes_[i].inputs) {
      auto it = pos.find(in);
      if (it == pos.end()) {
        throw DataError("node '" + nodes_[i].id +
                        "' references unknown input '" + in + "'");
      }
      consumers[it->second].push_back(i);
      ++indegree[i];
    }
  }
  std::deque<std::size_t> ready;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (indegree[i] == 0) ready.push_back(i);
  }
  std::vector<Node> sorted;
  sorted.reserve(nodes_.size());
  while (!ready.empty()) {
    std::size_t i = ready.front();
    ready.pop_front();
    sorted.push_back(std::move(nodes_[i]));
    for (std::size_t j : consumers[i]) {
      if (--indegree[j] == 0) ready.push_back(j);
    }
  }
  if (sorted.size() != nodes_.size()) {
    std::string cyclic;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (indegree[i] > 0) {
        if (!cyclic.empty()) cyclic += ", ";
        cyclic += nodes_[i].id;
      }
    }
    throw DataError("graph contains a cycle through: " + cyclic);
  }
  nodes_ = std::move(sorted);
  index_.clear();
  for (std::size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id] = i;
}

static bool arity_ok(NodeKind kind, std::size_t n_inputs,
                     std::string* expected) {
  switch (kind) {
    case NodeKind::Input:
      *expected = "0";
      return n_inputs == 0;
    case NodeKind::Conv2D:
    case NodeKind::ReLU:
    case NodeKind::Sigmoid:
    case NodeKind::BilinearResize:
    case NodeKind::Output:
      *expected = "1";
      return n_inputs == 1;
    case NodeKind::Add:
    case NodeKind::GatedMul:
      *expected = "2";
      return n_inputs == 2;
    case NodeKind::ConcatC:
      *expected = ">=1";
      return n_inputs >= 1;
  }
  return false;
}

std::vector<std::optional<Shape4>> Graph::propagate_shapes(
    std::vector<std::string>* errors) const {
  std::vector<std::optional<Shape4>> shapes(nodes_.size());
  auto fail = [&](const std::string& msg) {
    if (errors) errors->push_back(msg);
  };
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    std::vector<Shape4> in_shapes;
    bool inputs_known = true;
    for (const std::string& in : n.inputs) {
      auto it = index_.find(in);
      if (it == index_.end() || it->second >= i || !shapes[it->second]) {
        inputs_known = false;
        break;
      }
      in_shapes.push_back(*shapes[it->second]);
    }
    if (!inputs_known) continue;
    try {
      switch (n.kind) {
        case NodeKind::Input:
          shapes[i] = n.input_shape;
          break;
        case NodeKind::Conv2D: {
          Tensor dummy(in_shapes[0]);
          shapes[i] = conv2d(dummy, n.weight,
                             n.bias.empty() ? std::span<const double>{}
                                            : std::span<const double>(n.bias),
                             n.conv.stride, n.conv.pad)
                          .shape();
          break;
        }
        case NodeKind::ReLU:
        case NodeKind::Sigmoid:
        case NodeKind::Output:
          shapes[i] = in_shapes[0];
          break;
        case NodeKind::Add:
        case NodeKind::GatedMul:
          if (!(in_shapes[0] == in_shapes[1])) {
            throw ShapeError("operand shapes differ: " + in_shapes[0].str() +
                             " vs " + in_shapes[1].str());
          }
          shapes[i] = in_shapes[0];
          break;
        case NodeKind::ConcatC: {
          Shape4 s = in_shapes[0];
          std::int64_t c = 0;
          for (const Shape4& p : in_shapes) {
            if (p.n != s.n || p.h != s.h || p.w != s.w) {
              throw ShapeError("concat part mismatch: " + s.str() + " vs " +
                               p.str());
            }
            c += p.c;
          }
          s.c = c;
          shapes[i] = s;
          break;
        }
        case NodeKind::BilinearResize: {
          Shape4 s = in_shapes[0];
          if (n.resize.out_h < 1 || n.resize.out_w < 1) {
            throw ShapeError("resize target must be >= 1");
          }
          s.h = n.resize.out_h;
          s.w = n.resize.out_w;
          shapes[i] = s;
          break;
        }
      }
    } catch (const Error& e) {
      fail("node '" + n.id + "': " + e.what());
    }
  }
  return shapes;
}

std::vector<std::string> Graph::validate() const {
  std::vector<std::string> errors;
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (pos.count(nodes_[i].id)) {
      errors.push_back("duplicate node id '" + nodes_[i].id + "'");
    }
    pos[nodes_[i].id] = i;
  }

  bool order_ok = true;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    std::string expected;
    if (!arity_ok(n.kind, n.inputs.size(), &expected)) {
      errors.push_back("node '" + n.id + "' (" + node_kind_name(n.kind) +
                       ") expects " + expected + " inputs, has " +
                       std::to_string(n.inputs.size()));
    }
    for (const std::string& in : n.inputs) {
      auto it = pos.find(in);
      if (it == pos.end()) {
        errors.push_back("node '" + n.id + "' references unknown input '" +
                         in + "'");
        order_ok = false;
      } else if (it->second >= i) {
        errors.push_back("node '" + n.id + "' is not topologically after '" +
                         in + "' (cycle or unsorted graph)");
        order_ok = false;
      }
    }
    if (n.kind == NodeKind::Conv2D) {
      const Shape4& k = n.weight.shape();
      if (n.weight.size() == 0) {
        errors.push_back("Conv2D node '" + n.id + "' has no weight tensor");
      } else if (!n.bias.empty() &&
                 static_cast<std::int64_t>(n.bias.size()) != k.n) {
        errors.push_back("Conv2D node '" + n.id + "' bias length " +
                         std::to_string(n.bias.size()) +
                         " != output channels " + std::to_string(k.n));
      }
    }
  }

  for (const std::string& out : outputs_) {
    auto it = pos.find(out);
    if (it == pos.end()) {
      errors.push_back("declared output '" + out + "' does not exist");
    } else if (nodes_[it->second].kind != NodeKind::Output) {
      errors.push_back("declared output '" + out + "' is not an Output node");
    }
  }
  if (outputs_.empty()) {
    errors.push_back("graph declares no outputs");
  }

  if (order_ok) {
    propagate_shapes(&errors);

    // Reachability from the inputs.
    std::vector<bool> reachable(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.kind == NodeKind::Input) {
        reachable[i] = true;
        continue;
      }
      bool all = !n.inputs.empty();
      for (const std::string& in : n.inputs) {
        all = all && reachable[pos.at(in)];
      }
      reachable[i] = all;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!reachable[i]) {
        errors.push_back("node '" + nodes_[i].id +
                         "' is not reachable from any input");
      }
    }
  }
  return errors;
}

const Tensor& ForwardTape::output_of(const std::string& id) const {
  return outputs[graph->index_of(id)];
}

static Tensor execute_node(const Node& n, const std::vector<const Tensor*>& in,
                           Tensor* gate_act) {
  try {
    switch (n.kind) {
      case NodeKind::Input:
        throw ShapeError("Input node executed without a bound tensor");
      case NodeKind::Conv2D:
        return conv2d(*in[0], n.weight,
                      n.bias.empty() ? std::span<const double>{}
                                     : std::span<const double>(n.bias),
                      n.conv.stride, n.conv.pad);
      case NodeKind::ReLU:
        return pointwise(*in[0], Pointwise::Relu);
      case NodeKind::Sigmoid:
        return pointwise(*in[0], Pointwise::Sigmoid);
      case NodeKind::Add:
        return binary(*in[0], *in[1], BinOp::Add);
      case NodeKind::GatedMul: {
        Tensor act = pointwise(*in[1], Pointwise::Sigmoid);
        if (n.gate_mode == GateMode::OneMinusSigmoid) {
          for (double& v : act.values()) v = 1.0 - v;
        }
        Tensor out = binary(*in[0], act, BinOp::Mul);
        if (gate_act) *gate_act = std::move(act);
        return out;
      }
      case NodeKind::ConcatC: {
        std::vector<Tensor> parts;
        parts.reserve(in.size());
        for (const Tensor* t : in) parts.push_back(*t);
        return concat_channels(parts);
      }
      case NodeKind::BilinearResize:
        return bilinear_resize(*in[0], n.resize.out_h, n.resize.out_w,
                               n.resize.align_corners);
      case NodeKind::Output:
        return *in[0];
    }
  } catch (const ShapeError& e) {
    throw ShapeError("node '" + n.id + "': " + e.what());
  }
  throw ShapeError("node '" + n.id + "': unknown kind");
}

ForwardTape forward(const Graph& graph,
                    const std::map<std::string, Tensor>& inputs) {
  ForwardTape tape;
  tape.graph = &graph;
  tape.outputs.resize(graph.nodes().size());
  tape.gate_acts.resize(graph.nodes().size());
  for (std::size_t i = 0; i < graph.nodes().size(); ++i) {
    const Node& n = graph.nodes()[i];
    if (n.kind == NodeKind::Input) {
      auto it = inputs.find(n.id);
      if (it == inputs.end()) {
        throw DataError("no tensor bound to graph input '" + n.id + "'");
      }
      if (!(it->second.shape() == n.input_shape)) {
        throw ShapeError("input '" + n.id + "' expects shape " +
                         n.input_shape.str() + ", got " +
                         it->second.shape().str());
      }
      tape.outputs[i] = it->second;
      continue;
    }
    std::vector<const Tensor*> in;
    in.reserve(n.inputs.size());
    for (const std::string& src : n.inputs) {
      in.push_back(&tape.outputs[graph.index_of(src)]);
    }
    tape.outputs[i] = execute_node(n, in, &tape.gate_acts[i]);
  }
  return tape;
}

ForwardTape forward(const Graph& graph, const Tensor& input) {
  std::vector<std::string> ids = graph.input_ids();
  if (ids.size() != 1) {
    throw DataError("graph has " + std::to_string(ids.size()) +
                    " inputs; bind them by name");
  }
  return forward(graph, std::map<std::string, Tensor>{{ids[0], input}});
}

ForwardTape forward_from(const Graph& graph, const ForwardTape& base,
                         const std::string& node_id, Tensor replacement) {
  const std::size_t start = graph.index_of(node_id);
  if (!(replacement.shape() == base.outputs[start].shape())) {
    throw ShapeError("replacement for '" + node_id + "' has shape " +
                     replacement.shape().str() + ", expected " +
                     base.outputs[start].shape().str());
  }
  ForwardTape tape;
  tape.graph = &graph;
  tape.outputs = base.outputs;
  tape.gate_acts = base.gate_acts;
  tape.outputs[start] = std::move(replacement);

  std::vector<bool> dirty(graph.nodes().size(), false);
  dirty[start] = true;
  for (std::size_t i = start + 1; i < graph.nodes().size(); ++i) {
    const Node& n = graph.nodes()[i];
    bool affected = false;
    for (const std::string& src : n.inputs) {
      affected = affected || dirty[graph.index_of(src)];
    }
    if (!affected) continue;
    dirty[i] = true;
    std::vector<const Tensor*> in;
    in.reserve(n.inputs.size());
    for (const std::string& src : n.inputs) {
      in.push_back(&tape.outputs[graph.index_of(src)]);
    }
    tape.outputs[i] = execute_node(n, in, &tape.gate_acts[i]);
  }
  return tape;
}

}  // namespace relprop
