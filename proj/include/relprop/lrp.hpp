#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relprop/graph.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

enum class RuleKind { Epsilon, ZPlus, Gamma, GatedSignalTakeAll, PassThrough };

const char* rule_kind_name(RuleKind kind);
std::optional<RuleKind> rule_kind_from_name(const std::string& name);

// One redistribution rule. epsilon is the Epsilon stabilizer, gamma the
// positive-weight boost of the Gamma rule; both must be non-negative.
struct Rule {
  RuleKind kind = RuleKind::Epsilon;
  double epsilon = 0.0;
  double gamma = 0.0;

  static Rule eps(double e) { return {RuleKind::Epsilon, e, 0.0}; }
  static Rule zplus() { return {RuleKind::ZPlus, 0.0, 0.0}; }
  static Rule gamma_rule(double g) { return {RuleKind::Gamma, 0.0, g}; }
  static Rule gated() { return {RuleKind::GatedSignalTakeAll, 0.0, 0.0}; }
  static Rule passthrough() { return {RuleKind::PassThrough, 0.0, 0.0}; }
};

// Which rule handles which node. Per-node overrides win over the per-kind
// defaults. Input/Output/ConcatC are structural and never consult this.
struct RuleAssignment {
  std::map<NodeKind, Rule> defaults;
  std::map<std::string, Rule> overrides;

  // Epsilon{1e-6} on linear nodes, signal-take-all on GatedMul,
  // pass-through on activations.
  static RuleAssignment standard();

  // nullptr when neither an override nor a kind default exists.
  const Rule* find(const Node& node) const;
};

// Parses a rule spec "name[:param]", e.g. "epsilon:0.01" or "zplus". The
// parameter defaults to 1e-6 for epsilon and 0.25 for gamma; ConfigError
// on unknown names or malformed parameters.
Rule parse_rule(const std::string& spec);

// Restricts the backward pass at one layer: when relevance reaches the
// named node, everything outside `channels` is zeroed (and booked as
// absorbed there) before propagation continues toward the input.
struct ChannelCondition {
  std::string layer_id;
  std::vector<std::int64_t> channels;
};

// Relevance mirror of a ForwardTape: one tensor per node, shaped like the
// node's output. Nodes unreachable backward from the seeded heads are zero.
struct RelevanceTape {
  const Graph* graph = nullptr;
  std::vector<Tensor> relevance;

  const Tensor& relevance_of(const std::string& id) const;
};

struct NodeLedger {
  std::string node_id;
  double incoming = 0.0;  // relevance arriving at the node's output
  double outgoing = 0.0;  // relevance pushed to its inputs
  double absorbed = 0.0;  // bias + stabilizer shares, drops, masked-off
};

// Books every unit of relevance: per node incoming = outgoing + absorbed,
// and globally seed_total = input_total + absorbed_total.
struct ConservationReport {
  std::vector<NodeLedger> nodes;  // topological order
  double seed_total = 0.0;
  double input_total = 0.0;
  double absorbed_total = 0.0;
  std::vector<std::string> flagged;  // |in - out - absorbed| > 1e-9
};

struct LrpResult {
  RelevanceTape tape;
  ConservationReport report;
};

// Redistribution through a single node, exposed for rule-level testing.
// r_out is the relevance at the node's output; returns one tensor per
// declared input plus the amount absorbed at this node.
struct NodePropagation {
  std::vector<Tensor> to_inputs;
  double absorbed = 0.0;
};

NodePropagation propagate_node(const ForwardTape& tape,
                               const std::string& node_id,
                               const Tensor& r_out, const Rule& rule);

// Backward relevance pass from seeded heads to the inputs. Seeds map head
// (Output node) ids to relevance tensors of the head's shape.
LrpResult lrp_backward(
    const ForwardTape& tape, const std::map<std::string, Tensor>& seeds,
    const RuleAssignment& assignment,
    const std::optional<ChannelCondition>& condition = std::nullopt);

LrpResult lrp_backward(
    const ForwardTape& tape, const std::string& head, const Tensor& seed,
    const RuleAssignment& assignment,
    const std::optional<ChannelCondition>& condition = std::nullopt);

}  // namespace relprop
