#include "relprop/lrp.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <set>

#include "relprop/errors.hpp"

namespace relprop {

namespace {

// sign() of Eq-style stabilizers; zero counts as positive so the
// stabilizer never vanishes when epsilon > 0.
double sgn(double v) { return v < 0.0 ? -1.0 : 1.0; }

Tensor positive_part(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.values()) v = std::max(v, 0.0);
  return out;
}

Tensor negative_part(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.values()) v = std::min(v, 0.0);
  return out;
}

// Shared epsilon-style normalization: s_j = r_j / (denom_j + eps*sign),
// with the bias and stabilizer share booked as absorbed and outputs with
// an exactly-zero denominator dropped entirely.
//
// denom must be the full pre-activation (contributions plus bias); biases
// holds b_j per channel (empty means zero).
struct Scaled {
  Tensor s;
  double absorbed = 0.0;
};

Scaled scale_relevance(const Tensor& r_out, const Tensor& denom,
                       std::span<const double> biases, double eps) {
  Scaled out;
  out.s = Tensor(denom.shape());
  const Shape4& sh = denom.shape();
  for (std::int64_t n = 0; n < sh.n; ++n) {
    for (std::int64_t c = 0; c < sh.c; ++c) {
      const double b = biases.empty() ? 0.0 : biases[c];
      for (std::int64_t y = 0; y < sh.h; ++y) {
        for (std::int64_t x = 0; x < sh.w; ++x) {
          const double p = denom.at(n, c, y, x);
          const double stab = eps * sgn(p);
          const double d = p + stab;
          const double r = r_out.at(n, c, y, x);
          if (d == 0.0) {
            out.absorbed += r;
            continue;
          }
          const double s = r / d;
          out.s.at(n, c, y, x) = s;
          out.absorbed += s * (b + stab);
        }
      }
    }
  }
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinOp::Mul);
}

void add_into(Tensor& acc, const Tensor& t) {
  std::span<double> a = acc.values();
  std::span<const double> v = t.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += v[i];
}

NodePropagation conv_epsilon(const Node& node, const Tensor& x,
                             const Tensor& pre, const Tensor& r_out,
                             double eps) {
  Scaled sc = scale_relevance(r_out, pre, node.bias, eps);
  Tensor back = conv2d_input_grad(sc.s, node.weight, node.conv.stride,
                                  node.conv.pad, x.shape());
  return {{hadamard(x, back)}, sc.absorbed};
}

NodePropagation conv_zplus(const Node& node, const Tensor& x,
                           const Tensor& r_out) {
  Tensor xp = positive_part(x);
  Tensor xn = negative_part(x);
  Tensor wp = positive_part(node.weight);
  Tensor wn = negative_part(node.weight);
  // Positive contributions come from matching signs: x+*w+ and x-*w-.
  Tensor pplus = conv2d(xp, wp, {}, node.conv.stride, node.conv.pad);
  add_into(pplus, conv2d(xn, wn, {}, node.conv.stride, node.conv.pad));
  Scaled sc = scale_relevance(r_out, pplus, {}, 0.0);
  Tensor r_in = hadamard(xp, conv2d_input_grad(sc.s, wp, node.conv.stride,
                                               node.conv.pad, x.shape()));
  add_into(r_in, hadamard(xn, conv2d_input_grad(sc.s, wn, node.conv.stride,
                                                node.conv.pad, x.shape())));
  return {{std::move(r_in)}, sc.absorbed};
}

NodePropagation conv_gamma(const Node& node, const Tensor& x,
                           const Tensor& r_out, double gamma) {
  Tensor w = node.weight;
  for (double& v : w.values()) v += gamma * std::max(v, 0.0);
  std::vector<double> b = node.bias;
  for (double& v : b) v += gamma * std::max(v, 0.0);
  Tensor pre = conv2d(x, w, b, node.conv.stride, node.conv.pad);
  Scaled sc = scale_relevance(r_out, pre, b, 0.0);
  Tensor back =
      conv2d_input_grad(sc.s, w, node.conv.stride, node.conv.pad, x.shape());
  return {{hadamard(x, back)}, sc.absorbed};
}

NodePropagation add_epsilon(const Tensor& x0, const Tensor& x1,
                            const Tensor& pre, const Tensor& r_out,
                            double eps) {
  Scaled sc = scale_relevance(r_out, pre, {}, eps);
  return {{hadamard(x0, sc.s), hadamard(x1, sc.s)}, sc.absorbed};
}

NodePropagation add_zplus(const Tensor& x0, const Tensor& x1,
                          const Tensor& r_out) {
  Tensor xp0 = positive_part(x0);
  Tensor xp1 = positive_part(x1);
  Tensor pplus = xp0;
  add_into(pplus, xp1);
  Scaled sc = scale_relevance(r_out, pplus, {}, 0.0);
  return {{hadamard(xp0, sc.s), hadamard(xp1, sc.s)}, sc.absorbed};
}

NodePropagation resize_epsilon(const Node& node, const Tensor& x,
                               const Tensor& pre, const Tensor& r_out,
                               double eps) {
  Scaled sc = scale_relevance(r_out, pre, {}, eps);
  BilinearPlan plan =
      make_bilinear_plan(x.shape().h, x.shape().w, node.resize.out_h,
                         node.resize.out_w, node.resize.align_corners);
  return {{hadamard(x, plan.transpose_apply(sc.s, x.shape()))}, sc.absorbed};
}

NodePropagation resize_zplus(const Node& node, const Tensor& x,
                             const Tensor& r_out) {
  // Interpolation weights are non-negative, so positive contributions are
  // exactly those from positive source pixels.
  Tensor xp = positive_part(x);
  BilinearPlan plan =
      make_bilinear_plan(x.shape().h, x.shape().w, node.resize.out_h,
                         node.resize.out_w, node.resize.align_corners);
  Tensor pplus = plan.apply(xp);
  Scaled sc = scale_relevance(r_out, pplus, {}, 0.0);
  return {{hadamard(xp, plan.transpose_apply(sc.s, x.shape()))}, sc.absorbed};
}

NodePropagation gated_epsilon(const Tensor& product, const Tensor& gate_pre,
                              const Tensor& r_out, double eps) {
  // The product x*act(g) is linear in x with the gate activation as a
  // diagonal weight, so each output has a single contributor; the gate
  // still receives nothing.
  Scaled sc = scale_relevance(r_out, product, {}, eps);
  return {{hadamard(product, sc.s), Tensor(gate_pre.shape())}, sc.absorbed};
}

[[noreturn]] void bad_rule(const Node& node, const Rule& rule) {
  throw ConfigError(std::string("rule ") + rule_kind_name(rule.kind) +
                    " cannot be applied to " + node_kind_name(node.kind) +
                    " node '" + node.id + "'");
}

NodePropagation apply_rule(const ForwardTape& tape, std::size_t index,
                           const Tensor& r_out, const Rule& rule) {
  const Graph& g = *tape.graph;
  const Node& node = g.nodes()[index];
  auto in = [&](std::size_t k) -> const Tensor& {
    return tape.outputs[g.index_of(node.inputs[k])];
  };
  const Tensor& out = tape.outputs[index];

  switch (node.kind) {
    case NodeKind::Conv2D:
      switch (rule.kind) {
        case RuleKind::Epsilon:
          return conv_epsilon(node, in(0), out, r_out, rule.epsilon);
        case RuleKind::ZPlus:
          return conv_zplus(node, in(0), r_out);
        case RuleKind::Gamma:
          return conv_gamma(node, in(0), r_out, rule.gamma);
        default:
          bad_rule(node, rule);
      }
    case NodeKind::Add:
      switch (rule.kind) {
        case RuleKind::Epsilon:
          return add_epsilon(in(0), in(1), out, r_out, rule.epsilon);
        case RuleKind::ZPlus:
          return add_zplus(in(0), in(1), r_out);
        case RuleKind::Gamma:
          // No weights to boost: z_i = x_i*(1+gamma) top and bottom, so
          // the gamma rule collapses to Epsilon{0}.
          return add_epsilon(in(0), in(1), out, r_out, 0.0);
        default:
          bad_rule(node, rule);
      }
    case NodeKind::BilinearResize:
      switch (rule.kind) {
        case RuleKind::Epsilon:
          return resize_epsilon(node, in(0), out, r_out, rule.epsilon);
        case RuleKind::ZPlus:
          return resize_zplus(node, in(0), r_out);
        case RuleKind::Gamma:
          // Interpolation weights are non-negative; the (1+gamma) factor
          // cancels and Epsilon{0} is exact.
          return resize_epsilon(node, in(0), out, r_out, 0.0);
        default:
          bad_rule(node, rule);
      }
    case NodeKind::GatedMul:
      switch (rule.kind) {
        case RuleKind::GatedSignalTakeAll:
          return {{r_out, Tensor(in(1).shape())}, 0.0};
        case RuleKind::Epsilon:
          return gated_epsilon(out, in(1), r_out, rule.epsilon);
        default:
          bad_rule(node, rule);
      }
    case NodeKind::ReLU:
    case NodeKind::Sigmoid:
      if (rule.kind != RuleKind::PassThrough) bad_rule(node, rule);
      return {{r_out}, 0.0};
    case NodeKind::Output:
      return {{r_out}, 0.0};
    case NodeKind::ConcatC: {
      NodePropagation prop;
      std::int64_t c0 = 0;
      for (const std::string& src : node.inputs) {
        const Tensor& part = tape.outputs[g.index_of(src)];
        Tensor slice(part.shape());
        const Shape4& ps = part.shape();
        for (std::int64_t n = 0; n < ps.n; ++n)
          for (std::int64_t c = 0; c < ps.c; ++c)
            for (std::int64_t y = 0; y < ps.h; ++y)
              for (std::int64_t x = 0; x < ps.w; ++x)
                slice.at(n, c, y, x) = r_out.at(n, c0 + c, y, x);
        c0 += ps.c;
        prop.to_inputs.push_back(std::move(slice));
      }
      return prop;
    }
    case NodeKind::Input:
      return {{}, 0.0};
  }
  throw ConfigError("unhandled node kind in relevance pass");
}

}  // namespace

const char* rule_kind_name(RuleKind kind) {
  switch (kind) {
    case RuleKind::Epsilon: return "epsilon";
    case RuleKind::ZPlus: return "zplus";
    case RuleKind::Gamma: return "gamma";
    case RuleKind::GatedSignalTakeAll: return "gated_signal_take_all";
    case RuleKind::PassThrough: return "passthrough";
  }
  return "?";
}

std::optional<RuleKind> rule_kind_from_name(const std::string& name) {
  if (name == "epsilon") return RuleKind::Epsilon;
  if (name == "zplus") return RuleKind::ZPlus;
  if (name == "gamma") return RuleKind::Gamma;
  if (name == "gated_signal_take_all") return RuleKind::GatedSignalTakeAll;
  if (name == "passthrough") return RuleKind::PassThrough;
  return std::nullopt;
}

RuleAssignment RuleAssignment::standard() {
  RuleAssignment a;
  a.defaults[NodeKind::Conv2D] = Rule::eps(1e-6);
  a.defaults[NodeKind::Add] = Rule::eps(1e-6);
  a.defaults[NodeKind::BilinearResize] = Rule::eps(1e-6);
  a.defaults[NodeKind::GatedMul] = Rule::gated();
  a.defaults[NodeKind::ReLU] = Rule::passthrough();
  a.defaults[NodeKind::Sigmoid] = Rule::passthrough();
  return a;
}

const Rule* RuleAssignment::find(const Node& node) const {
  if (auto it = overrides.find(node.id); it != overrides.end()) {
    return &it->second;
  }
  if (auto it = defaults.find(node.kind); it != defaults.end()) {
    return &it->second;
  }
  return nullptr;
}

Rule parse_rule(const std::string& spec) {
  std::string name = spec;
  std::optional<double> param;
  if (const auto colon = spec.find(':'); colon != std::string::npos) {
    name = spec.substr(0, colon);
    const std::string raw = spec.substr(colon + 1);
    std::size_t used = 0;
    try {
      param = std::stod(raw, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != raw.size()) {
      throw ConfigError("bad rule parameter '" + raw + "' in '" + spec + "'");
    }
  }
  if (name == "epsilon") return Rule::eps(param.value_or(1e-6));
  if (name == "zplus") return Rule::zplus();
  if (name == "gamma") return Rule::gamma_rule(param.value_or(0.25));
  if (name == "gated_signal_take_all") return Rule::gated();
  if (name == "passthrough") return Rule::passthrough();
  throw ConfigError("unknown rule '" + name +
                    "': valid rules are epsilon, zplus, gamma, "
                    "gated_signal_take_all, passthrough");
}

const Tensor& RelevanceTape::relevance_of(const std::string& id) const {
  return relevance[graph->index_of(id)];
}

NodePropagation propagate_node(const ForwardTape& tape,
                               const std::string& node_id,
                               const Tensor& r_out, const Rule& rule) {
  const std::size_t index = tape.graph->index_of(node_id);
  if (!(r_out.shape() == tape.outputs[index].shape())) {
    throw ShapeError("relevance shape " + r_out.shape().str() +
                     " does not match output of '" + node_id + "'");
  }
  return apply_rule(tape, index, r_out, rule);
}

LrpResult lrp_backward(const ForwardTape& tape,
                       const std::map<std::string, Tensor>& seeds,
                       const RuleAssignment& assignment,
                       const std::optional<ChannelCondition>& condition) {
  const Graph& g = *tape.graph;
  const std::vector<Node>& nodes = g.nodes();

  std::vector<Tensor> rel(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    rel[i] = Tensor(tape.outputs[i].shape());
  }

  double seed_total = 0.0;
  for (const auto& [head, seed] : seeds) {
    const std::vector<std::string>& outs = g.output_ids();
    if (std::find(outs.begin(), outs.end(), head) == outs.end()) {
      throw ConfigError("'" + head + "' is not a declared output head");
    }
    const std::size_t i = g.index_of(head);
    if (!(seed.shape() == tape.outputs[i].shape())) {
      throw ShapeError("seed shape " + seed.shape().str() +
                       " does not match head '" + head + "'");
    }
    add_into(rel[i], seed);
    seed_total += seed.sum();
  }

  std::optional<std::size_t> cond_index;
  std::set<std::int64_t> cond_channels;
  if (condition) {
    if (!g.has_node(condition->layer_id)) {
      throw ConfigError("condition layer '" + condition->layer_id +
                        "' is not in the graph");
    }
    cond_index = g.index_of(condition->layer_id);
    const std::int64_t c_max = tape.outputs[*cond_index].shape().c;
    if (condition->channels.empty()) {
      throw ConfigError("condition channel set is empty");
    }
    for (std::int64_t c : condition->channels) {
      if (c < 0 || c >= c_max) {
        throw ConfigError("condition channel " + std::to_string(c) +
                          " out of range for layer '" + condition->layer_id +
                          "' with " + std::to_string(c_max) + " channels");
      }
      cond_channels.insert(c);
    }
  }

  ConservationReport report;
  report.seed_total = seed_total;
  report.nodes.resize(nodes.size());

  for (std::size_t ri = nodes.size(); ri-- > 0;) {
    const Node& node = nodes[ri];
    NodeLedger& ledger = report.nodes[ri];
    ledger.node_id = node.id;
    ledger.incoming = rel[ri].sum();

    if (cond_index && *cond_index == ri) {
      Tensor& r = rel[ri];
      const Shape4& sh = r.shape();
      for (std::int64_t n = 0; n < sh.n; ++n)
        for (std::int64_t c = 0; c < sh.c; ++c)
          if (!cond_channels.count(c))
            for (std::int64_t y = 0; y < sh.h; ++y)
              for (std::int64_t x = 0; x < sh.w; ++x) r.at(n, c, y, x) = 0.0;
      ledger.absorbed += ledger.incoming - r.sum();
    }

    if (node.kind == NodeKind::Input) {
      // Terminal: relevance exits the ledger into the global input total.
      ledger.outgoing = rel[ri].sum();
      report.input_total += ledger.outgoing;
      continue;
    }

    const bool structural = node.kind == NodeKind::Output ||
                            node.kind == NodeKind::ConcatC;
    Rule rule;
    if (!structural) {
      const Rule* found = assignment.find(node);
      if (!found) {
        throw ConfigError(std::string("no rule assigned for ") +
                          node_kind_name(node.kind) + " node '" + node.id +
                          "'");
      }
      rule = *found;
    }

    NodePropagation prop = apply_rule(tape, ri, rel[ri], rule);
    ledger.absorbed += prop.absorbed;
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      ledger.outgoing += prop.to_inputs[k].sum();
      add_into(rel[g.index_of(node.inputs[k])], prop.to_inputs[k]);
    }
  }

  for (const NodeLedger& l : report.nodes) {
    report.absorbed_total += l.absorbed;
    if (std::abs(l.incoming - l.outgoing - l.absorbed) > 1e-9) {
      report.flagged.push_back(l.node_id);
    }
  }

  RelevanceTape out;
  out.graph = &g;
  out.relevance = std::move(rel);
  return {std::move(out), std::move(report)};
}

LrpResult lrp_backward(const ForwardTape& tape, const std::string& head,
                       const Tensor& seed, const RuleAssignment& assignment,
                       const std::optional<ChannelCondition>& condition) {
  std::map<std::string, Tensor> seeds;
  seeds.emplace(head, seed);
  return lrp_backward(tape, seeds, assignment, condition);
}

}  // namespace relprop
