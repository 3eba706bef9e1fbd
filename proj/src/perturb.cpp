#include "relprop/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "relprop/crp.hpp"
#include "relprop/errors.hpp"
#include "relprop/gradient.hpp"
#include "relprop/rng.hpp"

namespace relprop {

namespace {

// One channel per step on small layers, 32 near-equal batches otherwise.
std::vector<std::vector<std::int64_t>> group_steps(
    const std::vector<std::int64_t>& order) {
  const std::size_t c = order.size();
  std::vector<std::vector<std::int64_t>> groups;
  if (c <= 64) {
    for (std::int64_t ch : order) groups.push_back({ch});
    return groups;
  }
  const std::size_t batches = 32;
  std::size_t next = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    std::size_t take = c / batches + (b < c % batches ? 1 : 0);
    groups.emplace_back(order.begin() + next, order.begin() + next + take);
    next += take;
  }
  return groups;
}

void check_order(const std::vector<std::int64_t>& order, std::int64_t c,
                 const std::string& layer_id) {
  std::vector<bool> seen(static_cast<std::size_t>(c), false);
  if (order.size() != static_cast<std::size_t>(c)) {
    throw ConfigError("ranking for layer '" + layer_id + "' has " +
                      std::to_string(order.size()) + " entries, expected " +
                      std::to_string(c));
  }
  for (std::int64_t ch : order) {
    if (ch < 0 || ch >= c || seen[ch]) {
      throw ConfigError("ranking for layer '" + layer_id +
                        "' is not a permutation of its channels");
    }
    seen[ch] = true;
  }
}

void zero_channel(Tensor& t, std::int64_t c) {
  const Shape4& s = t.shape();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) t.at(n, c, y, x) = 0.0;
}

void copy_channel(Tensor& dst, const Tensor& src, std::int64_t c) {
  const Shape4& s = dst.shape();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x)
        dst.at(n, c, y, x) = src.at(n, c, y, x);
}

PerturbCurve trace_curve(const Graph& graph, const Tensor& input,
                         const std::string& layer_id,
                         const TargetSpec& target,
                         const std::vector<std::int64_t>& order,
                         Direction direction) {
  ForwardTape base = forward(graph, input);
  const Tensor& act = base.output_of(layer_id);
  check_order(order, act.shape().c, layer_id);

  // The explained region is fixed on the unperturbed prediction so every
  // step scores the same scalar.
  const TargetSpec resolved = resolve_target(base, target);

  PerturbCurve curve;
  curve.direction = direction;
  curve.steps = group_steps(order);

  Tensor patched =
      direction == Direction::Deletion ? act : Tensor(act.shape());
  ForwardTape start = forward_from(graph, base, layer_id, patched);
  curve.logits.push_back(select_scalar(start, resolved).value);

  for (const std::vector<std::int64_t>& group : curve.steps) {
    for (std::int64_t ch : group) {
      if (direction == Direction::Deletion) {
        zero_channel(patched, ch);
      } else {
        copy_channel(patched, act, ch);
      }
    }
    ForwardTape tape = forward_from(graph, base, layer_id, patched);
    curve.logits.push_back(select_scalar(tape, resolved).value);
  }
  return curve;
}

}  // namespace

std::string ScoreMethod::name() const {
  switch (kind) {
    case ScoreMethodKind::LrpRelevance: return "lrp";
    case ScoreMethodKind::Gradient: return "gradient";
    case ScoreMethodKind::GradCam: return "gradcam";
    case ScoreMethodKind::Activation: return "activation";
    case ScoreMethodKind::Random: return "random";
  }
  return "?";
}

ChannelVector channel_scores(const ForwardTape& tape,
                             const std::string& layer_id,
                             const TargetSpec& target,
                             const ScoreMethod& method) {
  const Tensor& act = tape.output_of(layer_id);
  const std::int64_t c = act.shape().c;

  switch (method.kind) {
    case ScoreMethodKind::Activation: {
      ChannelVector v = spatial_sum(act);
      v.layer_id = layer_id;
      return v;
    }
    case ScoreMethodKind::Random: {
      std::vector<std::int64_t> idx(static_cast<std::size_t>(c));
      std::iota(idx.begin(), idx.end(), 0);
      Rng rng(method.seed);
      rng.shuffle(idx);
      ChannelVector v;
      v.layer_id = layer_id;
      v.values.resize(static_cast<std::size_t>(c));
      for (std::size_t t = 0; t < idx.size(); ++t) {
        v.values[static_cast<std::size_t>(idx[t])] =
            static_cast<double>(c - static_cast<std::int64_t>(t));
      }
      return v;
    }
    case ScoreMethodKind::Gradient: {
      GradientTape gt = backward_gradient(tape, target);
      const Tensor& g = gt.grad_of(layer_id);
      ChannelVector v;
      v.layer_id = layer_id;
      v.values.assign(static_cast<std::size_t>(c), 0.0);
      const Shape4& s = g.shape();
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < s.h; ++y)
          for (std::int64_t x = 0; x < s.w; ++x)
            v.values[ch] += std::abs(g.at(0, ch, y, x));
      return v;
    }
    case ScoreMethodKind::GradCam: {
      GradientTape gt = backward_gradient(tape, target);
      const Tensor& g = gt.grad_of(layer_id);
      const double area = static_cast<double>(g.shape().h * g.shape().w);
      ChannelVector grad_mean = spatial_sum(g);
      ChannelVector act_mean = spatial_sum(act);
      ChannelVector v;
      v.layer_id = layer_id;
      v.values.resize(static_cast<std::size_t>(c));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        v.values[ch] =
            (grad_mean.values[ch] / area) * (act_mean.values[ch] / area);
      }
      return v;
    }
    case ScoreMethodKind::LrpRelevance: {
      const TargetSpec resolved = resolve_target(tape, target);
      SelectedScalar sel = select_scalar(tape, resolved);
      LrpResult res =
          lrp_backward(tape, resolved.head, sel.seed, method.assignment);
      ConceptVector cv = concept_vector(res.tape, layer_id);
      return {std::move(cv.values), layer_id};
    }
  }
  throw ConfigError("unknown scoring method");
}

std::vector<std::int64_t> rank_channels(const ChannelVector& scores) {
  std::vector<std::int64_t> order(scores.values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    if (scores.values[a] != scores.values[b]) {
      return scores.values[a] > scores.values[b];
    }
    return a < b;
  });
  return order;
}

PerturbCurve deletion_curve(const Graph& graph, const Tensor& input,
                            const std::string& layer_id,
                            const TargetSpec& target,
                            const std::vector<std::int64_t>& order) {
  return trace_curve(graph, input, layer_id, target, order,
                     Direction::Deletion);
}

PerturbCurve insertion_curve(const Graph& graph, const Tensor& input,
                             const std::string& layer_id,
                             const TargetSpec& target,
                             const std::vector<std::int64_t>& order) {
  return trace_curve(graph, input, layer_id, target, order,
                     Direction::Insertion);
}

double aoc(const PerturbCurve& curve) {
  if (curve.direction != Direction::Deletion) {
    throw ConfigError("AOC is defined on deletion curves");
  }
  const std::size_t t_count = curve.logits.size() - 1;
  double s = 0.0;
  for (std::size_t t = 1; t <= t_count; ++t) {
    s += curve.logits[0] - curve.logits[t];
  }
  return s / static_cast<double>(t_count);
}

double auc(const PerturbCurve& curve) {
  if (curve.direction != Direction::Insertion) {
    throw ConfigError("AUC is defined on insertion curves");
  }
  const std::size_t t_count = curve.logits.size() - 1;
  double s = 0.0;
  for (std::size_t t = 1; t <= t_count; ++t) {
    s += curve.logits[t] - curve.logits[0];
  }
  return s / static_cast<double>(t_count);
}

BenchReport run_benchmark(const Graph& graph,
                          std::span<const BenchSample> dataset,
                          const BenchConfig& config) {
  if (config.layers.empty()) {
    throw ConfigError("benchmark needs at least one layer");
  }
  if (config.sample_count > dataset.size()) {
    throw ConfigError("sample count " + std::to_string(config.sample_count) +
                      " exceeds dataset size " +
                      std::to_string(dataset.size()));
  }

  // Seeded subset, then fixed (index) order for deterministic aggregation.
  std::vector<std::size_t> picks(dataset.size());
  std::iota(picks.begin(), picks.end(), 0);
  Rng rng(config.seed);
  rng.shuffle(picks);
  picks.resize(config.sample_count);
  std::sort(picks.begin(), picks.end());

  BenchReport report;
  report.seed = config.seed;
  for (std::size_t i : picks) report.sample_ids.push_back(dataset[i].id);

  for (const ScoreMethod& method : config.methods) {
    for (const std::string& layer : config.layers) {
      MethodLayerStat stat;
      stat.method = method.name();
      stat.layer_id = layer;
      for (std::size_t i : picks) {
        const BenchSample& sample = dataset[i];
        ForwardTape tape = forward(graph, sample.input);
        // Random draws a fresh permutation per sample; everything else is a
        // pure function of the tape.
        ScoreMethod effective = method;
        if (method.kind == ScoreMethodKind::Random) {
          effective.seed = derive_seed(method.seed, i);
        }
        ChannelVector scores =
            channel_scores(tape, layer, sample.target, effective);
        std::vector<std::int64_t> order = rank_channels(scores);

        CurveRecord rec;
        rec.sample_id = sample.id;
        rec.layer_id = layer;
        rec.method = method.name();
        rec.deletion =
            deletion_curve(graph, sample.input, layer, sample.target, order);
        rec.insertion =
            insertion_curve(graph, sample.input, layer, sample.target, order);
        rec.aoc = aoc(rec.deletion);
        rec.auc = auc(rec.insertion);
        stat.mean_aoc += rec.aoc;
        stat.mean_auc += rec.auc;
        ++stat.samples;
        report.curves.push_back(std::move(rec));
      }
      if (stat.samples > 0) {
        stat.mean_aoc /= static_cast<double>(stat.samples);
        stat.mean_auc /= static_cast<double>(stat.samples);
      }
      report.stats.push_back(std::move(stat));
    }
  }
  return report;
}

void write_curves_csv(const BenchReport& report,
                      const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f << "sample,layer,method,direction,step,logit\n";
  f.precision(17);
  for (const CurveRecord& rec : report.curves) {
    for (std::size_t t = 0; t < rec.deletion.logits.size(); ++t) {
      f << rec.sample_id << ',' << rec.layer_id << ',' << rec.method
        << ",deletion," << t << ',' << rec.deletion.logits[t] << '\n';
    }
    for (std::size_t t = 0; t < rec.insertion.logits.size(); ++t) {
      f << rec.sample_id << ',' << rec.layer_id << ',' << rec.method
        << ",insertion," << t << ',' << rec.insertion.logits[t] << '\n';
    }
  }
}

double paired_sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ConfigError("sign test needs paired samples of equal length");
  }
  int wins = 0, informative = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    ++informative;
    if (a[i] > b[i]) ++wins;
  }
  if (informative == 0) return 1.0;
  // P(X >= wins) for X ~ Binomial(informative, 1/2), summed in log space
  // via the recurrence C(n,k+1) = C(n,k)*(n-k)/(k+1).
  double coeff = 1.0;  // C(n, 0)
  double tail = 0.0;
  const double scale = std::pow(0.5, informative);
  for (int k = 0; k <= informative; ++k) {
    if (k >= wins) tail += coeff * scale;
    coeff = coeff * static_cast<double>(informative - k) /
            static_cast<double>(k + 1);
  }
  return std::min(tail, 1.0);
}

}  // namespace relprop
