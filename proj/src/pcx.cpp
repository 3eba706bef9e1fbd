#include "relprop/pcx.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "relprop/errors.hpp"
#include "relprop/rng.hpp"

namespace relprop {

namespace {

constexpr double kVarFloor = 1e-6;
constexpr double kLog2Pi = 1.8378770664093453;

// Per-component log density log(pi_k) + log N(x; mu_k, diag sigma2_k).
double component_logp(std::span<const double> x, const GmmModel& g,
                      std::int64_t k) {
  double lp = std::log(std::max(g.weights[k], 1e-300));
  for (std::size_t c = 0; c < x.size(); ++c) {
    const double var = g.variances[k][c];
    const double d = x[c] - g.means[k][c];
    lp += -0.5 * (kLog2Pi + std::log(var) + d * d / var);
  }
  return lp;
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::vector<double> column_variance(const ConceptMatrix& m) {
  const std::size_t c_count = static_cast<std::size_t>(m.cols());
  std::vector<double> mean(c_count, 0.0), var(c_count, kVarFloor);
  for (const auto& row : m.rows) {
    for (std::size_t c = 0; c < c_count; ++c) mean[c] += row[c];
  }
  for (double& v : mean) v /= static_cast<double>(m.rows.size());
  for (const auto& row : m.rows) {
    for (std::size_t c = 0; c < c_count; ++c) {
      const double d = row[c] - mean[c];
      var[c] += d * d / static_cast<double>(m.rows.size());
    }
  }
  return var;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Row index farthest (max-min distance) from the given centers; ties
// resolve to the lowest index so seeding is deterministic.
std::size_t farthest_row(const ConceptMatrix& m,
                         const std::vector<std::vector<double>>& centers) {
  std::size_t best = 0;
  double best_d = -1.0;
  for (std::size_t n = 0; n < m.rows.size(); ++n) {
    double nearest = std::numeric_limits<double>::infinity();
    for (const auto& c : centers) nearest = std::min(nearest, sq_dist(m.rows[n], c));
    if (nearest > best_d) {
      best_d = nearest;
      best = n;
    }
  }
  return best;
}

std::vector<double> centered(std::span<const double> v) {
  const double m =
      std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x -= m;
  return out;
}

double norm2(std::span<const double> v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

}  // namespace

std::vector<double> normalize_l1(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  std::vector<double> out(v.begin(), v.end());
  if (s > 0.0) {
    for (double& x : out) x /= s;
  }
  return out;
}

ConceptMatrix make_concept_matrix(std::span<const ConceptVector> raw,
                                  const std::string& context) {
  ConceptMatrix m;
  m.context = context;
  for (const ConceptVector& v : raw) {
    if (m.layer_id.empty()) {
      m.layer_id = v.layer_id;
    } else if (m.layer_id != v.layer_id) {
      throw DataError("concept vectors mix layers '" + m.layer_id + "' and '" +
                      v.layer_id + "'");
    }
    double s = 0.0;
    for (double x : v.values) s += std::abs(x);
    if (s == 0.0) {
      m.excluded.push_back(v.sample_id);
      continue;
    }
    m.rows.push_back(normalize_l1(v.values));
    m.sample_ids.push_back(v.sample_id);
  }
  return m;
}

GmmModel fit_gmm(const ConceptMatrix& matrix, int k, std::uint64_t seed,
                 int max_iter, double tol) {
  const std::size_t n = matrix.rows.size();
  const std::size_t c_count = static_cast<std::size_t>(matrix.cols());
  if (k < 1) throw ConfigError("component count K must be >= 1");
  if (n < static_cast<std::size_t>(k)) {
    throw ConfigError("cannot fit " + std::to_string(k) +
                      " components to " + std::to_string(n) + " samples");
  }

  GmmModel g;
  g.k = k;
  g.layer_id = matrix.layer_id;
  g.seed = seed;
  g.weights.assign(k, 1.0 / k);
  const std::vector<double> data_var = column_variance(matrix);
  g.variances.assign(k, data_var);

  // Farthest-point seeding: a seeded uniform pick, then max-min distance.
  Rng rng(seed);
  g.means.push_back(matrix.rows[rng.uniform_index(n)]);
  while (g.means.size() < static_cast<std::size_t>(k)) {
    g.means.push_back(matrix.rows[farthest_row(matrix, g.means)]);
  }

  std::vector<std::vector<double>> resp(n, std::vector<double>(k));
  bool reseeded = false;
  double prev_ll = -std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < max_iter; ++iter) {
    // E-step.
    double total_ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> lp(k);
      for (std::int64_t j = 0; j < k; ++j) {
        lp[j] = component_logp(matrix.rows[i], g, j);
      }
      const double lse = log_sum_exp(lp);
      total_ll += lse;
      for (std::int64_t j = 0; j < k; ++j) {
        resp[i][j] = std::exp(lp[j] - lse);
      }
    }
    g.loglik_history.push_back(total_ll);

    // M-step.
    for (std::int64_t j = 0; j < k; ++j) {
      double nk = 0.0;
      for (std::size_t i = 0; i < n; ++i) nk += resp[i][j];
      g.weights[j] = nk / static_cast<double>(n);
      if (nk <= 0.0) nk = 1e-300;
      std::vector<double> mu(c_count, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < c_count; ++c) {
          mu[c] += resp[i][j] * matrix.rows[i][c];
        }
      }
      for (double& v : mu) v /= nk;
      std::vector<double> var(c_count, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < c_count; ++c) {
          const double d = matrix.rows[i][c] - mu[c];
          var[c] += resp[i][j] * d * d;
        }
      }
      for (double& v : var) v = std::max(v / nk, kVarFloor);
      g.means[j] = std::move(mu);
      g.variances[j] = std::move(var);
    }

    // A component starved of weight is re-seeded once at the farthest
    // row; a second collapse is only reported.
    const double degenerate = 1.0 / (10.0 * static_cast<double>(n));
    for (std::int64_t j = 0; j < k; ++j) {
      if (g.weights[j] >= degenerate) continue;
      if (!reseeded) {
        reseeded = true;
        g.means[j] = matrix.rows[farthest_row(matrix, g.means)];
        g.variances[j] = data_var;
        g.weights[j] = 1.0 / k;
        double ws = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
        for (double& w : g.weights) w /= ws;
        g.notes.push_back("component " + std::to_string(j) +
                          " re-seeded at iteration " + std::to_string(iter));
      } else {
        g.notes.push_back("component " + std::to_string(j) +
                          " degenerate at iteration " + std::to_string(iter));
      }
    }

    if (iter > 0 && total_ll - prev_ll < tol && total_ll >= prev_ll) break;
    prev_ll = total_ll;
  }
  return g;
}

double mean_log_likelihood(const GmmModel& gmm, const ConceptMatrix& matrix) {
  if (matrix.rows.empty()) throw DataError("empty concept matrix");
  double total = 0.0;
  for (const auto& row : matrix.rows) {
    std::vector<double> lp(gmm.k);
    for (std::int64_t j = 0; j < gmm.k; ++j) {
      lp[j] = component_logp(row, gmm, j);
    }
    total += log_sum_exp(lp);
  }
  return total / static_cast<double>(matrix.rows.size());
}

GmmAssignment assign(std::span<const double> vec, const GmmModel& gmm) {
  if (vec.size() != gmm.means[0].size()) {
    throw ShapeError("concept vector length " + std::to_string(vec.size()) +
                     " does not match model with " +
                     std::to_string(gmm.means[0].size()) + " concepts");
  }
  std::vector<double> lp(gmm.k);
  for (std::int64_t j = 0; j < gmm.k; ++j) {
    lp[j] = component_logp(vec, gmm, j);
  }
  GmmAssignment out;
  out.log_likelihood = log_sum_exp(lp);
  out.responsibilities.resize(gmm.k);
  for (std::int64_t j = 0; j < gmm.k; ++j) {
    out.responsibilities[j] = std::exp(lp[j] - out.log_likelihood);
  }
  out.component = 0;
  for (std::int64_t j = 1; j < gmm.k; ++j) {
    if (out.responsibilities[j] > out.responsibilities[out.component]) {
      out.component = j;
    }
  }
  return out;
}

PrototypeSummary prototype_summary(const GmmModel& gmm,
                                   const ConceptMatrix& matrix, int top_m) {
  const std::size_t n = matrix.rows.size();
  const std::size_t c_count = static_cast<std::size_t>(matrix.cols());
  PrototypeSummary s;
  s.class_mean.assign(c_count, 0.0);
  for (const auto& row : matrix.rows) {
    for (std::size_t c = 0; c < c_count; ++c) s.class_mean[c] += row[c];
  }
  for (double& v : s.class_mean) v /= static_cast<double>(n);

  std::vector<std::int64_t> counts(gmm.k, 0);
  for (const auto& row : matrix.rows) ++counts[assign(row, gmm).component];

  // Similarity is Pearson-style: each vector loses its own component
  // mean, then plain cosine. Uncentered near-simplex vectors would all
  // score close to 1 and hide atypical prototypes.
  const std::vector<double> gm_centered = centered(s.class_mean);
  const double gm_norm = norm2(gm_centered);

  s.components.resize(gmm.k);
  for (std::int64_t j = 0; j < gmm.k; ++j) {
    PrototypeSummary::Component& comp = s.components[j];
    comp.coverage_pct = 100.0 * static_cast<double>(counts[j]) /
                        static_cast<double>(n);
    const std::vector<double> mu_centered = centered(gmm.means[j]);
    const double mu_norm = norm2(mu_centered);
    comp.cosine_to_mean =
        (mu_norm == 0.0 || gm_norm == 0.0)
            ? 0.0
            : std::inner_product(mu_centered.begin(), mu_centered.end(),
                                 gm_centered.begin(), 0.0) /
                  (mu_norm * gm_norm);

    std::vector<std::int64_t> order(c_count);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
      const double va = std::abs(gmm.means[j][a]);
      const double vb = std::abs(gmm.means[j][b]);
      if (va != vb) return va > vb;
      return a < b;
    });
    order.resize(std::min<std::size_t>(order.size(), top_m));
    comp.top_concepts = std::move(order);
  }
  return s;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine similarity of vectors with different lengths");
  }
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) {
    throw DataError("cosine similarity of a zero vector");
  }
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / (na * nb);
}

OutlierCalibration calibrate_outliers(const GmmModel& gmm,
                                      const ConceptMatrix& matrix, double q) {
  if (!(q > 0.0 && q <= 50.0)) {
    throw ConfigError("outlier percentile q must be in (0, 50]");
  }
  OutlierCalibration cal;
  cal.q = q;
  for (const auto& row : matrix.rows) {
    cal.train_loglik.push_back(assign(row, gmm).log_likelihood);
  }
  std::sort(cal.train_loglik.begin(), cal.train_loglik.end());
  // Nearest-rank percentile: the ceil(q/100 * N)-th smallest value.
  const auto n = static_cast<double>(cal.train_loglik.size());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, cal.train_loglik.size());
  cal.threshold = cal.train_loglik[rank - 1];
  return cal;
}

OutlierScore outlier_score(std::span<const double> vec, const GmmModel& gmm,
                           const OutlierCalibration& calibration) {
  OutlierScore s;
  s.log_likelihood = assign(vec, gmm).log_likelihood;
  const auto below = std::lower_bound(calibration.train_loglik.begin(),
                                      calibration.train_loglik.end(),
                                      s.log_likelihood) -
                     calibration.train_loglik.begin();
  s.percentile = 100.0 * static_cast<double>(below) /
                 static_cast<double>(calibration.train_loglik.size());
  s.flagged = s.log_likelihood < calibration.threshold;
  return s;
}

DiffReport difference_to_prototype(std::span<const double> vec,
                                   const GmmModel& gmm,
                                   std::int64_t component) {
  if (component < 0 || component >= gmm.k) {
    throw ConfigError("component " + std::to_string(component) +
                      " out of range for a " + std::to_string(gmm.k) +
                      "-component model");
  }
  if (vec.size() != gmm.means[0].size()) {
    throw ShapeError("concept vector length does not match the model");
  }
  DiffReport rep;
  rep.component = component;
  for (std::size_t c = 0; c < vec.size(); ++c) {
    DiffEntry e;
    e.concept_index = static_cast<std::int64_t>(c);
    e.test_value = vec[c];
    e.prototype_value = gmm.means[component][c];
    e.delta = e.test_value - e.prototype_value;
    rep.entries.push_back(e);
  }
  std::sort(rep.entries.begin(), rep.entries.end(),
            [](const DiffEntry& a, const DiffEntry& b) {
              const double da = std::abs(a.delta);
              const double db = std::abs(b.delta);
              if (da != db) return da > db;
              return a.concept_index < b.concept_index;
            });
  return rep;
}

}  // namespace relprop
