#include "ktrace/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "ktrace/common.hpp"
#include "ktrace/special.hpp"

namespace ktrace {

ClassificationMetrics classification_metrics(
    const std::vector<std::pair<double, int>>& predictions) {
  if (predictions.empty())
    throw std::invalid_argument("classification_metrics: empty predictions");
  double correct = 0.0, brier = 0.0;
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (const auto& [p, y] : predictions) {
    if (p < 0.0 || p > 1.0)
      throw std::invalid_argument("classification_metrics: probability outside [0,1]");
    const int pred = p >= 0.5 ? 1 : 0;
    if (pred == y) correct += 1.0;
    if (pred == 1 && y == 1) tp += 1.0;
    if (pred == 1 && y == 0) fp += 1.0;
    if (pred == 0 && y == 1) fn += 1.0;
    brier += (p - y) * (p - y);
  }
  const double n = static_cast<double>(predictions.size());
  ClassificationMetrics m;
  m.accuracy = correct / n;
  const double denom = 2.0 * tp + fp + fn;
  m.f1 = denom == 0.0 ? 1.0 : 2.0 * tp / denom;
  m.brier = brier / n;
  return m;
}

namespace {

Eigen::MatrixXd covariance_mle(const std::vector<Eigen::VectorXd>& rows) {
  const std::size_t n = rows.size();
  const Eigen::Index d = rows.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& r : rows) mean += r;
  mean /= static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& r : rows) {
    const Eigen::VectorXd c = r - mean;
    cov.noalias() += c * c.transpose();
  }
  return cov / static_cast<double>(n);
}

double log_det_ridged(const Eigen::MatrixXd& cov, double ridge) {
  const Eigen::Index d = cov.rows();
  Eigen::MatrixXd m = cov + ridge * Eigen::MatrixXd::Identity(d, d);
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("log_det: decomposition failed");
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double piv = ldlt.vectorD()(i);
    if (!(piv > 0.0))
      throw std::runtime_error("log_det: covariance singular after ridge");
    log_det += std::log(piv);
  }
  return log_det;
}

void check_rows(const std::vector<Eigen::VectorXd>& rows, const char* what) {
  if (rows.empty()) throw std::invalid_argument(std::string(what) + ": no rows");
  const Eigen::Index d = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != d) throw std::invalid_argument(std::string(what) + ": ragged rows");
  if (static_cast<Eigen::Index>(rows.size()) < d + 1)
    throw std::invalid_argument(std::string(what) + ": need at least d+1 rows per estimate");
}

}  // namespace

double specificity_mi(const LearnerRows& rows_by_learner, double ridge) {
  if (rows_by_learner.empty()) throw std::invalid_argument("specificity_mi: no learners");
  std::vector<Eigen::VectorXd> pooled;
  double per_learner_sum = 0.0;
  for (const auto& rows : rows_by_learner) {
    check_rows(rows, "specificity_mi");
    per_learner_sum += log_det_ridged(covariance_mle(rows), ridge);
    pooled.insert(pooled.end(), rows.begin(), rows.end());
  }
  const double pooled_log_det = log_det_ridged(covariance_mle(pooled), ridge);
  return 0.5 * (pooled_log_det -
                per_learner_sum / static_cast<double>(rows_by_learner.size()));
}

double consistency_mi(const LearnerSubsetRows& rows, double ridge) {
  if (rows.empty()) throw std::invalid_argument("consistency_mi: no learners");
  double total = 0.0;
  for (const auto& subsets : rows) {
    if (subsets.size() < 2)
      throw std::invalid_argument("consistency_mi: each learner needs >= 2 subsets");
    std::vector<Eigen::VectorXd> learner_rows;
    double subset_sum = 0.0;
    for (const auto& sub : subsets) {
      check_rows(sub, "consistency_mi");
      subset_sum += log_det_ridged(covariance_mle(sub), ridge);
      learner_rows.insert(learner_rows.end(), sub.begin(), sub.end());
    }
    const double learner_log_det = log_det_ridged(covariance_mle(learner_rows), ridge);
    total += 0.5 * (learner_log_det - subset_sum / static_cast<double>(subsets.size()));
  }
  return total / static_cast<double>(rows.size());
}

double disentanglement_kl(const LearnerRows& rows_by_learner, double ridge) {
  if (rows_by_learner.empty()) throw std::invalid_argument("disentanglement_kl: no learners");
  std::vector<Eigen::VectorXd> pooled;
  double per_learner_sum = 0.0;
  for (const auto& rows : rows_by_learner) {
    check_rows(rows, "disentanglement_kl");
    const Eigen::MatrixXd cov = covariance_mle(rows);
    for (Eigen::Index i = 0; i < cov.rows(); ++i) {
      const double v = cov(i, i) + ridge;
      if (!(v > 0.0)) throw std::runtime_error("disentanglement_kl: singular after ridge");
      per_learner_sum += std::log(v);
    }
    pooled.insert(pooled.end(), rows.begin(), rows.end());
  }
  const double pooled_log_det = log_det_ridged(covariance_mle(pooled), ridge);
  return 0.5 * (pooled_log_det -
                per_learner_sum / static_cast<double>(rows_by_learner.size()));
}

double mrr_expert(const AdjacencyMatrix& adjacency,
                  const std::vector<std::pair<int, int>>& expert_edges) {
  if (expert_edges.empty()) throw std::invalid_argument("mrr_expert: no expert edges");
  const int K = adjacency.num_kcs();
  double sum = 0.0;
  for (const auto& [i, k] : expert_edges) {
    if (i < 0 || k < 0 || i >= K || k >= K || i == k)
      throw std::invalid_argument("mrr_expert: invalid edge index");
    // Rank of a[i][k] among the candidate sources {a[j][k]}_{j != k},
    // descending, ties sharing the average rank.
    const double target = adjacency.a(i, k);
    double greater = 0.0, equal = 0.0;
    for (int j = 0; j < K; ++j) {
      if (j == k) continue;
      if (adjacency.a(j, k) > target) greater += 1.0;
      if (adjacency.a(j, k) == target) equal += 1.0;  // includes j == i
    }
    const double rank = greater + 0.5 * (equal + 1.0);
    sum += 1.0 / rank;
  }
  return sum / static_cast<double>(expert_edges.size());
}

double jaccard_edges(const std::vector<std::pair<int, int>>& set_a,
                     const std::vector<std::pair<int, int>>& set_b) {
  const std::set<std::pair<int, int>> a(set_a.begin(), set_a.end());
  const std::set<std::pair<int, int>> b(set_b.begin(), set_b.end());
  if (a.empty() && b.empty()) return 1.0;  // flagged convention
  std::size_t inter = 0;
  for (const auto& e : a) inter += b.count(e);
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double rating_nll(const AdjacencyMatrix& adjacency, const std::vector<RatedPair>& pairs,
                  double sigma_floor) {
  if (pairs.empty()) throw std::invalid_argument("rating_nll: no rated pairs");
  const int K = adjacency.num_kcs();
  double total = 0.0;
  for (const auto& pair : pairs) {
    if (pair.ratings.empty())
      throw std::invalid_argument("rating_nll: pair without ratings");
    if (pair.source < 0 || pair.target < 0 || pair.source >= K || pair.target >= K)
      throw std::invalid_argument("rating_nll: invalid pair index");
    double mean = 0.0;
    for (double r : pair.ratings) mean += (r - 1.0) / 8.0;
    mean /= static_cast<double>(pair.ratings.size());
    double var = 0.0;
    for (double r : pair.ratings) {
      const double d = (r - 1.0) / 8.0 - mean;
      var += d * d;
    }
    var /= static_cast<double>(pair.ratings.size());
    const double sd = std::max(std::sqrt(var), sigma_floor);
    const double a = adjacency.a(pair.source, pair.target);
    total += -gaussian_log_pdf(a, mean, sd * sd);
  }
  return total / static_cast<double>(pairs.size());
}

double causal_support(const CausalCounts& counts, int mc_samples, std::uint64_t seed) {
  if (counts.n_pp < 0 || counts.n_pm < 0 || counts.n_mp < 0 || counts.n_mm < 0)
    throw std::invalid_argument("causal_support: negative counts");
  if (mc_samples < 1) throw std::invalid_argument("causal_support: mc_samples must be >= 1");

  const double n_effect = static_cast<double>(counts.n_pp + counts.n_pm);
  const double n_no_effect = static_cast<double>(counts.n_mp + counts.n_mm);
  const double log_g0 = log_beta(n_effect + 1.0, n_no_effect + 1.0);

  // Monte Carlo marginal of the causal graph: uniform (w0, w1), noisy-OR
  // likelihood with all four outcome cells.
  Rng rng(substream(seed, "causal-support"));
  std::vector<double> log_terms;
  log_terms.reserve(mc_samples);
  for (int m = 0; m < mc_samples; ++m) {
    const double w0 = rng.uniform();
    const double w1 = rng.uniform();
    const double p_cause = w0 + w1 - w0 * w1;
    double lt = 0.0;
    if (counts.n_pp > 0) lt += counts.n_pp * std::log(p_cause);
    if (counts.n_pm > 0) lt += counts.n_pm * std::log(w0);
    if (counts.n_mp > 0) lt += counts.n_mp * std::log1p(-p_cause);
    if (counts.n_mm > 0) lt += counts.n_mm * std::log1p(-w0);
    log_terms.push_back(lt);
  }
  const double log_g1 = log_sum_exp(log_terms) - std::log(static_cast<double>(mc_samples));
  return log_g1 - log_g0;
}

std::map<std::pair<int, int>, CausalCounts> causal_transition_counts(const Cohort& cohort) {
  if (cohort.histories.empty())
    throw std::invalid_argument("causal_transition_counts: empty cohort");
  std::map<std::pair<int, int>, CausalCounts> counts;
  for (const auto& h : cohort.histories) {
    for (std::size_t n = 0; n + 1 < h.records.size(); ++n) {
      const auto& cause = h.records[n];
      const auto& effect = h.records[n + 1];
      if (cause.kc_index == effect.kc_index) continue;
      auto& c = counts[{cause.kc_index, effect.kc_index}];
      if (effect.outcome && cause.outcome) ++c.n_pp;
      if (effect.outcome && !cause.outcome) ++c.n_pm;
      if (!effect.outcome && cause.outcome) ++c.n_mp;
      if (!effect.outcome && !cause.outcome) ++c.n_mm;
    }
  }
  // Single-transition pairs carry no evidence worth keeping.
  for (auto it = counts.begin(); it != counts.end();) {
    if (it->second.total() <= 1)
      it = counts.erase(it);
    else
      ++it;
  }
  return counts;
}

std::map<std::pair<int, int>, double> causal_support_table(const Cohort& cohort,
                                                           int mc_samples,
                                                           std::uint64_t seed) {
  std::map<std::pair<int, int>, double> table;
  for (const auto& [pair, counts] : causal_transition_counts(cohort)) {
    const std::uint64_t pair_seed =
        substream(seed, "causal-pair",
                  (static_cast<std::uint64_t>(pair.first) << 32) ^
                      static_cast<std::uint64_t>(pair.second + 1));
    table.emplace(pair, causal_support(counts, mc_samples, pair_seed));
  }
  return table;
}

RegressionResult regress_with_learner_intercepts(const std::vector<RegressionRow>& rows,
                                                 bool decile_bins) {
  std::map<int, std::vector<std::size_t>> by_learner;
  for (std::size_t i = 0; i < rows.size(); ++i) by_learner[rows[i].learner].push_back(i);
  if (by_learner.size() < 2)
    throw std::invalid_argument("regress_with_learner_intercepts: need >= 2 learners");
  for (const auto& [l, idx] : by_learner)
    if (idx.size() < 3)
      throw std::invalid_argument(
          "regress_with_learner_intercepts: each learner needs >= 3 rows");

  // Demean x and y within each learner (the within estimator).
  std::vector<double> xd(rows.size()), yd(rows.size());
  for (const auto& [l, idx] : by_learner) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i : idx) {
      mx += rows[i].x;
      my += rows[i].y;
    }
    mx /= static_cast<double>(idx.size());
    my /= static_cast<double>(idx.size());
    for (std::size_t i : idx) {
      xd[i] = rows[i].x - mx;
      yd[i] = rows[i].y - my;
    }
  }

  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    sxx += xd[i] * xd[i];
    sxy += xd[i] * yd[i];
  }
  if (!(sxx > 0.0))
    throw std::invalid_argument(
        "regress_with_learner_intercepts: x constant after demeaning");

  RegressionResult res;
  res.n_rows = rows.size();
  res.n_learners = by_learner.size();
  res.slope = sxy / sxx;

  const double dof =
      static_cast<double>(rows.size()) - static_cast<double>(by_learner.size()) - 1.0;
  if (dof < 1.0)
    throw std::invalid_argument("regress_with_learner_intercepts: not enough rows");
  double rss = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double r = yd[i] - res.slope * xd[i];
    rss += r * r;
  }
  const double sigma2 = rss / dof;
  const double se = std::sqrt(sigma2 / sxx);
  if (se == 0.0) {
    res.t_stat = res.slope == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    res.p_value = res.slope == 0.0 ? 1.0 : 0.0;
  } else {
    res.t_stat = res.slope / se;
    res.p_value = student_t_pvalue_two_sided(res.t_stat, dof);
  }

  if (decile_bins) {
    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return rows[a].x < rows[b].x;
    });
    const std::size_t n_bins = std::min<std::size_t>(10, rows.size() / 2);
    for (std::size_t b = 0; b < n_bins; ++b) {
      const std::size_t lo = b * rows.size() / n_bins;
      const std::size_t hi = (b + 1) * rows.size() / n_bins;
      if (hi <= lo) continue;
      RegressionBin bin;
      bin.count = hi - lo;
      double sx = 0.0, sy = 0.0;
      for (std::size_t p = lo; p < hi; ++p) {
        sx += rows[order[p]].x;
        sy += rows[order[p]].y;
      }
      bin.center = sx / static_cast<double>(bin.count);
      bin.mean = sy / static_cast<double>(bin.count);
      double var = 0.0;
      for (std::size_t p = lo; p < hi; ++p) {
        const double d = rows[order[p]].y - bin.mean;
        var += d * d;
      }
      if (bin.count > 1) {
        var /= static_cast<double>(bin.count - 1);
        bin.sem = std::sqrt(var / static_cast<double>(bin.count));
      }
      res.bins.push_back(bin);
    }
  }
  return res;
}

void MetricReport::set(const std::string& key, double value) { values[key] = value; }

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["schema"] = "ktrace-metrics-v1";
  j["values"] = values;
  j["info"] = info;
  return j.dump(2);
}

}  // namespace ktrace
