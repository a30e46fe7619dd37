#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ktrace/data.hpp"
#include "ktrace/graph.hpp"

namespace ktrace {

struct ClassificationMetrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  double brier = 0.0;
};

/// Threshold-0.5 accuracy (ties predict 1), F1 of the positive class, and the
/// Brier score mean (p - y)^2.
ClassificationMetrics classification_metrics(
    const std::vector<std::pair<double, int>>& predictions);

/// Representation rows grouped by learner (outer) and optionally by subset
/// (used by the consistency metric).
using LearnerRows = std::vector<std::vector<Eigen::VectorXd>>;
using LearnerSubsetRows = std::vector<std::vector<std::vector<Eigen::VectorXd>>>;

/// Mutual information between representations and learner identity:
/// 1/2 (log|Sigma_pooled + ridge I| - mean_l log|Sigma_l + ridge I|).
/// Requires at least d+1 rows per covariance estimate.
double specificity_mi(const LearnerRows& rows_by_learner, double ridge = 1e-6);

/// Expected information a representation carries about the training subset:
/// mean_l 1/2 (log|Sigma_l| - mean_sub log|Sigma_{l,sub}|); lower is more
/// consistent.
double consistency_mi(const LearnerSubsetRows& rows, double ridge = 1e-6);

/// Specificity variant whose conditional entropy keeps only diagonal
/// covariances: 1/2 (log|Sigma_pooled| - mean_l sum_i log (Sigma_l)_ii).
double disentanglement_kl(const LearnerRows& rows_by_learner, double ridge = 1e-6);

/// Mean reciprocal rank of expert edges: each (i, k) is ranked by a[i][k]
/// within column k (descending, ties share the average rank).
double mrr_expert(const AdjacencyMatrix& adjacency,
                  const std::vector<std::pair<int, int>>& expert_edges);

/// |A intersect B| / |A union B|; both empty gives 1 by convention.
double jaccard_edges(const std::vector<std::pair<int, int>>& set_a,
                     const std::vector<std::pair<int, int>>& set_b);

/// One annotated pair with its rescaled ratings resolved to KC indices.
struct RatedPair {
  int source = 0;
  int target = 0;
  std::vector<double> ratings;  // raw scale 1-9
};

/// Mean negative log-likelihood of inferred edge probabilities under
/// per-pair Gaussians fitted to ratings rescaled by (r - 1) / 8, with the
/// standard deviation floored at sigma_floor.
double rating_nll(const AdjacencyMatrix& adjacency, const std::vector<RatedPair>& pairs,
                  double sigma_floor = 0.05);

/// Consecutive-transition outcome counts for a candidate cause (performance
/// on KC i) and effect (performance on KC k on the next interaction).
struct CausalCounts {
  std::int64_t n_pp = 0;  // effect present, cause present
  std::int64_t n_pm = 0;  // effect present, cause absent
  std::int64_t n_mp = 0;  // effect absent, cause present
  std::int64_t n_mm = 0;  // effect absent, cause absent

  std::int64_t total() const { return n_pp + n_pm + n_mp + n_mm; }
};

/// Log Bayes factor of "i causes k" over "background only". The null
/// marginal likelihood is the closed-form Beta(N(e+)+1, N(e-)+1); the causal
/// graph marginal is a Monte Carlo average over uniform (w0, w1) of the full
/// noisy-OR Bernoulli likelihood, computed in log space.
double causal_support(const CausalCounts& counts, int mc_samples, std::uint64_t seed);

/// Tallies consecutive-interaction transitions per ordered KC pair across the
/// cohort; pairs with at most one observed transition are omitted.
std::map<std::pair<int, int>, CausalCounts> causal_transition_counts(const Cohort& cohort);

std::map<std::pair<int, int>, double> causal_support_table(const Cohort& cohort,
                                                           int mc_samples,
                                                           std::uint64_t seed);

struct RegressionBin {
  double center = 0.0;
  double mean = 0.0;
  double sem = 0.0;
  std::size_t count = 0;
};

struct RegressionResult {
  double slope = 0.0;
  double p_value = 1.0;
  double t_stat = 0.0;
  std::size_t n_rows = 0;
  std::size_t n_learners = 0;
  std::vector<RegressionBin> bins;
};

struct RegressionRow {
  int learner = 0;
  double x = 0.0;
  double y = 0.0;
};

/// Within-learner (fixed-intercept) regression: x and y are demeaned per
/// learner, the slope comes from pooled OLS on the demeaned data, and the
/// p-value from a t test with N - L - 1 degrees of freedom. With decile_bins,
/// equal-count bins of x report per-bin mean/SEM of y.
RegressionResult regress_with_learner_intercepts(const std::vector<RegressionRow>& rows,
                                                 bool decile_bins = false);

/// Named scalar metrics plus run metadata, serializable as JSON.
struct MetricReport {
  std::map<std::string, double> values;
  std::map<std::string, std::string> info;

  void set(const std::string& key, double value);
  std::string to_json() const;
};

}  // namespace ktrace
