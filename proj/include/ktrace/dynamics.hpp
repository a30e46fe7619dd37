#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ktrace/common.hpp"
#include "ktrace/data.hpp"
#include "ktrace/graph.hpp"

namespace ktrace {

/// Learner traits in raw (Gaussian) space with positivity links applied on
/// decode: forgetting rate alpha = exp(raw[0]) per second, long-term mean
/// mu = raw[1], volatility sigma = exp(raw[2]), transfer ability gamma = raw[3].
struct TraitVector {
  Eigen::Vector4d raw = Eigen::Vector4d::Zero();

  double alpha() const { return std::exp(raw(0)); }
  double mu() const { return raw(1); }
  double sigma() const { return std::exp(raw(2)); }
  double gamma() const { return raw(3); }

  static TraitVector from_raw(const Eigen::Vector4d& r) { return TraitVector{r}; }
};

/// Latent knowledge state, one logit per KC.
struct KnowledgeState {
  Eigen::VectorXd z;
};

/// Global generative parameters theta. R1, R, w1 are variances and must be
/// strictly positive; H is the diagonal trait transition matrix.
struct GenerativeParams {
  PrerequisiteGraph graph;
  Eigen::Vector4d s_bar = Eigen::Vector4d::Zero();   // trait prior mean
  Eigen::Vector4d r1 = Eigen::Vector4d::Ones();      // trait prior variances
  Eigen::Vector4d h = Eigen::Vector4d::Ones();       // trait transition diagonal
  Eigen::Vector4d r = Eigen::Vector4d::Ones();       // trait transition variances
  double z_bar = 0.0;                                // knowledge prior mean
  double w1 = 1.0;                                   // knowledge prior variance

  int num_kcs() const { return graph.num_kcs(); }
  void validate() const;

  /// Defaults used by simulation demos: retention over ~1 day of about 0.42,
  /// near-static traits, unit knowledge prior.
  static GenerativeParams defaults(int num_kcs, int embedding_dim = 16);
};

/// One-step OU transition marginalized over a gap of tau seconds:
///   m[k] = r * z_prev[k] + (1 - r) * mu_tilde[k],  r = exp(-alpha tau)
///   w    = sigma^2 (1 - exp(-2 alpha tau)) / (2 alpha)
struct TransitionMoments {
  Eigen::VectorXd m;  // posterior-predictive mean per KC
  double w = 0.0;     // shared variance
  double r = 1.0;     // retention ratio in (0, 1]
};

/// exp(-alpha * tau); throws unless alpha > 0 and tau >= 0.
double retention_ratio(double alpha, double tau);

/// OU transition variance sigma^2 (1 - e^{-2 alpha tau}) / (2 alpha), with a
/// 3-term Taylor branch for alpha*tau < 1e-6.
double ou_transition_variance(double alpha, double sigma, double tau);

TransitionMoments ou_transition_moments(const KnowledgeState& z_prev,
                                        const TraitVector& traits,
                                        const AdjacencyMatrix& adjacency,
                                        double tau);

/// Trait transition: N(H .* s_prev, diag(R)).
struct GaussianDiag4 {
  Eigen::Vector4d mean;
  Eigen::Vector4d var;
};
GaussianDiag4 trait_transition_step(const TraitVector& s_prev,
                                    const GenerativeParams& params);

/// Bernoulli emission probability sigmoid(z_k), clamped to
/// [1e-12, 1 - 1e-12].
double emission_probability(double z_k);

/// Per-learner latent trajectories emitted alongside a simulated cohort.
struct LatentTrajectory {
  std::string learner_id;
  std::vector<Eigen::Vector4d> traits;       // raw s_n per step
  std::vector<Eigen::VectorXd> states;       // z_n per step
  std::vector<double> retention;             // r_n per step (r_1 = 1)
  std::vector<double> transition_variance;   // w_n per step (w_1 = w1)
};

struct SimulatedCohort {
  Cohort cohort;
  std::vector<LatentTrajectory> latents;
};

/// (kc index, absolute time seconds) pairs, strictly increasing in time.
using Schedule = std::vector<std::pair<int, double>>;
using ScheduleGenerator = std::function<Schedule(std::size_t learner_index, Rng& rng)>;

/// Draws a cohort from the generative model. Each learner gets an independent
/// RNG stream derived from (seed, learner index), so simulation parallelizes
/// and reproduces exactly.
SimulatedCohort simulate_cohort(const GenerativeParams& params,
                                std::size_t n_learners,
                                const ScheduleGenerator& schedule,
                                std::uint64_t seed,
                                const std::vector<std::string>& kc_ids = {},
                                int threads = 1);

/// Uniform-KC schedule with log-normally distributed gaps (seconds).
ScheduleGenerator uniform_schedule(int num_kcs, std::size_t n_interactions,
                                   double mean_log_gap, double sd_log_gap);

/// Latent ground truth sidecar (JSON) for oracle tests.
std::string latents_to_json(const SimulatedCohort& sim);
std::vector<LatentTrajectory> latents_from_json(const std::string& json_text);

}  // namespace ktrace
