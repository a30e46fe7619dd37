#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ktrace/data.hpp"
#include "ktrace/dynamics.hpp"
#include "ktrace/graph.hpp"

namespace ktrace {

/// Ablation switches: no_graph forces the transfer ability gamma to zero so
/// each KC evolves independently; no_individual shares one trait posterior
/// across all learners; no_dynamics pins traits to their first-step value.
struct AblationFlags {
  bool no_graph = false;
  bool no_individual = false;
  bool no_dynamics = false;
};

enum class GradientMode { kAnalytic, kFiniteDifference };

struct FitConfig {
  int mc_samples = 8;
  double learning_rate = 0.005;
  double grad_clip = 10.0;
  int max_epochs = 200;
  int batch_size = 32;  // learner chunk size for the parallel sweep
  std::uint64_t seed = 0;
  AblationFlags ablation;
  GradientMode gradient_mode = GradientMode::kAnalytic;
  bool learn_theta = true;
  int threads = 1;
  double init_logvar = -2.302585092994046;  // log(0.1)
  double min_interval_seconds = 1.0;

  void validate() const;
};

/// Mean-field diagonal-Gaussian posterior over one learner's latents: one
/// (mean, logvar) block per interaction step for z, and per step for s unless
/// no_dynamics collapses the trait chain to a single block.
struct VariationalState {
  std::vector<Eigen::Vector4d> s_mean;
  std::vector<Eigen::Vector4d> s_logvar;
  std::vector<Eigen::VectorXd> z_mean;
  std::vector<Eigen::VectorXd> z_logvar;

  std::size_t num_steps() const { return z_mean.size(); }
  void validate(int num_kcs) const;

  static VariationalState initial(const GenerativeParams& params, std::size_t n_steps,
                                  double init_logvar, bool no_dynamics);
};

/// Interaction history in the compact form consumed by the estimators:
/// KC indices, binary outcomes, and clamped gaps (taus[0] is unused).
struct LearnerData {
  std::vector<int> kcs;
  std::vector<int> ys;
  std::vector<double> taus;
  std::string learner_id;
  double last_time = 0.0;

  std::size_t size() const { return kcs.size(); }
  static LearnerData from_history(const InteractionHistory& history,
                                  double min_interval_seconds);
};

/// Gradient of the single-learner ELBO with respect to the variational
/// parameters, laid out like VariationalState.
struct PhiGrad {
  std::vector<Eigen::Vector4d> s_mean;
  std::vector<Eigen::Vector4d> s_logvar;
  std::vector<Eigen::VectorXd> z_mean;
  std::vector<Eigen::VectorXd> z_logvar;
};

/// Gradient with respect to the generative parameters in raw optimization
/// space (variances and H carried as logs for positivity).
struct ThetaGrad {
  Eigen::MatrixXd U;
  Eigen::MatrixXd M;
  Eigen::Vector4d s_bar = Eigen::Vector4d::Zero();
  Eigen::Vector4d log_r1 = Eigen::Vector4d::Zero();
  Eigen::Vector4d log_h = Eigen::Vector4d::Zero();
  Eigen::Vector4d log_r = Eigen::Vector4d::Zero();
  double z_bar = 0.0;
  double log_w1 = 0.0;

  static ThetaGrad zero(int num_kcs, int embedding_dim);
};

/// Monte Carlo estimate of the single-learner full-history ELBO. Entropies
/// are closed form; prior, transition, and emission cross-terms use
/// mc_samples reparameterized draws with common random numbers keyed by
/// `noise_key`, so repeated calls at the same key are comparable. Optional
/// analytic gradients are written to `phi_grad` / `theta_grad`.
double elbo_full_grad(const GenerativeParams& params, const AdjacencyMatrix& adjacency,
                      const VariationalState& phi, const LearnerData& data,
                      int mc_samples, std::uint64_t noise_key,
                      const AblationFlags& ablation, PhiGrad* phi_grad,
                      ThetaGrad* theta_grad);

/// Spec-level convenience wrapper over elbo_full_grad (value only).
double elbo_full(const GenerativeParams& params, const VariationalState& varstate,
                 const InteractionHistory& history, int mc_samples,
                 std::uint64_t seed, const AblationFlags& ablation = {});

struct FitResult {
  GenerativeParams params;
  AblationFlags ablation;
  std::vector<std::string> learner_ids;
  std::vector<VariationalState> phi;     // aligned with learner_ids
  std::vector<LearnerData> train_data;   // aligned with learner_ids
  std::vector<double> elbo_trace;        // accepted total ELBO per epoch
};

/// Variational EM: alternates per-learner gradient ascent on phi with one
/// pooled step on theta per sweep. Steps that would decrease the
/// common-random-number ELBO are rejected and retried with a smaller scale,
/// so the accepted trace is non-decreasing. Deterministic under fixed seed.
FitResult fit_variational_em(const SplitCohort& split, const FitConfig& config,
                             const GenerativeParams* warm_start = nullptr);

/// Variational posterior at a single time step.
struct PosteriorSlice {
  Eigen::Vector4d s_mean = Eigen::Vector4d::Zero();
  Eigen::Vector4d s_logvar = Eigen::Vector4d::Zero();
  Eigen::VectorXd z_mean;
  Eigen::VectorXd z_logvar;
};

/// Final-step slice of a fitted per-learner posterior.
PosteriorSlice last_slice(const VariationalState& phi);

/// Per-learner state carried through continual updates.
struct ContinualState {
  PosteriorSlice q;
  std::size_t step = 0;      // observations absorbed so far
  double last_time = 0.0;
  std::string learner_id;
};

/// Moment-matched diagonal-Gaussian next-time prior over (s_{n+1}, z_{n+1}),
/// built by pushing mc_samples draws of the current posterior through the
/// trait and OU transition kernels.
struct PushedPrior {
  Eigen::Vector4d s_mean = Eigen::Vector4d::Zero();
  Eigen::Vector4d s_var = Eigen::Vector4d::Ones();
  Eigen::VectorXd z_mean;
  Eigen::VectorXd z_var;
};

PushedPrior next_time_prior(const ContinualState& state, const GenerativeParams& params,
                            const AdjacencyMatrix& adjacency, double tau, int kc,
                            int mc_samples, std::uint64_t seed,
                            const AblationFlags& ablation = {});

/// Continual-learning ELBO for one new observation: closed-form entropies and
/// Gaussian cross-terms against the pushed prior plus a Monte Carlo emission
/// term. Gradients w.r.t. the slice parameters are optional.
double elbo_vcl(const GenerativeParams& params, const PosteriorSlice& q_next, int kc,
                int outcome, const PushedPrior& prior, int mc_samples,
                std::uint64_t seed, PosteriorSlice* grad = nullptr);

struct ContinualConfig {
  int prior_samples = 4096;
  int mc_samples = 32;
  int max_steps = 60;
  double learning_rate = 0.05;
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
  AblationFlags ablation;
  bool update_graph = false;
  double graph_learning_rate = 0.005;
  double min_interval_seconds = 1.0;
};

/// Accumulated graph gradient from continual rounds, applied by a single
/// writer after a sweep over learners.
struct GraphGradAccumulator {
  Eigen::MatrixXd dU;
  Eigen::MatrixXd dM;
  static GraphGradAccumulator zero(int num_kcs, int embedding_dim);
};

/// Absorbs one new interaction: builds the next-time prior, then maximizes
/// the VCL ELBO over the next-step slice starting from the prior moments.
/// With update_graph set, a graph ascent step on the expected one-step
/// transition log-likelihood is either applied to `params` directly or
/// accumulated into `graph_accum` when given.
ContinualState continual_update(const ContinualState& state, GenerativeParams& params,
                                const AdjacencyMatrix& adjacency,
                                const InteractionRecord& record,
                                const ContinualConfig& config,
                                GraphGradAccumulator* graph_accum = nullptr);

/// Multi-step performance prediction: transports the posterior through the
/// transition kernels along the future schedule without conditioning on
/// intermediate predicted outcomes, and returns E[sigmoid(z^kc)] per step.
std::vector<double> predict_horizon(const PosteriorSlice& posterior, double current_time,
                                    const GenerativeParams& params,
                                    const AdjacencyMatrix& adjacency,
                                    const Schedule& future_schedule, int mc_samples,
                                    std::uint64_t seed, const AblationFlags& ablation = {});

/// Checkpoint (theta + per-learner phi) round-trip, versioned with a schema
/// tag.
std::string checkpoint_to_json(const FitResult& fit, const std::vector<std::string>& kc_ids);
FitResult checkpoint_from_json(const std::string& json_text, std::vector<std::string>* kc_ids);

// --- raw parameter packing (shared by the optimizer, the finite-difference
// mode, and the gradient tests) ---

Eigen::VectorXd pack_theta(const GenerativeParams& params);
GenerativeParams unpack_theta(const Eigen::VectorXd& raw, int num_kcs, int embedding_dim);
Eigen::VectorXd pack_theta_grad(const ThetaGrad& grad);

Eigen::VectorXd pack_phi(const VariationalState& phi);
VariationalState unpack_phi(const Eigen::VectorXd& raw, std::size_t n_steps,
                            std::size_t n_trait_steps, int num_kcs);
Eigen::VectorXd pack_phi_grad(const PhiGrad& grad);

}  // namespace ktrace
