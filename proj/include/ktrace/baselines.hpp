#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ktrace/data.hpp"

namespace ktrace {

/// Half-life regression: recall probability 2^(-tau/h) with memory half-life
/// h = 2^(theta . counts), counts = (correct, incorrect, total). Intervals
/// and half-lives are measured in days.
struct HlrModel {
  Eigen::Vector3d theta = Eigen::Vector3d::Zero();
  double cold_start = 0.5;
};

/// Predictive performance equation: activation m = c^beta * T^(-alpha) with a
/// recency-weighted interval average T and spacing-dependent decay
/// alpha = kappa + lambda * mean_j 1/ln(tau_j + e). Intervals in seconds.
/// Performance is a logistic function of m with configurable intercept/slope.
struct PpeModel {
  double beta = 0.1;
  double eta = 0.5;
  double kappa = 0.1;
  double lambda = 0.1;
  double intercept = 0.0;
  double slope = 1.0;
  double cold_start = 0.5;
};

/// Per-learner per-KC running counters shared by both baselines: outcome
/// counts, the last interaction time, and the full list of exposure times
/// from which per-exposure intervals tau_i = now - t_i derive.
struct KcCounters {
  struct KcState {
    int correct = 0;
    int incorrect = 0;
    double last_time = 0.0;
    std::vector<double> exposure_times;
    int total() const { return correct + incorrect; }
  };
  std::map<int, KcState> per_kc;

  bool seen(int kc) const { return per_kc.count(kc) > 0; }
  void observe(int kc, double time, int outcome);
};

/// HLR recall probability for `kc` at time `now`; cold start for unseen KCs.
double hlr_predict(const HlrModel& model, const KcCounters& counters, int kc, double now);

/// PPE recall probability for `kc` at time `now`; cold start for unseen KCs.
/// All-zero per-exposure intervals are an error (weights undefined).
double ppe_predict(const PpeModel& model, const KcCounters& counters, int kc, double now);

/// Normalized recency weights w_i = tau_i^-eta / sum_j tau_j^-eta. Throws
/// when every interval is zero; isolated zeros are clamped to a tiny age.
std::vector<double> ppe_weights(double eta, const std::vector<double>& taus);

/// Spacing-dependent decay kappa + lambda * mean_j 1/ln(tau_j + e); exact at
/// tau_j = 0 where ln(e) = 1.
double ppe_decay_alpha(const PpeModel& model, const std::vector<double>& taus);

/// Power-law activation c^beta * T^-alpha.
double ppe_activation(double count, double beta, double big_t, double alpha);

enum class BaselineKind { kHlr, kPpe };

struct BaselineFitConfig {
  int max_iters = 300;
  double learning_rate = 0.5;
  double fd_step = 1e-5;
  std::uint64_t seed = 0;
  double param_box = 10.0;  // parameters are kept inside [-box, box]
};

struct BaselineFitResult {
  HlrModel hlr;
  PpeModel ppe;
  BaselineKind kind = BaselineKind::kHlr;
  std::vector<double> loss_trace;  // mean training log-loss per accepted iter
};

/// Fits the chosen baseline by minimizing mean binary log-loss over the
/// training interactions with finite-difference gradient descent (3-4
/// parameters). Deterministic under fixed seed.
BaselineFitResult fit_baseline(BaselineKind kind, const SplitCohort& split,
                               const BaselineFitConfig& config = {});

/// Sequential predictions over one learner's records. Counters advance with
/// the true outcome when `teacher_forcing` is set (training-style evaluation)
/// and with the thresholded prediction otherwise (multi-step protocol).
std::vector<double> baseline_predict_sequence(const BaselineFitResult& model,
                                              const InteractionHistory& warmup,
                                              const InteractionHistory& targets,
                                              bool teacher_forcing = false);

/// Mean binary log-loss of a fitted baseline over a cohort (teacher forcing).
double baseline_log_loss(const BaselineFitResult& model,
                         const std::vector<InteractionHistory>& histories);

std::string baseline_to_json(const BaselineFitResult& model);
BaselineFitResult baseline_from_json(const std::string& json_text);

}  // namespace ktrace
