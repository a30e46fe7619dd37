#include "ktrace/baselines.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "ktrace/common.hpp"

namespace ktrace {

using json = nlohmann::json;

namespace {

constexpr double kSecondsPerDay = 86400.0;
constexpr double kLossClamp = 1e-6;
constexpr double kMinAgeSeconds = 1e-6;

double clamp_prob(double p) {
  if (p < kLossClamp) return kLossClamp;
  if (p > 1.0 - kLossClamp) return 1.0 - kLossClamp;
  return p;
}

}  // namespace

void KcCounters::observe(int kc, double time, int outcome) {
  auto& st = per_kc[kc];
  if (outcome)
    ++st.correct;
  else
    ++st.incorrect;
  st.last_time = time;
  st.exposure_times.push_back(time);
}

double hlr_predict(const HlrModel& model, const KcCounters& counters, int kc, double now) {
  auto it = counters.per_kc.find(kc);
  if (it == counters.per_kc.end() || it->second.total() == 0) return model.cold_start;
  const auto& st = it->second;
  const Eigen::Vector3d c(static_cast<double>(st.correct),
                          static_cast<double>(st.incorrect),
                          static_cast<double>(st.total()));
  const double half_life_days = std::exp2(model.theta.dot(c));
  const double tau_days = (now - st.last_time) / kSecondsPerDay;
  if (tau_days <= 0.0) return 1.0;
  return std::exp2(-tau_days / half_life_days);
}

std::vector<double> ppe_weights(double eta, const std::vector<double>& taus) {
  if (taus.empty()) throw std::invalid_argument("ppe_weights: no intervals");
  bool any_positive = false;
  for (double t : taus) {
    if (t < 0.0) throw std::invalid_argument("ppe_weights: negative interval");
    if (t > 0.0) any_positive = true;
  }
  if (!any_positive)
    throw std::invalid_argument("ppe_weights: all per-exposure intervals are zero");
  std::vector<double> w(taus.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < taus.size(); ++i) {
    const double t = taus[i] < kMinAgeSeconds ? kMinAgeSeconds : taus[i];
    w[i] = std::pow(t, -eta);
    norm += w[i];
  }
  for (double& wi : w) wi /= norm;
  return w;
}

double ppe_decay_alpha(const PpeModel& model, const std::vector<double>& taus) {
  if (taus.empty()) throw std::invalid_argument("ppe_decay_alpha: no intervals");
  double decay_sum = 0.0;
  for (double t : taus) decay_sum += 1.0 / std::log(t + M_E);
  return model.kappa + model.lambda * decay_sum / static_cast<double>(taus.size());
}

double ppe_activation(double count, double beta, double big_t, double alpha) {
  return std::pow(count, beta) * std::pow(big_t, -alpha);
}

double ppe_predict(const PpeModel& model, const KcCounters& counters, int kc, double now) {
  auto it = counters.per_kc.find(kc);
  if (it == counters.per_kc.end() || it->second.exposure_times.empty())
    return model.cold_start;
  const auto& st = it->second;
  const std::size_t n = st.exposure_times.size();

  // Per-exposure intervals: elapsed time from each prior exposure to now.
  std::vector<double> tau(n);
  for (std::size_t i = 0; i < n; ++i) {
    tau[i] = now - st.exposure_times[i];
    if (tau[i] < 0.0)
      throw std::invalid_argument("ppe_predict: prediction time precedes an exposure");
  }
  const std::vector<double> w = ppe_weights(model.eta, tau);
  double big_t = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    big_t += w[i] * std::max(tau[i], kMinAgeSeconds);
  const double alpha = ppe_decay_alpha(model, tau);
  const double activation = ppe_activation(static_cast<double>(n), model.beta, big_t, alpha);
  return sigmoid(model.intercept + model.slope * activation);
}

namespace {

double predict_with(const BaselineFitResult& model, const KcCounters& counters, int kc,
                    double now) {
  return model.kind == BaselineKind::kHlr ? hlr_predict(model.hlr, counters, kc, now)
                                          : ppe_predict(model.ppe, counters, kc, now);
}

double sequence_log_loss(const BaselineFitResult& model, const InteractionHistory& history) {
  KcCounters counters;
  double loss = 0.0;
  for (const auto& rec : history.records) {
    const double p = clamp_prob(predict_with(model, counters, rec.kc_index, rec.timestamp));
    loss += rec.outcome ? -std::log(p) : -std::log(1.0 - p);
    counters.observe(rec.kc_index, rec.timestamp, rec.outcome);
  }
  return loss;
}

Eigen::VectorXd get_params(const BaselineFitResult& model) {
  if (model.kind == BaselineKind::kHlr) return model.hlr.theta;
  Eigen::VectorXd p(4);
  p << model.ppe.beta, model.ppe.eta, model.ppe.kappa, model.ppe.lambda;
  return p;
}

void set_params(BaselineFitResult& model, const Eigen::VectorXd& p) {
  if (model.kind == BaselineKind::kHlr) {
    model.hlr.theta = p.head(3);
  } else {
    model.ppe.beta = p(0);
    model.ppe.eta = p(1);
    model.ppe.kappa = p(2);
    model.ppe.lambda = p(3);
  }
}

}  // namespace

double baseline_log_loss(const BaselineFitResult& model,
                         const std::vector<InteractionHistory>& histories) {
  double loss = 0.0;
  std::size_t count = 0;
  for (const auto& h : histories) {
    loss += sequence_log_loss(model, h);
    count += h.size();
  }
  if (count == 0) throw std::invalid_argument("baseline_log_loss: no interactions");
  return loss / static_cast<double>(count);
}

BaselineFitResult fit_baseline(BaselineKind kind, const SplitCohort& split,
                               const BaselineFitConfig& config) {
  if (split.train.empty()) throw std::invalid_argument("fit_baseline: empty training set");

  BaselineFitResult model;
  model.kind = kind;

  Eigen::VectorXd params = get_params(model);
  auto loss_at = [&](const Eigen::VectorXd& p) {
    BaselineFitResult trial = model;
    set_params(trial, p);
    return baseline_log_loss(trial, split.train);
  };

  double current = loss_at(params);
  if (!std::isfinite(current)) throw std::runtime_error("fit_baseline: non-finite initial loss");
  model.loss_trace.push_back(current);

  double step = config.learning_rate;
  for (int iter = 0; iter < config.max_iters; ++iter) {
    Eigen::VectorXd grad(params.size());
    for (Eigen::Index i = 0; i < params.size(); ++i) {
      Eigen::VectorXd p = params;
      p(i) = params(i) + config.fd_step;
      const double hi = loss_at(p);
      p(i) = params(i) - config.fd_step;
      const double lo = loss_at(p);
      grad(i) = (hi - lo) / (2.0 * config.fd_step);
    }
    if (!grad.allFinite()) throw std::runtime_error("fit_baseline: non-finite gradient");

    bool accepted = false;
    for (int bt = 0; bt < 30; ++bt) {
      Eigen::VectorXd cand = params - step * grad;
      for (Eigen::Index i = 0; i < cand.size(); ++i) {
        if (cand(i) > config.param_box) cand(i) = config.param_box;
        if (cand(i) < -config.param_box) cand(i) = -config.param_box;
      }
      const double value = loss_at(cand);
      if (std::isfinite(value) && value <= current) {
        params = cand;
        current = value;
        accepted = true;
        step = std::min(config.learning_rate * 4.0, step * 1.5);
        break;
      }
      step *= 0.5;
    }
    model.loss_trace.push_back(current);
    if (!accepted) break;
    if (std::isnan(current)) throw std::runtime_error("fit_baseline: loss diverged");
  }
  set_params(model, params);
  return model;
}

std::vector<double> baseline_predict_sequence(const BaselineFitResult& model,
                                              const InteractionHistory& warmup,
                                              const InteractionHistory& targets,
                                              bool teacher_forcing) {
  KcCounters counters;
  for (const auto& rec : warmup.records)
    counters.observe(rec.kc_index, rec.timestamp, rec.outcome);
  std::vector<double> probs;
  probs.reserve(targets.size());
  for (const auto& rec : targets.records) {
    const double p = predict_with(model, counters, rec.kc_index, rec.timestamp);
    probs.push_back(p);
    const int pseudo = teacher_forcing ? rec.outcome : (p >= 0.5 ? 1 : 0);
    counters.observe(rec.kc_index, rec.timestamp, pseudo);
  }
  return probs;
}

std::string baseline_to_json(const BaselineFitResult& model) {
  json j;
  j["schema"] = "ktrace-baseline-v1";
  j["kind"] = model.kind == BaselineKind::kHlr ? "hlr" : "ppe";
  if (model.kind == BaselineKind::kHlr) {
    j["theta"] = {model.hlr.theta(0), model.hlr.theta(1), model.hlr.theta(2)};
    j["cold_start"] = model.hlr.cold_start;
  } else {
    j["beta"] = model.ppe.beta;
    j["eta"] = model.ppe.eta;
    j["kappa"] = model.ppe.kappa;
    j["lambda"] = model.ppe.lambda;
    j["intercept"] = model.ppe.intercept;
    j["slope"] = model.ppe.slope;
    j["cold_start"] = model.ppe.cold_start;
  }
  j["loss_trace"] = model.loss_trace;
  return j.dump();
}

BaselineFitResult baseline_from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  if (j.value("schema", "") != "ktrace-baseline-v1")
    throw std::invalid_argument("baseline_from_json: unknown schema tag");
  BaselineFitResult model;
  if (j.at("kind") == "hlr") {
    model.kind = BaselineKind::kHlr;
    for (int i = 0; i < 3; ++i) model.hlr.theta(i) = j.at("theta")[i].get<double>();
    model.hlr.cold_start = j.at("cold_start").get<double>();
  } else {
    model.kind = BaselineKind::kPpe;
    model.ppe.beta = j.at("beta").get<double>();
    model.ppe.eta = j.at("eta").get<double>();
    model.ppe.kappa = j.at("kappa").get<double>();
    model.ppe.lambda = j.at("lambda").get<double>();
    model.ppe.intercept = j.at("intercept").get<double>();
    model.ppe.slope = j.at("slope").get<double>();
    model.ppe.cold_start = j.at("cold_start").get<double>();
  }
  model.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  return model;
}

}  // namespace ktrace
