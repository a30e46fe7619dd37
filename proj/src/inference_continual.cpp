#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "ktrace/inference.hpp"

namespace ktrace {

using json = nlohmann::json;

namespace {

constexpr double kVarFloor = 1e-12;

struct Draw {
  Eigen::Vector4d s;
  Eigen::VectorXd z;
};

Draw sample_slice(const PosteriorSlice& q, Rng& rng) {
  Draw d;
  for (int i = 0; i < 4; ++i)
    d.s(i) = q.s_mean(i) + std::exp(0.5 * q.s_logvar(i)) * rng.normal();
  d.z.resize(q.z_mean.size());
  for (Eigen::Index k = 0; k < q.z_mean.size(); ++k)
    d.z(k) = q.z_mean(k) + std::exp(0.5 * q.z_logvar(k)) * rng.normal();
  return d;
}

/// One generative step: trait kernel then OU kernel. no_dynamics keeps the
/// traits fixed; no_graph severs the structural coupling.
void push_one_step(Draw& d, const GenerativeParams& params,
                   const AdjacencyMatrix& adjacency, double tau,
                   const AblationFlags& ablation, Rng& rng) {
  if (!ablation.no_dynamics) {
    for (int i = 0; i < 4; ++i)
      d.s(i) = params.h(i) * d.s(i) + std::sqrt(params.r(i)) * rng.normal();
  }
  TraitVector traits = TraitVector::from_raw(d.s);
  if (ablation.no_graph) traits.raw(3) = 0.0;
  const TransitionMoments tm =
      ou_transition_moments(KnowledgeState{d.z}, traits, adjacency, tau);
  const double sd = std::sqrt(tm.w);
  for (Eigen::Index k = 0; k < d.z.size(); ++k) d.z(k) = tm.m(k) + sd * rng.normal();
}

}  // namespace

PushedPrior next_time_prior(const ContinualState& state, const GenerativeParams& params,
                            const AdjacencyMatrix& adjacency, double tau, int kc,
                            int mc_samples, std::uint64_t seed,
                            const AblationFlags& ablation) {
  const int K = params.num_kcs();
  if (kc < 0 || kc >= K)
    throw std::invalid_argument("next_time_prior: KC index out of range");
  if (!(tau > 0.0)) throw std::invalid_argument("next_time_prior: tau must be positive");
  if (mc_samples < 2) throw std::invalid_argument("next_time_prior: need >= 2 samples");
  if (state.q.z_mean.size() != K)
    throw std::invalid_argument("next_time_prior: state size mismatch");

  Eigen::Vector4d s_sum = Eigen::Vector4d::Zero(), s_sq = Eigen::Vector4d::Zero();
  Eigen::VectorXd z_sum = Eigen::VectorXd::Zero(K), z_sq = Eigen::VectorXd::Zero(K);
  Rng rng(substream(seed, "prior-push"));
  for (int m = 0; m < mc_samples; ++m) {
    Draw d = sample_slice(state.q, rng);
    push_one_step(d, params, adjacency, tau, ablation, rng);
    s_sum += d.s;
    s_sq += d.s.cwiseProduct(d.s);
    z_sum += d.z;
    z_sq += d.z.cwiseProduct(d.z);
  }
  const double inv = 1.0 / static_cast<double>(mc_samples);
  PushedPrior prior;
  prior.s_mean = inv * s_sum;
  prior.s_var = (inv * s_sq - prior.s_mean.cwiseProduct(prior.s_mean))
                    .cwiseMax(kVarFloor);
  prior.z_mean = inv * z_sum;
  prior.z_var = (inv * z_sq - prior.z_mean.cwiseProduct(prior.z_mean))
                    .cwiseMax(kVarFloor);
  return prior;
}

double elbo_vcl(const GenerativeParams& params, const PosteriorSlice& q_next, int kc,
                int outcome, const PushedPrior& prior, int mc_samples,
                std::uint64_t seed, PosteriorSlice* grad) {
  const int K = params.num_kcs();
  if (kc < 0 || kc >= K) throw std::invalid_argument("elbo_vcl: KC index out of range");
  if (q_next.z_mean.size() != K || prior.z_mean.size() != K)
    throw std::invalid_argument("elbo_vcl: state size mismatch");
  if (outcome != 0 && outcome != 1)
    throw std::invalid_argument("elbo_vcl: outcome must be 0 or 1");
  if (mc_samples < 1) throw std::invalid_argument("elbo_vcl: mc_samples must be >= 1");

  if (grad) {
    grad->s_mean.setZero();
    grad->s_logvar.setZero();
    grad->z_mean = Eigen::VectorXd::Zero(K);
    grad->z_logvar = Eigen::VectorXd::Zero(K);
  }

  double elbo = 0.0;
  // Entropies and Gaussian cross-entropies against the pushed prior are
  // closed form; only the emission needs sampling.
  for (int i = 0; i < 4; ++i) {
    const double var = std::exp(q_next.s_logvar(i));
    const double d = q_next.s_mean(i) - prior.s_mean(i);
    elbo += 0.5 * (1.0 + kLog2Pi + q_next.s_logvar(i));
    elbo += -0.5 * (kLog2Pi + std::log(prior.s_var(i))) -
            (var + d * d) / (2.0 * prior.s_var(i));
    if (grad) {
      grad->s_mean(i) += -d / prior.s_var(i);
      grad->s_logvar(i) += 0.5 - var / (2.0 * prior.s_var(i));
    }
  }
  for (int k = 0; k < K; ++k) {
    const double var = std::exp(q_next.z_logvar(k));
    const double d = q_next.z_mean(k) - prior.z_mean(k);
    elbo += 0.5 * (1.0 + kLog2Pi + q_next.z_logvar(k));
    elbo += -0.5 * (kLog2Pi + std::log(prior.z_var(k))) -
            (var + d * d) / (2.0 * prior.z_var(k));
    if (grad) {
      grad->z_mean(k) += -d / prior.z_var(k);
      grad->z_logvar(k) += 0.5 - var / (2.0 * prior.z_var(k));
    }
  }

  const double std_kc = std::exp(0.5 * q_next.z_logvar(kc));
  Rng rng(substream(seed, "vcl-emission"));
  const double inv = 1.0 / static_cast<double>(mc_samples);
  for (int m = 0; m < mc_samples; ++m) {
    const double zk = q_next.z_mean(kc) + std_kc * rng.normal();
    elbo += inv * bernoulli_log_prob(outcome, zk);
    if (grad) {
      const double g = static_cast<double>(outcome) - sigmoid(zk);
      grad->z_mean(kc) += inv * g;
      grad->z_logvar(kc) += inv * g * 0.5 * (zk - q_next.z_mean(kc));
    }
  }
  return elbo;
}

GraphGradAccumulator GraphGradAccumulator::zero(int num_kcs, int embedding_dim) {
  GraphGradAccumulator acc;
  acc.dU = Eigen::MatrixXd::Zero(num_kcs, embedding_dim);
  acc.dM = Eigen::MatrixXd::Zero(embedding_dim, embedding_dim);
  return acc;
}

namespace {

/// Gradient of E[log p(z_{n+1} | z_n, s_{n+1})] w.r.t. U and M, sampled under
/// the old posterior for z_n and the updated slice for (s_{n+1}, z_{n+1}).
/// This is the only VCL term through which the graph parameters act once the
/// prior has been moment-matched.
void graph_step_gradient(const PosteriorSlice& q_old, const PosteriorSlice& q_new,
                         const GenerativeParams& params, const AdjacencyMatrix& adjacency,
                         double tau, int mc_samples, std::uint64_t seed,
                         const AblationFlags& ablation, Eigen::MatrixXd* dU,
                         Eigen::MatrixXd* dM) {
  const int K = params.num_kcs();
  Eigen::MatrixXd dA = Eigen::MatrixXd::Zero(K, K);
  Rng rng(substream(seed, "vcl-graph"));
  const double inv = 1.0 / static_cast<double>(mc_samples);
  for (int m = 0; m < mc_samples; ++m) {
    Eigen::VectorXd z_prev(K), z_next(K);
    for (int k = 0; k < K; ++k)
      z_prev(k) = q_old.z_mean(k) + std::exp(0.5 * q_old.z_logvar(k)) * rng.normal();
    Eigen::Vector4d s;
    for (int i = 0; i < 4; ++i)
      s(i) = q_new.s_mean(i) + std::exp(0.5 * q_new.s_logvar(i)) * rng.normal();
    for (int k = 0; k < K; ++k)
      z_next(k) = q_new.z_mean(k) + std::exp(0.5 * q_new.z_logvar(k)) * rng.normal();

    TraitVector traits = TraitVector::from_raw(s);
    if (ablation.no_graph) traits.raw(3) = 0.0;
    const double alpha = traits.alpha();
    const double gamma = traits.gamma();
    const double r = std::exp(-alpha * tau);
    const double w = ou_transition_variance(alpha, traits.sigma(), tau);
    const Eigen::VectorXd coupling = adjacency.a.transpose() * z_prev;
    const double gk = gamma / static_cast<double>(K);
    const Eigen::VectorXd mean =
        r * z_prev + (1.0 - r) * (Eigen::VectorXd::Constant(K, traits.mu()) + gk * coupling);
    const Eigen::VectorXd delta = (z_next - mean) / w;
    dA.noalias() += (inv * (1.0 - r) * gk) * (z_prev * delta.transpose());
  }

  const Eigen::MatrixXd& U = params.graph.U;
  const Eigen::MatrixXd S = params.graph.M - params.graph.M.transpose();
  const Eigen::MatrixXd existence = U * U.transpose();
  const Eigen::MatrixXd direction = U * S * U.transpose();
  Eigen::MatrixXd GE = Eigen::MatrixXd::Zero(K, K);
  Eigen::MatrixXd GD = Eigen::MatrixXd::Zero(K, K);
  for (int i = 0; i < K; ++i)
    for (int k = 0; k < K; ++k) {
      if (i == k) continue;
      const double se = sigmoid(existence(i, k));
      const double sd = sigmoid(direction(i, k));
      GE(i, k) = dA(i, k) * se * (1.0 - se) * sd;
      GD(i, k) = dA(i, k) * se * sd * (1.0 - sd);
    }
  dU->noalias() += (GE + GE.transpose()) * U + (GD - GD.transpose()) * (S * U);
  const Eigen::MatrixXd C = U.transpose() * GD * U;
  dM->noalias() += C - C.transpose();
}

}  // namespace

ContinualState continual_update(const ContinualState& state, GenerativeParams& params,
                                const AdjacencyMatrix& adjacency,
                                const InteractionRecord& record,
                                const ContinualConfig& config,
                                GraphGradAccumulator* graph_accum) {
  const int K = params.num_kcs();
  const int kc = record.kc_index;
  if (kc < 0 || kc >= K)
    throw std::invalid_argument("continual_update: KC '" + record.kc_id +
                                "' not in the frozen vocabulary");
  if (record.timestamp < state.last_time)
    throw std::invalid_argument("continual_update: timestamps must be non-decreasing");
  const IntervalPolicy policy{config.min_interval_seconds};
  const double tau = policy.apply(record.timestamp - state.last_time);

  const std::uint64_t step_seed =
      substream(config.seed, "continual", state.step ^ hash_name(state.learner_id));
  const PushedPrior prior = next_time_prior(state, params, adjacency, tau, kc,
                                            config.prior_samples, step_seed,
                                            config.ablation);

  // Initialize the next slice at the prior moments; zero optimizer steps keep
  // it there.
  PosteriorSlice q;
  q.s_mean = prior.s_mean;
  q.s_logvar = prior.s_var.array().log();
  q.z_mean = prior.z_mean;
  q.z_logvar = prior.z_var.array().log();

  // Plain gradient ascent with backtracking; the slice is small enough that
  // Adam machinery buys nothing here.
  double current = elbo_vcl(params, q, kc, record.outcome, prior, config.mc_samples,
                            step_seed, nullptr);
  double scale = 1.0;
  for (int it = 0; it < config.max_steps; ++it) {
    PosteriorSlice g;
    elbo_vcl(params, q, kc, record.outcome, prior, config.mc_samples, step_seed, &g);
    Eigen::VectorXd flat(8 + 2 * K);
    flat << g.s_mean, g.s_logvar, g.z_mean, g.z_logvar;
    const double norm = flat.norm();
    if (norm > config.grad_clip && norm > 0.0) flat *= config.grad_clip / norm;
    bool accepted = false;
    for (int bt = 0; bt < 20; ++bt) {
      PosteriorSlice cand = q;
      const double lr = config.learning_rate * scale;
      cand.s_mean += lr * flat.segment(0, 4);
      cand.s_logvar += lr * flat.segment(4, 4);
      cand.z_mean += lr * flat.segment(8, K);
      cand.z_logvar += lr * flat.segment(8 + K, K);
      const double value = elbo_vcl(params, cand, kc, record.outcome, prior,
                                    config.mc_samples, step_seed, nullptr);
      if (std::isfinite(value) && value >= current - 1e-12 * (1.0 + std::fabs(current))) {
        q = cand;
        current = value;
        accepted = true;
        scale = std::min(1.0, scale * 1.3);
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) break;
  }

  if (config.update_graph && !config.ablation.no_graph) {
    Eigen::MatrixXd dU = Eigen::MatrixXd::Zero(K, params.graph.embedding_dim());
    Eigen::MatrixXd dM =
        Eigen::MatrixXd::Zero(params.graph.embedding_dim(), params.graph.embedding_dim());
    graph_step_gradient(state.q, q, params, adjacency, tau, config.mc_samples, step_seed,
                        config.ablation, &dU, &dM);
    if (graph_accum) {
      graph_accum->dU += dU;
      graph_accum->dM += dM;
    } else {
      params.graph.U += config.graph_learning_rate * dU;
      params.graph.M += config.graph_learning_rate * dM;
    }
  }

  ContinualState next;
  next.q = std::move(q);
  next.step = state.step + 1;
  next.last_time = record.timestamp;
  next.learner_id = state.learner_id;
  return next;
}

std::vector<double> predict_horizon(const PosteriorSlice& posterior, double current_time,
                                    const GenerativeParams& params,
                                    const AdjacencyMatrix& adjacency,
                                    const Schedule& future_schedule, int mc_samples,
                                    std::uint64_t seed, const AblationFlags& ablation) {
  if (future_schedule.empty()) return {};
  const int K = params.num_kcs();
  if (posterior.z_mean.size() != K)
    throw std::invalid_argument("predict_horizon: posterior size mismatch");
  double prev = current_time;
  for (const auto& [kc, t] : future_schedule) {
    if (kc < 0 || kc >= K)
      throw std::invalid_argument("predict_horizon: KC index out of range");
    if (!(t > prev))
      throw std::invalid_argument(
          "predict_horizon: schedule times must be strictly increasing and in the future");
    prev = t;
  }
  if (mc_samples < 1) throw std::invalid_argument("predict_horizon: mc_samples must be >= 1");

  const IntervalPolicy policy{};
  std::vector<double> probs(future_schedule.size(), 0.0);
  Rng rng(substream(seed, "predict"));
  const double inv = 1.0 / static_cast<double>(mc_samples);
  for (int m = 0; m < mc_samples; ++m) {
    Draw d = sample_slice(posterior, rng);
    double t_prev = current_time;
    for (std::size_t j = 0; j < future_schedule.size(); ++j) {
      const auto& [kc, t] = future_schedule[j];
      push_one_step(d, params, adjacency, policy.apply(t - t_prev), ablation, rng);
      probs[j] += inv * emission_probability(d.z(kc));
      t_prev = t;
    }
  }
  return probs;
}

// --- checkpoint --------------------------------------------------------------

namespace {

json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json vec4_to_json(const Eigen::Vector4d& v) {
  return json::array({v(0), v(1), v(2), v(3)});
}

Eigen::VectorXd vec_from_json(const json& a) {
  Eigen::VectorXd v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(i) = a[i].get<double>();
  return v;
}

Eigen::Vector4d vec4_from_json(const json& a) {
  Eigen::Vector4d v;
  for (int i = 0; i < 4; ++i) v(i) = a[i].get<double>();
  return v;
}

json mat_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd mat_from_json(const json& rows) {
  const Eigen::Index nr = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index nc = nr > 0 ? static_cast<Eigen::Index>(rows[0].size()) : 0;
  Eigen::MatrixXd m(nr, nc);
  for (Eigen::Index r = 0; r < nr; ++r)
    for (Eigen::Index c = 0; c < nc; ++c) m(r, c) = rows[r][c].get<double>();
  return m;
}

}  // namespace

std::string checkpoint_to_json(const FitResult& fit, const std::vector<std::string>& kc_ids) {
  json j;
  j["schema"] = "ktrace-checkpoint-v1";
  j["kc_ids"] = kc_ids;
  json theta;
  theta["U"] = mat_to_json(fit.params.graph.U);
  theta["M"] = mat_to_json(fit.params.graph.M);
  theta["s_bar"] = vec4_to_json(fit.params.s_bar);
  theta["r1"] = vec4_to_json(fit.params.r1);
  theta["h"] = vec4_to_json(fit.params.h);
  theta["r"] = vec4_to_json(fit.params.r);
  theta["z_bar"] = fit.params.z_bar;
  theta["w1"] = fit.params.w1;
  j["theta"] = std::move(theta);
  j["ablation"] = {{"no_graph", fit.ablation.no_graph},
                   {"no_individual", fit.ablation.no_individual},
                   {"no_dynamics", fit.ablation.no_dynamics}};
  j["elbo_trace"] = fit.elbo_trace;
  json learners = json::array();
  for (std::size_t l = 0; l < fit.phi.size(); ++l) {
    json lj;
    lj["learner_id"] = fit.learner_ids[l];
    json sm = json::array(), sv = json::array(), zm = json::array(), zv = json::array();
    for (const auto& v : fit.phi[l].s_mean) sm.push_back(vec4_to_json(v));
    for (const auto& v : fit.phi[l].s_logvar) sv.push_back(vec4_to_json(v));
    for (const auto& v : fit.phi[l].z_mean) zm.push_back(vec_to_json(v));
    for (const auto& v : fit.phi[l].z_logvar) zv.push_back(vec_to_json(v));
    lj["s_mean"] = std::move(sm);
    lj["s_logvar"] = std::move(sv);
    lj["z_mean"] = std::move(zm);
    lj["z_logvar"] = std::move(zv);
    lj["kcs"] = fit.train_data[l].kcs;
    lj["ys"] = fit.train_data[l].ys;
    lj["taus"] = fit.train_data[l].taus;
    lj["last_time"] = fit.train_data[l].last_time;
    learners.push_back(std::move(lj));
  }
  j["learners"] = std::move(learners);
  return j.dump();
}

FitResult checkpoint_from_json(const std::string& json_text,
                               std::vector<std::string>* kc_ids) {
  const json j = json::parse(json_text);
  if (j.value("schema", "") != "ktrace-checkpoint-v1")
    throw std::invalid_argument("checkpoint_from_json: unknown schema tag");
  FitResult fit;
  const json& theta = j.at("theta");
  fit.params.graph.U = mat_from_json(theta.at("U"));
  fit.params.graph.M = mat_from_json(theta.at("M"));
  fit.params.s_bar = vec4_from_json(theta.at("s_bar"));
  fit.params.r1 = vec4_from_json(theta.at("r1"));
  fit.params.h = vec4_from_json(theta.at("h"));
  fit.params.r = vec4_from_json(theta.at("r"));
  fit.params.z_bar = theta.at("z_bar").get<double>();
  fit.params.w1 = theta.at("w1").get<double>();
  fit.params.validate();
  const json& abl = j.at("ablation");
  fit.ablation.no_graph = abl.at("no_graph").get<bool>();
  fit.ablation.no_individual = abl.at("no_individual").get<bool>();
  fit.ablation.no_dynamics = abl.at("no_dynamics").get<bool>();
  fit.elbo_trace = j.at("elbo_trace").get<std::vector<double>>();
  for (const auto& lj : j.at("learners")) {
    VariationalState phi;
    for (const auto& v : lj.at("s_mean")) phi.s_mean.push_back(vec4_from_json(v));
    for (const auto& v : lj.at("s_logvar")) phi.s_logvar.push_back(vec4_from_json(v));
    for (const auto& v : lj.at("z_mean")) phi.z_mean.push_back(vec_from_json(v));
    for (const auto& v : lj.at("z_logvar")) phi.z_logvar.push_back(vec_from_json(v));
    fit.phi.push_back(std::move(phi));
    fit.learner_ids.push_back(lj.at("learner_id").get<std::string>());
    LearnerData data;
    data.learner_id = fit.learner_ids.back();
    data.kcs = lj.at("kcs").get<std::vector<int>>();
    data.ys = lj.at("ys").get<std::vector<int>>();
    data.taus = lj.at("taus").get<std::vector<double>>();
    data.last_time = lj.at("last_time").get<double>();
    fit.train_data.push_back(std::move(data));
  }
  if (kc_ids) *kc_ids = j.at("kc_ids").get<std::vector<std::string>>();
  return fit;
}

}  // namespace ktrace
