#include "ktrace/dynamics.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

#include "ktrace/parallel.hpp"

namespace ktrace {

using json = nlohmann::json;

void GenerativeParams::validate() const {
  for (int i = 0; i < 4; ++i) {
    if (!(r1(i) > 0.0) || !(r(i) > 0.0))
      throw std::invalid_argument("GenerativeParams: R1 and R must be strictly positive");
    if (!std::isfinite(s_bar(i)) || !std::isfinite(h(i)))
      throw std::invalid_argument("GenerativeParams: non-finite trait parameters");
  }
  if (!(w1 > 0.0)) throw std::invalid_argument("GenerativeParams: w1 must be positive");
  if (!std::isfinite(z_bar)) throw std::invalid_argument("GenerativeParams: z_bar not finite");
  if (!graph.U.allFinite() || !graph.M.allFinite())
    throw std::invalid_argument("GenerativeParams: non-finite graph parameters");
}

GenerativeParams GenerativeParams::defaults(int num_kcs, int embedding_dim) {
  GenerativeParams p;
  p.graph = PrerequisiteGraph::zero(num_kcs, embedding_dim);
  p.s_bar << std::log(1e-5), 0.0, std::log(0.1), 0.5;
  p.r1 = Eigen::Vector4d::Constant(0.25);
  p.h = Eigen::Vector4d::Ones();
  p.r = Eigen::Vector4d::Constant(1e-4);
  p.z_bar = 0.0;
  p.w1 = 1.0;
  return p;
}

double retention_ratio(double alpha, double tau) {
  if (!(alpha > 0.0))
    throw std::invalid_argument("retention_ratio: alpha must be positive");
  if (!(tau >= 0.0) || !std::isfinite(tau))
    throw std::invalid_argument("retention_ratio: tau must be finite and >= 0");
  return std::exp(-alpha * tau);
}

double ou_transition_variance(double alpha, double sigma, double tau) {
  const double x = alpha * tau;
  if (x < 1e-6) {
    // sigma^2 tau (1 - x + 2/3 x^2) avoids the 0/0 at alpha -> 0.
    return sigma * sigma * tau * (1.0 - x + (2.0 / 3.0) * x * x);
  }
  return sigma * sigma * (1.0 - std::exp(-2.0 * x)) / (2.0 * alpha);
}

TransitionMoments ou_transition_moments(const KnowledgeState& z_prev,
                                        const TraitVector& traits,
                                        const AdjacencyMatrix& adjacency,
                                        double tau) {
  if (!z_prev.z.allFinite() || !traits.raw.allFinite() || !std::isfinite(tau))
    throw std::invalid_argument("ou_transition_moments: non-finite inputs");
  if (!(tau > 0.0))
    throw std::invalid_argument("ou_transition_moments: tau must be positive");
  const double alpha = traits.alpha();
  const double sigma = traits.sigma();
  TransitionMoments out;
  out.r = retention_ratio(alpha, tau);
  out.w = ou_transition_variance(alpha, sigma, tau);
  const Eigen::VectorXd mu_tilde =
      structural_means(z_prev.z, adjacency, traits.mu(), traits.gamma());
  out.m = out.r * z_prev.z + (1.0 - out.r) * mu_tilde;
  return out;
}

GaussianDiag4 trait_transition_step(const TraitVector& s_prev,
                                    const GenerativeParams& params) {
  GaussianDiag4 g;
  g.mean = params.h.cwiseProduct(s_prev.raw);
  g.var = params.r;
  return g;
}

double emission_probability(double z_k) {
  if (!std::isfinite(z_k))
    throw std::invalid_argument("emission_probability: non-finite state");
  const double p = sigmoid(z_k);
  if (p < kProbEps) return kProbEps;
  if (p > 1.0 - kProbEps) return 1.0 - kProbEps;
  return p;
}

SimulatedCohort simulate_cohort(const GenerativeParams& params,
                                std::size_t n_learners,
                                const ScheduleGenerator& schedule,
                                std::uint64_t seed,
                                const std::vector<std::string>& kc_ids_in,
                                int threads) {
  params.validate();
  const int K = params.num_kcs();

  std::vector<std::string> kc_ids = kc_ids_in;
  if (kc_ids.empty()) {
    kc_ids.reserve(K);
    for (int k = 0; k < K; ++k) kc_ids.push_back("kc" + std::to_string(k));
  }
  if (static_cast<int>(kc_ids.size()) != K)
    throw std::invalid_argument("simulate_cohort: KC id count mismatch");

  const AdjacencyMatrix adjacency = adjacency_matrix(params.graph);

  SimulatedCohort sim;
  sim.cohort.kc_ids = kc_ids;
  for (int k = 0; k < K; ++k) sim.cohort.kc_index_of.emplace(kc_ids[k], k);
  sim.cohort.histories.resize(n_learners);
  sim.latents.resize(n_learners);

  parallel_for(n_learners, threads, [&](std::size_t li) {
    Rng rng(substream(seed, "simulate", li));
    const Schedule plan = schedule(li, rng);
    for (std::size_t n = 1; n < plan.size(); ++n)
      if (!(plan[n].second > plan[n - 1].second))
        throw std::invalid_argument("simulate_cohort: schedule times must be strictly increasing");

    const std::string learner_id = "sim" + std::to_string(li);
    InteractionHistory hist{learner_id, {}};
    LatentTrajectory lat;
    lat.learner_id = learner_id;

    Eigen::Vector4d s;
    Eigen::VectorXd z(K);
    for (std::size_t n = 0; n < plan.size(); ++n) {
      const auto [kc, t] = plan[n];
      if (kc < 0 || kc >= K)
        throw std::invalid_argument("simulate_cohort: schedule KC index out of range");
      if (n == 0) {
        for (int i = 0; i < 4; ++i)
          s(i) = params.s_bar(i) + std::sqrt(params.r1(i)) * rng.normal();
        for (int k = 0; k < K; ++k)
          z(k) = params.z_bar + std::sqrt(params.w1) * rng.normal();
        lat.retention.push_back(1.0);
        lat.transition_variance.push_back(params.w1);
      } else {
        const double tau = t - plan[n - 1].second;
        Eigen::Vector4d s_next;
        for (int i = 0; i < 4; ++i)
          s_next(i) = params.h(i) * s(i) + std::sqrt(params.r(i)) * rng.normal();
        s = s_next;
        const TransitionMoments tm = ou_transition_moments(
            KnowledgeState{z}, TraitVector::from_raw(s), adjacency, tau);
        const double sd = std::sqrt(tm.w);
        for (int k = 0; k < K; ++k) z(k) = tm.m(k) + sd * rng.normal();
        lat.retention.push_back(tm.r);
        lat.transition_variance.push_back(tm.w);
      }
      const int y = rng.bernoulli(emission_probability(z(kc)));
      hist.records.push_back({learner_id, kc_ids[kc], kc, t, y});
      lat.traits.push_back(s);
      lat.states.push_back(z);
    }
    sim.cohort.histories[li] = std::move(hist);
    sim.latents[li] = std::move(lat);
  });
  return sim;
}

ScheduleGenerator uniform_schedule(int num_kcs, std::size_t n_interactions,
                                   double mean_log_gap, double sd_log_gap) {
  return [=](std::size_t, Rng& rng) {
    Schedule plan;
    plan.reserve(n_interactions);
    double t = 0.0;
    for (std::size_t n = 0; n < n_interactions; ++n) {
      if (n > 0) t += std::exp(mean_log_gap + sd_log_gap * rng.normal());
      plan.emplace_back(static_cast<int>(rng.below(num_kcs)), t);
    }
    return plan;
  };
}

std::string latents_to_json(const SimulatedCohort& sim) {
  json j;
  j["schema"] = "ktrace-latents-v1";
  json learners = json::array();
  for (const auto& lat : sim.latents) {
    json lj;
    lj["learner_id"] = lat.learner_id;
    json traits = json::array(), states = json::array();
    for (const auto& s : lat.traits)
      traits.push_back({s(0), s(1), s(2), s(3)});
    for (const auto& z : lat.states) {
      json row = json::array();
      for (Eigen::Index k = 0; k < z.size(); ++k) row.push_back(z(k));
      states.push_back(std::move(row));
    }
    lj["traits"] = std::move(traits);
    lj["states"] = std::move(states);
    lj["retention"] = lat.retention;
    lj["transition_variance"] = lat.transition_variance;
    learners.push_back(std::move(lj));
  }
  j["learners"] = std::move(learners);
  return j.dump();
}

std::vector<LatentTrajectory> latents_from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  if (j.value("schema", "") != "ktrace-latents-v1")
    throw std::invalid_argument("latents_from_json: unknown schema tag");
  std::vector<LatentTrajectory> out;
  for (const auto& lj : j.at("learners")) {
    LatentTrajectory lat;
    lat.learner_id = lj.at("learner_id").get<std::string>();
    for (const auto& row : lj.at("traits")) {
      Eigen::Vector4d s;
      for (int i = 0; i < 4; ++i) s(i) = row[i].get<double>();
      lat.traits.push_back(s);
    }
    for (const auto& row : lj.at("states")) {
      Eigen::VectorXd z(row.size());
      for (std::size_t k = 0; k < row.size(); ++k) z(k) = row[k].get<double>();
      lat.states.push_back(std::move(z));
    }
    lat.retention = lj.at("retention").get<std::vector<double>>();
    lat.transition_variance = lj.at("transition_variance").get<std::vector<double>>();
    out.push_back(std::move(lat));
  }
  return out;
}

}  // namespace ktrace
