#include <cmath>
#include <stdexcept>

#include "ktrace/inference.hpp"
#include "ktrace/parallel.hpp"

namespace ktrace {

namespace {

constexpr double kAcceptSlack = 1e-9;  // per-step monotonicity slack (relative)
constexpr int kMaxBacktracks = 24;

void clip_to_norm(Eigen::VectorXd& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm && norm > 0.0) grad *= max_norm / norm;
}

/// Adam with decoupled proposal/commit so rejected steps leave the moment
/// estimates untouched.
struct AdamState {
  Eigen::VectorXd m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void init(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }

  /// Ascent direction for `grad`; call commit() once the step is accepted.
  Eigen::VectorXd propose(const Eigen::VectorXd& grad) {
    pending_m = beta1 * m + (1.0 - beta1) * grad;
    pending_v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const long t1 = t + 1;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t1));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t1));
    Eigen::VectorXd dir(grad.size());
    for (Eigen::Index i = 0; i < grad.size(); ++i)
      dir(i) = (pending_m(i) / c1) / (std::sqrt(pending_v(i) / c2) + eps);
    return dir;
  }

  void commit() {
    m = pending_m;
    v = pending_v;
    ++t;
  }

 private:
  Eigen::VectorXd pending_m, pending_v;
};

double accept_threshold(double current) {
  return current - kAcceptSlack * (1.0 + std::fabs(current));
}

Eigen::VectorXd finite_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                  const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd p = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = p(i);
    p(i) = orig + h;
    const double hi = f(p);
    p(i) = orig - h;
    const double lo = f(p);
    p(i) = orig;
    g(i) = (hi - lo) / (2.0 * h);
  }
  return g;
}

}  // namespace

void FitConfig::validate() const {
  if (mc_samples < 1) throw std::invalid_argument("FitConfig: mc_samples must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("FitConfig: learning_rate must be positive");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("FitConfig: grad_clip must be positive");
  if (max_epochs < 0) throw std::invalid_argument("FitConfig: max_epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("FitConfig: batch_size must be >= 1");
}

FitResult fit_variational_em(const SplitCohort& split, const FitConfig& config,
                             const GenerativeParams* warm_start) {
  config.validate();
  const std::size_t L = split.train.size();
  if (L == 0) throw std::invalid_argument("fit_variational_em: empty cohort");
  const int K = split.num_kcs();
  const bool no_dynamics = config.ablation.no_dynamics;
  const bool no_individual = config.ablation.no_individual;
  const bool fd_mode = config.gradient_mode == GradientMode::kFiniteDifference;
  const double fd_h = 1e-5;

  // Compact training data; every training history must be non-empty.
  std::vector<LearnerData> data;
  data.reserve(L);
  for (const auto& h : split.train)
    data.push_back(LearnerData::from_history(h, config.min_interval_seconds));
  if (no_individual) {
    for (const auto& d : data)
      if (d.size() != data[0].size())
        throw std::invalid_argument(
            "fit_variational_em: no_individual requires equal history lengths");
  }

  // Theta init: dynamics defaults plus small random KC embeddings.
  GenerativeParams theta;
  if (warm_start) {
    theta = *warm_start;
    theta.validate();
    if (theta.num_kcs() != K)
      throw std::invalid_argument("fit_variational_em: warm start KC count mismatch");
  } else {
    const int D = 16;
    theta = GenerativeParams::defaults(K, D);
    Rng rng(substream(config.seed, "init"));
    const double u_sd = std::sqrt(0.1 / std::sqrt(static_cast<double>(D)));
    const double m_sd = std::sqrt(0.1 / static_cast<double>(D));
    for (int i = 0; i < K; ++i)
      for (int d = 0; d < D; ++d) theta.graph.U(i, d) = u_sd * rng.normal();
    for (int i = 0; i < D; ++i)
      for (int d = 0; d < D; ++d) theta.graph.M(i, d) = m_sd * rng.normal();
  }
  const int D = theta.graph.embedding_dim();

  std::vector<VariationalState> phi(L);
  for (std::size_t l = 0; l < L; ++l)
    phi[l] = VariationalState::initial(theta, data[l].size(), config.init_logvar,
                                       no_dynamics);

  std::vector<std::uint64_t> noise_keys(L);
  for (std::size_t l = 0; l < L; ++l) noise_keys[l] = substream(config.seed, "mc", l);

  const std::size_t n_trait = no_dynamics ? 1 : 0;  // 0 = per-step
  auto trait_steps = [&](std::size_t l) { return no_dynamics ? 1 : data[l].size(); };
  const Eigen::Index s_block = no_dynamics ? 8 : 0;  // filled per learner below

  // Per-learner Adam over the packed phi vector; in no_individual mode the
  // trait block is owned by a separate shared optimizer.
  std::vector<AdamState> phi_adam(L);
  std::vector<double> phi_scale(L, 1.0);
  for (std::size_t l = 0; l < L; ++l)
    phi_adam[l].init(static_cast<Eigen::Index>(pack_phi(phi[l]).size()));

  AdamState shared_s_adam;
  double shared_s_scale = 1.0;
  if (no_individual) shared_s_adam.init(static_cast<Eigen::Index>(8 * trait_steps(0)));

  AdamState theta_adam;
  double theta_scale = 1.0;
  theta_adam.init(pack_theta(theta).size());

  (void)n_trait;
  (void)s_block;

  AdjacencyMatrix adjacency = adjacency_matrix(theta.graph);

  auto learner_elbo = [&](std::size_t l, const GenerativeParams& th,
                          const AdjacencyMatrix& adj, const VariationalState& ph,
                          PhiGrad* pg, ThetaGrad* tg) {
    return elbo_full_grad(th, adj, ph, data[l], config.mc_samples, noise_keys[l],
                          config.ablation, pg, tg);
  };

  // Finite-difference fallbacks reuse the value path only.
  auto phi_grad_of = [&](std::size_t l, const VariationalState& ph, PhiGrad* pg,
                         ThetaGrad* tg) -> double {
    if (!fd_mode) return learner_elbo(l, theta, adjacency, ph, pg, tg);
    const double value = learner_elbo(l, theta, adjacency, ph, nullptr, tg);
    if (pg) {
      const Eigen::VectorXd at = pack_phi(ph);
      const std::size_t ns = trait_steps(l);
      const Eigen::VectorXd g = finite_difference(
          [&](const Eigen::VectorXd& x) {
            return learner_elbo(l, theta, adjacency,
                                unpack_phi(x, data[l].size(), ns, K), nullptr, nullptr);
          },
          at, fd_h);
      *pg = PhiGrad{};
      const VariationalState gs = unpack_phi(g, data[l].size(), ns, K);
      pg->s_mean = gs.s_mean;
      pg->s_logvar = gs.s_logvar;
      pg->z_mean = gs.z_mean;
      pg->z_logvar = gs.z_logvar;
    }
    return value;
  };

  FitResult result;
  result.ablation = config.ablation;
  result.learner_ids.reserve(L);
  for (const auto& d : data) result.learner_ids.push_back(d.learner_id);

  std::vector<double> elbo_now(L, 0.0);
  std::vector<PhiGrad> grads(L);
  std::vector<ThetaGrad> theta_grads(L, ThetaGrad::zero(K, D));

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    // --- phi sweep -----------------------------------------------------
    parallel_for(L, config.threads, [&](std::size_t l) {
      PhiGrad pg;
      const double base = phi_grad_of(l, phi[l], &pg, nullptr);
      if (!std::isfinite(base))
        throw std::runtime_error("fit_variational_em: non-finite ELBO at epoch " +
                                 std::to_string(epoch));
      Eigen::VectorXd grad = pack_phi_grad(pg);
      if (no_individual) grad.head(8 * trait_steps(l)).setZero();
      clip_to_norm(grad, config.grad_clip);
      const Eigen::VectorXd dir = phi_adam[l].propose(grad);
      const Eigen::VectorXd at = pack_phi(phi[l]);
      double scale = phi_scale[l];
      bool accepted = false;
      VariationalState candidate;
      double cand_value = base;
      for (int bt = 0; bt < kMaxBacktracks; ++bt) {
        candidate = unpack_phi(at + config.learning_rate * scale * dir, data[l].size(),
                               trait_steps(l), K);
        cand_value = phi_grad_of(l, candidate, nullptr, nullptr);
        if (std::isfinite(cand_value) && cand_value >= accept_threshold(base)) {
          accepted = true;
          break;
        }
        scale *= 0.5;
      }
      if (accepted) {
        phi[l] = std::move(candidate);
        phi_adam[l].commit();
        elbo_now[l] = cand_value;
        phi_scale[l] = std::min(1.0, scale * 1.5);
      } else {
        elbo_now[l] = base;
        phi_scale[l] = scale;
      }
    });

    // --- shared trait posterior (no_individual ablation) ----------------
    if (no_individual) {
      const std::size_t ns = trait_steps(0);
      parallel_for(L, config.threads, [&](std::size_t l) {
        elbo_now[l] = phi_grad_of(l, phi[l], &grads[l], nullptr);
      });
      Eigen::VectorXd s_grad = Eigen::VectorXd::Zero(8 * ns);
      for (std::size_t l = 0; l < L; ++l) {
        PhiGrad tmp = grads[l];
        tmp.z_mean.assign(data[l].size(), Eigen::VectorXd::Zero(K));
        tmp.z_logvar.assign(data[l].size(), Eigen::VectorXd::Zero(K));
        s_grad += pack_phi_grad(tmp).head(8 * ns);
      }
      clip_to_norm(s_grad, config.grad_clip);
      const Eigen::VectorXd dir = shared_s_adam.propose(s_grad);
      double total_base = 0.0;
      for (double e : elbo_now) total_base += e;
      Eigen::VectorXd at(8 * ns);
      {
        Eigen::Index p = 0;
        for (std::size_t j = 0; j < ns; ++j)
          for (int i = 0; i < 4; ++i) at(p++) = phi[0].s_mean[j](i);
        for (std::size_t j = 0; j < ns; ++j)
          for (int i = 0; i < 4; ++i) at(p++) = phi[0].s_logvar[j](i);
      }
      double scale = shared_s_scale;
      bool accepted = false;
      std::vector<double> cand_elbo(L);
      for (int bt = 0; bt < kMaxBacktracks; ++bt) {
        const Eigen::VectorXd cand = at + config.learning_rate * scale * dir;
        std::vector<VariationalState> trial = phi;
        for (std::size_t l = 0; l < L; ++l) {
          Eigen::Index p = 0;
          for (std::size_t j = 0; j < ns; ++j)
            for (int i = 0; i < 4; ++i) trial[l].s_mean[j](i) = cand(p++);
          for (std::size_t j = 0; j < ns; ++j)
            for (int i = 0; i < 4; ++i) trial[l].s_logvar[j](i) = cand(p++);
        }
        double total = 0.0;
        parallel_for(L, config.threads, [&](std::size_t l) {
          cand_elbo[l] = phi_grad_of(l, trial[l], nullptr, nullptr);
        });
        for (double e : cand_elbo) total += e;
        if (std::isfinite(total) && total >= accept_threshold(total_base)) {
          phi = std::move(trial);
          elbo_now = cand_elbo;
          accepted = true;
          break;
        }
        scale *= 0.5;
      }
      if (accepted) {
        shared_s_adam.commit();
        shared_s_scale = std::min(1.0, scale * 1.5);
      } else {
        shared_s_scale = scale;
      }
    }

    // --- theta step ------------------------------------------------------
    if (config.learn_theta) {
      parallel_for(L, config.threads, [&](std::size_t l) {
        theta_grads[l] = ThetaGrad::zero(K, D);
        elbo_now[l] = learner_elbo(l, theta, adjacency, phi[l],
                                   nullptr, &theta_grads[l]);
      });
      double total_base = 0.0;
      for (double e : elbo_now) total_base += e;

      Eigen::VectorXd grad;
      if (fd_mode) {
        const Eigen::VectorXd at = pack_theta(theta);
        grad = finite_difference(
            [&](const Eigen::VectorXd& x) {
              const GenerativeParams th = unpack_theta(x, K, D);
              const AdjacencyMatrix adj = adjacency_matrix(th.graph);
              double total = 0.0;
              for (std::size_t l = 0; l < L; ++l)
                total += learner_elbo(l, th, adj, phi[l], nullptr, nullptr);
              return total;
            },
            at, fd_h);
      } else {
        grad = Eigen::VectorXd::Zero(pack_theta(theta).size());
        for (std::size_t l = 0; l < L; ++l) grad += pack_theta_grad(theta_grads[l]);
      }
      clip_to_norm(grad, config.grad_clip);
      const Eigen::VectorXd dir = theta_adam.propose(grad);
      const Eigen::VectorXd at = pack_theta(theta);
      double scale = theta_scale;
      bool accepted = false;
      std::vector<double> cand_elbo(L);
      for (int bt = 0; bt < kMaxBacktracks; ++bt) {
        const GenerativeParams cand_theta =
            unpack_theta(at + config.learning_rate * scale * dir, K, D);
        const AdjacencyMatrix cand_adj = adjacency_matrix(cand_theta.graph);
        double total = 0.0;
        parallel_for(L, config.threads, [&](std::size_t l) {
          cand_elbo[l] = learner_elbo(l, cand_theta, cand_adj, phi[l], nullptr, nullptr);
        });
        for (double e : cand_elbo) total += e;
        if (std::isfinite(total) && total >= accept_threshold(total_base)) {
          theta = cand_theta;
          adjacency = cand_adj;
          elbo_now = cand_elbo;
          accepted = true;
          break;
        }
        scale *= 0.5;
      }
      if (accepted) {
        theta_adam.commit();
        theta_scale = std::min(1.0, scale * 1.5);
      } else {
        theta_scale = scale;
      }
    }

    double total = 0.0;
    for (double e : elbo_now) total += e;
    if (!std::isfinite(total))
      throw std::runtime_error("fit_variational_em: non-finite ELBO at epoch " +
                               std::to_string(epoch));
    result.elbo_trace.push_back(total);
  }

  result.params = std::move(theta);
  result.phi = std::move(phi);
  result.train_data = std::move(data);
  return result;
}

PosteriorSlice last_slice(const VariationalState& phi) {
  if (phi.z_mean.empty()) throw std::invalid_argument("last_slice: empty state");
  PosteriorSlice slice;
  slice.s_mean = phi.s_mean.back();
  slice.s_logvar = phi.s_logvar.back();
  slice.z_mean = phi.z_mean.back();
  slice.z_logvar = phi.z_logvar.back();
  return slice;
}

}  // namespace ktrace
