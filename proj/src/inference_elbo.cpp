#include <cmath>
#include <stdexcept>

#include "ktrace/inference.hpp"

namespace ktrace {

namespace {

// Noise stream for (sample m, step n, block b). Fresh per scalar block so the
// same indices reproduce the same draws across epochs (common random numbers).
inline Rng noise_stream(std::uint64_t key, int m, std::size_t n, int block) {
  std::uint64_t s = key;
  s = splitmix64(s) ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(m) + 1));
  s = splitmix64(s) ^ (0xc2b2ae3d27d4eb4fULL * (static_cast<std::uint64_t>(n) + 1));
  s = splitmix64(s) ^ (0x165667b19e3779f9ULL * (static_cast<std::uint64_t>(block) + 1));
  return Rng(splitmix64(s));
}

// d/dalpha of sigma^2 (1 - e^{-2 alpha tau}) / (2 alpha), matching the value
// branches of ou_transition_variance.
inline double ou_variance_dalpha(double alpha, double sigma, double tau) {
  const double x = alpha * tau;
  const double s2 = sigma * sigma;
  if (x < 1e-6) return s2 * tau * tau * (-1.0 + (4.0 / 3.0) * x);
  const double e = std::exp(-2.0 * x);
  return s2 * (tau * e / alpha - (1.0 - e) / (2.0 * alpha * alpha));
}

}  // namespace

void VariationalState::validate(int num_kcs) const {
  if (s_mean.size() != s_logvar.size() || z_mean.size() != z_logvar.size())
    throw std::invalid_argument("VariationalState: mismatched block counts");
  if (s_mean.empty() || z_mean.empty())
    throw std::invalid_argument("VariationalState: empty state");
  for (const auto& z : z_mean)
    if (z.size() != num_kcs)
      throw std::invalid_argument("VariationalState: z block size mismatch");
  for (const auto& lv : z_logvar)
    if (!lv.allFinite())
      throw std::invalid_argument("VariationalState: non-finite z logvar");
  for (const auto& lv : s_logvar)
    if (!lv.allFinite())
      throw std::invalid_argument("VariationalState: non-finite s logvar");
}

VariationalState VariationalState::initial(const GenerativeParams& params,
                                           std::size_t n_steps, double init_logvar,
                                           bool no_dynamics) {
  const int K = params.num_kcs();
  VariationalState phi;
  const std::size_t n_trait_steps = no_dynamics ? 1 : n_steps;
  phi.s_mean.assign(n_trait_steps, params.s_bar);
  phi.s_logvar.assign(n_trait_steps, Eigen::Vector4d::Constant(init_logvar));
  phi.z_mean.assign(n_steps, Eigen::VectorXd::Constant(K, params.z_bar));
  phi.z_logvar.assign(n_steps, Eigen::VectorXd::Constant(K, init_logvar));
  return phi;
}

LearnerData LearnerData::from_history(const InteractionHistory& history,
                                      double min_interval_seconds) {
  if (history.records.empty())
    throw std::invalid_argument("LearnerData: empty history");
  const IntervalPolicy policy{min_interval_seconds};
  LearnerData data;
  data.learner_id = history.learner_id;
  data.kcs.reserve(history.size());
  data.ys.reserve(history.size());
  data.taus.reserve(history.size());
  for (std::size_t n = 0; n < history.size(); ++n) {
    const auto& rec = history.records[n];
    if (rec.kc_index < 0)
      throw std::invalid_argument("LearnerData: record without KC index");
    data.kcs.push_back(rec.kc_index);
    data.ys.push_back(rec.outcome);
    data.taus.push_back(n == 0 ? 0.0 : policy.apply(history.interval(n)));
  }
  data.last_time = history.records.back().timestamp;
  return data;
}

ThetaGrad ThetaGrad::zero(int num_kcs, int embedding_dim) {
  ThetaGrad g;
  g.U = Eigen::MatrixXd::Zero(num_kcs, embedding_dim);
  g.M = Eigen::MatrixXd::Zero(embedding_dim, embedding_dim);
  return g;
}

double elbo_full_grad(const GenerativeParams& params, const AdjacencyMatrix& adjacency,
                      const VariationalState& phi, const LearnerData& data,
                      int mc_samples, std::uint64_t noise_key,
                      const AblationFlags& ablation, PhiGrad* phi_grad,
                      ThetaGrad* theta_grad) {
  const int K = params.num_kcs();
  const std::size_t N = data.size();
  if (N == 0) throw std::invalid_argument("elbo_full: empty history");
  if (phi.num_steps() != N)
    throw std::invalid_argument("elbo_full: variational state covers " +
                                std::to_string(phi.num_steps()) + " steps, history has " +
                                std::to_string(N));
  phi.validate(K);
  if (mc_samples < 1) throw std::invalid_argument("elbo_full: mc_samples must be >= 1");
  const std::size_t Ns = phi.s_mean.size();
  const bool no_dynamics = ablation.no_dynamics;
  if (no_dynamics && Ns != 1)
    throw std::invalid_argument("elbo_full: no_dynamics expects a single trait block");
  if (!no_dynamics && Ns != N)
    throw std::invalid_argument("elbo_full: trait blocks must match history length");

  const bool want_phi = phi_grad != nullptr;
  const bool want_theta = theta_grad != nullptr;
  if (want_phi) {
    phi_grad->s_mean.assign(Ns, Eigen::Vector4d::Zero());
    phi_grad->s_logvar.assign(Ns, Eigen::Vector4d::Zero());
    phi_grad->z_mean.assign(N, Eigen::VectorXd::Zero(K));
    phi_grad->z_logvar.assign(N, Eigen::VectorXd::Zero(K));
  }
  if (want_theta) *theta_grad = ThetaGrad::zero(K, params.graph.embedding_dim());

  // Graph gradient is accumulated as dELBO/dA and backpropagated through the
  // edge factorization once at the end.
  Eigen::MatrixXd dA;
  const bool graph_active = !ablation.no_graph;
  if (want_theta && graph_active) dA = Eigen::MatrixXd::Zero(K, K);

  const double inv_m = 1.0 / static_cast<double>(mc_samples);

  // Closed-form Gaussian entropies.
  double elbo = 0.0;
  for (std::size_t j = 0; j < Ns; ++j)
    for (int i = 0; i < 4; ++i) elbo += 0.5 * (1.0 + kLog2Pi + phi.s_logvar[j](i));
  for (std::size_t n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) elbo += 0.5 * (1.0 + kLog2Pi + phi.z_logvar[n](k));
  if (want_phi) {
    for (std::size_t j = 0; j < Ns; ++j) phi_grad->s_logvar[j].array() += 0.5;
    for (std::size_t n = 0; n < N; ++n) phi_grad->z_logvar[n].array() += 0.5;
  }

  std::vector<Eigen::Vector4d> s(Ns), s_std(Ns), gs(Ns);
  std::vector<Eigen::VectorXd> z(N), z_std(N), gz(N);
  for (std::size_t j = 0; j < Ns; ++j)
    s_std[j] = (0.5 * phi.s_logvar[j]).array().exp();
  for (std::size_t n = 0; n < N; ++n)
    z_std[n] = (0.5 * phi.z_logvar[n]).array().exp();

  for (int m = 0; m < mc_samples; ++m) {
    // Reparameterized draws for this sample.
    for (std::size_t j = 0; j < Ns; ++j) {
      Rng rng = noise_stream(noise_key, m, j, 0);
      for (int i = 0; i < 4; ++i) s[j](i) = phi.s_mean[j](i) + s_std[j](i) * rng.normal();
      gs[j].setZero();
    }
    for (std::size_t n = 0; n < N; ++n) {
      Rng rng = noise_stream(noise_key, m, n, 1);
      z[n].resize(K);
      for (int k = 0; k < K; ++k) z[n](k) = phi.z_mean[n](k) + z_std[n](k) * rng.normal();
      gz[n] = Eigen::VectorXd::Zero(K);
    }

    double log_joint = 0.0;

    // Trait prior.
    for (int i = 0; i < 4; ++i) {
      const double d = s[0](i) - params.s_bar(i);
      log_joint += gaussian_log_pdf(s[0](i), params.s_bar(i), params.r1(i));
      if (want_phi || want_theta) {
        const double pull = d / params.r1(i);
        gs[0](i) -= pull;
        if (want_theta) {
          theta_grad->s_bar(i) += inv_m * pull;
          theta_grad->log_r1(i) += inv_m * (-0.5 + 0.5 * d * pull);
        }
      }
    }

    // Trait transitions.
    if (!no_dynamics) {
      for (std::size_t n = 1; n < N; ++n) {
        for (int i = 0; i < 4; ++i) {
          const double mean = params.h(i) * s[n - 1](i);
          const double d = s[n](i) - mean;
          const double delta = d / params.r(i);
          log_joint += gaussian_log_pdf(s[n](i), mean, params.r(i));
          gs[n](i) -= delta;
          gs[n - 1](i) += delta * params.h(i);
          if (want_theta) {
            theta_grad->log_h(i) += inv_m * delta * mean;  // dmean/dlog_h = h*s = mean
            theta_grad->log_r(i) += inv_m * (-0.5 + 0.5 * d * delta);
          }
        }
      }
    }

    // Knowledge prior.
    for (int k = 0; k < K; ++k) {
      const double d = z[0](k) - params.z_bar;
      const double pull = d / params.w1;
      log_joint += gaussian_log_pdf(z[0](k), params.z_bar, params.w1);
      gz[0](k) -= pull;
      if (want_theta) {
        theta_grad->z_bar += inv_m * pull;
        theta_grad->log_w1 += inv_m * (-0.5 + 0.5 * d * pull);
      }
    }

    // OU transitions.
    for (std::size_t n = 1; n < N; ++n) {
      const Eigen::Vector4d& sn = s[no_dynamics ? 0 : n];
      const std::size_t sj = no_dynamics ? 0 : n;
      const double tau = data.taus[n];
      const double alpha = std::exp(sn(0));
      const double sigma = std::exp(sn(2));
      const double mu = sn(1);
      const double gamma = graph_active ? sn(3) : 0.0;
      const double r = std::exp(-alpha * tau);
      const double w = ou_transition_variance(alpha, sigma, tau);

      // The coupling vector is needed for the gamma gradient even when the
      // sampled gamma is exactly zero.
      Eigen::VectorXd coupling = Eigen::VectorXd::Zero(K);
      if (graph_active) coupling.noalias() = adjacency.a.transpose() * z[n - 1];
      const double gk = gamma / static_cast<double>(K);
      Eigen::VectorXd mu_tilde =
          Eigen::VectorXd::Constant(K, mu) + gk * coupling;
      Eigen::VectorXd mean = r * z[n - 1] + (1.0 - r) * mu_tilde;

      double dr_total = 0.0, dw_total = 0.0, dmu = 0.0, dgamma = 0.0;
      Eigen::VectorXd delta(K);
      for (int k = 0; k < K; ++k) {
        const double d = z[n](k) - mean(k);
        const double dl = d / w;
        delta(k) = dl;
        log_joint += -0.5 * (kLog2Pi + std::log(w)) - 0.5 * d * dl;
        gz[n](k) -= dl;
        dr_total += dl * (z[n - 1](k) - mu_tilde(k));
        dw_total += 0.5 * dl * dl - 0.5 / w;
        dmu += dl * (1.0 - r);
        if (graph_active) dgamma += dl * (1.0 - r) * coupling(k) / static_cast<double>(K);
      }
      gz[n - 1] += r * delta;
      if (gamma != 0.0) gz[n - 1] += (1.0 - r) * gk * (adjacency.a * delta);

      const double dalpha = dr_total * (-tau * r) + dw_total * ou_variance_dalpha(alpha, sigma, tau);
      gs[sj](0) += dalpha * alpha;
      gs[sj](1) += dmu;
      gs[sj](2) += dw_total * 2.0 * w;
      if (graph_active) gs[sj](3) += dgamma;

      if (want_theta && graph_active && gamma != 0.0) {
        // dELBO/dA[i][k] = delta_k (1-r) (gamma/K) z_prev_i
        dA.noalias() += (inv_m * (1.0 - r) * gk) * (z[n - 1] * delta.transpose());
      }
    }

    // Emissions.
    for (std::size_t n = 0; n < N; ++n) {
      const int k = data.kcs[n];
      const double zk = z[n](k);
      log_joint += bernoulli_log_prob(data.ys[n], zk);
      gz[n](k) += static_cast<double>(data.ys[n]) - sigmoid(zk);
    }

    if (!std::isfinite(log_joint))
      throw std::runtime_error("elbo_full: non-finite Monte Carlo term");
    elbo += inv_m * log_joint;

    if (want_phi) {
      for (std::size_t j = 0; j < Ns; ++j) {
        phi_grad->s_mean[j] += inv_m * gs[j];
        phi_grad->s_logvar[j] +=
            (0.5 * inv_m) * gs[j].cwiseProduct(s[j] - phi.s_mean[j]);
      }
      for (std::size_t n = 0; n < N; ++n) {
        phi_grad->z_mean[n] += inv_m * gz[n];
        phi_grad->z_logvar[n] +=
            (0.5 * inv_m) * gz[n].cwiseProduct(z[n] - phi.z_mean[n]);
      }
    }
  }

  // Backpropagate the accumulated adjacency gradient into U and M.
  if (want_theta && graph_active && dA.size() > 0 && dA.cwiseAbs().maxCoeff() > 0.0) {
    const Eigen::MatrixXd& U = params.graph.U;
    const Eigen::MatrixXd S = params.graph.M - params.graph.M.transpose();
    const Eigen::MatrixXd existence = U * U.transpose();
    const Eigen::MatrixXd direction = U * S * U.transpose();
    Eigen::MatrixXd GE = Eigen::MatrixXd::Zero(K, K);
    Eigen::MatrixXd GD = Eigen::MatrixXd::Zero(K, K);
    for (int i = 0; i < K; ++i) {
      for (int k = 0; k < K; ++k) {
        if (i == k || dA(i, k) == 0.0) continue;
        const double se = sigmoid(existence(i, k));
        const double sd = sigmoid(direction(i, k));
        GE(i, k) = dA(i, k) * se * (1.0 - se) * sd;
        GD(i, k) = dA(i, k) * se * sd * (1.0 - sd);
      }
    }
    const Eigen::MatrixXd SU = S * U;
    theta_grad->U.noalias() += (GE + GE.transpose()) * U;
    theta_grad->U.noalias() += (GD - GD.transpose()) * SU;
    const Eigen::MatrixXd C = U.transpose() * GD * U;
    theta_grad->M.noalias() += C - C.transpose();
  }

  return elbo;
}

double elbo_full(const GenerativeParams& params, const VariationalState& varstate,
                 const InteractionHistory& history, int mc_samples,
                 std::uint64_t seed, const AblationFlags& ablation) {
  const AdjacencyMatrix adjacency = adjacency_matrix(params.graph);
  const LearnerData data = LearnerData::from_history(history, 1.0);
  return elbo_full_grad(params, adjacency, varstate, data, mc_samples,
                        substream(seed, "mc"), ablation, nullptr, nullptr);
}

// --- flat packing -----------------------------------------------------------

Eigen::VectorXd pack_theta(const GenerativeParams& params) {
  const int K = params.num_kcs();
  const int D = params.graph.embedding_dim();
  Eigen::VectorXd raw(K * D + D * D + 18);
  Eigen::Index p = 0;
  for (int i = 0; i < K; ++i)
    for (int d = 0; d < D; ++d) raw(p++) = params.graph.U(i, d);
  for (int i = 0; i < D; ++i)
    for (int d = 0; d < D; ++d) raw(p++) = params.graph.M(i, d);
  for (int i = 0; i < 4; ++i) raw(p++) = params.s_bar(i);
  for (int i = 0; i < 4; ++i) raw(p++) = std::log(params.r1(i));
  for (int i = 0; i < 4; ++i) raw(p++) = std::log(params.h(i));
  for (int i = 0; i < 4; ++i) raw(p++) = std::log(params.r(i));
  raw(p++) = params.z_bar;
  raw(p++) = std::log(params.w1);
  return raw;
}

GenerativeParams unpack_theta(const Eigen::VectorXd& raw, int num_kcs, int embedding_dim) {
  GenerativeParams params;
  params.graph.U.resize(num_kcs, embedding_dim);
  params.graph.M.resize(embedding_dim, embedding_dim);
  Eigen::Index p = 0;
  for (int i = 0; i < num_kcs; ++i)
    for (int d = 0; d < embedding_dim; ++d) params.graph.U(i, d) = raw(p++);
  for (int i = 0; i < embedding_dim; ++i)
    for (int d = 0; d < embedding_dim; ++d) params.graph.M(i, d) = raw(p++);
  for (int i = 0; i < 4; ++i) params.s_bar(i) = raw(p++);
  for (int i = 0; i < 4; ++i) params.r1(i) = std::exp(raw(p++));
  for (int i = 0; i < 4; ++i) params.h(i) = std::exp(raw(p++));
  for (int i = 0; i < 4; ++i) params.r(i) = std::exp(raw(p++));
  params.z_bar = raw(p++);
  params.w1 = std::exp(raw(p++));
  return params;
}

Eigen::VectorXd pack_theta_grad(const ThetaGrad& grad) {
  const int K = static_cast<int>(grad.U.rows());
  const int D = static_cast<int>(grad.U.cols());
  Eigen::VectorXd raw(K * D + D * D + 18);
  Eigen::Index p = 0;
  for (int i = 0; i < K; ++i)
    for (int d = 0; d < D; ++d) raw(p++) = grad.U(i, d);
  for (int i = 0; i < D; ++i)
    for (int d = 0; d < D; ++d) raw(p++) = grad.M(i, d);
  for (int i = 0; i < 4; ++i) raw(p++) = grad.s_bar(i);
  for (int i = 0; i < 4; ++i) raw(p++) = grad.log_r1(i);
  for (int i = 0; i < 4; ++i) raw(p++) = grad.log_h(i);
  for (int i = 0; i < 4; ++i) raw(p++) = grad.log_r(i);
  raw(p++) = grad.z_bar;
  raw(p++) = grad.log_w1;
  return raw;
}

Eigen::VectorXd pack_phi(const VariationalState& phi) {
  const std::size_t Ns = phi.s_mean.size();
  const std::size_t N = phi.z_mean.size();
  const int K = static_cast<int>(phi.z_mean.empty() ? 0 : phi.z_mean[0].size());
  Eigen::VectorXd raw(8 * Ns + 2 * N * K);
  Eigen::Index p = 0;
  for (std::size_t j = 0; j < Ns; ++j)
    for (int i = 0; i < 4; ++i) raw(p++) = phi.s_mean[j](i);
  for (std::size_t j = 0; j < Ns; ++j)
    for (int i = 0; i < 4; ++i) raw(p++) = phi.s_logvar[j](i);
  for (std::size_t n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) raw(p++) = phi.z_mean[n](k);
  for (std::size_t n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) raw(p++) = phi.z_logvar[n](k);
  return raw;
}

VariationalState unpack_phi(const Eigen::VectorXd& raw, std::size_t n_steps,
                            std::size_t n_trait_steps, int num_kcs) {
  VariationalState phi;
  phi.s_mean.assign(n_trait_steps, Eigen::Vector4d::Zero());
  phi.s_logvar.assign(n_trait_steps, Eigen::Vector4d::Zero());
  phi.z_mean.assign(n_steps, Eigen::VectorXd::Zero(num_kcs));
  phi.z_logvar.assign(n_steps, Eigen::VectorXd::Zero(num_kcs));
  Eigen::Index p = 0;
  for (std::size_t j = 0; j < n_trait_steps; ++j)
    for (int i = 0; i < 4; ++i) phi.s_mean[j](i) = raw(p++);
  for (std::size_t j = 0; j < n_trait_steps; ++j)
    for (int i = 0; i < 4; ++i) phi.s_logvar[j](i) = raw(p++);
  for (std::size_t n = 0; n < n_steps; ++n)
    for (int k = 0; k < num_kcs; ++k) phi.z_mean[n](k) = raw(p++);
  for (std::size_t n = 0; n < n_steps; ++n)
    for (int k = 0; k < num_kcs; ++k) phi.z_logvar[n](k) = raw(p++);
  return phi;
}

Eigen::VectorXd pack_phi_grad(const PhiGrad& grad) {
  VariationalState tmp;
  tmp.s_mean = grad.s_mean;
  tmp.s_logvar = grad.s_logvar;
  tmp.z_mean = grad.z_mean;
  tmp.z_logvar = grad.z_logvar;
  return pack_phi(tmp);
}

}  // namespace ktrace
