// Test-only oracles: Gauss-Hermite quadrature, an analytic+quadrature ELBO
// evaluator for the K=1, N=2 instance, importance-sampled log evidence, and a
// finite-difference gradient harness. These stay independent of the
// implementation paths they check.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <functional>
#include <vector>

#include "ktrace/common.hpp"
#include "ktrace/dynamics.hpp"
#include "ktrace/inference.hpp"
#include "ktrace/special.hpp"

namespace ktrace::oracle {

/// Physicists' Gauss-Hermite nodes/weights via the Golub-Welsch eigenvalue
/// method: integrates exp(-x^2) f(x) dx.
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;

  explicit GaussHermite(int n) {
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i + 1 < n; ++i) {
      const double b = std::sqrt(0.5 * (i + 1));
      jacobi(i, i + 1) = b;
      jacobi(i + 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    const double sqrt_pi = std::sqrt(M_PI);
    for (int i = 0; i < n; ++i) {
      nodes.push_back(eig.eigenvalues()(i));
      const double v0 = eig.eigenvectors()(0, i);
      weights.push_back(sqrt_pi * v0 * v0);
    }
  }

  /// E[f(Z)] for Z ~ N(mean, var).
  double expect(double mean, double var, const std::function<double(double)>& f) const {
    const double scale = std::sqrt(2.0 * var);
    double total = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      total += weights[i] * f(mean + scale * nodes[i]);
    return total / std::sqrt(M_PI);
  }
};

/// Analytic + quadrature evaluation of the K=1, N=2 single-learner ELBO for a
/// per-step diagonal-Gaussian posterior. The Gaussian-Gaussian cross terms
/// are closed form; the emission and the trait-dependent OU term use
/// Gauss-Hermite tensor grids.
inline double elbo_k1n2_quadrature(const GenerativeParams& params,
                                   const VariationalState& phi,
                                   const LearnerData& data, int gh_nodes = 40) {
  const GaussHermite gh(gh_nodes);
  const double mz1 = phi.z_mean[0](0), vz1 = std::exp(phi.z_logvar[0](0));
  const double mz2 = phi.z_mean[1](0), vz2 = std::exp(phi.z_logvar[1](0));

  double elbo = 0.0;
  // entropies
  for (int i = 0; i < 4; ++i) {
    elbo += 0.5 * (1.0 + kLog2Pi + phi.s_logvar[0](i));
    elbo += 0.5 * (1.0 + kLog2Pi + phi.s_logvar[1](i));
  }
  elbo += 0.5 * (1.0 + kLog2Pi + phi.z_logvar[0](0));
  elbo += 0.5 * (1.0 + kLog2Pi + phi.z_logvar[1](0));

  // E[log p(s1)] and E[log p(s2 | s1)], closed form per coordinate
  for (int i = 0; i < 4; ++i) {
    const double m1 = phi.s_mean[0](i), v1 = std::exp(phi.s_logvar[0](i));
    const double m2 = phi.s_mean[1](i), v2 = std::exp(phi.s_logvar[1](i));
    elbo += -0.5 * (kLog2Pi + std::log(params.r1(i))) -
            (v1 + (m1 - params.s_bar(i)) * (m1 - params.s_bar(i))) / (2.0 * params.r1(i));
    const double d = m2 - params.h(i) * m1;
    elbo += -0.5 * (kLog2Pi + std::log(params.r(i))) -
            (v2 + params.h(i) * params.h(i) * v1 + d * d) / (2.0 * params.r(i));
  }
  // E[log p(z1)]
  elbo += -0.5 * (kLog2Pi + std::log(params.w1)) -
          (vz1 + (mz1 - params.z_bar) * (mz1 - params.z_bar)) / (2.0 * params.w1);

  // E[log p(z2 | z1, s2)]: 3-dim Gauss-Hermite over (s2_alpha, s2_mu,
  // s2_sigma); gamma is inert at K=1. The inner z expectation is closed form.
  const double tau = data.taus[1];
  double t4 = 0.0;
  const double scale0 = std::sqrt(2.0 * std::exp(phi.s_logvar[1](0)));
  const double scale1 = std::sqrt(2.0 * std::exp(phi.s_logvar[1](1)));
  const double scale2 = std::sqrt(2.0 * std::exp(phi.s_logvar[1](2)));
  const double inv_sqrt_pi3 = 1.0 / (M_PI * std::sqrt(M_PI));
  for (std::size_t a = 0; a < gh.nodes.size(); ++a) {
    const double s0 = phi.s_mean[1](0) + scale0 * gh.nodes[a];
    const double alpha = std::exp(s0);
    const double r = std::exp(-alpha * tau);
    for (std::size_t b = 0; b < gh.nodes.size(); ++b) {
      const double mu = phi.s_mean[1](1) + scale1 * gh.nodes[b];
      for (std::size_t c = 0; c < gh.nodes.size(); ++c) {
        const double sigma = std::exp(phi.s_mean[1](2) + scale2 * gh.nodes[c]);
        const double w = ou_transition_variance(alpha, sigma, tau);
        const double d = mz2 - r * mz1 - (1.0 - r) * mu;
        const double term = -0.5 * (kLog2Pi + std::log(w)) -
                            (vz2 + r * r * vz1 + d * d) / (2.0 * w);
        t4 += gh.weights[a] * gh.weights[b] * gh.weights[c] * term;
      }
    }
  }
  elbo += t4 * inv_sqrt_pi3;

  // emissions
  elbo += gh.expect(mz1, vz1,
                    [&](double z) { return bernoulli_log_prob(data.ys[0], z); });
  elbo += gh.expect(mz2, vz2,
                    [&](double z) { return bernoulli_log_prob(data.ys[1], z); });
  return elbo;
}

/// Importance-sampled log evidence for the K=1, N=2 instance with the prior
/// chain as the proposal: log(1/M sum p(y | z draws)).
inline double log_evidence_k1n2(const GenerativeParams& params, const LearnerData& data,
                                int n_draws, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> log_weights;
  log_weights.reserve(n_draws);
  const double tau = data.taus[1];
  for (int i = 0; i < n_draws; ++i) {
    Eigen::Vector4d s1, s2;
    for (int d = 0; d < 4; ++d)
      s1(d) = params.s_bar(d) + std::sqrt(params.r1(d)) * rng.normal();
    for (int d = 0; d < 4; ++d)
      s2(d) = params.h(d) * s1(d) + std::sqrt(params.r(d)) * rng.normal();
    const double z1 = params.z_bar + std::sqrt(params.w1) * rng.normal();
    const double alpha = std::exp(s2(0));
    const double r = std::exp(-alpha * tau);
    const double w = ou_transition_variance(alpha, std::exp(s2(2)), tau);
    const double mean = r * z1 + (1.0 - r) * s2(1);
    const double z2 = mean + std::sqrt(w) * rng.normal();
    log_weights.push_back(bernoulli_log_prob(data.ys[0], z1) +
                          bernoulli_log_prob(data.ys[1], z2));
  }
  return log_sum_exp(log_weights) - std::log(static_cast<double>(n_draws));
}

/// Central finite differences of a scalar function of a packed vector.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-5) {
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

/// Relative disagreement between two gradients:
/// max_i |a_i - b_i| / max(1, ||a||_inf, ||b||_inf).
inline double gradient_rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale =
      std::max({1.0, a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

/// 2-D composite Simpson quadrature of the causal-graph marginal likelihood
/// on the uniform (w0, w1) prior; grid must have odd size.
inline double causal_g1_simpson(std::int64_t n_pp, std::int64_t n_pm, std::int64_t n_mp,
                                std::int64_t n_mm, int grid = 201) {
  auto weight = [grid](int i) {
    if (i == 0 || i == grid - 1) return 1.0;
    return (i % 2 == 1) ? 4.0 : 2.0;
  };
  const double h = 1.0 / static_cast<double>(grid - 1);
  double total = 0.0;
  for (int i = 0; i < grid; ++i) {
    const double w0 = i * h;
    double row = 0.0;
    for (int j = 0; j < grid; ++j) {
      const double w1 = j * h;
      const double p_cause = w0 + w1 - w0 * w1;
      double v = 1.0;
      if (n_pp > 0) v *= std::pow(p_cause, static_cast<double>(n_pp));
      if (n_pm > 0) v *= std::pow(w0, static_cast<double>(n_pm));
      if (n_mp > 0) v *= std::pow(1.0 - p_cause, static_cast<double>(n_mp));
      if (n_mm > 0) v *= std::pow(1.0 - w0, static_cast<double>(n_mm));
      row += weight(j) * v;
    }
    total += weight(i) * row;
  }
  return total * h * h / 9.0;
}

}  // namespace ktrace::oracle
