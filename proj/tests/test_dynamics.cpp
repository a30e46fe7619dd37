#include <cmath>

#include "doctest.h"

#include "ktrace/dynamics.hpp"

using namespace ktrace;

TEST_CASE("retention_ratio analytic values and validation") {
  CHECK(retention_ratio(0.37, 0.0) == 1.0);
  CHECK(retention_ratio(std::log(2.0), 1.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(retention_ratio(0.1, 10.0) ==
        doctest::Approx(0.367879441171442321).epsilon(1e-14));
  CHECK_THROWS_AS(retention_ratio(0.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(retention_ratio(-1.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(retention_ratio(1.0, -1.0), std::invalid_argument);
}

TEST_CASE("ou_transition_variance matches the closed form and its Taylor branch") {
  // sigma=1, alpha=0.5, tau=2 -> (1 - e^-2)
  CHECK(ou_transition_variance(0.5, 1.0, 2.0) ==
        doctest::Approx(0.864664716763387308).epsilon(1e-14));

  SUBCASE("Taylor branch agrees with the exact formula near the switch") {
    // alpha*tau = 1e-4 uses the exact branch; compare against the series
    const double exact = ou_transition_variance(1e-4, 1.0, 1.0);
    const double x = 1e-4;
    const double series = 1.0 * (1.0 - x + (2.0 / 3.0) * x * x - (1.0 / 3.0) * x * x * x);
    CHECK(exact == doctest::Approx(series).epsilon(1e-12));
  }
  SUBCASE("tiny alpha avoids 0/0 and approaches sigma^2 tau") {
    const double w = ou_transition_variance(1e-9, 1.0, 1.0);
    CHECK(std::isfinite(w));
    CHECK(w == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("ou_transition_moments combines retention and structural means") {
  const int K = 3;
  AdjacencyMatrix adj;
  adj.a = Eigen::MatrixXd::Zero(K, K);
  adj.a(0, 1) = 0.6;
  adj.a(2, 1) = 0.2;
  TraitVector traits;
  traits.raw << std::log(0.5), 0.4, std::log(1.0), 1.5;  // alpha=0.5, mu=0.4, sigma=1
  KnowledgeState z{Eigen::VectorXd::Zero(K)};
  z.z << 1.0, -2.0, 0.5;

  const TransitionMoments tm = ou_transition_moments(z, traits, adj, 2.0);
  const double r = std::exp(-1.0);
  CHECK(tm.r == doctest::Approx(r).epsilon(1e-14));
  CHECK(tm.w == doctest::Approx(0.864664716763387308).epsilon(1e-13));
  const double mu_tilde_1 = 0.4 + (1.5 / 3.0) * (0.6 * 1.0 + 0.2 * 0.5);
  CHECK(tm.m(1) == doctest::Approx(r * -2.0 + (1.0 - r) * mu_tilde_1).epsilon(1e-12));

  SUBCASE("m is a convex combination of z_prev and mu_tilde") {
    for (int k = 0; k < K; ++k) {
      const double mu_tilde = structural_mean(z.z, adj, traits.mu(), traits.gamma(), k);
      const double lo = std::min(z.z(k), mu_tilde), hi = std::max(z.z(k), mu_tilde);
      CHECK(tm.m(k) >= lo - 1e-12);
      CHECK(tm.m(k) <= hi + 1e-12);
    }
  }
  SUBCASE("large alpha forgets toward the structural mean") {
    TraitVector fast = traits;
    fast.raw(0) = std::log(500.0);
    const TransitionMoments ff = ou_transition_moments(z, fast, adj, 2.0);
    for (int k = 0; k < K; ++k)
      CHECK(ff.m(k) ==
            doctest::Approx(structural_mean(z.z, adj, traits.mu(), traits.gamma(), k))
                .epsilon(1e-9));
    CHECK(ff.w == doctest::Approx(1.0 / (2.0 * 500.0)).epsilon(1e-9));
  }
  SUBCASE("non-finite inputs are rejected") {
    KnowledgeState bad{Eigen::VectorXd::Constant(K, std::nan(""))};
    CHECK_THROWS_AS(ou_transition_moments(bad, traits, adj, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(ou_transition_moments(z, traits, adj, 0.0), std::invalid_argument);
  }
}

TEST_CASE("Chapman-Kolmogorov: two gamma=0 OU steps compose exactly") {
  const int K = 2;
  AdjacencyMatrix adj;
  adj.a = Eigen::MatrixXd::Zero(K, K);
  adj.a(0, 1) = 0.9;  // irrelevant at gamma = 0
  TraitVector traits;
  traits.raw << std::log(0.23), -0.7, std::log(0.8), 0.0;
  KnowledgeState z{Eigen::VectorXd::Zero(K)};
  z.z << 2.0, -1.0;
  const double tau1 = 1.7, tau2 = 3.1;

  const TransitionMoments two = ou_transition_moments(z, traits, adj, tau1 + tau2);
  const TransitionMoments first = ou_transition_moments(z, traits, adj, tau1);
  const TransitionMoments second =
      ou_transition_moments(KnowledgeState{first.m}, traits, adj, tau2);
  for (int k = 0; k < K; ++k) CHECK(std::fabs(second.m(k) - two.m(k)) < 1e-10);
  // composed variance r2^2 * w1 + w2 equals the one-step variance
  const double composed = second.r * second.r * first.w + second.w;
  CHECK(std::fabs(composed - two.w) < 1e-10);
}

TEST_CASE("w is monotone in tau and bounded by the stationary variance") {
  TraitVector traits;
  traits.raw << std::log(0.31), 0.0, std::log(1.3), 0.0;
  const double stationary =
      traits.sigma() * traits.sigma() / (2.0 * traits.alpha());
  double prev = 0.0;
  for (double tau : {0.1, 0.5, 1.0, 3.0, 10.0, 100.0, 1e4}) {
    const double w = ou_transition_variance(traits.alpha(), traits.sigma(), tau);
    CHECK(w >= prev);                 // saturates at double precision
    if (tau <= 10.0) CHECK(w > prev); // strictly increasing before saturation
    CHECK(w <= stationary + 1e-12);
    prev = w;
  }
}

TEST_CASE("trait_transition_step is elementwise") {
  GenerativeParams params = GenerativeParams::defaults(1);
  params.h << 0.5, 0.5, 0.5, 0.5;
  params.r = Eigen::Vector4d::Constant(0.1);
  TraitVector s;
  s.raw << 1.0, 2.0, 3.0, 4.0;
  const GaussianDiag4 g = trait_transition_step(s, params);
  CHECK(g.mean(0) == doctest::Approx(0.5));
  CHECK(g.mean(1) == doctest::Approx(1.0));
  CHECK(g.mean(2) == doctest::Approx(1.5));
  CHECK(g.mean(3) == doctest::Approx(2.0));
  for (int i = 0; i < 4; ++i) CHECK(g.var(i) == doctest::Approx(0.1));

  SUBCASE("H = 0 centers the transition at zero") {
    params.h.setZero();
    const GaussianDiag4 z = trait_transition_step(s, params);
    for (int i = 0; i < 4; ++i) CHECK(z.mean(i) == 0.0);
  }
}

TEST_CASE("emission_probability is a clamped sigmoid") {
  CHECK(emission_probability(0.0) == doctest::Approx(0.5));
  CHECK(emission_probability(1.0) ==
        doctest::Approx(0.731058578630004879).epsilon(1e-14));
  CHECK(emission_probability(1e9) == doctest::Approx(1.0 - 1e-12));
  CHECK(emission_probability(-1e9) == doctest::Approx(1e-12));
  CHECK_THROWS_AS(emission_probability(std::nan("")), std::invalid_argument);
}

TEST_CASE("simulate_cohort is deterministic under a fixed seed") {
  GenerativeParams params = GenerativeParams::defaults(4);
  const auto schedule = uniform_schedule(4, 20, 6.0, 0.8);
  const SimulatedCohort a = simulate_cohort(params, 5, schedule, 42);
  const SimulatedCohort b = simulate_cohort(params, 5, schedule, 42);
  REQUIRE(a.cohort.histories.size() == b.cohort.histories.size());
  for (std::size_t l = 0; l < a.cohort.histories.size(); ++l) {
    const auto& ra = a.cohort.histories[l].records;
    const auto& rb = b.cohort.histories[l].records;
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
      CHECK(ra[i].timestamp == rb[i].timestamp);
      CHECK(ra[i].kc_index == rb[i].kc_index);
      CHECK(ra[i].outcome == rb[i].outcome);
    }
  }
  // threading does not change the draw
  const SimulatedCohort c = simulate_cohort(params, 5, schedule, 42, {}, 4);
  for (std::size_t l = 0; l < a.cohort.histories.size(); ++l)
    for (std::size_t i = 0; i < a.cohort.histories[l].records.size(); ++i)
      CHECK(a.cohort.histories[l].records[i].outcome ==
            c.cohort.histories[l].records[i].outcome);
}

TEST_CASE("simulated OU state reaches the stationary variance (gamma=0, K=1)") {
  GenerativeParams params = GenerativeParams::defaults(1);
  params.s_bar << std::log(0.05), 0.0, std::log(0.6), 0.0;
  params.r1.setConstant(1e-12);  // pin the traits
  params.h.setOnes();
  params.r.setConstant(1e-12);
  params.z_bar = 0.0;
  params.w1 = 1e-8;

  // constant gaps with alpha*tau = 5: consecutive states are nearly
  // independent draws from the stationary law
  const std::size_t n_steps = 4000;
  auto schedule = [&](std::size_t, Rng&) {
    Schedule plan;
    for (std::size_t n = 0; n < n_steps; ++n)
      plan.emplace_back(0, 100.0 * static_cast<double>(n + 1));
    return plan;
  };
  const SimulatedCohort sim = simulate_cohort(params, 1, schedule, 7);
  const auto& lat = sim.latents[0];
  double mean = 0.0;
  for (std::size_t n = 500; n < n_steps; ++n) mean += lat.states[n](0);
  const std::size_t n_used = n_steps - 500;
  mean /= static_cast<double>(n_used);
  double var = 0.0;
  for (std::size_t n = 500; n < n_steps; ++n) {
    const double d = lat.states[n](0) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n_used - 1);
  const double alpha = std::exp(params.s_bar(0));
  const double sigma = std::exp(params.s_bar(2));
  const double stationary = sigma * sigma / (2.0 * alpha);
  const double se = stationary * std::sqrt(2.0 / static_cast<double>(n_used - 1));
  CHECK(std::fabs(var - stationary) < 3.0 * se);
}

TEST_CASE("emission frequencies match sigmoid of the latent state") {
  GenerativeParams params = GenerativeParams::defaults(1);
  params.s_bar << std::log(1e-4), 0.0, std::log(0.5), 0.0;
  params.z_bar = 0.0;
  params.w1 = 1.0;
  const SimulatedCohort sim =
      simulate_cohort(params, 400, uniform_schedule(1, 30, 5.0, 0.5), 11);
  // collect outcomes at states near zero
  std::size_t n = 0, hits = 0;
  for (std::size_t l = 0; l < sim.latents.size(); ++l) {
    for (std::size_t i = 0; i < sim.latents[l].states.size(); ++i) {
      if (std::fabs(sim.latents[l].states[i](0)) < 0.15) {
        ++n;
        hits += sim.cohort.histories[l].records[i].outcome;
      }
    }
  }
  REQUIRE(n > 100);
  const double rate = static_cast<double>(hits) / static_cast<double>(n);
  const double se = std::sqrt(0.25 / static_cast<double>(n));
  CHECK(std::fabs(rate - 0.5) < 4.0 * se + 0.04);  // 0.04 covers the |z|<0.15 bias
}

TEST_CASE("ground-truth traits reproduce the stored retention curve") {
  GenerativeParams params = GenerativeParams::defaults(2);
  const SimulatedCohort sim =
      simulate_cohort(params, 3, uniform_schedule(2, 15, 7.0, 1.0), 3);
  for (std::size_t l = 0; l < sim.latents.size(); ++l) {
    const auto& lat = sim.latents[l];
    const auto& recs = sim.cohort.histories[l].records;
    for (std::size_t n = 1; n < recs.size(); ++n) {
      const double tau = recs[n].timestamp - recs[n - 1].timestamp;
      const double alpha = std::exp(lat.traits[n](0));
      CHECK(lat.retention[n] == doctest::Approx(retention_ratio(alpha, tau)).epsilon(1e-12));
    }
  }
}

TEST_CASE("latent sidecar JSON round-trips") {
  GenerativeParams params = GenerativeParams::defaults(2);
  const SimulatedCohort sim =
      simulate_cohort(params, 2, uniform_schedule(2, 5, 6.0, 0.5), 9);
  const auto parsed = latents_from_json(latents_to_json(sim));
  REQUIRE(parsed.size() == sim.latents.size());
  for (std::size_t l = 0; l < parsed.size(); ++l) {
    CHECK(parsed[l].learner_id == sim.latents[l].learner_id);
    REQUIRE(parsed[l].states.size() == sim.latents[l].states.size());
    for (std::size_t n = 0; n < parsed[l].states.size(); ++n)
      CHECK(parsed[l].states[n](0) == sim.latents[l].states[n](0));
  }
}
