#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cflow/families.hpp"
#include "cflow/flow.hpp"
#include "cflow/lgeodesic.hpp"

using namespace cflow;
constexpr double pi = std::numbers::pi;

namespace {

FlowState to_state(const InitialData& d) { return FlowState{d.metric, d.phi, 0.0, 0}; }

HistorySampler static_torus(int nodes = 64) {
  return HistorySampler(std::vector<FlowState>{to_state(flat_torus(nodes, 2 * pi, 1.0))});
}

// Round unit S^2 (T = 1/2) run to t ~ 0.475, save cadence refined with the grid.
const FlowHistory& sphere_history(int nodes = 128, PhiProfile phi = {}) {
  static std::vector<std::pair<std::pair<int, double>, FlowHistory>> cache;
  for (const auto& [key, h] : cache)
    if (key.first == nodes && key.second == phi.amplitude) return h;
  FlowConfig cfg;
  cfg.cfl = 1.0;
  cfg.rm_ratio = 20.0;
  cfg.save_rm_factor = 1.0 + 1.28 / nodes;
  cache.push_back({{nodes, phi.amplitude}, run(to_state(round_sphere(nodes, 2, 1.0, phi)), cfg)});
  return cache.back().second;
}

// Constant path at the pole of the shrinking sphere: int_0^tau sqrt(u) / (c + u) du, c = T - t0.
double constant_path_L(double c, double tau) {
  return 2 * std::sqrt(tau) - 2 * std::sqrt(c) * std::atan(std::sqrt(tau / c));
}

// Radial L-geodesic equation in the tau variable, integrated by RK4 from (tau1, x1, X1).
double tau_form_endpoint(const HistorySampler& smp, double t0, double tau1, double x1, double X1, double tau2,
                         int steps) {
  auto f = [&](double tau, double x, double X) {
    const auto v = smp(x, t0 - tau);
    return -0.5 * v.A_x / v.A * X * X + 0.5 * v.S_x / v.A - X / (2 * tau) - 2 * v.sic_rad * X;
  };
  const double h = (tau2 - tau1) / steps;
  double x = x1, X = X1;
  for (int j = 0; j < steps; ++j) {
    const double t = tau1 + j * h;
    const double k1x = X, k1v = f(t, x, X);
    const double k2x = X + 0.5 * h * k1v, k2v = f(t + 0.5 * h, x + 0.5 * h * k1x, X + 0.5 * h * k1v);
    const double k3x = X + 0.5 * h * k2v, k3v = f(t + 0.5 * h, x + 0.5 * h * k2x, X + 0.5 * h * k2v);
    const double k4x = X + h * k3v, k4v = f(t + h, x + h * k3x, X + h * k3v);
    x += h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x);
    X += h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v);
  }
  return x;
}

}  // namespace

TEST_CASE("sampler reproduces nodal values and refuses mixed epochs") {
  const auto& h = sphere_history(64);
  const HistorySampler smp(h);
  const auto& st = h.states[3];
  const auto c = curvature(st.metric, st.phi);
  for (int i : {0, 5, 31, 63}) {
    const auto v = smp(st.metric.grid.x(i), st.t);
    CHECK(v.A == doctest::Approx(st.metric.a[i] * st.metric.a[i]).epsilon(1e-12));
    CHECK(v.S == doctest::Approx(c.s[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(smp(0.3, -1.0), DomainError);
  auto states = h.states;
  states.back().epoch = 1;
  CHECK_THROWS_AS(HistorySampler{states}, DomainError);
}

TEST_CASE("flat shooting: straight line at speed 2|v|") {
  const auto smp = static_torus();
  const LBase base{1.0, 1.0};
  const auto geo = shoot(smp, base, 0.5, 1.0);
  CHECK(geo.x_end() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(geo.L == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(geo.K) < 1e-14);
  CHECK(geo.ell() == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(geo.tau.front() == 0.0);
  CHECK(std::is_sorted(geo.tau.begin(), geo.tau.end()));
  const auto still = shoot(smp, base, 0.0, 0.7);
  CHECK(still.x_end() == 1.0);
  CHECK(still.L == 0.0);
}

TEST_CASE("l_length of sampled paths") {
  const auto smp = static_torus();
  const LBase base{1.0, 1.0};
  std::vector<double> s(33), x(33), still(33, 1.0);
  for (int j = 0; j <= 32; ++j) {
    s[j] = j / 32.0;
    x[j] = 1.0 + s[j];
  }
  CHECK(l_length(smp, base, s, x) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(l_length(smp, base, s, still) == 0.0);
  x[0] = 1.5;
  CHECK_THROWS_AS(l_length(smp, base, s, x), DomainError);
}

TEST_CASE("flat reduced distance d^2 / (4 tau) with the path oracle") {
  const auto smp = static_torus(128);
  const LBase base{0.5, 1.0};
  ReducedDistanceOptions opts;
  opts.oracle = true;
  for (double d : {0.0, 0.25, 1.0, 1.5}) {
    for (double tau : {0.1, 1.0}) {
      const auto r = reduced_distance(smp, base, base.x + d, tau, opts);
      REQUIRE(r.status == SolveStatus::resolved);
      const double exact = d * d / (4 * tau);
      CHECK(std::abs(r.ell - exact) <= 1e-3 * std::max(exact, 1e-9) + 1e-12);
      REQUIRE(r.ell_oracle);
      CHECK(std::abs(r.ell - *r.ell_oracle) <= 1e-3 * (1 + r.ell));
      CHECK(r.v_rad == doctest::Approx(d / (2 * std::sqrt(tau))).epsilon(1e-9).scale(1e-12));
    }
  }
  // Going the other way round the circle is shorter past the antipode.
  const auto r = reduced_distance(smp, base, base.x + 2 * pi - 1.0, 1.0);
  CHECK(r.ell == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(r.v_rad < 0);
}

TEST_CASE("flat 2D reduced distance and Jacobian") {
  const auto smp = static_torus();
  const LBase base{0.0, 1.0};
  const auto r = reduced_distance_2d(smp, base, 0.6, 0.8, 0.5);
  REQUIRE(r.status == SolveStatus::resolved);
  CHECK(r.ell == doctest::Approx(1.0 / (4 * 0.5)).epsilon(1e-9));
  // Across the fiber seam the nearest image is used.
  const auto seam = reduced_distance_2d(smp, base, 0.0, 2 * pi - 0.5, 1.0);
  CHECK(seam.ell == doctest::Approx(0.25 * 0.25).epsilon(1e-9));
  for (double v : {0.0, 0.3, 1.2}) {
    const auto j = l_jacobian(smp, base, v, 0.5);
    CHECK_FALSE(j.degenerate);
    CHECK(j.J == doctest::Approx(4 * 0.5).epsilon(1e-7));
  }
}

TEST_CASE("flat identities: derivative residuals and the combined inequality") {
  const auto smp = static_torus(128);
  const LBase base{0.0, 1.0};
  ReducedDistanceOptions opts;
  const auto r = reduced_distance(smp, base, 0.8, 0.6, opts);
  const auto res = derivative_identity_check(smp, base, r, opts);
  REQUIRE_FALSE(res.skipped);
  CHECK(std::abs(res.r_tau) < 1e-4);
  CHECK(std::abs(res.r_grad) < 1e-4);
  CHECK(std::abs(res.r_X) < 1e-4);

  const auto smp2 = static_torus(64);
  const auto f0 = ell_field_2d(smp2, base, 0.199, 32);
  const auto f1 = ell_field_2d(smp2, base, 0.2, 32);
  const auto f2 = ell_field_2d(smp2, base, 0.201, 32);
  CHECK(f1.unresolved == 0);
  const auto m = inequality_check(smp2, base, f0, f1, f2);
  CHECK(m.nodes.size() > 1000u);
  CHECK(m.kinks > 0);  // the cut locus is filtered out
  // Exact equality up to the tau difference quotient, relative to the size of the terms.
  for (size_t k = 0; k < m.nodes.size(); ++k) {
    const double ell = f1.ell[m.nodes[k]];
    CHECK(std::abs(m.ell_ineq[k]) < 1e-4 * (1 + 2 * ell / 0.2 + 2 / 0.2));
  }
  CHECK(m.min_ell == doctest::Approx(0.0).scale(1e-12));
}

TEST_CASE("flat torus reduced volume") {
  const auto smp = static_torus(64);
  const LBase base{0.0, 1.0};
  const std::vector<double> taus{0.01, 0.02, 0.05, 0.1, 0.3, 0.6};
  const auto series = reduced_volume_series(smp, base, taus, 32);
  for (size_t k = 0; k < taus.size(); ++k) {
    MESSAGE("tau " << taus[k] << " V " << series.vtilde[k] << " err " << series.quad_err[k]);
    CHECK(series.vtilde[k] > 0);
    CHECK(series.vtilde[k] <= 1 + 1e-9);
    CHECK(series.unresolved[k] == 0);
  }
  CHECK(series.monotonicity_margin() >= -1e-6);
  CHECK(series.limit_at_zero() == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(series.vtilde.back() < series.vtilde.front() - 1e-3);  // cut-locus truncation
}

TEST_CASE("flat lemma-estimate constant stays below 4") {
  const auto smp = static_torus(128);
  const std::vector<double> taus{0.05, 0.1, 0.2};
  const auto est = lemma_estimate_monitor(smp, LBase{0.0, 1.0}, taus);
  CHECK(est.c_meas <= 4.0);
  CHECK(est.c_meas > 0.5);
  CHECK(est.ell_at_base_max == doctest::Approx(0.0).scale(1e-12));
}

TEST_CASE("shrinking sphere: constant path at the pole") {
  const HistorySampler smp(sphere_history());
  const double t0 = 0.45, c = 0.5 - t0;
  const LBase base{0.0, t0};
  const auto geo = shoot(smp, base, 0.0, 0.3);
  CHECK(geo.x_end() == 0.0);
  CHECK(geo.L == doctest::Approx(constant_path_L(c, 0.3)).epsilon(2e-3));
  ReducedDistanceOptions opts;
  opts.oracle = true;
  for (double tau : {0.05, 0.3}) {
    const auto r = reduced_distance(smp, base, 0.0, tau, opts);
    const double exact = constant_path_L(c, tau) / (2 * std::sqrt(tau));
    CHECK(r.ell == doctest::Approx(exact).epsilon(1e-3));
    CHECK(std::abs(r.ell - *r.ell_oracle) <= 1e-3 * (1 + r.ell));
  }
}

TEST_CASE("shrinking sphere: shooting agrees with the path oracle") {
  const HistorySampler smp(sphere_history());
  const LBase base{0.0, 0.45};
  ReducedDistanceOptions opts;
  opts.oracle = true;
  for (double q : {0.3, 1.0, 2.0}) {
    for (double tau : {0.02, 0.2}) {
      const auto r = reduced_distance(smp, base, q, tau, opts);
      REQUIRE(r.status == SolveStatus::resolved);
      MESSAGE("q " << q << " tau " << tau << " ell " << r.ell << " oracle " << *r.ell_oracle);
      CHECK(std::abs(r.ell - *r.ell_oracle) <= 1e-3 * (1 + r.ell));
    }
  }
}

TEST_CASE("s-form and tau-form geodesic equations agree") {
  const HistorySampler smp(sphere_history());
  const double t0 = 0.45;
  ShootOptions opts;
  opts.steps = 256;
  const auto geo = shoot(smp, LBase{0.0, t0}, 1.5, 0.2, opts);
  const int j1 = 64;
  const double s1 = std::sqrt(geo.tau[j1]);
  const double X1 = geo.x_s[j1] / (2 * s1);
  auto err = [&](int steps) {
    return std::abs(tau_form_endpoint(smp, t0, geo.tau[j1], geo.x[j1], X1, 0.2, steps) - geo.x_end());
  };
  const double e1 = err(50), e2 = err(100);
  MESSAGE("tau-form endpoint error " << e1 << " -> " << e2);
  CHECK(e1 < 1e-4);
  CHECK(e2 < 1e-5);
}

TEST_CASE("shrinking sphere: Jacobian limit and monotone integrand") {
  const HistorySampler smp(sphere_history());
  const LBase base{0.0, 0.45};
  for (double v : {0.2, 1.0}) {
    const double tau = 1e-4;
    const auto j = l_jacobian(smp, base, v, tau);
    CHECK(j.J / (4 * tau) == doctest::Approx(1.0).epsilon(2e-3));
  }
  for (double tau : {0.01, 0.05, 0.2}) {
    for (double v : {0.0, 0.5, 1.0, 2.0}) {
      const auto j = l_jacobian(smp, base, v, tau);
      if (j.degenerate) continue;
      const double lhs = std::exp(-j.ell) * j.J / (4 * pi * tau);
      const double rhs = std::exp(-v * v) / pi;
      CHECK(lhs <= rhs * (1 + 1e-6));
    }
  }
}

TEST_CASE("shrinking sphere: reduced volume is nonincreasing and starts at 1") {
  const HistorySampler smp(sphere_history());
  const LBase base{0.0, 0.45};
  const std::vector<double> taus{0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4};
  const auto series = reduced_volume_series(smp, base, taus);
  for (size_t k = 0; k < taus.size(); ++k) {
    MESSAGE("tau " << taus[k] << " V " << series.vtilde[k] << " err " << series.quad_err[k]);
    CHECK(series.vtilde[k] > 0);
    CHECK(series.vtilde[k] < 1);
  }
  CHECK(series.monotonicity_margin() >= -1e-6);
  CHECK(series.limit_at_zero() == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("shrinking sphere: differential inequalities at smooth nodes") {
  const HistorySampler smp(sphere_history());
  const LBase base{0.0, 0.45};
  const double tau = 0.1, d = 2e-3;
  const auto f0 = ell_field(smp, base, tau - d), f1 = ell_field(smp, base, tau), f2 = ell_field(smp, base, tau + d);
  const auto m = inequality_check(smp, base, f0, f1, f2);
  const double h = smp.grid().spacing;
  MESSAGE("worst ell margin " << m.worst_ell_ineq << " lbar margin " << m.worst_lbar_ineq << " kinks " << m.kinks);
  CHECK(m.nodes.size() > 100u);
  CHECK(m.worst_ell_ineq >= -10 * h * h);
  CHECK(m.worst_lbar_ineq >= -10 * h * h);
  CHECK(m.min_ell_margin >= -1e-2);
}

TEST_CASE("shrinking sphere: derivative identities converge under refinement") {
  const LBase base{0.0, 0.45};
  double prev[3] = {0, 0, 0};
  for (int nodes : {64, 128}) {
    const HistorySampler smp(sphere_history(nodes));
    ReducedDistanceOptions opts;
    opts.shoot.steps = 4 * nodes;
    const auto r = reduced_distance(smp, base, 0.7, 0.1, opts);
    const auto res = derivative_identity_check(smp, base, r, opts);
    REQUIRE_FALSE(res.skipped);
    const double cur[3] = {std::abs(res.r_tau), std::abs(res.r_grad), std::abs(res.r_X)};
    MESSAGE(nodes << " nodes: " << cur[0] << " " << cur[1] << " " << cur[2]);
    if (nodes == 128)
      for (int k = 0; k < 3; ++k) CHECK((cur[k] < 1e-6 || prev[k] / cur[k] >= 2.0));
    std::copy(cur, cur + 3, prev);
  }
}

TEST_CASE("base point and horizon are validated") {
  const HistorySampler smp(sphere_history(64));
  CHECK_THROWS_AS(reduced_distance(smp, LBase{1.0, 0.45}, 0.5, 0.1), DomainError);
  CHECK_THROWS_AS(shoot(smp, LBase{0.0, 0.45}, 0.1, 0.9), DomainError);
  CHECK_THROWS_AS(shoot(smp, LBase{0.0, 0.45}, 0.1, -0.1), DomainError);
  CHECK_THROWS_AS(reduced_distance_2d(smp, LBase{0.0, 0.45}, 0.5, 0.1, 0.1), DomainError);
}
