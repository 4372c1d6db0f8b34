// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
// Exit status is nonzero when any criterion fails.

#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cflow/conjheat.hpp"
#include "cflow/families.hpp"
#include "cflow/flow.hpp"
#include "cflow/functional.hpp"
#include "cflow/lgeodesic.hpp"
#include "cflow/sampler.hpp"
#include "cflow/verify.hpp"
#include "random_family.hpp"

using namespace cflow;

namespace {

constexpr double pi = std::numbers::pi;

struct Outcome {
  bool pass = true;
  std::string detail;
  // Records one sub-check; the first failing sub-check is named in the detail.
  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = "failed: " + what + (detail.empty() ? "" : "; " + detail);
    pass = pass && ok;
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

FlowState to_state(const InitialData& d, double t = 0.0) { return FlowState{d.metric, d.phi, t, 0}; }

FlowHistory static_history(const InitialData& d, std::initializer_list<double> times) {
  FlowHistory h;
  for (double t : times) {
    h.states.push_back(to_state(d, t));
    h.saved.push_back(diagnose(h.states.back()));
  }
  h.steps = h.saved;
  h.t_origin = h.states.front().t;
  h.rm_initial = h.saved.front().sup_rm;
  return h;
}

// Every evolving run made below, for the criteria that sweep the whole suite.
struct Suite {
  std::deque<std::pair<std::string, FlowHistory>> runs;

  const FlowHistory& add(std::string name, const InitialData& d, const FlowConfig& cfg) {
    for (const auto& [key, h] : runs)
      if (key == name) return h;
    runs.emplace_back(std::move(name), run(to_state(d), cfg));
    return runs.back().second;
  }

  const FlowHistory& sphere_exact() {
    FlowConfig cfg;
    cfg.cfl = 1.0;
    cfg.rm_ratio = 100;
    cfg.save_rm_factor = 1.2;
    return add("sphere_512", round_sphere(512, 2, 1.0), cfg);
  }
  const FlowHistory& torus(int nodes) {
    FlowConfig cfg;
    cfg.t_max = 0.5;
    cfg.save_dt = 0.01;
    cfg.save_rm_factor = 0.0;
    return add(fmt::format("coupled_torus_{}", nodes), flat_torus(nodes, 2 * pi, 1.0, PhiProfile{0.1, 1}), cfg);
  }
  const FlowHistory& sphere_short(int nodes) {
    FlowConfig cfg;
    cfg.t_max = 0.3;
    cfg.save_dt = 0.32 / nodes;
    cfg.save_rm_factor = 0.0;
    return add(fmt::format("sphere_short_{}", nodes), round_sphere(nodes, 2, 1.0), cfg);
  }
  // Runs to sup|Rm| = 20 with saves refined along with the grid.
  const FlowHistory& sphere_near(int nodes, double phi_amplitude = 0.0) {
    FlowConfig cfg;
    cfg.cfl = 1.0;
    cfg.rm_ratio = 20.0;
    cfg.save_rm_factor = 1.0 + 1.28 / nodes;
    return add(fmt::format("sphere_near_{}_phi{}", nodes, phi_amplitude),
               round_sphere(nodes, 2, 1.0, PhiProfile{phi_amplitude, 1}), cfg);
  }
  const FlowHistory& sphere_limit() {
    FlowConfig cfg;
    cfg.rm_ratio = 50;
    cfg.save_rm_factor = 1.02;
    return add("sphere_limit_64", round_sphere(64, 2, 1.0), cfg);
  }
  const FlowHistory& large_sphere() {
    FlowConfig cfg;
    cfg.t_max = 0.3;
    cfg.save_dt = 0.005;
    cfg.save_rm_factor = 0.0;
    return add("large_sphere_256", round_sphere(256, 2, 0.01), cfg);
  }
  const FlowHistory& neckpinch() {
    FlowConfig cfg;
    cfg.rm_ratio = 2000;
    cfg.save_rm_factor = 1.05;
    cfg.save_dt = 0.002;
    return add("dumbbell_256", dumbbell(256, 0.25, 2), cfg);
  }
  const FlowHistory& coupled_singular() {
    FlowConfig cfg;
    cfg.rm_ratio = 4e5;
    cfg.save_rm_factor = 1.02;
    return add("coupled_sphere_64", round_sphere(64, 2, 1.0, PhiProfile{0.1, 1}), cfg);
  }
};

Suite suite;

int dimension(const FlowHistory& h) { return 1 + h.states.front().metric.grid.fiber_dim; }

double flat_kernel(double d, double tau) { return std::exp(-d * d / (4 * tau)) / (4 * pi * tau); }

double bump(double y, double b) {
  const double t = y / b;
  return std::abs(t) < 1 ? std::pow(1 - t * t, 4) : 0.0;
}

// ---- criteria -----------------------------------------------------------------------------

Outcome check_exact_sphere() {
  Outcome o;
  const auto& h = suite.sphere_exact();
  const double T = 0.5;
  double worst = 0.0;
  for (const auto& d : h.steps) {
    if (d.t > 0.9 * T) break;
    worst = std::max(worst, std::abs(d.sup_rm * 2 * (T - d.t) - 1));
  }
  o.require(worst < 1e-2, "sup|Rm| tracking");
  o.require(h.t_est && std::abs(*h.t_est - T) <= 1e-2, "T_est");
  o.require(h.type_one_constant && std::abs(*h.type_one_constant / 0.5 - 1) <= 2e-2, "C0");
  o.note(fmt::format("512 nodes, worst relative error {:.3g} for t <= 0.45, T_est {:.6f}, C0 {:.6f}", worst,
                     h.t_est.value_or(NAN), h.type_one_constant.value_or(NAN)));
  return o;
}

Outcome check_curvature_oracle() {
  Outcome o;
  const fixture::RandomFamily fam(20240607u);
  const double e512 = fixture::oracle_error(fam, 512), e1024 = fixture::oracle_error(fam, 1024);
  const double ratio = e512 / e1024;
  o.require(e1024 < 1e-6, "error at 1024 nodes");
  o.require(std::abs(ratio - 4) <= 0.5, "refinement ratio");
  o.note(fmt::format("relative error {:.3g} (512), {:.3g} (1024), ratio {:.3f}", e512, e1024, ratio));
  return o;
}

Outcome check_s_evolution() {
  Outcome o;
  const auto torus = s_evolution_check(suite.torus(32), suite.torus(64));
  o.require(torus.status == CheckStatus::pass, "coupled torus order");
  o.note("coupled torus 32/64: " + torus.notes);
  const auto& fine = suite.sphere_short(128);
  const auto sphere = s_evolution_check(suite.sphere_short(64), fine);
  o.require(sphere.status == CheckStatus::pass, "sphere order");
  o.note("sphere 64/128: " + sphere.notes);
  const double identity = sphere_identity_residual(fine);
  o.require(identity < 1e-3, "sphere identity");
  o.note(fmt::format("sphere identity residual {:.3g}", identity));
  return o;
}

Outcome check_phi_bounds() {
  Outcome o;
  double worst = std::numeric_limits<double>::infinity();
  std::string where;
  for (const auto& [name, h] : suite.runs) {
    const auto m = phi_monitors(h);
    const double w = std::min({m.upper, m.lower, m.gradient});
    if (w < worst) {
      worst = w;
      where = name;
    }
  }
  o.require(worst >= -1e-8, "margin on " + where);
  o.note(fmt::format("{} runs, smallest margin {:.3g} ({})", suite.runs.size(), worst, where));
  return o;
}

Outcome check_flat_reduced_distance() {
  Outcome o;
  const HistorySampler flat(std::vector<FlowState>{to_state(flat_torus(128, 2 * pi, 1.0))});
  const LBase base{0.5, 1.0};
  ReducedDistanceOptions opts;
  opts.oracle = true;
  double exact_err = 0.0, oracle_err = 0.0;
  for (double d : {0.0, 0.25, 0.5, 1.0, 1.5}) {  // half the injectivity radius is pi/2
    for (double tau : {0.1, 0.5, 1.0}) {
      const auto r = reduced_distance(flat, base, base.x + d, tau, opts);
      o.require(r.status == SolveStatus::resolved, "flat solve resolved");
      const double exact = d * d / (4 * tau);
      exact_err = std::max(exact_err, std::abs(r.ell - exact) / std::max(exact, 1e-9));
      oracle_err = std::max(oracle_err, std::abs(r.ell - r.ell_oracle.value_or(NAN)) / (1 + r.ell));
    }
  }
  const HistorySampler sphere(suite.sphere_near(128));
  for (double q : {0.3, 1.0, 2.0}) {
    for (double tau : {0.02, 0.2}) {
      const auto r = reduced_distance(sphere, LBase{0.0, 0.45}, q, tau, opts);
      o.require(r.status == SolveStatus::resolved, "sphere solve resolved");
      oracle_err = std::max(oracle_err, std::abs(r.ell - r.ell_oracle.value_or(NAN)) / (1 + r.ell));
    }
  }
  o.require(exact_err <= 1e-3, "flat closed form");
  o.require(oracle_err <= 1e-3, "path oracle agreement");
  o.note(fmt::format("flat relative error {:.3g}; oracle disagreement {:.3g} x (1 + ell) over flat and sphere",
                     exact_err, oracle_err));
  return o;
}

Outcome check_reduced_volume() {
  Outcome o;
  auto series_check = [&](const std::string& name, const ReducedVolumeSeries& s) {
    const double margin = s.monotonicity_margin(), lim = s.limit_at_zero();
    o.require(margin >= -1e-6, name + " monotonicity");
    o.require(std::abs(lim - 1) <= 1e-3, name + " limit at zero");
    o.note(fmt::format("{}: margin {:.3g}, limit {:.6f}", name, margin, lim));
  };
  const HistorySampler flat(std::vector<FlowState>{to_state(flat_torus(64, 2 * pi, 1.0))});
  const std::vector<double> flat_taus{0.01, 0.02, 0.05, 0.1, 0.3, 0.6};
  series_check("flat torus", reduced_volume_series(flat, LBase{0.0, 1.0}, flat_taus, 32));
  const std::vector<double> taus{0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4};
  series_check("sphere", reduced_volume_series(HistorySampler(suite.sphere_near(128)), LBase{0.0, 0.45}, taus));
  series_check("coupled sphere",
               reduced_volume_series(HistorySampler(suite.sphere_near(128, 0.1)), LBase{0.0, 0.45}, taus));
  const double bases[] = {0.45, 0.48}, ts[] = {0.1, 0.2, 0.3, 0.4};
  const auto tab = reduced_volume_limit(suite.sphere_limit(), 0.0, bases, ts);
  o.require(tab.max_v <= 1 + 1e-3, "limit table bound");
  o.require(tab.monotonicity_margin >= -1e-6, "limit table monotonicity");
  o.note(fmt::format("limit table max V {:.6f}", tab.max_v));
  return o;
}

Outcome check_min_reduced_distance() {
  Outcome o;
  double worst = std::numeric_limits<double>::infinity();
  int fields = 0;
  auto sweep = [&](const std::string& name, const HistorySampler& smp, LBase base, int n,
                   std::initializer_list<double> taus) {
    for (double tau : taus) {
      const auto f = ell_field(smp, base, tau);
      const double m = 0.5 * n - *std::min_element(f.ell.begin(), f.ell.end());
      o.require(m >= -1e-2, fmt::format("{} at tau {}", name, tau));
      worst = std::min(worst, m);
      ++fields;
    }
  };
  const HistorySampler flat(std::vector<FlowState>{to_state(flat_torus(128, 2 * pi, 1.0))});
  sweep("flat torus", flat, LBase{0.0, 1.0}, 2, {0.1, 0.5, 1.0});
  sweep("coupled torus", HistorySampler(suite.torus(64)), LBase{0.0, 0.45}, 2, {0.05, 0.2, 0.4});
  sweep("sphere", HistorySampler(suite.sphere_near(128)), LBase{0.0, 0.45}, 2, {0.05, 0.1, 0.2, 0.4});
  sweep("coupled sphere", HistorySampler(suite.sphere_near(128, 0.1)), LBase{0.0, 0.45}, 2, {0.05, 0.1, 0.2, 0.4});
  o.note(fmt::format("{} fields, smallest n/2 - min ell {:.4f}", fields, worst));
  return o;
}

Outcome check_conjugate_heat() {
  Outcome o;
  {
    const HistorySampler cap(std::vector<FlowState>{to_state(gaussian_cap(401, 3.0, 1.0, 1), -1.0)});
    std::vector<double> u(cap.grid().nodes);
    for (int i = 0; i < cap.grid().nodes; ++i) u[i] = flat_kernel(cap.grid().x(i), 0.3);
    const auto v = v_field(conj_state_from_density(cap.state_at(-0.3), 0.0, 0.0, u));
    double worst = 0.0;
    for (double x : v.v) worst = std::max(worst, std::abs(x));
    o.require(worst < 1e-4, "flat exact kernel");
    o.note(fmt::format("flat exact kernel max |v| {:.3g}", worst));
  }
  double mass_dev = 0.0, int_v_margin = std::numeric_limits<double>::infinity();
  std::vector<double> box_residual;
  std::string table;
  for (int nodes : {64, 128, 256}) {
    const HistorySampler smp(suite.sphere_near(nodes));
    const double h = smp.grid().spacing;
    for (double factor : {4.0, 8.0}) {
      if (factor == 8.0 && nodes == 64) continue;
      ConjHeatOptions opts;
      opts.save_dt = 0.64 / nodes;
      const auto states = solve_backward(smp, 0.0, 0.45, 0.05, factor * h, opts);
      double max_v = -std::numeric_limits<double>::infinity();
      std::vector<double> int_v;
      for (const auto& s : states) {
        mass_dev = std::max(mass_dev, std::abs(s.mass - 1));
        const auto v = v_field(s);
        if (s.tau() >= 0.05) max_v = std::max(max_v, v.max_v);
        int_v.push_back(v.int_v);
      }
      // states run backward in t
      for (std::size_t k = 1; k < int_v.size(); ++k) int_v_margin = std::min(int_v_margin, int_v[k - 1] - int_v[k]);
      if (nodes >= 128 && factor == 4.0) o.require(max_v <= 1e-2, fmt::format("max v at {} nodes", nodes));
      table += fmt::format(" ({}, {:.4f}, {:.4f}): {:+.4f}", nodes, h, factor * h, max_v);
      if (factor == 4.0 && nodes <= 128) {
        std::size_t mid = 1;
        while (states[mid].t > 0.25 + 1e-9) ++mid;
        box_residual.push_back(box_star_v_residual(states[mid - 1], states[mid], states[mid + 1]).max_abs_residual);
      }
    }
  }
  const double order = std::log2(box_residual[0] / box_residual[1]);
  o.require(mass_dev <= 1e-3, "mass");
  o.require(int_v_margin >= -1e-6, "integral of v nondecreasing in t");
  o.require(order >= 1.0, "box residual order");
  o.note(fmt::format("mass deviation {:.3g}; int v margin {:.3g}; box residual order {:.2f}", mass_dev,
                     int_v_margin, order));
  o.note("max v over tau >= 0.05 at (nodes, h, sigma0):" + table);
  return o;
}

Outcome check_log_sobolev() {
  Outcome o;
  double worst = 0.0;
  for (int n : {1, 2, 3}) {
    for (double sigma : {0.5, 1.0, 2.0}) {
      const auto p = gaussian_profile(n, sigma);
      const double closed = 0.5 * n - 0.5 * n / (sigma * sigma) - n * std::log(sigma);
      worst = std::max({worst, std::abs(log_sobolev_basic(p).lhs - closed), std::abs(log_sobolev_optimized(p).margin())});
    }
  }
  o.require(worst < 1e-6, "Gaussian equality");
  double perturbed = std::numeric_limits<double>::infinity();
  for (double eps : {0.1, 0.3}) {
    for (int n : {1, 2, 3}) {
      const auto p = perturbed_gaussian_profile(n, eps);
      perturbed = std::min({perturbed, -log_sobolev_basic(p).lhs, log_sobolev_optimized(p).margin()});
    }
  }
  o.require(perturbed > 0, "perturbed margin");
  double scan_steps = 0.0;
  for (const auto& p : {gaussian_profile(2, 2.0), gaussian_profile(3, 0.5), perturbed_gaussian_profile(2, 0.3)}) {
    const auto scan = scale_scan(p);
    scan_steps = std::max(scan_steps, std::abs(scan.c_argmax - scan.c_closed) / scan.step);
  }
  o.require(scan_steps <= 1.0, "scale scan argmax");
  o.note(fmt::format("Gaussian worst deviation {:.3g}; smallest perturbed margin {:.3g}; scan offset {:.2f} steps",
                     worst, perturbed, scan_steps));
  return o;
}

Outcome check_symmetrization() {
  Outcome o;
  const auto torus = flat_torus(2048, 2 * pi, 2.0);
  const auto& g = torus.metric.grid;
  {
    const double sd = 0.25, A2 = 0.6;
    auto gauss = [&](double y) { return std::exp(-y * y / (sd * sd)); };
    std::vector<double> phi(g.nodes);
    for (int i = 0; i < g.nodes; ++i) phi[i] = gauss(g.x(i) - pi / 2) + A2 * gauss(g.x(i) - 3 * pi / 2);
    const auto r = symmetrize(torus.metric, phi);
    auto halfwidth = [&](double s, double A) { return s >= A ? 0.0 : sd * std::sqrt(std::log(A / s)); };
    double table = 0.0;
    for (std::size_t k = 1; k < r.level.size(); ++k) {
      const double s = r.level[k];
      const double exact = 2 * pi * 2.0 * 2 * (halfwidth(s, 1.0) + halfwidth(s, A2));
      table = std::max({table, std::abs(r.vol_m[k] - exact), std::abs(r.vol_rn(static_cast<int>(k)) - exact)});
    }
    const auto in = rearrangement_integrals(r);
    const double l2 = std::abs(in.l2_m - in.l2_rn), ent = std::abs(in.entropy_m - in.entropy_rn);
    o.require(table < 1e-6, "distribution function");
    o.require(l2 < 1e-4, "L2 preserved");
    o.require(ent < 1e-4, "entropy preserved");
    o.note(fmt::format("two Gaussian bumps: table error {:.3g}, L2 {:.3g}, entropy {:.3g}", table, l2, ent));
  }
  {
    std::vector<double> phi(g.nodes);
    for (int i = 0; i < g.nodes; ++i) phi[i] = bump(g.x(i) - (pi - 1), 0.6) + 0.6 * bump(g.x(i) - (pi + 1), 0.6);
    const auto r = symmetrize(torus.metric, phi);
    const int center = g.nodes / 2;
    const auto e = energy_comparison(r, isoperimetric_deficit(torus.metric, center, 1.7).delta, center, 1.7);
    o.require(e.margin >= -1e-4, "torus energy margin");
    o.note(fmt::format("torus compact bumps energy margin {:.4g}", e.margin));
  }
  {
    const auto s2 = round_sphere(1025, 2, 1.0);
    std::vector<double> phi(s2.metric.grid.nodes);
    for (int i = 0; i < s2.metric.grid.nodes; ++i) phi[i] = bump(s2.metric.grid.x(i), 1.0);
    const auto r = symmetrize(s2.metric, phi);
    const auto deficit = isoperimetric_deficit(s2.metric, 0, 1.0);
    const auto e = energy_comparison(r, deficit.delta, 0, 1.0);
    o.require(e.margin >= -1e-4, "sphere cap energy margin");
    o.note(fmt::format("sphere cap delta {:.4g}, energy margin {:.4g}", deficit.delta, e.margin));
  }
  return o;
}

Outcome check_solitons() {
  Outcome o;
  {
    const auto s2 = round_sphere(512, 2, 1.0);
    const int n = s2.metric.grid.nodes;
    const auto r = soliton_residuals({s2.metric, std::vector<double>(n, 0.0), std::vector<double>(n, 1.0), 0.5});
    o.require(r.max_equation() < 1e-6, "sphere equation");
    o.require(r.dispersion < 1e-6, "sphere dispersion");
    o.require(r.min_S >= 0, "sphere S >= 0");
    o.note(fmt::format("sphere: equation {:.3g}, dispersion {:.3g}, min S {:.6f}", r.max_equation(), r.dispersion,
                       r.min_S));
  }
  const auto cap = gaussian_cap(512, 3.0, 1.0, 1);
  const int n = cap.metric.grid.nodes;
  const double tau = 0.7;
  std::vector<double> f(n);
  for (int i = 0; i < n; ++i) f[i] = cap.metric.grid.x(i) * cap.metric.grid.x(i) / (4 * tau);
  const std::vector<double> zero(n, 0.0);
  const auto r = soliton_residuals({cap.metric, zero, f, tau, 2.5});
  o.require(r.max_equation() < 1e-6, "Gaussian equation");
  o.require(r.dispersion < 1e-6, "Gaussian dispersion");
  o.require(r.min_S >= -1e-6, "Gaussian S >= 0");
  std::vector<double> eps{1e-3, 1e-2, 1e-1}, res;
  for (double e : eps) {
    auto g = f;
    for (int i = 0; i < n; ++i) g[i] += e * std::sin(cap.metric.grid.x(i));
    res.push_back(soliton_residuals({cap.metric, zero, g, tau, 2.5}).max_equation());
  }
  const double slope = std::log(res[2] / res[0]) / std::log(eps[2] / eps[0]);
  o.require(std::abs(slope - 1) <= 0.2, "perturbation slope");
  o.note(fmt::format("Gaussian: equation {:.3g}, dispersion {:.3g}, min S {:.3g}; perturbation slope {:.3f}",
                     r.max_equation(), r.dispersion, r.min_S, slope));
  return o;
}

Outcome check_pseudolocality() {
  Outcome o;
  const auto flat = static_history(flat_torus(128, 2 * pi, 2.0), {0.0, 0.5, 1.0});
  for (double eps : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    PseudolocalityOptions opts;
    opts.p_x = pi;
    opts.eps = eps;
    const auto r = pseudolocality_experiment(flat, opts);
    o.require(r.hypotheses && std::abs(r.eps_ok - eps) < 1e-12 && r.conclusion_margin >= 0,
              fmt::format("flat at eps {}", eps));
  }
  o.note("flat: eps 0.1 to 0.9 all hold");
  {
    PseudolocalityOptions opts;
    opts.eps = 0.5;
    const auto r = pseudolocality_experiment(suite.large_sphere(), opts);
    o.require(r.hypotheses, "near-Euclidean hypotheses");
    o.require(std::abs(r.eps_ok - 0.5) < 1e-12 && r.conclusion_margin >= 0, "near-Euclidean conclusion");
    o.note(fmt::format("near-Euclidean cap: delta {:.3g}, eps_ok {}, margin {:.3g}", r.delta, r.eps_ok,
                       r.conclusion_margin));
  }
  {
    PseudolocalityOptions opts;
    opts.r0 = 0.3;
    opts.eps = 0.5;
    const auto r = pseudolocality_experiment(suite.neckpinch(), opts);
    o.require(r.hypotheses, "dumbbell hypotheses");
    o.require(std::abs(r.eps_ok - 0.5) < 1e-12 && r.conclusion_margin >= 0, "dumbbell conclusion");
    o.require(r.global_growth >= 1e3, "dumbbell global growth");
    o.note(fmt::format("dumbbell: eps_ok {}, margin {:.3g}, global growth {:.3g}", r.eps_ok, r.conclusion_margin,
                       r.global_growth));
  }
  return o;
}

Outcome check_blowup() {
  Outcome o;
  const auto b = blowup_analysis(suite.coupled_singular());
  o.require(b.type_one, "Type I detection");
  o.require(b.levels.size() == 3, "three levels");
  if (!o.pass) return o;
  std::string rows;
  for (std::size_t k = 0; k < b.levels.size(); ++k) {
    const auto& l = b.levels[k];
    o.require(l.gradient_margin > 0, fmt::format("gradient margin at lambda {}", l.lambda));
    o.require(l.rescaled_rm >= 0.4, fmt::format("non-triviality at lambda {}", l.lambda));
    if (k > 0)
      o.require(l.soliton_residual <= b.levels[k - 1].soliton_residual,
                fmt::format("residual nonincreasing at lambda {}", l.lambda));
    rows += fmt::format(" lambda {}: residual {:.3g}, |Rm| {:.3f}, gradient margin {:.3f};", l.lambda,
                        l.soliton_residual, l.rescaled_rm, l.gradient_margin);
  }
  o.require(b.levels.back().soliton_residual < 1e-2, "residual at lambda 64");
  rows.pop_back();
  o.note("coupled sphere 64 nodes:" + rows);
  return o;
}

Outcome check_point_selection() {
  Outcome o;
  int selections = 0, verified = 0;
  const double A = 10.0;
  for (const auto& [name, h] : suite.runs) {
    const auto lat = curvature_lattice(h, h.states.front().metric.grid.x0);
    const double alpha = 1.0 / (200.0 * dimension(h));
    for (double eps : {0.3, 0.5}) {
      const auto sel = point_select(lat, alpha, eps, A);
      if (!sel) continue;
      ++selections;
      const auto chk = verify_selection(lat, *sel, alpha, eps, A);
      const bool ok = chk.domination && chk.neighborhood && chk.points_checked > 0;
      verified += ok;
      o.require(ok, fmt::format("{} at eps {}", name, eps));
    }
  }
  o.require(selections > 0, "at least one selection");
  o.note(fmt::format("{} of {} selections verified over {} runs", verified, selections, suite.runs.size()));
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> check;
  };
  // Suite-wide sweeps (4, 14) run last so they see every evolving run.
  const std::vector<Criterion> order{
      {1, "shrinking sphere tracks the exact solution", check_exact_sphere},
      {2, "curvature against the Riemann oracle", check_curvature_oracle},
      {3, "S evolution residual convergence", check_s_evolution},
      {5, "flat reduced distance and path oracle", check_flat_reduced_distance},
      {6, "reduced volume monotonicity", check_reduced_volume},
      {7, "minimum of the reduced distance", check_min_reduced_distance},
      {8, "conjugate heat kernel", check_conjugate_heat},
      {9, "log-Sobolev functionals", check_log_sobolev},
      {10, "symmetrization invariants", check_symmetrization},
      {11, "shrinking soliton residuals", check_solitons},
      {12, "pseudo-locality experiment", check_pseudolocality},
      {13, "blow-up sequence", check_blowup},
      {4, "phi maximum principle and gradient bound", check_phi_bounds},
      {14, "point selection verification", check_point_selection},
  };
  struct Line {
    int id;
    std::string text;
  };
  std::vector<Line> lines;
  bool all = true;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& c : order) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.check();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && out.pass;
    lines.push_back({c.id, fmt::format("criterion {:2d}: {} {}: {} [{:.1f} s]", c.id, out.pass ? "PASS" : "FAIL",
                                       c.name, out.detail, secs)});
    fmt::print(stderr, "criterion {} done in {:.1f} s\n", c.id, secs);
  }
  std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  for (const auto& l : lines) fmt::print("{}\n", l.text);
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  fmt::print("{} in {:.1f} s\n", all ? "all criteria passed" : "some criteria FAILED", total);
  return all ? 0 : 1;
}
