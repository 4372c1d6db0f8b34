#include "cflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/interpolators/cubic_hermite.hpp>
#include <fmt/format.h>

namespace cflow {

namespace {

double interior_min_warp(const WarpedMetric& m) {
  double out = std::numeric_limits<double>::infinity();
  for (int i = 0; i < m.grid.nodes; ++i)
    if (!m.grid.is_pole(i)) out = std::min(out, m.w[i]);
  return out;
}

double diameter(const WarpedMetric& m) {
  const double len = total_length(m);
  return m.grid.periodic() ? 0.5 * len : len;
}

struct Packed {
  std::vector<double> a2, w2, phi;
};

Packed pack(const FlowState& s) {
  Packed p;
  const int n = s.metric.grid.nodes;
  p.a2.resize(n);
  p.w2.resize(n);
  for (int i = 0; i < n; ++i) {
    p.a2[i] = s.metric.a[i] * s.metric.a[i];
    p.w2[i] = s.metric.w[i] * s.metric.w[i];
  }
  p.phi = s.phi;
  return p;
}

// base + c * k, written into `out` (which shares the grid of base).
void axpy_state(const Packed& base, const FlowRates& k, double c, FlowState& out) {
  const int n = static_cast<int>(base.a2.size());
  for (int i = 0; i < n; ++i) {
    const double a2 = base.a2[i] + c * k.a2[i];
    const double w2 = base.w2[i] + c * k.w2[i];
    if (!(a2 > 0.0)) throw InvalidMetric(fmt::format("lapse collapsed at node {}", i), i);
    out.metric.a[i] = std::sqrt(a2);
    out.metric.w[i] = out.metric.grid.is_pole(i) ? 0.0 : std::sqrt(std::max(w2, 0.0));
    out.phi[i] = base.phi[i] + c * k.phi[i];
  }
}

FlowState rk4_step(const FlowState& s, const CurvatureState& curv, double dt) {
  const Packed base = pack(s);
  const FlowRates k1 = rhs(s, curv);
  FlowState stage = s;
  axpy_state(base, k1, 0.5 * dt, stage);
  const FlowRates k2 = rhs(stage);
  axpy_state(base, k2, 0.5 * dt, stage);
  const FlowRates k3 = rhs(stage);
  axpy_state(base, k3, dt, stage);
  const FlowRates k4 = rhs(stage);
  FlowRates total;
  const int n = s.metric.grid.nodes;
  total.a2.resize(n);
  total.w2.resize(n);
  total.phi.resize(n);
  for (int i = 0; i < n; ++i) {
    total.a2[i] = (k1.a2[i] + 2 * k2.a2[i] + 2 * k3.a2[i] + k4.a2[i]) / 6.0;
    total.w2[i] = (k1.w2[i] + 2 * k2.w2[i] + 2 * k3.w2[i] + k4.w2[i]) / 6.0;
    total.phi[i] = (k1.phi[i] + 2 * k2.phi[i] + 2 * k3.phi[i] + k4.phi[i]) / 6.0;
  }
  FlowState next = s;
  axpy_state(base, total, dt, next);
  next.t = s.t + dt;
  next.metric.validate();
  return next;
}

double elapsed_floor(double t) { return std::max(t, 0.0); }

std::vector<double> slopes_in_s(const WarpedMetric& m, std::span<const double> f, bool odd) {
  auto out = d_dx4(m.grid, f, odd);
  for (size_t i = 0; i < out.size(); ++i) out[i] /= m.a[i];
  return out;
}

// Hyman's filter: where the data is monotone across a node, clip the slope to three
// times the smaller adjacent secant so each cubic piece stays monotone.
void limit_slopes(std::span<const double> x, std::span<const double> y, std::span<double> d) {
  for (size_t i = 1; i + 1 < x.size(); ++i) {
    const double left = (y[i] - y[i - 1]) / (x[i] - x[i - 1]);
    const double right = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
    if (left * right <= 0.0) continue;
    const double bound = 3.0 * std::min(std::abs(left), std::abs(right));
    if (d[i] * left <= 0.0) d[i] = 0.0;
    else if (std::abs(d[i]) > bound) d[i] = std::copysign(bound, left);
  }
}

}  // namespace

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::t_max: return "t_max";
    case StopReason::curvature: return "curvature";
    case StopReason::min_warp: return "min_warp";
    case StopReason::dt_underflow: return "dt_underflow";
    case StopReason::numeric: return "numeric";
    case StopReason::max_steps: return "max_steps";
  }
  return "unknown";
}

void FlowConfig::validate() const {
  if (!(cfl > 0.0 && cfl <= 1.0)) throw DomainError("cfl_factor must lie in (0, 1]");
  if (!(t_max > 0.0)) throw DomainError("t_max must be positive");
  if (!(rm_ratio > 1.0)) throw DomainError("rm_ratio must exceed 1");
  if (!(min_warp_ratio > 0.0 && min_warp_ratio < 1.0)) throw DomainError("min_warp_ratio must lie in (0, 1)");
  if (save_every_steps < 0 || save_dt < 0.0 || save_rm_factor < 0.0)
    throw DomainError("save cadence must be non-negative");
  if (save_rm_factor > 0.0 && save_rm_factor <= 1.0) throw DomainError("save_rm_factor must exceed 1");
  if (regrid_threshold < 0.0 || (regrid_threshold > 0.0 && regrid_threshold <= 1.0))
    throw DomainError("regrid threshold must exceed 1");
}

Diagnostics diagnose(const FlowState& state, const CurvatureState& curv) {
  Diagnostics d;
  d.t = state.t;
  d.sup_rm = curv.rm_norm;
  for (double g : curv.phi_s) d.sup_gradphi2 = std::max(d.sup_gradphi2, g * g);
  const auto [pmin, pmax] = std::minmax_element(state.phi.begin(), state.phi.end());
  d.min_phi = *pmin;
  d.max_phi = *pmax;
  const auto [smin, smax] = std::minmax_element(curv.s.begin(), curv.s.end());
  d.min_s = *smin;
  d.max_s = *smax;
  const auto [amin, amax] = std::minmax_element(state.metric.a.begin(), state.metric.a.end());
  d.grid_quality = *amax / *amin;
  return d;
}

Diagnostics diagnose(const FlowState& state) { return diagnose(state, curvature(state.metric, state.phi)); }

FlowRates rhs(const FlowState& state, const CurvatureState& curv) {
  const int n = state.metric.grid.nodes;
  FlowRates r;
  r.a2.resize(n);
  r.w2.resize(n);
  for (int i = 0; i < n; ++i) {
    r.a2[i] = -2.0 * curv.sic_rad[i] * state.metric.a[i] * state.metric.a[i];
    r.w2[i] = -2.0 * curv.sic_fib[i] * state.metric.w[i] * state.metric.w[i];
  }
  r.phi = laplacian(state.metric, state.phi);
  return r;
}

FlowRates rhs(const FlowState& state) { return rhs(state, curvature(state.metric, state.phi)); }

double stable_dt(const FlowState& state, const CurvatureState& curv, double cfl) {
  const auto& m = state.metric;
  const int n = m.grid.dim();
  const double a_min = *std::min_element(m.a.begin(), m.a.end());
  const double cell = a_min * m.grid.spacing;
  const auto diag = laplacian_diagonal(m);
  double sic = 0.0;
  for (size_t i = 0; i < diag.size(); ++i)
    sic = std::max({sic, std::abs(curv.sic_rad[i]), std::abs(curv.sic_fib[i])});
  double rho = 0.0;
  for (double d : diag) rho = std::max(rho, 2.0 * std::abs(d));
  const double stiffness = (rho + 2.0 * sic) * cell * cell / (4.0 * n);
  return cfl * cell * cell / (2.0 * n * std::max(1.0, stiffness));
}

FlowHistory run(const FlowState& initial, const FlowConfig& config) {
  config.validate();
  initial.metric.validate();
  FlowHistory h;
  h.t_origin = initial.t;
  const auto [pmin, pmax] = std::minmax_element(initial.phi.begin(), initial.phi.end());
  h.phi0_min = *pmin;
  h.phi0_max = *pmax;
  h.phi0_sup = std::max(std::abs(*pmin), std::abs(*pmax));

  FlowState state = initial;
  CurvatureState curv = curvature(state.metric, state.phi);
  h.rm_initial = curv.rm_norm;
  const double diam = diameter(state.metric);
  const double rm_stop = config.rm_ratio * std::max(h.rm_initial, 1.0 / (diam * diam));
  const double warp_stop = config.min_warp_ratio * interior_min_warp(state.metric);
  const double t_end = initial.t + config.t_max;

  long since_save = 0;
  double last_save_t = state.t;
  double last_save_rm = curv.rm_norm;
  auto save = [&](const Diagnostics& d) {
    h.states.push_back(state);
    h.saved.push_back(d);
    since_save = 0;
    last_save_t = state.t;
    last_save_rm = d.sup_rm;
  };

  Diagnostics diag = diagnose(state, curv);
  h.steps.push_back(diag);
  save(diag);

  while (true) {
    std::optional<StopReason> stop;
    if (curv.rm_norm >= rm_stop) stop = StopReason::curvature;
    else if (interior_min_warp(state.metric) <= warp_stop) stop = StopReason::min_warp;
    else if (state.t >= t_end - 1e-12 * std::max(1.0, std::abs(t_end))) stop = StopReason::t_max;
    else if (h.step_count >= config.max_steps) stop = StopReason::max_steps;

    double dt = 0.0;
    if (!stop) {
      dt = stable_dt(state, curv, config.cfl);
      if (dt < config.dt_min) stop = StopReason::dt_underflow;
    }
    if (stop) {
      h.stop = *stop;
      if (h.states.back().t != state.t) save(diag);
      break;
    }
    dt = std::min(dt, t_end - state.t);
    if (config.save_dt > 0.0) {
      const double next_save = last_save_t + config.save_dt;
      if (next_save - state.t > 0.0) dt = std::min(dt, next_save - state.t);
    }

    try {
      FlowState next = rk4_step(state, curv, dt);
      if (config.regrid_threshold > 0.0) {
        const auto [amin, amax] = std::minmax_element(next.metric.a.begin(), next.metric.a.end());
        if (*amax / *amin > config.regrid_threshold) {
          next = regrid(next);
          ++h.regrids;
        }
      }
      CurvatureState next_curv = curvature(next.metric, next.phi);
      state = std::move(next);
      curv = std::move(next_curv);
      ++h.step_count;
      ++since_save;
    } catch (const InvalidMetric&) {
      h.stop = StopReason::numeric;
    } catch (const NumericError&) {
      h.stop = StopReason::numeric;
    }
    if (h.stop == StopReason::numeric) {
      // Keep the last good state.
      if (h.states.back().t != state.t) save(diag);
      break;
    }
    diag = diagnose(state, curv);
    h.steps.push_back(diag);

    bool due = false;
    if (config.save_every_steps > 0 && since_save >= config.save_every_steps) due = true;
    if (config.save_dt > 0.0 && state.t - last_save_t >= config.save_dt * (1.0 - 1e-9)) due = true;
    if (config.save_rm_factor > 0.0 && diag.sup_rm >= config.save_rm_factor * last_save_rm && diag.sup_rm > 0.0)
      due = true;
    if (due) save(diag);
  }
  attach_blowup(h);
  return h;
}

std::optional<BlowupEstimate> detect_blowup(const FlowHistory& history, double threshold_fraction) {
  if (history.stop == StopReason::t_max || history.stop == StopReason::max_steps) return std::nullopt;
  const auto& rows = history.steps;
  if (rows.size() < 3) return std::nullopt;
  const double final_rm = rows.back().sup_rm;
  if (!(final_rm > 0.0)) return std::nullopt;
  size_t first = rows.size() - 1;
  while (first > 0 && rows[first - 1].sup_rm >= 0.1 * final_rm) --first;
  first = std::min(first, rows.size() - 3);

  double st = 0, sy = 0, stt = 0, sty = 0;
  const double cnt = static_cast<double>(rows.size() - first);
  const double t_ref = rows.back().t;
  for (size_t k = first; k < rows.size(); ++k) {
    const double t = rows[k].t - t_ref;
    const double y = 1.0 / rows[k].sup_rm;
    st += t;
    sy += y;
    stt += t * t;
    sty += t * y;
  }
  const double slope = (cnt * sty - st * sy) / (cnt * stt - st * st);
  const double icpt = (sy - slope * st) / cnt;
  if (!(slope < 0.0)) return std::nullopt;

  BlowupEstimate out;
  out.t_est = t_ref - icpt / slope;
  out.fit_window_start = rows[first].t;

  double c0 = 0.0;
  for (const auto& r : rows)
    if (r.t < out.t_est) c0 = std::max(c0, (out.t_est - r.t) * r.sup_rm);
  const int epoch = history.states.back().epoch;
  const int nodes = history.states.back().metric.grid.nodes;
  std::vector<double> peak(nodes, 0.0);
  for (const auto& s : history.states) {
    if (s.epoch != epoch || s.t < out.fit_window_start || s.t >= out.t_est) continue;
    const auto c = curvature(s.metric, s.phi);
    for (int i = 0; i < nodes; ++i) peak[i] = std::max(peak[i], (out.t_est - s.t) * c.rm_node[i]);
  }
  for (int i = 0; i < nodes; ++i)
    if (peak[i] >= threshold_fraction * c0) out.singular_nodes.push_back(i);
  return out;
}

std::optional<double> type_one_diagnostic(const FlowHistory& history) {
  std::optional<double> t_est = history.t_est;
  if (!t_est) {
    const auto b = detect_blowup(history);
    if (!b) return std::nullopt;
    t_est = b->t_est;
  }
  double c0 = 0.0;
  for (const auto& r : history.steps)
    if (r.t < *t_est) c0 = std::max(c0, (*t_est - r.t) * r.sup_rm);
  return c0;
}

void attach_blowup(FlowHistory& history) {
  const auto b = detect_blowup(history);
  if (!b) return;
  history.t_est = b->t_est;
  history.type_one_constant = type_one_diagnostic(history);
}

FlowHistory parabolic_rescale(const FlowHistory& history, double lambda) {
  if (!(lambda > 0.0)) throw DomainError("rescale factor must be positive");
  if (!history.t_est) throw DomainError("rescaling needs an estimated singular time");
  const double T = *history.t_est;
  const double root = std::sqrt(lambda);
  auto map_t = [&](double t) { return lambda * (t - T); };

  FlowHistory out = history;
  for (auto& s : out.states) {
    for (double& a : s.metric.a) a *= root;
    for (double& w : s.metric.w) w *= root;
    s.t = map_t(s.t);
  }
  for (size_t k = 0; k < out.states.size(); ++k) out.saved[k] = diagnose(out.states[k]);
  for (auto& r : out.steps) {
    r.t = map_t(r.t);
    r.sup_rm /= lambda;
    r.sup_gradphi2 /= lambda;
    r.min_s /= lambda;
    r.max_s /= lambda;
  }
  out.t_origin = map_t(history.t_origin);
  out.rm_initial = history.rm_initial / lambda;
  out.t_est = 0.0;
  return out;
}

PhiMargins phi_monitors(const FlowHistory& history) {
  PhiMargins m;
  m.upper = m.lower = m.gradient = std::numeric_limits<double>::infinity();
  const double c2 = history.phi0_sup * history.phi0_sup;
  for (const auto& r : history.steps) {
    m.upper = std::min(m.upper, history.phi0_max - r.max_phi);
    m.lower = std::min(m.lower, r.min_phi - history.phi0_min);
    const double elapsed = r.t - history.t_origin;
    if (elapsed > 0.0) {
      const double margin = c2 / elapsed - r.sup_gradphi2;
      if (margin < m.gradient) {
        m.gradient = margin;
        m.t_worst_gradient = r.t;
      }
    }
  }
  return m;
}

DerivativeMonitor derivative_estimate_monitor(const FlowHistory& history, int order) {
  if (order != 1 && order != 2) throw DomainError("derivative monitor order must be 1 or 2");
  DerivativeMonitor out;
  for (const auto& s : history.states) {
    const double elapsed = elapsed_floor(s.t - history.t_origin);
    if (elapsed <= 0.0) continue;
    const auto c = curvature(s.metric, s.phi);
    const int n = s.metric.grid.nodes;
    const auto w_s = d_ds(s.metric, s.metric.w);
    const auto phi_ss = d_ds(s.metric, c.phi_s);
    std::vector<std::vector<double>> comps{c.k_rad, c.k_fib, phi_ss, std::vector<double>(n, 0.0)};
    for (int i = 0; i < n; ++i)
      comps[3][i] = s.metric.grid.is_pole(i) ? phi_ss[i] : w_s[i] / s.metric.w[i] * c.phi_s[i];
    double sup = 0.0;
    std::vector<double> total(n, 0.0);
    for (auto& comp : comps) {
      for (int k = 0; k < order; ++k) comp = d_ds(s.metric, comp);
      for (int i = 0; i < n; ++i) total[i] += comp[i] * comp[i];
    }
    for (double v : total) sup = std::max(sup, v);
    const double r = diameter(s.metric);
    const double scale = std::pow(1.0 / (r * r) + 1.0 / elapsed, order + 2);
    out.t.push_back(s.t);
    out.ratio.push_back(sup / scale);
    out.sup_ratio = std::max(out.sup_ratio, sup / scale);
  }
  return out;
}

FlowState regrid(const FlowState& state) {
  using boost::math::interpolators::cubic_hermite;
  const Grid& g = state.metric.grid;
  const int n = g.nodes;
  // Arclength by trapezoid plus the Euler-Maclaurin end correction, fourth order; the plain
  // trapezoid misplaces nodes by O(h^2), which the pole curvature amplifies to O(1).
  const auto a_x = d_dx4(g, state.metric.a, false);
  const double h = g.spacing;
  std::vector<double> s(n, 0.0);
  auto cell = [&](int l, int r) {
    return 0.5 * h * (state.metric.a[l] + state.metric.a[r]) + h * h / 12.0 * (a_x[l] - a_x[r]);
  };
  for (int i = 1; i < n; ++i) {
    s[i] = s[i - 1] + cell(i - 1, i);
    if (!(s[i] > s[i - 1])) throw DomainError(fmt::format("arclength not monotone at node {}", i));
  }
  const double total = g.periodic() ? s.back() + cell(n - 1, 0) : s.back();
  const auto dw = slopes_in_s(state.metric, state.metric.w, true);
  const auto dphi = slopes_in_s(state.metric, state.phi, false);

  std::vector<double> xs, ws, ps, dws, dps;
  const int pad = g.periodic() ? 3 : 0;
  for (int k = -pad; k < n + pad; ++k) {
    const int j = ((k % n) + n) % n;
    const double shift = k < 0 ? -total : (k >= n ? total : 0.0);
    xs.push_back(s[j] + shift);
    ws.push_back(state.metric.w[j]);
    ps.push_back(state.phi[j]);
    dws.push_back(dw[j]);
    dps.push_back(dphi[j]);
  }
  limit_slopes(xs, ws, dws);
  limit_slopes(xs, ps, dps);
  auto xs2 = xs;
  cubic_hermite<std::vector<double>> w_of_s(std::move(xs), std::move(ws), std::move(dws));
  cubic_hermite<std::vector<double>> phi_of_s(std::move(xs2), std::move(ps), std::move(dps));

  FlowState out = state;
  const double ds = g.periodic() ? total / n : total / (n - 1);
  const double a_new = ds / g.spacing;
  for (int i = 0; i < n; ++i) {
    const double target = g.periodic() ? i * ds : std::min(i * ds, s.back());
    out.metric.a[i] = a_new;
    out.metric.w[i] = g.is_pole(i) ? 0.0 : w_of_s(target);
    out.phi[i] = phi_of_s(target);
  }
  ++out.epoch;
  out.metric.validate();
  return out;
}

}  // namespace cflow
