#include "cflow/conjheat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

namespace cflow {

namespace {

constexpr double pi = std::numbers::pi;

double pole_distance(const WarpedMetric& metric, double pole, std::vector<double>& out) {
  out = arclength(metric);
  const double total = out.back();
  if (pole > 0.5 * metric.grid.coordinate_length())
    for (auto& s : out) s = total - s;
  return total;
}

void require_pole(const Grid& g, double x) {
  if (g.periodic()) throw DomainError("conjugate heat kernels are centred on a pole; periodic grids have none");
  const double len = g.coordinate_length();
  if (std::abs(x) > 1e-12 * len && std::abs(x - len) > 1e-12 * len)
    throw DomainError(fmt::format("kernel centre {} is not a pole", x));
}

struct Geometry {
  WarpedMetric metric;
  std::vector<double> S;
};

Geometry geometry_at(const HistorySampler& sampler, double t) {
  auto st = sampler.state_at(t);
  auto c = curvature(st.metric, st.phi);
  return {std::move(st.metric), std::move(c.s)};
}

std::vector<double> conj_rate(const Geometry& geo, std::span<const double> u) {
  auto r = laplacian(geo.metric, u);
  for (size_t i = 0; i < r.size(); ++i) r[i] -= geo.S[i] * u[i];
  return r;
}

// Radial and fiber eigenvalues of Hess f and the radial derivative f_s.
struct Hessian {
  std::vector<double> f_s, rad, fib;
};

Hessian hessian(const WarpedMetric& metric, std::span<const double> f) {
  const Grid& g = metric.grid;
  const int N = g.nodes;
  Hessian H;
  const auto fx = d_dx(g, f);
  H.f_s.resize(N);
  for (int i = 0; i < N; ++i) H.f_s[i] = fx[i] / metric.a[i];
  const auto fsx = d_dx(g, H.f_s, true);
  const auto wx = d_dx(g, metric.w, true);
  H.rad.resize(N);
  H.fib.resize(N);
  for (int i = 0; i < N; ++i) {
    H.rad[i] = fsx[i] / metric.a[i];
    // At a pole the fiber direction is radial in the limit.
    H.fib[i] = g.is_pole(i) ? H.rad[i] : (wx[i] / metric.a[i]) / metric.w[i] * H.f_s[i];
  }
  return H;
}

double max_unmasked(std::span<const double> v, const std::vector<char>& masked) {
  double m = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < v.size(); ++i)
    if (!masked[i]) m = std::max(m, v[i]);
  return m;
}

}  // namespace

ConjHeatState conj_state_from_density(const FlowState& flow, double x_bar, double t_bar, std::vector<double> u,
                                      double u_floor) {
  ConjHeatState s;
  s.x_bar = x_bar;
  s.t_bar = t_bar;
  s.t = flow.t;
  s.flow = flow;
  const double tau = t_bar - flow.t;
  if (!(tau > 0)) throw DomainError("conjugate heat state needs t < t_bar");
  const int n = flow.metric.grid.dim();
  const double shift = 0.5 * n * std::log(4 * pi * tau);
  s.f.resize(u.size());
  s.masked.assign(u.size(), 0);
  for (size_t i = 0; i < u.size(); ++i) {
    if (!(u[i] > u_floor)) s.masked[i] = 1;
    s.f[i] = -std::log(std::max(u[i], u_floor)) - shift;
  }
  s.mass = integrate(flow.metric, u);
  s.u = std::move(u);
  return s;
}

std::vector<ConjHeatState> solve_backward(const HistorySampler& sampler, double x_bar, double t_bar, double t_stop,
                                          double sigma0, const ConjHeatOptions& opts) {
  const Grid& g = sampler.grid();
  require_pole(g, x_bar);
  if (!(sigma0 > 0)) throw DomainError("sigma0 must be positive");
  const double t_start = t_bar - sigma0 * sigma0;
  if (!(t_stop < t_start)) throw DomainError("t_stop must precede t_bar - sigma0^2");
  if (t_stop < sampler.t_first() - 1e-12 || t_start > sampler.t_last() + 1e-12)
    throw DomainError(fmt::format("history [{}, {}] does not cover [{}, {}]", sampler.t_first(), sampler.t_last(),
                                  t_stop, t_start));
  if (!(opts.cfl > 0 && opts.cfl <= 1)) throw DomainError("cfl must lie in (0, 1]");

  auto geo = geometry_at(sampler, t_start);
  std::vector<double> d;
  pole_distance(geo.metric, x_bar, d);
  std::vector<double> u(g.nodes);
  for (int i = 0; i < g.nodes; ++i) u[i] = std::exp(-d[i] * d[i] / (4 * sigma0 * sigma0));
  const double m0 = integrate(geo.metric, u);
  for (auto& x : u) x /= m0;

  const double save_dt = opts.save_dt > 0 ? opts.save_dt : (t_start - t_stop) / 50.0;
  std::vector<ConjHeatState> out;
  auto flow_at = [&](double t) { return sampler.state_at(t); };
  out.push_back(conj_state_from_density(flow_at(t_start), x_bar, t_bar, u, opts.u_floor));
  double t = t_start;
  double next_save = t_start - save_dt;
  std::vector<double> tmp(g.nodes);
  while (t > t_stop + 1e-14 * std::max(1.0, std::abs(t_stop))) {
    const auto diag = laplacian_diagonal(geo.metric);
    double lmax = 0.0, smax = 0.0;
    for (int i = 0; i < g.nodes; ++i) {
      lmax = std::max(lmax, std::abs(diag[i]));
      smax = std::max(smax, std::abs(geo.S[i]));
    }
    double dt = opts.cfl * 2.5 / (2 * lmax + smax);
    const double target = std::max(next_save, t_stop);
    bool save = false;
    if (t - dt <= target + 1e-15 * std::max(1.0, std::abs(target))) {
      dt = t - target;
      save = true;
    }
    const auto mid = geometry_at(sampler, t - 0.5 * dt);
    const auto end = geometry_at(sampler, t - dt);
    const auto k1 = conj_rate(geo, u);
    for (int i = 0; i < g.nodes; ++i) tmp[i] = u[i] + 0.5 * dt * k1[i];
    const auto k2 = conj_rate(mid, tmp);
    for (int i = 0; i < g.nodes; ++i) tmp[i] = u[i] + 0.5 * dt * k2[i];
    const auto k3 = conj_rate(mid, tmp);
    for (int i = 0; i < g.nodes; ++i) tmp[i] = u[i] + dt * k3[i];
    const auto k4 = conj_rate(end, tmp);
    double umax = 0.0, umin = 0.0;
    for (int i = 0; i < g.nodes; ++i) {
      u[i] += dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
      if (!std::isfinite(u[i])) throw NumericError("non-finite conjugate heat density", i);
      umax = std::max(umax, u[i]);
      umin = std::min(umin, u[i]);
    }
    if (umin < -opts.negativity_tol * umax) {
      const auto it = std::min_element(u.begin(), u.end());
      throw NumericError(fmt::format("conjugate heat density went negative ({}) at t = {}", umin, t - dt),
                         static_cast<int>(it - u.begin()));
    }
    t -= dt;
    geo = end;
    if (save) {
      out.push_back(conj_state_from_density(flow_at(t), x_bar, t_bar, u, opts.u_floor));
      next_save = t - save_dt;
      if (t <= t_stop) break;
    }
  }
  return out;
}

VField v_field(const ConjHeatState& state) {
  const auto& metric = state.flow.metric;
  const Grid& g = metric.grid;
  const int n = g.dim();
  const double tau = state.tau();
  const auto c = curvature(metric, state.flow.phi);
  const auto lap_f = laplacian(metric, state.f);
  const auto fx = d_dx(g, state.f);
  VField out;
  out.v.assign(g.nodes, 0.0);
  for (int i = 0; i < g.nodes; ++i) {
    out.max_u = std::max(out.max_u, state.u[i]);
    if (state.masked[i]) {
      ++out.masked;
      continue;
    }
    const double grad2 = fx[i] * fx[i] / (metric.a[i] * metric.a[i]);
    out.v[i] = (tau * (2 * lap_f[i] - grad2 + c.s[i]) + state.f[i] - n) * state.u[i];
  }
  out.max_v = max_unmasked(out.v, state.masked);
  out.int_v = integrate(metric, out.v);
  return out;
}

double w_functional(const ConjHeatState& state) {
  const auto& metric = state.flow.metric;
  const Grid& g = metric.grid;
  const int n = g.dim();
  const double tau = state.tau();
  const auto c = curvature(metric, state.flow.phi);
  const auto fx = d_dx(g, state.f);
  std::vector<double> integrand(g.nodes, 0.0);
  for (int i = 0; i < g.nodes; ++i) {
    if (state.masked[i]) continue;
    const double grad2 = fx[i] * fx[i] / (metric.a[i] * metric.a[i]);
    integrand[i] = (tau * (grad2 + c.s[i]) + state.f[i] - n) * state.u[i];
  }
  return integrate(metric, integrand);
}

BoxStarResidual box_star_v_residual(const ConjHeatState& later, const ConjHeatState& mid, const ConjHeatState& earlier) {
  if (!(later.t > mid.t && mid.t > earlier.t)) throw DomainError("box residual needs states ordered by decreasing t");
  const auto& metric = mid.flow.metric;
  const Grid& g = metric.grid;
  if (later.u.size() != mid.u.size() || earlier.u.size() != mid.u.size())
    throw DomainError("box residual needs states on one grid");
  const int N = g.nodes, m = g.fiber_dim;
  const double tau = mid.tau();
  const auto vl = v_field(later), vm = v_field(mid), ve = v_field(earlier);
  const double h1 = later.t - mid.t, h0 = mid.t - earlier.t;
  const auto lap_v = laplacian(metric, vm.v);
  const auto c = curvature(metric, mid.flow.phi);
  const auto H = hessian(metric, mid.f);
  const auto lap_phi = laplacian(metric, mid.flow.phi);
  const auto phi_x = d_dx(g, mid.flow.phi);

  BoxStarResidual out;
  out.box.assign(N, 0.0);
  out.rhs.assign(N, 0.0);
  out.residual.assign(N, 0.0);
  out.max_box = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < N; ++i) {
    if (later.masked[i] || mid.masked[i] || earlier.masked[i]) continue;
    // The pole control volume carries an O(h^2) error in Lap f with its own constant; a
    // second Laplacian turns that kink into an O(1) error on the pole and its neighbour.
    if (!g.periodic() && (i <= 1 || i >= N - 2)) continue;
    const double v_t = (h0 * h0 * (vl.v[i] - vm.v[i]) + h1 * h1 * (vm.v[i] - ve.v[i])) / (h0 * h1 * (h0 + h1));
    out.box[i] = -v_t - lap_v[i] + c.s[i] * vm.v[i];
    const double er = c.sic_rad[i] + H.rad[i] - 1 / (2 * tau);
    const double ef = c.sic_fib[i] + H.fib[i] - 1 / (2 * tau);
    const double drift = lap_phi[i] - phi_x[i] / metric.a[i] * H.f_s[i];
    out.rhs[i] = -2 * tau * (er * er + m * ef * ef + drift * drift) * mid.u[i];
    out.residual[i] = out.box[i] - out.rhs[i];
    out.max_abs_residual = std::max(out.max_abs_residual, std::abs(out.residual[i]));
    out.max_box = std::max(out.max_box, out.box[i]);
  }
  return out;
}

double CutoffProfile::value(double y) {
  if (y <= 1) return 1.0;
  if (y >= 2) return 0.0;
  const double z = y - 1;
  const double q = z * z * z * (3.7 - 3.9 * z + 1.2 * z * z);
  return (1 - q) * (1 - q);
}

double CutoffProfile::d1(double y) {
  if (y <= 1 || y >= 2) return 0.0;
  const double z = y - 1;
  const double q = z * z * z * (3.7 - 3.9 * z + 1.2 * z * z);
  const double dq = z * z * (11.1 - 15.6 * z + 6.0 * z * z);
  return -2 * (1 - q) * dq;
}

double CutoffProfile::d2(double y) {
  if (y <= 1 || y >= 2) return 0.0;
  const double z = y - 1;
  const double q = z * z * z * (3.7 - 3.9 * z + 1.2 * z * z);
  const double dq = z * z * (11.1 - 15.6 * z + 6.0 * z * z);
  const double ddq = z * (22.2 - 46.8 * z + 24.0 * z * z);
  return 2 * dq * dq - 2 * (1 - q) * ddq;
}

ProfileMargins verify_profile(int samples) {
  ProfileMargins m;
  m.gradient = m.curvature = std::numeric_limits<double>::infinity();
  // Sample [0.5, 2.5] so both plateaus and both junctions are covered.
  for (int k = 0; k <= samples; ++k) {
    const double y = 0.5 + 2.0 * k / samples;
    const double p = CutoffProfile::value(y), p1 = CutoffProfile::d1(y), p2 = CutoffProfile::d2(y);
    m.gradient = std::min(m.gradient, 10 * p - p1 * p1);
    m.curvature = std::min(m.curvature, 10 * p + p2);
  }
  m.samples = samples + 1;
  return m;
}

std::vector<double> CutoffFunction::shifted_distance(const FlowState& state) const {
  std::vector<double> d;
  pole_distance(state.metric, center, d);
  const int n = state.metric.grid.dim();
  const double shift = 200.0 * n * std::sqrt(std::max(0.0, state.t - t_origin));
  for (auto& x : d) x += shift;
  return d;
}

std::vector<double> CutoffFunction::h(const FlowState& state) const {
  auto d = shifted_distance(state);
  for (auto& x : d) x = CutoffProfile::value(x / scale());
  return d;
}

CutoffFunction build_cutoff(double A, double eps, const FlowHistory& history, double center) {
  if (!(A >= 1)) throw DomainError("cutoff needs A >= 1");
  if (!(eps > 0)) throw DomainError("cutoff needs eps > 0");
  if (history.states.empty()) throw DomainError("cutoff needs a non-empty history");
  require_pole(history.states.front().metric.grid, center);
  const auto margins = verify_profile();
  if (margins.gradient < -1e-12 || margins.curvature < -1e-12)
    throw std::logic_error("cutoff profile violates its derivative bounds");
  CutoffFunction c;
  c.A = A;
  c.eps = eps;
  c.center = center;
  c.t_origin = history.t_origin;
  return c;
}

CutoffHeatCheck cutoff_heat_check(const CutoffFunction& cutoff, const FlowHistory& history) {
  CutoffHeatCheck out;
  out.worst_margin = std::numeric_limits<double>::infinity();
  const auto& st = history.states;
  const double scale = cutoff.scale();
  for (size_t k = 1; k + 1 < st.size(); ++k) {
    if (st[k - 1].epoch != st[k].epoch || st[k + 1].epoch != st[k].epoch) continue;
    const auto hm = cutoff.h(st[k - 1]), h0 = cutoff.h(st[k]), hp = cutoff.h(st[k + 1]);
    const double a0 = st[k].t - st[k - 1].t, a1 = st[k + 1].t - st[k].t;
    const auto lap = laplacian(st[k].metric, h0);
    const auto dt = cutoff.shifted_distance(st[k]);
    for (int i = 0; i < st[k].metric.grid.nodes; ++i) {
      if (dt[i] < 0.9 * scale || dt[i] > 2.1 * scale) continue;
      const double h_t = (a0 * a0 * (hp[i] - h0[i]) + a1 * a1 * (h0[i] - hm[i])) / (a0 * a1 * (a0 + a1));
      const double bound = -CutoffProfile::d2(dt[i] / scale) / (scale * scale);
      out.worst_margin = std::min(out.worst_margin, bound - (h_t - lap[i]));
      ++out.nodes_checked;
    }
  }
  return out;
}

LocalizedSeries localized_integral(const CutoffFunction& cutoff, const std::vector<ConjHeatState>& states) {
  LocalizedSeries out;
  out.bound = 1.0 / (10.0 * cutoff.A * cutoff.eps * cutoff.A * cutoff.eps);
  out.worst_margin = std::numeric_limits<double>::infinity();
  for (const auto& s : states) {
    const auto v = v_field(s);
    const auto h = cutoff.h(s.flow);
    std::vector<double> hv(h.size());
    for (size_t i = 0; i < h.size(); ++i) hv[i] = h[i] * v.v[i];
    out.t.push_back(s.t);
    out.integral.push_back(integrate(s.flow.metric, hv));
  }
  for (size_t k = 0; k + 1 < out.t.size(); ++k) {
    const double a = -out.integral[k], b = -out.integral[k + 1];
    if (!(a > 0 && b > 0)) {
      out.log_derivative.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double ld = (std::log(a) - std::log(b)) / (out.t[k] - out.t[k + 1]);
    out.log_derivative.push_back(ld);
    out.worst_margin = std::min(out.worst_margin, out.bound - ld);
  }
  return out;
}

DistanceMargins distance_evolution_check(const FlowHistory& history, double x0, double r0) {
  if (!(r0 > 0)) throw DomainError("r0 must be positive");
  DistanceMargins out;
  out.one_ball = out.two_ball = std::numeric_limits<double>::infinity();
  for (const auto& st : history.states) {
    const auto& metric = st.metric;
    const Grid& g = metric.grid;
    const int N = g.nodes, n = g.dim(), m = g.fiber_dim;
    const auto c = curvature(metric, st.phi);
    const auto s = arclength(metric);
    const double total = total_length(metric);
    // Cumulative int sic_rad a dx, the rate at which arclength shrinks.
    std::vector<double> shrink(N, 0.0);
    for (int i = 1; i < N; ++i)
      shrink[i] = shrink[i - 1] + 0.5 * g.spacing * (c.sic_rad[i - 1] * metric.a[i - 1] + c.sic_rad[i] * metric.a[i]);
    double shrink_total = shrink[N - 1];
    if (g.periodic())
      shrink_total += 0.5 * g.spacing * (c.sic_rad[N - 1] * metric.a[N - 1] + c.sic_rad[0] * metric.a[0]);
    const double u = (x0 - g.x0) / g.spacing;
    const int i0 = std::clamp(static_cast<int>(std::lround(u)), 0, N - 1);
    const auto wx = d_dx(g, metric.w, true);
    std::vector<double> d(N), d_t(N), dir(N);
    for (int i = 0; i < N; ++i) {
      const double fwd = s[i] - s[i0];
      const double sh = shrink[i] - shrink[i0];
      if (!g.periodic()) {
        d[i] = std::abs(fwd);
        dir[i] = fwd >= 0 ? 1 : -1;
        d_t[i] = -dir[i] * sh;
      } else {
        const double f = fwd >= 0 ? fwd : fwd + total;
        const double shf = fwd >= 0 ? sh : sh + shrink_total;
        if (f <= total - f) {
          d[i] = f;
          d_t[i] = -shf;
          dir[i] = 1;
        } else {
          d[i] = total - f;
          d_t[i] = -(shrink_total - shf);
          dir[i] = -1;
        }
      }
    }
    double K = 0.0;
    for (int i = 0; i < N; ++i)
      if (d[i] <= r0) K = std::max(K, std::max(c.ric_rad[i], c.ric_fib[i]) / (n - 1));
    const double slack = (n - 1) * (2.0 / 3.0 * K * r0 + 1.0 / r0);
    for (int i = 0; i < N; ++i) {
      if (d[i] <= r0 || g.is_pole(i)) continue;
      const double lap_d = dir[i] * m * (wx[i] / metric.a[i]) / metric.w[i];
      out.one_ball = std::min(out.one_ball, d_t[i] - lap_d + slack);
      ++out.samples;
    }
    if (!g.periodic()) {
      // Two balls of radius r0 around both poles.
      double K2 = 0.0;
      for (int i = 0; i < N; ++i)
        if (s[i] <= r0 || total - s[i] <= r0) K2 = std::max(K2, std::max(c.ric_rad[i], c.ric_fib[i]) / (n - 1));
      out.two_ball = std::min(out.two_ball, -shrink[N - 1] + 2 * (n - 1) * (2.0 / 3.0 * K2 * r0 + 1.0 / r0));
    }
  }
  return out;
}

}  // namespace cflow
