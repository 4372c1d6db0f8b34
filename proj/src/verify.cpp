#include "cflow/verify.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "cflow/sampler.hpp"

namespace cflow {

namespace {

constexpr double pi = std::numbers::pi;
constexpr double inf = std::numeric_limits<double>::infinity();

double ghost(const Grid& g, std::span<const double> f, int i, bool odd) {
  const int n = g.nodes;
  if (g.periodic()) return f[((i % n) + n) % n];
  if (i < 0) return odd ? -f[-i] : f[-i];
  if (i >= n) {
    const int j = 2 * (n - 1) - i;
    return odd ? -f[j] : f[j];
  }
  return f[i];
}

std::vector<double> d2_dx2_4(const Grid& g, std::span<const double> f, bool odd) {
  std::vector<double> out(g.nodes);
  const double inv = 1.0 / (12.0 * g.spacing * g.spacing);
  for (int i = 0; i < g.nodes; ++i)
    out[i] = (-ghost(g, f, i + 2, odd) + 16.0 * ghost(g, f, i + 1, odd) - 30.0 * f[i] +
              16.0 * ghost(g, f, i - 1, odd) - ghost(g, f, i - 2, odd)) * inv;
  return out;
}

// Fourth-order geometry of (g, phi) for residual checks.
struct FineGeometry {
  std::vector<double> k_rad, k_fib, S, sic_rad, sic_fib, w_ratio;  // w_ratio = w_s / w, NaN at poles
  int m = 1;
};

// Arclength first and second derivatives of an even field.
struct Derivs {
  std::vector<double> s, ss;
};

Derivs derivs4(const WarpedMetric& g, std::span<const double> f) {
  const auto fx = d_dx4(g.grid, f, false);
  const auto fxx = d2_dx2_4(g.grid, f, false);
  const auto ax = d_dx4(g.grid, g.a, false);
  Derivs d{std::vector<double>(f.size()), std::vector<double>(f.size())};
  for (size_t i = 0; i < f.size(); ++i) {
    const double a = g.a[i];
    d.s[i] = fx[i] / a;
    d.ss[i] = fxx[i] / (a * a) - ax[i] * fx[i] / (a * a * a);
  }
  return d;
}

FineGeometry fine_geometry(const WarpedMetric& g, std::span<const double> phi) {
  const Grid& grid = g.grid;
  const int n = grid.nodes, m = grid.fiber_dim;
  const auto wx = d_dx4(grid, g.w, true);
  const auto wxx = d2_dx2_4(grid, g.w, true);
  const auto ax = d_dx4(grid, g.a, false);
  FineGeometry out;
  out.m = m;
  out.k_rad.assign(n, 0.0);
  out.k_fib.assign(n, 0.0);
  out.w_ratio.assign(n, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> w_s(n);
  for (int i = 0; i < n; ++i) {
    const double a = g.a[i];
    w_s[i] = wx[i] / a;
    if (grid.is_pole(i)) continue;
    const double w_ss = wxx[i] / (a * a) - ax[i] * wx[i] / (a * a * a);
    out.k_rad[i] = -w_ss / g.w[i];
    out.w_ratio[i] = w_s[i] / g.w[i];
  }
  if (!grid.periodic()) {
    // even in the distance to the pole: fit c0 + c1 x^2 + c2 x^4 through three nodes
    out.k_rad[0] = (15.0 * out.k_rad[1] - 6.0 * out.k_rad[2] + out.k_rad[3]) / 10.0;
    out.k_rad[n - 1] = (15.0 * out.k_rad[n - 2] - 6.0 * out.k_rad[n - 3] + out.k_rad[n - 4]) / 10.0;
  }
  if (m >= 2)
    for (int i = 0; i < n; ++i)
      out.k_fib[i] = grid.is_pole(i) ? out.k_rad[i]
                                     : (grid.fiber_curvature - w_s[i] * w_s[i]) / (g.w[i] * g.w[i]);
  const auto dphi = derivs4(g, phi);
  out.S.resize(n);
  out.sic_rad.resize(n);
  out.sic_fib.resize(n);
  for (int i = 0; i < n; ++i) {
    const double ric_rad = m * out.k_rad[i];
    const double ric_fib = out.k_rad[i] + (m - 1) * out.k_fib[i];
    const double grad2 = dphi.s[i] * dphi.s[i];
    out.sic_rad[i] = ric_rad - grad2;
    out.sic_fib[i] = ric_fib;
    out.S[i] = ric_rad + m * ric_fib - grad2;
  }
  return out;
}

std::vector<double> laplacian4(const WarpedMetric& g, const FineGeometry& geo, const Derivs& d) {
  const int m = g.grid.fiber_dim;
  std::vector<double> out(d.s.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = g.grid.is_pole(static_cast<int>(i)) ? (1 + m) * d.ss[i] : d.ss[i] + m * geo.w_ratio[i] * d.s[i];
  return out;
}

// Weights of the first derivative at x0 of the interpolant through xs.
std::vector<double> derivative_weights(double x0, std::span<const double> xs) {
  const size_t n = xs.size();
  std::vector<double> w(n, 0.0);
  for (size_t j = 0; j < n; ++j) {
    double denom = 1.0;
    for (size_t l = 0; l < n; ++l)
      if (l != j) denom *= xs[j] - xs[l];
    double num = 0.0;
    for (size_t k = 0; k < n; ++k) {
      if (k == j) continue;
      double prod = 1.0;
      for (size_t l = 0; l < n; ++l)
        if (l != j && l != k) prod *= x0 - xs[l];
      num += prod;
    }
    w[j] = num / denom;
  }
  return w;
}

int nearest_node(const Grid& g, double x) {
  if (g.periodic()) {
    const double L = g.coordinate_length();
    double u = std::fmod(x - g.x0, L);
    if (u < 0) u += L;
    return static_cast<int>(std::lround(u / g.spacing)) % g.nodes;
  }
  return std::clamp(static_cast<int>(std::lround((x - g.x0) / g.spacing)), 0, g.nodes - 1);
}

// Cubic Hermite interpolation of a nodal profile with fourth-order slopes.
class Interp {
 public:
  Interp(const Grid& g, std::span<const double> f, bool odd)
      : grid_(g), f_(f.begin(), f.end()), slope_(d_dx4(g, f, odd)) {}
  // value and x-derivative
  std::pair<double, double> operator()(double x) const {
    const double h = grid_.spacing;
    double u = (x - grid_.x0) / h;
    int k = static_cast<int>(std::floor(u));
    if (!grid_.periodic()) k = std::clamp(k, 0, grid_.nodes - 2);
    const double t = u - k;
    const int i0 = grid_.periodic() ? ((k % grid_.nodes) + grid_.nodes) % grid_.nodes : k;
    const int i1 = (i0 + 1) % grid_.nodes;
    const double y0 = f_[i0], y1 = f_[i1], m0 = slope_[i0] * h, m1 = slope_[i1] * h;
    const double t2 = t * t, t3 = t2 * t;
    const double v = (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * m1;
    const double dv = (6 * t2 - 6 * t) * y0 + (3 * t2 - 4 * t + 1) * m0 + (-6 * t2 + 6 * t) * y1 + (3 * t2 - 2 * t) * m1;
    return {v, dv / h};
  }

 private:
  Grid grid_;
  std::vector<double> f_, slope_;
};

// Measure of the fiber cap {angle <= psi}: 2 psi for circles, the spherical cap otherwise.
double fiber_cap(int m, double psi) {
  if (m == 1) return 2.0 * psi;
  if (m == 2) return 2.0 * pi * (1.0 - std::cos(psi));
  const int steps = 200;
  double sum = 0.0;
  for (int k = 0; k <= steps; ++k) {
    const double wgt = (k == 0 || k == steps) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    sum += wgt * std::pow(std::sin(psi * k / steps), m - 1);
  }
  return sphere_volume(m - 1) * sum * psi / (3.0 * steps);
}

bool is_pole_coordinate(const Grid& g, double x) {
  if (g.periodic()) return false;
  const double tol = 1e-9 * g.coordinate_length();
  return std::abs(x - g.x0) < tol || std::abs(x - (g.x0 + g.coordinate_length())) < tol;
}

}  // namespace

std::string to_string(CheckStatus s) {
  switch (s) {
    case CheckStatus::pass: return "pass";
    case CheckStatus::fail: return "fail";
    case CheckStatus::monitor: return "monitor";
  }
  return "monitor";
}

// ---- S evolution -------------------------------------------------------------------------

SEvolutionResidual s_evolution_residual(const FlowHistory& history, double t_window) {
  SEvolutionResidual out;
  const auto& st = history.states;
  std::vector<std::vector<double>> S(st.size());
  std::vector<bool> used(st.size(), false);
  for (size_t k = 0; k < st.size(); ++k) {
    const bool inside = !(t_window > 0.0) || st[k].t - history.t_origin <= t_window + 1e-12;
    if (inside) {
      S[k] = curvature(st[k].metric, st[k].phi).s;
      used[k] = true;
    }
  }
  for (size_t k = 2; k + 2 < st.size(); ++k) {
    bool ok = true;
    for (size_t j = k - 2; j <= k + 2; ++j) ok = ok && used[j] && st[j].epoch == st[k].epoch;
    if (!ok) continue;
    const double ts[5] = {st[k - 2].t, st[k - 1].t, st[k].t, st[k + 1].t, st[k + 2].t};
    const auto wts = derivative_weights(ts[2], ts);
    const auto& s = st[k];
    const auto c = curvature(s.metric, s.phi);
    const auto lap_S = laplacian(s.metric, c.s);
    const auto lap_phi = laplacian(s.metric, s.phi);
    const int m = s.metric.grid.fiber_dim;
    ++out.states_used;
    for (int i = 0; i < s.metric.grid.nodes; ++i) {
      double s_t = 0.0;
      for (int j = 0; j < 5; ++j) s_t += wts[j] * S[k - 2 + j][i];
      const double sic2 = c.sic_rad[i] * c.sic_rad[i] + m * c.sic_fib[i] * c.sic_fib[i];
      const double r = std::abs(s_t - (lap_S[i] + 2.0 * sic2 + 2.0 * lap_phi[i] * lap_phi[i]));
      out.scale = std::max(out.scale, std::abs(s_t));
      if (r > out.max_residual) {
        out.max_residual = r;
        out.node = i;
        out.t = s.t;
      }
    }
  }
  return out;
}

double sphere_identity_residual(const FlowHistory& history) {
  double worst = 0.0;
  for (const auto& s : history.states) {
    const auto c = curvature(s.metric, s.phi);
    const auto lap_S = laplacian(s.metric, c.s);
    const auto lap_phi = laplacian(s.metric, s.phi);
    const int m = s.metric.grid.fiber_dim, n = m + 1;
    for (int i = 0; i < s.metric.grid.nodes; ++i) {
      const double sic2 = c.sic_rad[i] * c.sic_rad[i] + m * c.sic_fib[i] * c.sic_fib[i];
      const double closed = 2.0 / n * c.s[i] * c.s[i];
      const double r = lap_S[i] + 2.0 * sic2 + 2.0 * lap_phi[i] * lap_phi[i] - closed;
      worst = std::max(worst, std::abs(r) / closed);
    }
  }
  return worst;
}

VerificationReport s_evolution_check(const FlowHistory& coarse, const FlowHistory& fine, double t_window) {
  const auto rc = s_evolution_residual(coarse, t_window);
  const auto rf = s_evolution_residual(fine, t_window);
  VerificationReport r;
  r.id = "s_evolution";
  r.anchor = "trace evolution of the coupled scalar curvature S";
  r.resolutions = {{coarse.states.front().metric.grid.nodes, rc.max_residual},
                   {fine.states.front().metric.grid.nodes, rf.max_residual}};
  if (rc.states_used == 0 || rf.states_used == 0) {
    r.status = CheckStatus::monitor;
    r.notes = "fewer than five saved states in one epoch";
    return r;
  }
  if (rf.max_residual == 0.0 && rc.max_residual == 0.0) {
    r.status = CheckStatus::pass;
    r.margin = 1.0;
    r.notes = "residual identically zero";
    return r;
  }
  const double order = std::log2(rc.max_residual / rf.max_residual);
  const double relative = rf.max_residual / std::max(rf.scale, 1e-300);
  r.margin = std::min(order - 1.8, 1e-2 - relative);
  r.status = r.margin >= 0.0 ? CheckStatus::pass : CheckStatus::fail;
  r.notes = fmt::format("observed order {:.3f}, relative residual {:.3g}", order, relative);
  if (r.status == CheckStatus::fail) {
    r.node = rf.node;
    r.t = rf.t;
  }
  return r;
}

// ---- non-collapsing ----------------------------------------------------------------------

std::optional<double> geodesic_ball_volume(const WarpedMetric& metric, double x0, double r, int angles) {
  const Grid& g = metric.grid;
  const int m = g.fiber_dim;
  if (is_pole_coordinate(g, x0)) return ball_geometry(metric, nearest_node(g, x0), r).volume;

  const Interp A(g, metric.a, false), W(g, metric.w, true);
  const double L = g.x0 + g.coordinate_length();
  const int steps = 128;
  const double ds = r / steps;
  const double a0 = A(x0).first, w0 = W(x0).first;
  std::vector<double> xs(angles + 1), psis(angles + 1);
  for (int j = 0; j <= angles; ++j) {
    const double th = pi * j / angles;
    const double c = w0 * std::sin(th);
    struct Y {
      double x, psi, p;
    };
    auto rate = [&](const Y& y) -> std::optional<Y> {
      if (!g.periodic() && (y.x <= g.x0 || y.x >= L)) return std::nullopt;
      const auto [a, a_x] = A(y.x);
      const auto [w, w_x] = W(y.x);
      if (!(a > 0.0) || !(w > 0.0)) return std::nullopt;
      return Y{y.p / (a * a), c / (w * w), y.p * y.p * a_x / (a * a * a) + c * c * w_x / (w * w * w)};
    };
    Y y{x0, 0.0, a0 * std::cos(th)};
    for (int k = 0; k < steps; ++k) {
      const auto k1 = rate(y);
      if (!k1) return std::nullopt;
      const auto k2 = rate({y.x + 0.5 * ds * k1->x, y.psi + 0.5 * ds * k1->psi, y.p + 0.5 * ds * k1->p});
      if (!k2) return std::nullopt;
      const auto k3 = rate({y.x + 0.5 * ds * k2->x, y.psi + 0.5 * ds * k2->psi, y.p + 0.5 * ds * k2->p});
      if (!k3) return std::nullopt;
      const auto k4 = rate({y.x + ds * k3->x, y.psi + ds * k3->psi, y.p + ds * k3->p});
      if (!k4) return std::nullopt;
      y.x += ds / 6 * (k1->x + 2 * k2->x + 2 * k3->x + k4->x);
      y.psi += ds / 6 * (k1->psi + 2 * k2->psi + 2 * k3->psi + k4->psi);
      y.p += ds / 6 * (k1->p + 2 * k2->p + 2 * k3->p + k4->p);
    }
    if (!g.periodic() && (y.x <= g.x0 || y.x >= L)) return std::nullopt;
    xs[j] = y.x;
    psis[j] = y.psi;
  }
  for (int j = 0; j <= angles; ++j) {
    if (psis[j] > pi || psis[j] < -1e-12) return std::nullopt;
    if (j > 0 && xs[j] > xs[j - 1]) return std::nullopt;
  }
  // Both the boundary curve and the integrand are even about theta = 0 and theta = pi,
  // so the trapezoid rule in theta converges fast.
  auto x_at = [&](int j) { return xs[j < 0 ? -j : (j > angles ? 2 * angles - j : j)]; };
  const double dth = pi / angles;
  double vol = 0.0;
  for (int j = 1; j < angles; ++j) {
    const double x_th = (-x_at(j + 2) + 8.0 * (x_at(j + 1) - x_at(j - 1)) + x_at(j - 2)) / (12.0 * dth);
    const double a = A(xs[j]).first, w = W(xs[j]).first;
    vol += a * std::pow(w, m) * fiber_cap(m, psis[j]) * (-x_th);
  }
  return vol * dth;
}

KappaResult kappa_check(const FlowHistory& history, std::span<const double> radii, int state_stride,
                        int node_stride) {
  if (state_stride < 1 || node_stride < 1) throw DomainError("strides must be positive");
  const auto& st = history.states;
  std::vector<std::vector<double>> rm(st.size());
  for (size_t k = 0; k < st.size(); ++k) rm[k] = curvature(st[k].metric, st[k].phi).rm_node;

  KappaResult out;
  out.kappa = inf;
  for (size_t k = 0; k < st.size(); k += state_stride) {
    const auto& s = st[k];
    const Grid& g = s.metric.grid;
    const int n = g.dim();
    std::vector<int> centers;
    for (int i = 0; i < g.nodes; i += node_stride) centers.push_back(i);
    if (!g.periodic() && centers.back() != g.nodes - 1) centers.push_back(g.nodes - 1);
    double kappa_t = inf;
    for (int c : centers) {
      const auto d = distances_from(s.metric, c);
      for (double r : radii) {
        const double t_start = s.t - r * r;
        if (t_start < st.front().t - 1e-12) continue;
        // states covering [t_start, t], including the last one at or before t_start
        size_t first = k;
        while (first > 0 && st[first].t > t_start + 1e-12) --first;
        bool qualifies = true;
        for (size_t j = first; j <= k && qualifies; ++j) {
          if (st[j].epoch != s.epoch) {
            qualifies = false;
            break;
          }
          for (int i = 0; i < g.nodes; ++i)
            if (d[i] <= r && rm[j][i] >= 1.0 / (r * r)) {
              qualifies = false;
              break;
            }
        }
        if (!qualifies) continue;
        const auto vol = geodesic_ball_volume(s.metric, g.x(c), r);
        if (!vol) {
          ++out.skipped;
          continue;
        }
        ++out.qualifying;
        const double ratio = *vol / std::pow(r, n);
        kappa_t = std::min(kappa_t, ratio);
        if (ratio < out.kappa) {
          out.kappa = ratio;
          out.x_at_min = g.x(c);
          out.t_at_min = s.t;
          out.r_at_min = r;
        }
      }
    }
    if (std::isfinite(kappa_t)) {
      out.t.push_back(s.t);
      out.kappa_at_t.push_back(kappa_t);
    }
  }
  if (out.qualifying == 0) out.kappa = 0.0;
  return out;
}

// ---- point selection ---------------------------------------------------------------------

double CurvatureLattice::distance(int k, int i, int j) const {
  const double d = std::abs(arclen[k][i] - arclen[k][j]);
  return periodic ? std::min(d, total[k] - d) : d;
}

CurvatureLattice curvature_lattice(const FlowHistory& history, double p_x) {
  CurvatureLattice lat;
  for (const auto& s : history.states) {
    lat.t.push_back(s.t - history.t_origin);
    lat.rm.push_back(curvature(s.metric, s.phi).rm_node);
    lat.arclen.push_back(arclength(s.metric));
    lat.total.push_back(total_length(s.metric));
    lat.base.push_back(nearest_node(s.metric.grid, p_x));
    lat.periodic = s.metric.grid.periodic();
  }
  return lat;
}

namespace {

bool in_region(const CurvatureLattice& lat, int k, int i, double alpha, double eps) {
  const double t = lat.t[k];
  return t > 0.0 && t <= eps * eps && lat.rm[k][i] > alpha / t && lat.distance(k, i, lat.base[k]) <= eps;
}

}  // namespace

std::optional<Selection> point_select(const CurvatureLattice& lat, double alpha, double eps, double A) {
  const int states = static_cast<int>(lat.t.size());
  // start from the largest |Rm| at the latest time that meets M
  std::optional<Selection> sel;
  for (int k = states - 1; k >= 0 && !sel; --k)
    for (int i = 0; i < static_cast<int>(lat.rm[k].size()); ++i)
      if (in_region(lat, k, i, alpha, eps) && (!sel || lat.rm[k][i] > sel->Q))
        sel = Selection{k, i, lat.t[k], lat.rm[k][i], lat.distance(k, i, lat.base[k]), 0};
  if (!sel) return std::nullopt;
  // Each move at least quadruples Q, so the walk ends on a finite lattice.
  for (;;) {
    const double reach = sel->d + A / std::sqrt(sel->Q);
    int best_k = -1, best_i = -1;
    double best = 4.0 * sel->Q;
    for (int k = 0; k < states && lat.t[k] <= sel->t; ++k)
      for (int i = 0; i < static_cast<int>(lat.rm[k].size()); ++i)
        if (lat.rm[k][i] > best && in_region(lat, k, i, alpha, eps) &&
            lat.distance(k, i, lat.base[k]) <= reach) {
          best = lat.rm[k][i];
          best_k = k;
          best_i = i;
        }
    if (best_k < 0) return sel;
    *sel = Selection{best_k, best_i, lat.t[best_k], best, lat.distance(best_k, best_i, lat.base[best_k]),
                     sel->iterations + 1};
  }
}

SelectionCheck verify_selection(const CurvatureLattice& lat, const Selection& sel, double alpha, double eps,
                                double A) {
  SelectionCheck out;
  out.domination = out.neighborhood = true;
  const double Q = sel.Q;
  const double reach = sel.d + A / std::sqrt(Q);
  const double radius = 0.1 * A / std::sqrt(Q);
  const double t_lo = sel.t - 0.5 * alpha / Q;
  for (int k = 0; k < static_cast<int>(lat.t.size()); ++k) {
    if (lat.t[k] > sel.t) continue;
    const bool in_window = lat.t[k] >= t_lo;
    const bool same_grid = lat.rm[k].size() == lat.rm[sel.state].size();
    for (int i = 0; i < static_cast<int>(lat.rm[k].size()); ++i) {
      const double ratio = lat.rm[k][i] / Q;
      if (in_region(lat, k, i, alpha, eps) && lat.distance(k, i, lat.base[k]) <= reach) {
        ++out.points_checked;
        out.worst_ratio = std::max(out.worst_ratio, ratio);
        if (ratio > 4.0) out.domination = false;
      }
      // the ball is measured in g(tbar)
      if (in_window && same_grid && lat.distance(sel.state, i, sel.node) <= radius) {
        ++out.points_checked;
        out.worst_ratio = std::max(out.worst_ratio, ratio);
        if (ratio > 4.0) out.neighborhood = false;
      }
    }
  }
  return out;
}

// ---- pseudo-locality ---------------------------------------------------------------------

namespace {

// Isoperimetric deficit over geodesic balls about a non-pole centre; the boundary area is
// the radial derivative of the volume.
double geodesic_deficit(const WarpedMetric& metric, double x0, double r_max, int samples) {
  const int n = metric.grid.dim();
  const double c_n = isoperimetric_constant(n);
  double min_ratio = 1.0;
  for (int k = 1; k <= samples; ++k) {
    const double r = r_max * k / samples;
    const double e = 1e-3 * r;
    const auto v = geodesic_ball_volume(metric, x0, r);
    const auto vp = geodesic_ball_volume(metric, x0, r + e);
    const auto vm = geodesic_ball_volume(metric, x0, r - e);
    if (!v || !vp || !vm) continue;
    const double area = (*vp - *vm) / (2 * e);
    min_ratio = std::min(min_ratio, std::pow(area, n) / (c_n * std::pow(*v, n - 1)));
  }
  return 1.0 - min_ratio;
}

}  // namespace

PseudolocalityResult pseudolocality_experiment(const FlowHistory& history, const PseudolocalityOptions& opts) {
  if (history.states.empty()) throw DomainError("empty history");
  if (!(opts.eps > 0.0) || !(opts.r0 > 0.0) || opts.eps_levels < 1) throw DomainError("bad pseudo-locality options");
  const auto& s0 = history.states.front();
  const Grid& g = s0.metric.grid;
  const int n = g.dim();
  const double alpha = opts.alpha > 0.0 ? opts.alpha : 1.0 / (200.0 * n);
  const int p = nearest_node(g, opts.p_x);

  PseudolocalityResult out;
  const auto c0 = curvature(s0.metric, s0.phi);
  const auto d0 = distances_from(s0.metric, p);
  out.s_margin = inf;
  for (int i = 0; i < g.nodes; ++i)
    if (d0[i] <= opts.r0) out.s_margin = std::min(out.s_margin, c0.s[i] + 1.0 / (opts.r0 * opts.r0));
  out.delta = g.is_pole(p) ? isoperimetric_deficit(s0.metric, p, opts.r0).delta
                           : geodesic_deficit(s0.metric, g.x(p), opts.r0, 100);
  out.phi_sup = history.phi0_sup;
  out.hypotheses = out.s_margin >= 0.0 && out.delta <= opts.delta_max && out.phi_sup <= opts.phi_bound;

  const auto lat = curvature_lattice(history, g.x(p));
  out.conclusion_margin = inf;
  for (int level = 1; level <= opts.eps_levels; ++level) {
    const double e = opts.eps * level / opts.eps_levels;
    const double rad = e * opts.r0;
    bool holds = true;
    for (size_t k = 0; k < lat.t.size(); ++k) {
      const double t = lat.t[k];
      if (!(t > 0.0) || t > rad * rad) continue;
      const double bound = alpha / t + 1.0 / (rad * rad);
      for (size_t i = 0; i < lat.rm[k].size(); ++i) {
        if (lat.distance(static_cast<int>(k), static_cast<int>(i), lat.base[k]) > rad) continue;
        if (level == opts.eps_levels) ++out.points_checked;
        const double margin = (bound - lat.rm[k][i]) / bound;
        out.conclusion_margin = std::min(out.conclusion_margin, margin);
        if (margin < 0.0) holds = false;
      }
    }
    if (holds) out.eps_ok = e;
  }
  double peak = 0.0;
  for (const auto& r : history.steps) peak = std::max(peak, r.sup_rm);
  for (const auto& r : history.saved) peak = std::max(peak, r.sup_rm);
  out.global_growth = history.rm_initial > 0.0 ? peak / history.rm_initial : 1.0;
  return out;
}

// ---- solitons ----------------------------------------------------------------------------

double SolitonResiduals::max_equation() const { return std::max({radial, fiber, drift}); }

SolitonResiduals soliton_residuals(const SolitonCandidate& c) {
  c.metric.validate();
  const Grid& g = c.metric.grid;
  const int n = g.nodes, m = g.fiber_dim;
  if (c.phi.size() != static_cast<size_t>(n) || c.f.size() != static_cast<size_t>(n))
    throw DomainError("soliton fields do not match the grid");
  if (!(c.tau > 0.0)) throw DomainError("soliton time scale must be positive");
  const double tau = c.tau;

  const auto geo = fine_geometry(c.metric, c.phi);
  const auto df = derivs4(c.metric, c.f);
  const auto dphi = derivs4(c.metric, c.phi);
  const auto dS = derivs4(c.metric, geo.S);
  const auto lap_phi = laplacian4(c.metric, geo, dphi);
  const auto lap_S = laplacian4(c.metric, geo, dS);
  const auto dist = distances_from(c.metric, c.center);

  SolitonResiduals r;
  r.min_S = inf;
  double lo = inf, hi = -inf;
  for (int i = 0; i < n; ++i) {
    if (c.region > 0.0 && dist[i] > c.region) continue;
    const double hess_fib = g.is_pole(i) ? df.ss[i] : geo.w_ratio[i] * df.s[i];
    r.radial = std::max(r.radial, std::abs(geo.sic_rad[i] + df.ss[i] - 0.5 / tau));
    if (m >= 1) r.fiber = std::max(r.fiber, std::abs(geo.sic_fib[i] + hess_fib - 0.5 / tau));
    r.drift = std::max(r.drift, std::abs(lap_phi[i] - df.s[i] * dphi.s[i]));
    const double q = tau * (geo.S[i] + df.s[i] * df.s[i]) - c.f[i];
    lo = std::min(lo, q);
    hi = std::max(hi, q);
    const double sic2 = geo.sic_rad[i] * geo.sic_rad[i] + m * geo.sic_fib[i] * geo.sic_fib[i];
    r.trace_identity = std::max(r.trace_identity, std::abs(lap_S[i] - df.s[i] * dS.s[i] - geo.S[i] / tau + 2.0 * sic2 +
                                                           2.0 * lap_phi[i] * lap_phi[i]));
    r.min_S = std::min(r.min_S, geo.S[i]);
    if (c.f[i] > 0.0)
      r.sup_grad_sqrt_f = std::max(r.sup_grad_sqrt_f, std::sqrt(tau) * std::abs(df.s[i]) / (2.0 * std::sqrt(c.f[i])));
    else
      ++r.masked;
  }
  r.dispersion = hi - lo;
  return r;
}

// ---- blow-up -----------------------------------------------------------------------------

BlowupResult blowup_analysis(const FlowHistory& history, const BlowupOptions& opts) {
  BlowupResult out;
  const auto est = detect_blowup(history);
  const auto c0 = type_one_diagnostic(history);
  if (!est || !c0 || est->singular_nodes.empty()) return out;
  out.type_one = true;
  out.t_est = est->t_est;

  FlowHistory base = history;
  base.t_est = est->t_est;
  const auto& last = history.states.back();
  {
    const auto c = curvature(last.metric, last.phi);
    out.singular_node = est->singular_nodes.front();
    for (int i : est->singular_nodes)
      if (c.rm_node[i] > c.rm_node[out.singular_node]) out.singular_node = i;
  }
  const double x_sing = last.metric.grid.x(out.singular_node);
  const Grid& g = last.metric.grid;
  // Radial reduced-distance fields need a pole base.
  const double p_x = g.periodic() ? x_sing : (x_sing - g.x0 < 0.5 * g.coordinate_length() ? g.x0 : g.x0 + g.coordinate_length());
  const double c2 = history.phi0_sup * history.phi0_sup;

  for (double lambda : opts.lambdas) {
    BlowupLevel lv;
    lv.lambda = lambda;
    const auto scaled = parabolic_rescale(base, lambda);
    lv.gradient_margin = inf;
    for (const auto& row : scaled.steps) {
      const double elapsed = row.t - scaled.t_origin;
      if (row.t < -1.0 || !(elapsed > 0.0)) continue;
      lv.gradient_margin = std::min(lv.gradient_margin, c2 > 0.0 ? 1.0 - row.sup_gradphi2 * elapsed / c2
                                                                : (row.sup_gradphi2 == 0.0 ? 1.0 : -inf));
    }
    const HistorySampler smp(scaled);
    const double offset = opts.base_gap / lambda;
    if (smp.t_first() > -1.0 || smp.t_last() < -offset) throw DomainError("history does not cover the rescaled window");
    const auto state = smp.state_at(-1.0);
    lv.rescaled_rm = curvature(state.metric, state.phi).rm_node[nearest_node(state.metric.grid, x_sing)];
    const auto ell = ell_field(smp, LBase{p_x, -offset}, 1.0 - offset, opts.ell);
    lv.unresolved = ell.unresolved;
    const int pole = nearest_node(state.metric.grid, p_x);
    const auto from_pole = distances_from(state.metric, pole);
    const double region = opts.region_fraction * total_length(state.metric);
    SolitonCandidate cand{state.metric, state.phi, ell.ell, 1.0, region, pole};
    for (int i = 0; i < state.metric.grid.nodes; ++i)
      if (from_pole[i] <= region + 4 * state.metric.grid.spacing * state.metric.a[i] && !std::isfinite(ell.ell[i]))
        throw NumericError("reduced distance unresolved inside the residual region", i);
    const auto res = soliton_residuals(cand);
    // 1/(2 tau) = 1/2 sets the scale of each component
    lv.soliton_residual = 2.0 * res.max_equation();
    out.levels.push_back(lv);
  }
  return out;
}

// ---- reduced volume near the singular time -----------------------------------------------

ReducedVolumeTable reduced_volume_limit(const FlowHistory& history, double base_x, std::span<const double> base_times,
                                        std::span<const double> t, const ReducedDistanceOptions& opts) {
  const HistorySampler smp(history);
  ReducedVolumeTable out;
  out.base_times.assign(base_times.begin(), base_times.end());
  out.t.assign(t.begin(), t.end());
  out.monotonicity_margin = inf;
  for (double T : base_times) {
    std::vector<double> row;
    std::vector<int> bad;
    for (double tk : t) {
      if (tk >= T) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        bad.push_back(0);
        continue;
      }
      const auto field = ell_field(smp, LBase{base_x, T}, T - tk, opts);
      row.push_back(reduced_volume(smp, field));
      bad.push_back(field.unresolved);
      out.max_v = std::max(out.max_v, row.back());
    }
    for (size_t k = 1; k < row.size(); ++k)
      if (std::isfinite(row[k]) && std::isfinite(row[k - 1]))
        out.monotonicity_margin = std::min(out.monotonicity_margin, row[k] - row[k - 1]);
    out.v.push_back(std::move(row));
    out.unresolved.push_back(std::move(bad));
  }
  for (size_t k = 0; k < t.size(); ++k) {
    double lo = inf, hi = -inf;
    for (const auto& row : out.v)
      if (std::isfinite(row[k])) {
        lo = std::min(lo, row[k]);
        hi = std::max(hi, row[k]);
      }
    if (hi >= lo) out.spread = std::max(out.spread, hi - lo);
  }
  return out;
}

}  // namespace cflow
