#include "cflow/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace cflow {

std::string to_string(Topology t) {
  return t == Topology::periodic_circle ? "periodic-circle" : "two-pole-interval";
}

Topology topology_from_string(const std::string& s) {
  if (s == "periodic-circle" || s == "periodic") return Topology::periodic_circle;
  if (s == "two-pole-interval" || s == "interval") return Topology::two_pole_interval;
  throw DomainError("unknown topology '" + s + "'");
}

std::string to_string(FieldRole r) {
  switch (r) {
    case FieldRole::phi: return "phi";
    case FieldRole::f: return "f";
    case FieldRole::u: return "u";
    case FieldRole::v: return "v";
    default: return "other";
  }
}

FieldRole role_from_string(const std::string& s) {
  if (s == "phi") return FieldRole::phi;
  if (s == "f") return FieldRole::f;
  if (s == "u") return FieldRole::u;
  if (s == "v") return FieldRole::v;
  return FieldRole::other;
}

Grid Grid::periodic(int nodes, double length, int fiber_dim, int fiber_curvature) {
  Grid g;
  g.topology = Topology::periodic_circle;
  g.nodes = nodes;
  g.spacing = length / nodes;
  g.fiber_dim = fiber_dim;
  g.fiber_curvature = fiber_curvature;
  g.validate();
  return g;
}

Grid Grid::interval(int nodes, double length, int fiber_dim) {
  Grid g;
  g.topology = Topology::two_pole_interval;
  g.nodes = nodes;
  g.spacing = length / (nodes - 1);
  g.fiber_dim = fiber_dim;
  g.fiber_curvature = 1;
  g.validate();
  return g;
}

double Grid::coordinate_length() const {
  return periodic() ? nodes * spacing : (nodes - 1) * spacing;
}

void Grid::validate() const {
  if (nodes < 16) throw DomainError(fmt::format("grid needs at least 16 nodes, got {}", nodes));
  if (!(spacing > 0.0)) throw DomainError("grid spacing must be positive");
  if (fiber_dim < 1) throw DomainError("fiber dimension must be >= 1");
  if (fiber_curvature != 0 && fiber_curvature != 1)
    throw DomainError("fiber curvature must be 0 or 1");
  if (fiber_curvature == 0 && fiber_dim != 1)
    throw DomainError("flat fiber is only available for a circle fiber (m = 1)");
  if (!periodic() && fiber_curvature != 1)
    throw DomainError("two-pole interval needs a round fiber");
}

void WarpedMetric::validate() const {
  grid.validate();
  const auto n = static_cast<size_t>(grid.nodes);
  if (a.size() != n || w.size() != n) throw DomainError("metric arrays do not match grid");
  for (int i = 0; i < grid.nodes; ++i) {
    if (!(a[i] > 0.0)) throw InvalidMetric(fmt::format("non-positive lapse at node {}", i), i);
    if (grid.is_pole(i)) continue;
    if (!(w[i] > 0.0)) throw InvalidMetric(fmt::format("non-positive warp at node {}", i), i);
  }
}

double sphere_volume(int m) {
  const double k = 0.5 * (m + 1);
  return 2.0 * std::pow(std::numbers::pi, k) / std::tgamma(k);
}

double unit_ball_volume(int n) {
  return std::pow(std::numbers::pi, 0.5 * n) / std::tgamma(0.5 * n + 1.0);
}

double isoperimetric_constant(int n) { return std::pow(n, n) * unit_ball_volume(n); }

namespace {

// Value at index j with periodic wrap or pole reflection.
inline double at(const Grid& g, std::span<const double> f, int j, bool odd) {
  const int n = g.nodes;
  if (j >= 0 && j < n) return f[j];
  if (g.periodic()) return f[((j % n) + n) % n];
  const double sign = odd ? -1.0 : 1.0;
  if (j < 0) return sign * f[-j];
  if (j > n - 1) return sign * f[2 * (n - 1) - j];
  return f[j];
}

double ipow(double x, int m) {
  double r = 1.0;
  for (int k = 0; k < m; ++k) r *= x;
  return r;
}

// Integral over [0, len] of (p + (q - p) xi / len)^m, written as the symmetric sum
// (q^{m+1} - p^{m+1}) / ((m + 1)(q - p)) = sum_k p^k q^{m-k} / (m + 1).
double power_segment(double p, double q, double len, int m) {
  double sum = 0.0, pk = 1.0;
  for (int k = 0; k <= m; ++k) {
    sum += pk * ipow(q, m - k);
    pk *= p;
  }
  return len * sum / (m + 1);
}

double smoothstep5(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

void check_finite(std::span<const double> v, const char* name) {
  for (size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw NumericError(fmt::format("non-finite {} at node {}", name, i), static_cast<int>(i));
}

}  // namespace

std::vector<double> d_dx(const Grid& g, std::span<const double> f, bool odd) {
  std::vector<double> out(g.nodes);
  const double inv = 0.5 / g.spacing;
  for (int i = 0; i < g.nodes; ++i) out[i] = (at(g, f, i + 1, odd) - at(g, f, i - 1, odd)) * inv;
  return out;
}

std::vector<double> d2_dx2(const Grid& g, std::span<const double> f, bool odd) {
  std::vector<double> out(g.nodes);
  const double inv = 1.0 / (g.spacing * g.spacing);
  for (int i = 0; i < g.nodes; ++i)
    out[i] = (at(g, f, i + 1, odd) - 2.0 * f[i] + at(g, f, i - 1, odd)) * inv;
  return out;
}

std::vector<double> d_dx4(const Grid& g, std::span<const double> f, bool odd) {
  std::vector<double> out(g.nodes);
  const double inv = 1.0 / (12.0 * g.spacing);
  for (int i = 0; i < g.nodes; ++i)
    out[i] = (-at(g, f, i + 2, odd) + 8.0 * (at(g, f, i + 1, odd) - at(g, f, i - 1, odd)) +
              at(g, f, i - 2, odd)) * inv;
  return out;
}

std::vector<double> d_ds(const WarpedMetric& metric, std::span<const double> f) {
  auto out = d_dx(metric.grid, f, false);
  for (size_t i = 0; i < out.size(); ++i) out[i] /= metric.a[i];
  return out;
}

CurvatureState curvature(const WarpedMetric& metric, std::span<const double> phi) {
  metric.validate();
  const Grid& g = metric.grid;
  const int n = g.nodes;
  const int m = g.fiber_dim;
  const double h = g.spacing;
  if (phi.size() != static_cast<size_t>(n)) throw DomainError("phi does not match grid");

  const auto& a = metric.a;
  const auto& w = metric.w;
  const auto a_x = d_dx(g, a, false);
  const auto w_x = d_dx(g, w, true);
  const auto w_xx = d2_dx2(g, w, true);
  const auto phi_x = d_dx(g, phi, false);

  CurvatureState c;
  c.k_rad.assign(n, 0.0);
  c.k_fib.assign(n, 0.0);
  std::vector<double> w_s(n);

  for (int i = 0; i < n; ++i) {
    w_s[i] = w_x[i] / a[i];
    if (g.is_pole(i)) {
      continue;
    } else {
      const double w_ss = w_xx[i] / (a[i] * a[i]) - a_x[i] * w_x[i] / (a[i] * a[i] * a[i]);
      c.k_rad[i] = -w_ss / w[i];
    }
  }
  if (!g.periodic()) {
    // k_rad is even about a pole; extrapolate the x^2 profile from the first two interior
    // nodes. The direct -w_sss/w_s stencil carries a_xx with the sign of a backward heat
    // equation for the lapse and destabilizes the flow at the pole.
    c.k_rad[0] = (4.0 * c.k_rad[1] - c.k_rad[2]) / 3.0;
    c.k_rad[n - 1] = (4.0 * c.k_rad[n - 2] - c.k_rad[n - 3]) / 3.0;
  }

  if (m >= 2) {
    const double c_f = g.fiber_curvature;
    std::vector<double> local(n);
    for (int i = 0; i < n; ++i)
      local[i] = g.is_pole(i) ? c.k_rad[i] : (c_f - w_s[i] * w_s[i]) / (w[i] * w[i]);
    if (g.periodic()) {
      c.k_fib = local;
    } else {
      // Near a pole, c_F - w_s^2 is recovered from d(c_F - w_s^2) = k_rad d(w^2),
      // which avoids dividing an O(h^2) stencil error by w^2 ~ x^2.
      std::vector<double> from_left(n, 0.0), from_right(n, 0.0);
      for (int i = 0; i + 1 < n; ++i)
        from_left[i + 1] = from_left[i] + 0.5 * (c.k_rad[i] + c.k_rad[i + 1]) *
                                              (w[i + 1] * w[i + 1] - w[i] * w[i]);
      for (int i = n - 2; i >= 0; --i)
        from_right[i] = from_right[i + 1] + 0.5 * (c.k_rad[i] + c.k_rad[i + 1]) *
                                                (w[i] * w[i] - w[i + 1] * w[i + 1]);
      const double len = g.coordinate_length();
      for (int i = 0; i < n; ++i) {
        if (g.is_pole(i)) {
          c.k_fib[i] = c.k_rad[i];
          continue;
        }
        const double u = i * h / len;
        const double th_l = 1.0 - smoothstep5((u - 1.0 / 6.0) * 6.0);
        const double th_r = 1.0 - smoothstep5((5.0 / 6.0 - u) * 6.0);
        const double w2 = w[i] * w[i];
        c.k_fib[i] = th_l * from_left[i] / w2 + th_r * from_right[i] / w2 +
                     (1.0 - th_l - th_r) * local[i];
      }
    }
  }

  c.ric_rad.resize(n);
  c.ric_fib.resize(n);
  c.scalar.resize(n);
  c.sic_rad.resize(n);
  c.sic_fib.resize(n);
  c.s.resize(n);
  c.phi_s.resize(n);
  c.rm_node.resize(n);
  c.rm_norm = 0.0;
  for (int i = 0; i < n; ++i) {
    c.ric_rad[i] = m * c.k_rad[i];
    c.ric_fib[i] = c.k_rad[i] + (m - 1) * c.k_fib[i];
    c.scalar[i] = c.ric_rad[i] + m * c.ric_fib[i];
    c.phi_s[i] = phi_x[i] / a[i];
    const double grad2 = c.phi_s[i] * c.phi_s[i];
    c.sic_rad[i] = c.ric_rad[i] - grad2;
    c.sic_fib[i] = c.ric_fib[i];
    c.s[i] = c.scalar[i] - grad2;
    c.rm_node[i] = m >= 2 ? std::max(std::abs(c.k_rad[i]), std::abs(c.k_fib[i]))
                          : std::abs(c.k_rad[i]);
    c.rm_norm = std::max(c.rm_norm, c.rm_node[i]);
  }
  check_finite(c.k_rad, "radial sectional curvature");
  check_finite(c.k_fib, "fiber sectional curvature");
  check_finite(c.s, "S");
  return c;
}

std::vector<double> volume_weights(const WarpedMetric& metric) {
  const Grid& g = metric.grid;
  const int n = g.nodes;
  const int m = g.fiber_dim;
  const double h = g.spacing;
  const auto& w = metric.w;
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) {
    // Exact integral of the piecewise-linear w^m over the control volume.
    const double mid = w[i];
    double sum = 0.0;
    if (g.periodic() || i > 0) {
      const double left = 0.5 * (at(g, w, i - 1, true) + mid);
      sum += power_segment(left, mid, 0.5 * h, m);
    }
    if (g.periodic() || i < n - 1) {
      const double right = 0.5 * (mid + at(g, w, i + 1, true));
      sum += power_segment(mid, right, 0.5 * h, m);
    }
    out[i] = metric.a[i] * sum;
  }
  return out;
}

double integrate(const WarpedMetric& metric, std::span<const double> f) {
  const auto wts = volume_weights(metric);
  double sum = 0.0;
  for (size_t i = 0; i < wts.size(); ++i) sum += wts[i] * f[i];
  return sum * sphere_volume(metric.grid.fiber_dim);
}

double total_volume(const WarpedMetric& metric) {
  const auto wts = volume_weights(metric);
  double sum = 0.0;
  for (double v : wts) sum += v;
  return sum * sphere_volume(metric.grid.fiber_dim);
}

std::vector<double> laplacian(const WarpedMetric& metric, std::span<const double> f) {
  const Grid& g = metric.grid;
  const int n = g.nodes;
  const int m = g.fiber_dim;
  const double h = g.spacing;
  const auto& a = metric.a;
  const auto& w = metric.w;
  const auto vol = volume_weights(metric);
  const int faces = g.periodic() ? n : n - 1;
  std::vector<double> flux(faces);
  for (int k = 0; k < faces; ++k) {
    const int r = (k + 1) % n;
    const double wm = ipow(0.5 * (w[k] + w[r]), m);
    const double am = 0.5 * (a[k] + a[r]);
    flux[k] = wm / am * (f[r] - f[k]) / h;
  }
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) {
    const double right = (g.periodic() || i < n - 1) ? flux[i] : 0.0;
    const double left = g.periodic() ? flux[(i - 1 + n) % n] : (i > 0 ? flux[i - 1] : 0.0);
    out[i] = (right - left) / vol[i];
  }
  return out;
}

std::vector<double> laplacian_diagonal(const WarpedMetric& metric) {
  const Grid& g = metric.grid;
  const int n = g.nodes;
  const auto vol = volume_weights(metric);
  auto coeff = [&](int k) {
    const int r = (k + 1) % n;
    return ipow(0.5 * (metric.w[k] + metric.w[r]), g.fiber_dim) /
           (0.5 * (metric.a[k] + metric.a[r]) * g.spacing);
  };
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    if (g.periodic() || i < n - 1) sum += coeff(i);
    if (g.periodic() || i > 0) sum += coeff((i - 1 + n) % n);
    out[i] = -sum / vol[i];
  }
  return out;
}

ScalarField laplacian(const WarpedMetric& metric, const ScalarField& field) {
  return ScalarField{laplacian(metric, std::span<const double>(field.values)), field.role};
}

std::vector<double> arclength(const WarpedMetric& metric) {
  const int n = metric.grid.nodes;
  std::vector<double> s(n, 0.0);
  for (int i = 1; i < n; ++i) s[i] = s[i - 1] + 0.5 * metric.grid.spacing * (metric.a[i - 1] + metric.a[i]);
  return s;
}

double total_length(const WarpedMetric& metric) {
  const auto s = arclength(metric);
  if (!metric.grid.periodic()) return s.back();
  return s.back() + 0.5 * metric.grid.spacing * (metric.a.back() + metric.a.front());
}

std::vector<double> distances_from(const WarpedMetric& metric, int center) {
  const auto s = arclength(metric);
  const double total = total_length(metric);
  std::vector<double> d(s.size());
  for (size_t j = 0; j < s.size(); ++j) {
    const double raw = std::abs(s[j] - s[center]);
    d[j] = metric.grid.periodic() ? std::min(raw, total - raw) : raw;
  }
  return d;
}

double radial_distance(const WarpedMetric& metric, int x1, int x2) {
  const int n = metric.grid.nodes;
  if (x1 < 0 || x1 >= n || x2 < 0 || x2 >= n) throw DomainError("node index out of range");
  return distances_from(metric, x1)[x2];
}

BallGeometry ball_geometry(const WarpedMetric& metric, int center, double r) {
  if (!(r > 0.0)) throw DomainError("ball radius must be positive");
  const Grid& g = metric.grid;
  const int n = g.nodes;
  const int m = g.fiber_dim;
  const double h = g.spacing;
  const auto d = distances_from(metric, center);
  const double omega = sphere_volume(m);
  BallGeometry out;
  const int cells = g.periodic() ? n : n - 1;
  for (int k = 0; k < cells; ++k) {
    const int l = k;
    const int rr = (k + 1) % n;
    const double dl = d[l], dr = d[rr];
    if (dl > r && dr > r) continue;
    const double am = 0.5 * (metric.a[l] + metric.a[rr]);
    if (dl <= r && dr <= r) {
      out.volume += am * power_segment(metric.w[l], metric.w[rr], h, m);
      continue;
    }
    // Partial cell: d is taken linear across the cell.
    const bool left_inside = dl <= r;
    const double frac = left_inside ? (r - dl) / (dr - dl) : (r - dr) / (dl - dr);
    const double w_in = left_inside ? metric.w[l] : metric.w[rr];
    const double w_out = left_inside ? metric.w[rr] : metric.w[l];
    const double w_cross = w_in + frac * (w_out - w_in);
    out.volume += am * power_segment(w_in, w_cross, frac * h, m);
    out.boundary_area += ipow(w_cross, m);
  }
  out.volume *= omega;
  out.boundary_area *= omega;
  return out;
}

DeficitScan isoperimetric_deficit(const WarpedMetric& metric, int center, double r_max,
                                  int samples) {
  if (!(r_max > 0.0)) throw DomainError("r_max must be positive");
  const int n = metric.grid.dim();
  const double c_n = isoperimetric_constant(n);
  const double a_min = *std::min_element(metric.a.begin(), metric.a.end());
  const double r_floor = 2.0 * a_min * metric.grid.spacing;
  DeficitScan out;
  // The r -> 0 limit of the ratio is 1 on any smooth metric, so 1 seeds the minimum.
  double min_ratio = 1.0;
  for (int k = 1; k <= samples; ++k) {
    const double r = r_max * k / samples;
    const auto ball = ball_geometry(metric, center, r);
    if (r < r_floor || !(ball.volume > 0.0)) {
      ++out.radii_skipped;
      continue;
    }
    ++out.radii_scanned;
    const double ratio = std::pow(ball.boundary_area, n) / (c_n * std::pow(ball.volume, n - 1));
    if (ratio < min_ratio) {
      min_ratio = ratio;
      out.r_at_min = r;
    }
  }
  out.delta = 1.0 - min_ratio;
  return out;
}

}  // namespace cflow
