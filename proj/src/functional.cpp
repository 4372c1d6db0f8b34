#include "cflow/functional.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace cflow {

namespace {

constexpr double pi = std::numbers::pi;

double simpson_uniform(std::span<const double> g, double h, int stride) {
  const size_t n = (g.size() - 1) / stride;
  double sum = g[0] + g[n * stride];
  for (size_t k = 1; k < n; ++k) sum += (k % 2 ? 4.0 : 2.0) * g[k * stride];
  return sum * h * stride / 3.0;
}

// Gauss-Legendre nodes and weights on [0, 1].
constexpr std::array<double, 5> gl_x = {0.04691007703066800, 0.23076534494715845, 0.5, 0.76923465505284155,
                                        0.95308992296933200};
constexpr std::array<double, 5> gl_w = {0.11846344252809454, 0.23931433524968324, 0.28444444444444444,
                                        0.23931433524968324, 0.11846344252809454};

struct Cubic {
  double y0, y1, m0, m1;  // values and slopes (per unit xi)
  double operator()(double t) const {
    const double t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * m1;
  }
  double prime(double t) const {
    const double t2 = t * t;
    return (6 * t2 - 6 * t) * y0 + (3 * t2 - 4 * t + 1) * m0 + (-6 * t2 + 6 * t) * y1 + (3 * t2 - 2 * t) * m1;
  }
  // Critical points of the cubic inside (0, 1).
  std::vector<double> critical() const {
    // p'(t) = A t^2 + B t + C
    const double A = 6 * y0 + 3 * m0 - 6 * y1 + 3 * m1;
    const double B = -6 * y0 - 4 * m0 + 6 * y1 - 2 * m1;
    const double C = m0;
    std::vector<double> out;
    if (std::abs(A) < 1e-300) {
      if (std::abs(B) > 1e-300) out.push_back(-C / B);
    } else {
      const double disc = B * B - 4 * A * C;
      if (disc >= 0) {
        const double sq = std::sqrt(disc);
        const double q = -0.5 * (B + std::copysign(sq, B));
        out.push_back(q / A);
        if (q != 0) out.push_back(C / q);
      }
    }
    std::erase_if(out, [](double t) { return !(t > 0 && t < 1); });
    std::sort(out.begin(), out.end());
    return out;
  }
};

// The base as seen by the rearrangement: Hermite pieces of phi and of the volume density.
struct Pieces {
  std::vector<Cubic> phi, a, w;
  std::vector<std::vector<double>> breaks;  // 0, critical points, 1 for each cell
  std::vector<double> lo, hi, cell_volume;
  double h = 0.0;
  int m = 1;
  double fiber = 1.0;

  double density(size_t c, double t) const { return fiber * a[c](t) * std::pow(w[c](t), m); }
  double volume(size_t c, double t0, double t1) const {
    double sum = 0.0;
    for (size_t k = 0; k < gl_x.size(); ++k) sum += gl_w[k] * density(c, t0 + (t1 - t0) * gl_x[k]);
    return sum * (t1 - t0) * h;
  }
  // int G(phi, |grad phi|^2) dV over the whole base.
  template <class G>
  double integral(G&& integrand) const {
    double sum = 0.0;
    for (size_t c = 0; c < phi.size(); ++c)
      for (size_t k = 0; k < gl_x.size(); ++k) {
        const double t = gl_x[k];
        const double ds = phi[c].prime(t) / (h * a[c](t));
        sum += gl_w[k] * integrand(phi[c](t), ds * ds) * density(c, t);
      }
    return sum * h;
  }
};

Pieces build_pieces(const WarpedMetric& metric, std::span<const double> phi) {
  const Grid& g = metric.grid;
  const auto sp = d_dx4(g, phi);
  const auto sa = d_dx4(g, metric.a);
  const auto sw = d_dx4(g, metric.w, true);
  Pieces p;
  p.h = g.spacing;
  p.m = g.fiber_dim;
  p.fiber = sphere_volume(g.fiber_dim);
  const int cells = g.periodic() ? g.nodes : g.nodes - 1;
  for (int c = 0; c < cells; ++c) {
    const int d = (c + 1) % g.nodes;
    p.phi.push_back({phi[c], phi[d], sp[c] * p.h, sp[d] * p.h});
    p.a.push_back({metric.a[c], metric.a[d], sa[c] * p.h, sa[d] * p.h});
    p.w.push_back({metric.w[c], metric.w[d], sw[c] * p.h, sw[d] * p.h});
    std::vector<double> br{0.0};
    for (double t : p.phi.back().critical()) br.push_back(t);
    br.push_back(1.0);
    double lo = 1e300, hi = -1e300;
    for (double t : br) {
      lo = std::min(lo, p.phi.back()(t));
      hi = std::max(hi, p.phi.back()(t));
    }
    p.breaks.push_back(std::move(br));
    p.lo.push_back(lo);
    p.hi.push_back(hi);
    p.cell_volume.push_back(p.volume(c, 0.0, 1.0));
  }
  return p;
}

// Volume of {phi >= s} within cell c.
double superlevel_volume(const Pieces& p, size_t c, double s) {
  if (p.lo[c] >= s) return p.cell_volume[c];
  if (p.hi[c] < s) return 0.0;
  const auto& f = p.phi[c];
  const auto& br = p.breaks[c];
  double vol = 0.0;
  for (size_t k = 0; k + 1 < br.size(); ++k) {
    // f is monotone on [br[k], br[k+1]].
    const double t0 = br[k], t1 = br[k + 1];
    const double f0 = f(t0) - s, f1 = f(t1) - s;
    if (f0 >= 0 && f1 >= 0) {
      vol += p.volume(c, t0, t1);
      continue;
    }
    if (f0 < 0 && f1 < 0) continue;
    double a = t0, b = t1;
    for (int it = 0; it < 100 && b - a > 1e-15; ++it) {
      const double mid = 0.5 * (a + b);
      if ((f(mid) - s >= 0) == (f0 >= 0)) a = mid;
      else b = mid;
    }
    const double root = 0.5 * (a + b);
    vol += f0 >= 0 ? p.volume(c, t0, root) : p.volume(c, root, t1);
  }
  return vol;
}

double entropy_density(double s) { return s > 0 ? s * s * std::log(s) : 0.0; }

// Levels s(u) = top ((1 - cos pi u) / 2)^2, u uniform on [0, 1]. The grading keeps the
// distribution function smooth in u both at the support edge and at the maximum.
double graded_level(double u, double top) {
  const double c = 0.5 * (1 - std::cos(pi * u));
  return top * c;
}
double graded_rate(double u, double top) {
  const double c = 0.5 * (1 - std::cos(pi * u));
  return top * 0.5 * pi * std::sin(pi * u);
}

}  // namespace

void RadialProfile::validate() const {
  if (dim < 1) throw DomainError("profile dimension must be positive");
  if (r.size() < 9 || F.size() != r.size() || dF.size() != r.size())
    throw DomainError("profile needs at least 9 samples of r, F and F'");
  if (r.front() != 0.0) throw DomainError("profile radii must start at 0");
  const double h = r[1] - r[0];
  for (size_t i = 1; i < r.size(); ++i)
    if (std::abs(r[i] - r[i - 1] - h) > 1e-9 * h) throw DomainError("profile radii must be uniform");
  if ((r.size() - 1) % 2) throw DomainError("profile needs an even number of intervals");
  for (double v : F)
    if (!std::isfinite(v)) throw DomainError("profile values must be finite");
}

RadialProfile sample_profile(int dim, double r_max, int samples, const std::function<double(double)>& F,
                             const std::function<double(double)>& dF) {
  if (samples < 8 || samples % 4) throw DomainError("profile samples must be a positive multiple of 4");
  RadialProfile p;
  p.dim = dim;
  for (int i = 0; i <= samples; ++i) {
    const double r = r_max * i / samples;
    p.r.push_back(r);
    p.F.push_back(F(r));
    p.dF.push_back(dF(r));
  }
  p.validate();
  return p;
}

RadialProfile profile_from_values(int dim, std::vector<double> r, std::vector<double> F) {
  RadialProfile p;
  p.dim = dim;
  p.r = std::move(r);
  p.F = std::move(F);
  p.dF.assign(p.r.size(), 0.0);
  if (p.r.size() < 9) throw DomainError("profile needs at least 9 samples");
  const double h = p.r[1] - p.r[0];
  const size_t n = p.r.size();
  const auto& f = p.F;
  for (size_t i = 0; i < n; ++i) {
    if (i >= 2 && i + 2 < n) {
      p.dF[i] = (-f[i + 2] + 8 * (f[i + 1] - f[i - 1]) + f[i - 2]) / (12 * h);
    } else if (i < 2) {
      p.dF[i] = (-25 * f[i] + 48 * f[i + 1] - 36 * f[i + 2] + 16 * f[i + 3] - 3 * f[i + 4]) / (12 * h);
    } else {
      p.dF[i] = (25 * f[i] - 48 * f[i - 1] + 36 * f[i - 2] - 16 * f[i - 3] + 3 * f[i - 4]) / (12 * h);
    }
  }
  p.validate();
  return p;
}

RadialProfile gaussian_profile(int dim, double sigma, int samples) {
  if (!(sigma > 0)) throw DomainError("sigma must be positive");
  const double r_max = sigma * (9.0 + std::sqrt(static_cast<double>(dim)));
  return sample_profile(
      dim, r_max, samples, [=](double r) { return r * r / (2 * sigma * sigma) + dim * std::log(sigma); },
      [=](double r) { return r / (sigma * sigma); });
}

RadialProfile perturbed_gaussian_profile(int dim, double eps, int samples) {
  const double r_max = 9.0 + std::sqrt(static_cast<double>(dim));
  return sample_profile(
      dim, r_max, samples, [=](double r) { return 0.5 * r * r + eps * std::sin(r); },
      [=](double r) { return r + eps * std::cos(r); });
}

RadialProfile named_profile(const std::string& spec, int dim, int samples) {
  const auto colon = spec.find(':');
  const std::string name = spec.substr(0, colon);
  double param = 0.0;
  if (colon != std::string::npos) {
    try {
      param = std::stod(spec.substr(colon + 1));
    } catch (const std::exception&) {
      throw DomainError(fmt::format("bad profile parameter in '{}'", spec));
    }
  }
  if (name == "gaussian") return gaussian_profile(dim, colon == std::string::npos ? 1.0 : param, samples);
  if (name == "perturbed") return perturbed_gaussian_profile(dim, colon == std::string::npos ? 0.1 : param, samples);
  throw DomainError(fmt::format("unknown profile '{}'", spec));
}

double radial_integral(const RadialProfile& p, std::span<const double> g) {
  if (g.size() != p.r.size()) throw DomainError("integrand does not match the profile grid");
  std::vector<double> G(g.size());
  const double sphere = sphere_volume(p.dim - 1);
  for (size_t i = 0; i < g.size(); ++i) G[i] = sphere * g[i] * std::pow(p.r[i], p.dim - 1);
  const double h = p.r[1] - p.r[0];
  const double value = simpson_uniform(G, h, 1);
  const size_t intervals = g.size() - 1;
  const double coarse = intervals % 4 == 0 ? simpson_uniform(G, h, 2) : value;
  const double err = std::abs(value - coarse) / 15.0;
  if (!std::isfinite(value) || err > 1e-6 * (1 + std::abs(value)))
    throw DomainError(fmt::format("radial quadrature did not converge (estimate {}, error {})", value, err));
  if (std::abs(G.back()) * p.r.back() > 1e-8 * (1 + std::abs(value)))
    throw DomainError("integrand is not negligible at the outer radius");
  return value;
}

namespace {

struct Moments {
  double mass = 0.0;      // int U
  double grad2 = 0.0;     // int |F'|^2 U / mass
  double mean_F = 0.0;    // int F U / mass, F shifted so U has unit mass
};

Moments moments(const RadialProfile& p) {
  p.validate();
  const size_t N = p.r.size();
  const double norm = std::pow(2 * pi, -0.5 * p.dim);
  std::vector<double> U(N), gU(N), fU(N);
  for (size_t i = 0; i < N; ++i) {
    U[i] = norm * std::exp(-p.F[i]);
    gU[i] = p.dF[i] * p.dF[i] * U[i];
    fU[i] = p.F[i] * U[i];
  }
  Moments m;
  m.mass = radial_integral(p, U);
  if (!(m.mass > 0)) throw DomainError("profile has no mass");
  m.grad2 = radial_integral(p, gU) / m.mass;
  m.mean_F = radial_integral(p, fU) / m.mass + std::log(m.mass);
  return m;
}

}  // namespace

LogSobolevBasic log_sobolev_basic(const RadialProfile& p) {
  const auto m = moments(p);
  return {-0.5 * m.grad2 - m.mean_F + p.dim, m.mass};
}

LogSobolevOptimized log_sobolev_optimized(const RadialProfile& p) {
  const auto m = moments(p);
  LogSobolevOptimized out;
  out.lhs = m.grad2;
  out.rhs = p.dim * std::exp(1 - 2 * m.mean_F / p.dim);
  out.normalization = m.mass;
  out.c_closed = std::sqrt(p.dim / m.grad2);
  return out;
}

ScaleScan scale_scan(const RadialProfile& p, int points) {
  if (points < 3) throw DomainError("scale scan needs at least 3 points");
  const auto opt = log_sobolev_optimized(p);
  std::vector<double> r2U(p.r.size());
  const double norm = std::pow(2 * pi, -0.5 * p.dim);
  for (size_t i = 0; i < p.r.size(); ++i) r2U[i] = p.r[i] * p.r[i] * norm * std::exp(-p.F[i]);
  const double r_rms = std::sqrt(radial_integral(p, r2U) / opt.normalization);
  ScaleScan scan;
  scan.c_closed = opt.c_closed;
  const double c_lo = 0.1 * r_rms / std::sqrt(p.dim), c_hi = 5 * r_rms / std::sqrt(p.dim);
  scan.step = (c_hi - c_lo) / (points - 1);
  double best = -1e300;
  for (int k = 0; k < points; ++k) {
    const double c = c_lo + k * scan.step;
    // F_c(x) = F(c x) - n log c, sampled at x_j = r_j / c.
    RadialProfile q = p;
    for (size_t i = 0; i < q.r.size(); ++i) {
      q.r[i] = p.r[i] / c;
      q.F[i] = p.F[i] - p.dim * std::log(c);
      q.dF[i] = c * p.dF[i];
    }
    const double v = log_sobolev_basic(q).lhs;
    scan.c.push_back(c);
    scan.value.push_back(v);
    if (v > best) {
      best = v;
      scan.c_argmax = c;
    }
  }
  return scan;
}

double RearrangementResult::vol_rn(int k) const { return unit_ball_volume(dim) * std::pow(radius[k], dim); }

double RearrangementResult::value_at(double r) const {
  if (r > radius.front()) return 0.0;
  // radius is nonincreasing in the level index
  size_t k = 0;
  while (k + 1 < radius.size() && radius[k + 1] >= r) ++k;
  if (k + 1 == radius.size() || radius[k] == radius[k + 1]) return level[k];
  const double t = (radius[k] - r) / (radius[k] - radius[k + 1]);
  return level[k] + t * (level[k + 1] - level[k]);
}

RearrangementResult symmetrize(const WarpedMetric& metric, std::span<const double> phi, int levels) {
  metric.validate();
  const Grid& g = metric.grid;
  if (phi.size() != static_cast<size_t>(g.nodes)) throw DomainError("phi does not match grid");
  if (levels < 2) throw DomainError("need at least two levels");
  for (int i = 0; i < g.nodes; ++i)
    if (!(phi[i] >= 0)) throw DomainError(fmt::format("symmetrization needs phi >= 0 (node {})", i));
  const double top = *std::max_element(phi.begin(), phi.end());
  if (!(top > 0)) throw DomainError("phi vanishes identically");

  RearrangementResult r;
  r.metric = metric;
  r.phi.assign(phi.begin(), phi.end());
  r.dim = g.dim();
  const auto pieces = build_pieces(metric, phi);
  // Cells on which phi is constant and positive make the distribution function jump.
  std::vector<double> flat;
  for (size_t c = 0; c < pieces.phi.size(); ++c)
    if (pieces.hi[c] - pieces.lo[c] <= 1e-12 * top && pieces.lo[c] > 1e-12 * top) flat.push_back(pieces.lo[c]);
  std::sort(flat.begin(), flat.end());
  for (size_t k = 0; k < flat.size(); ++k)
    if (k == 0 || flat[k] - flat[k - 1] > 1e-12 * top) ++r.plateaus;

  const double omega = unit_ball_volume(r.dim);
  for (int k = 0; k < levels; ++k) {
    // Level 0 is the support {phi > 0}.
    const double s = k == 0 ? 1e-14 * top : graded_level(static_cast<double>(k) / (levels - 1), top);
    double vol = 0.0;
    for (size_t c = 0; c < pieces.phi.size(); ++c) vol += superlevel_volume(pieces, c, s);
    r.level.push_back(k == 0 ? 0.0 : s);
    r.vol_m.push_back(vol);
    r.radius.push_back(std::pow(vol / omega, 1.0 / r.dim));
  }
  return r;
}

RearrangementIntegrals rearrangement_integrals(const RearrangementResult& r) {
  RearrangementIntegrals out;
  // Manifold side on the same Hermite pieces the distribution function is built from.
  const auto pieces = build_pieces(r.metric, r.phi);
  out.l1_m = pieces.integral([](double f, double) { return f; });
  out.l2_m = pieces.integral([](double f, double) { return f * f; });
  out.entropy_m = pieces.integral([](double f, double) { return entropy_density(f); });
  // int G(phi*) dx = int_0^max G'(s) Vol{phi* >= s} ds, trapezoid in the grading variable.
  const size_t L = r.level.size();
  const double top = r.level.back();
  auto d_ent = [](double s) { return s > 0 ? 2 * s * std::log(s) + s : 0.0; };
  for (size_t k = 0; k < L; ++k) {
    const double u = static_cast<double>(k) / (L - 1);
    const double wt = (k == 0 || k + 1 == L ? 0.5 : 1.0) / (L - 1) * graded_rate(u, top);
    const double s = r.level[k], v = r.vol_rn(static_cast<int>(k));
    out.l1_rn += wt * v;
    out.l2_rn += wt * 2 * s * v;
    out.entropy_rn += wt * d_ent(s) * v;
  }
  return out;
}

EnergyComparison energy_comparison(const RearrangementResult& r, double delta, int center, double radius) {
  if (!(delta >= 0 && delta < 1)) throw DomainError("delta must lie in [0, 1)");
  const auto d = distances_from(r.metric, center);
  for (size_t i = 0; i < r.phi.size(); ++i)
    if (r.phi[i] > 0 && d[i] > radius)
      throw DomainError(fmt::format("phi is supported outside the ball where delta was measured (node {})", i));
  EnergyComparison out;
  out.delta = delta;
  out.energy_m = build_pieces(r.metric, r.phi).integral([](double, double g2) { return g2; });
  // Radial phi*: |grad phi*| = ds / dr between table levels.
  const double sphere = sphere_volume(r.dim - 1);
  for (size_t k = 0; k + 1 < r.level.size(); ++k) {
    const double dr = r.radius[k] - r.radius[k + 1];
    if (!(dr > 0)) continue;
    const double ds = r.level[k + 1] - r.level[k];
    const double rm = 0.5 * (r.radius[k] + r.radius[k + 1]);
    out.energy_rn += sphere * std::pow(rm, r.dim - 1) * ds * ds / dr;
  }
  out.margin = out.energy_m - std::pow(1 - delta, 2.0 / r.dim) * out.energy_rn;
  return out;
}

}  // namespace cflow
