#include "cflow/lgeodesic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/tools/toms748_solve.hpp>
#include <fmt/format.h>

#include "cflow/parallel.hpp"

namespace cflow {

namespace {

constexpr double pi = std::numbers::pi;

// (x, x', psi, L, K) in the s variable.
using OdeState = std::array<double, 5>;

struct Rhs {
  const HistorySampler& sampler;
  double t0;
  double momentum;

  OdeState operator()(double s, const OdeState& y) const {
    const auto f = sampler(y[0], t0 - s * s);
    const double p = y[1];
    const double A = f.A;
    double fiber_kin = 0.0, fiber_force = 0.0, fiber_sic = 0.0;
    if (momentum != 0.0) {
      const double psi_s = momentum / f.B;
      fiber_kin = 0.5 * momentum * psi_s;
      fiber_force = 0.5 * f.B_x * psi_s * psi_s;
      fiber_sic = f.sic_fib * momentum * psi_s;
    }
    OdeState d;
    d[0] = p;
    d[1] = (-0.5 * f.A_x * p * p + fiber_force - 4.0 * s * f.sic_rad * A * p + 2.0 * s * s * f.S_x) / A;
    d[2] = momentum != 0.0 ? momentum / f.B : 0.0;
    d[3] = 0.5 * A * p * p + fiber_kin + 2.0 * s * s * f.S;
    d[4] = 2.0 * s * s * s * s * f.S_t - 2.0 * s * s * f.S - 2.0 * s * s * s * f.S_x * p +
           s * s * (f.sic_rad * A * p * p + fiber_sic);
    return d;
  }
};

OdeState add(const OdeState& y, double h, const OdeState& k) {
  OdeState r;
  for (size_t i = 0; i < y.size(); ++i) r[i] = y[i] + h * k[i];
  return r;
}

double wrap_centered(double d, double period) {
  d = std::fmod(d, period);
  if (d >= 0.5 * period) d -= period;
  if (d < -0.5 * period) d += period;
  return d;
}

bool is_pole_base(const HistorySampler& sampler, LBase base) {
  const Grid& g = sampler.grid();
  if (g.periodic()) return false;
  const double len = g.coordinate_length();
  const double tol = 1e-12 * len;
  if (std::abs(base.x) > tol && std::abs(base.x - len) > tol)
    throw DomainError("on a pole interval the base point must be a pole");
  return true;
}

void check_horizon(const HistorySampler& sampler, LBase base, double tau_bar) {
  if (!(tau_bar > 0)) throw DomainError("tau_bar must be positive");
  if (base.t0 > sampler.t_last() * (1 + 1e-12) + 1e-12 || base.t0 - tau_bar < sampler.t_first() - 1e-12)
    throw DomainError(fmt::format("history [{}, {}] does not cover [t0 - tau, t0] = [{}, {}]", sampler.t_first(),
                                  sampler.t_last(), base.t0 - tau_bar, base.t0));
}

// Shooting endpoint map on a fan of radial initial speeds.
struct Fan {
  std::vector<double> v, x_end;
  std::vector<char> ok;
};

Fan build_fan(const HistorySampler& sampler, LBase base, double tau_bar, const ReducedDistanceOptions& opts) {
  const Grid& g = sampler.grid();
  const double v_max = opts.v_max_scale / std::sqrt(tau_bar);
  Fan fan;
  const int count = std::max(opts.fan, 4);
  double lo = -v_max, hi = v_max;
  if (!g.periodic()) {
    const bool left = std::abs(base.x) < 0.5 * g.coordinate_length();
    lo = left ? 0.0 : -v_max;
    hi = left ? v_max : 0.0;
  }
  const int total = g.periodic() ? 2 * count + 1 : count + 1;
  fan.v.resize(total);
  fan.x_end.resize(total);
  fan.ok.resize(total);
  for (int k = 0; k < total; ++k) fan.v[k] = lo + (hi - lo) * k / (total - 1);
  // Speeds are shot outward from v = 0 so that once a path leaves the domain the
  // remaining, faster paths can be skipped.
  const int zero = g.periodic() ? count : (lo == 0.0 ? 0 : total - 1);
  auto shoot_range = [&](int from, int step) {
    int failures = 0;
    for (int k = from; k >= 0 && k < total; k += step) {
      if (failures >= 2) {
        fan.ok[k] = 0;
        continue;
      }
      const auto geo = shoot(sampler, base, fan.v[k], tau_bar, opts.shoot);
      fan.x_end[k] = geo.x_end();
      fan.ok[k] = !geo.partial;
      failures = geo.partial ? failures + 1 : 0;
      if (g.periodic() && std::abs(geo.x_end() - base.x) > 2.0 * g.coordinate_length()) failures = 2;
    }
  };
  shoot_range(zero, lo == 0.0 ? 1 : (hi == 0.0 ? -1 : 1));
  if (g.periodic()) shoot_range(zero - 1, -1);
  return fan;
}

struct Candidate {
  bool found = false;
  LGeodesic geo;
};

// Minimal-L geodesic among all fan brackets of x_end(v) = target.
Candidate solve_target(const HistorySampler& sampler, LBase base, double tau_bar, const Fan& fan,
                       std::span<const double> targets, const ShootOptions& shoot_opts) {
  Candidate best;
  const double scale = sampler.grid().coordinate_length();
  const double tol = 1e-13 * scale;
  auto consider = [&](LGeodesic geo) {
    if (geo.partial) return;
    if (!best.found || geo.L < best.geo.L) {
      best.found = true;
      best.geo = std::move(geo);
    }
  };
  for (double target : targets) {
    for (size_t k = 0; k + 1 < fan.v.size(); ++k) {
      if (!fan.ok[k] || !fan.ok[k + 1]) continue;
      const double f0 = fan.x_end[k] - target, f1 = fan.x_end[k + 1] - target;
      if (std::abs(f0) <= tol) {
        consider(shoot(sampler, base, fan.v[k], tau_bar, shoot_opts));
        continue;
      }
      if (f0 * f1 > 0 || std::abs(f1) <= tol) continue;
      auto f = [&](double v) { return shoot(sampler, base, v, tau_bar, shoot_opts).x_end() - target; };
      std::uintmax_t iters = 60;
      const auto r = boost::math::tools::toms748_solve(f, fan.v[k], fan.v[k + 1], f0, f1,
                                                       boost::math::tools::eps_tolerance<double>(50), iters);
      consider(shoot(sampler, base, 0.5 * (r.first + r.second), tau_bar, shoot_opts));
    }
    const size_t last = fan.v.size() - 1;
    if (fan.ok[last] && std::abs(fan.x_end[last] - target) <= tol)
      consider(shoot(sampler, base, fan.v[last], tau_bar, shoot_opts));
  }
  return best;
}

ReducedDistanceOptions endpoint_only(ReducedDistanceOptions opts) {
  opts.shoot.record_path = false;
  return opts;
}

std::vector<double> radial_targets(const Grid& g, LBase base, double q_x) {
  if (!g.periodic()) return {q_x};
  const double len = g.coordinate_length();
  const double near = base.x + wrap_centered(q_x - base.x, len);
  return {near, near - len, near + len};
}

ReducedDistanceSample to_sample(const HistorySampler& sampler, const LGeodesic& geo, double q_x, double q_psi) {
  ReducedDistanceSample r;
  r.q_x = q_x;
  r.q_psi = q_psi;
  r.tau_bar = geo.tau_bar();
  r.L = geo.L;
  r.ell = geo.ell();
  r.K = geo.K;
  r.v_rad = geo.v_rad;
  r.v_fib = geo.v_fib;
  r.X_rad = geo.X_rad_end(sampler);
  r.status = SolveStatus::resolved;
  return r;
}

}  // namespace

std::string to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::resolved: return "resolved";
    case SolveStatus::unresolved: return "unresolved";
    case SolveStatus::partial: return "partial";
  }
  return "unknown";
}

double LGeodesic::ell() const { return L / (2.0 * std::sqrt(tau_bar())); }

double LGeodesic::X_rad_end(const HistorySampler& sampler) const {
  const double s = std::sqrt(tau_bar());
  const auto f = sampler(x_end(), base.t0 - tau_bar());
  return std::sqrt(f.A) * x_s.back() / (2.0 * s);
}

double ReducedDistanceSample::v_norm() const { return std::hypot(v_rad, v_fib); }

LGeodesic shoot(const HistorySampler& sampler, LBase base, double v_rad, double tau_bar, const ShootOptions& opts,
                double v_fib) {
  check_horizon(sampler, base, tau_bar);
  if (opts.steps < 2) throw DomainError("shoot needs at least 2 steps");
  const auto f0 = sampler(base.x, base.t0);
  LGeodesic geo;
  geo.base = base;
  geo.v_rad = v_rad;
  geo.v_fib = v_fib;
  if (v_fib != 0.0) {
    if (f0.B <= 0) throw DomainError("fiber velocity at a pole is undefined");
    geo.momentum = 2.0 * std::sqrt(f0.B) * v_fib;
  }
  const Rhs rhs{sampler, base.t0, geo.momentum};
  const double s_bar = std::sqrt(tau_bar);
  const double h = s_bar / opts.steps;
  OdeState y{base.x, 2.0 * v_rad / std::sqrt(f0.A), 0.0, 0.0, 0.0};

  auto record = [&](double s, const OdeState& st) {
    const auto f = sampler(st[0], base.t0 - s * s);
    geo.tau.push_back(s * s);
    geo.x.push_back(st[0]);
    geo.psi.push_back(st[2]);
    geo.x_s.push_back(st[1]);
    geo.S.push_back(f.S);
    geo.grad_S.push_back(f.S_x / std::sqrt(f.A));
    // Sic(X, X) with X = gamma~'/(2s); undefined at s = 0 and stored there as the limit with s -> h.
    const double ss = std::max(s, h);
    double sic = f.sic_rad * f.A * st[1] * st[1];
    if (geo.momentum != 0.0) sic += f.sic_fib * geo.momentum * geo.momentum / f.B;
    geo.sic_XX.push_back(sic / (4.0 * ss * ss));
  };
  record(0.0, y);
  for (int j = 0; j < opts.steps; ++j) {
    const double s = j * h;
    const auto k1 = rhs(s, y);
    const auto k2 = rhs(s + 0.5 * h, add(y, 0.5 * h, k1));
    const auto k3 = rhs(s + 0.5 * h, add(y, 0.5 * h, k2));
    const auto k4 = rhs(s + h, add(y, h, k3));
    for (size_t i = 0; i < y.size(); ++i) y[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    for (double c : y)
      if (!std::isfinite(c)) throw NumericError("non-finite value while shooting an L-geodesic", -1);
    if (!sampler.inside(y[0])) {
      geo.partial = true;
      record((j + 1) * h, y);
      break;
    }
    if (opts.record_path || j + 1 == opts.steps) record((j + 1) * h, y);
  }
  geo.L = y[3];
  geo.K = y[4];
  return geo;
}

double l_length(const HistorySampler& sampler, LBase base, std::span<const double> s, std::span<const double> x,
                std::span<const double> psi) {
  if (s.size() != x.size() || s.size() < 2) throw DomainError("path needs matching s and x samples");
  if (!psi.empty() && psi.size() != s.size()) throw DomainError("psi samples do not match the path");
  if (s.front() != 0.0) throw DomainError("path must start at s = 0");
  check_horizon(sampler, base, s.back() * s.back());
  if (std::abs(x.front() - base.x) > 1e-12 * (1 + std::abs(base.x))) throw DomainError("path must start at the base point");
  double total = 0.0;
  for (size_t j = 0; j + 1 < s.size(); ++j) {
    const double ds = s[j + 1] - s[j];
    if (!(ds > 0)) throw DomainError("path s samples must increase");
    const double xm = 0.5 * (x[j] + x[j + 1]);
    if (!sampler.inside(xm)) throw DomainError("path leaves the coordinate domain");
    const double sm = 0.5 * (s[j] + s[j + 1]);
    const auto f = sampler(xm, base.t0 - sm * sm);
    const double dx = (x[j + 1] - x[j]) / ds;
    double e = 0.5 * f.A * dx * dx + 2.0 * sm * sm * f.S;
    if (!psi.empty()) {
      const double dpsi = (psi[j + 1] - psi[j]) / ds;
      e += 0.5 * f.B * dpsi * dpsi;
    }
    total += e * ds;
  }
  return total;
}

ReducedDistanceSample reduced_distance(const HistorySampler& sampler, LBase base, double q_x, double tau_bar,
                                       const ReducedDistanceOptions& opts) {
  is_pole_base(sampler, base);
  check_horizon(sampler, base, tau_bar);
  const auto quick = endpoint_only(opts);
  const Fan fan = build_fan(sampler, base, tau_bar, quick);
  const auto targets = radial_targets(sampler.grid(), base, q_x);
  const auto best = solve_target(sampler, base, tau_bar, fan, targets, quick.shoot);
  ReducedDistanceSample out;
  out.q_x = q_x;
  out.tau_bar = tau_bar;
  if (best.found) out = to_sample(sampler, best.geo, q_x, 0.0);
  if (opts.oracle) out.ell_oracle = oracle_reduced_distance_extrapolated(sampler, base, q_x, tau_bar, opts.oracle_points);
  return out;
}

namespace {

void require_flat_circle_fiber(const Grid& g) {
  if (!g.periodic() || g.fiber_dim != 1 || g.fiber_curvature != 0)
    throw DomainError("2D shooting needs a periodic grid with a flat circle fiber");
}

struct Image {
  double x, psi, d2;
};

// Newton on the 2D endpoint map (v_rad, v_fib) -> (x_end, psi_end).
Candidate newton_2d(const HistorySampler& sampler, LBase base, double tau_bar, const Image& target,
                    const ShootOptions& opts) {
  const auto f0 = sampler(base.x, base.t0);
  const double scale = sampler.grid().coordinate_length();
  const double tol = 1e-12 * scale;
  std::array<double, 2> v{std::sqrt(f0.A) * (target.x - base.x) / (2 * std::sqrt(tau_bar)),
                          std::sqrt(f0.B) * target.psi / (2 * std::sqrt(tau_bar))};
  auto residual = [&](const std::array<double, 2>& u, LGeodesic* keep = nullptr) {
    auto geo = shoot(sampler, base, u[0], tau_bar, opts, u[1]);
    std::array<double, 2> r{geo.x_end() - target.x, geo.psi_end() - target.psi};
    if (keep) *keep = std::move(geo);
    return r;
  };
  auto norm = [](const std::array<double, 2>& r) { return std::hypot(r[0], r[1]); };
  Candidate out;
  LGeodesic geo;
  auto r = residual(v, &geo);
  for (int iter = 0; iter < 40; ++iter) {
    if (norm(r) < tol) {
      out.found = true;
      out.geo = std::move(geo);
      return out;
    }
    const double d = 1e-6 * (1 + std::hypot(v[0], v[1]));
    const auto r1 = residual({v[0] + d, v[1]});
    const auto r2 = residual({v[0], v[1] + d});
    const double j00 = (r1[0] - r[0]) / d, j10 = (r1[1] - r[1]) / d;
    const double j01 = (r2[0] - r[0]) / d, j11 = (r2[1] - r[1]) / d;
    const double det = j00 * j11 - j01 * j10;
    if (!(std::abs(det) > 0)) break;
    const std::array<double, 2> step{-(j11 * r[0] - j01 * r[1]) / det, -(-j10 * r[0] + j00 * r[1]) / det};
    double lambda = 1.0;
    bool moved = false;
    while (lambda > 1e-4) {
      const std::array<double, 2> trial{v[0] + lambda * step[0], v[1] + lambda * step[1]};
      LGeodesic tg;
      const auto rt = residual(trial, &tg);
      if (norm(rt) < norm(r)) {
        v = trial;
        r = rt;
        geo = std::move(tg);
        moved = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!moved) break;
  }
  return out;
}

// Midpoint energy of a radial path and its gradient in the interior nodes.
double path_energy(const HistorySampler& sampler, LBase base, double h, std::span<const double> x,
                   std::vector<double>* grad, std::vector<double>* weight) {
  const size_t K = x.size() - 1;
  if (grad) grad->assign(x.size(), 0.0);
  if (weight) weight->assign(K, 0.0);
  double e = 0.0;
  for (size_t k = 0; k < K; ++k) {
    const double sm = (k + 0.5) * h;
    const double xm = 0.5 * (x[k] + x[k + 1]);
    const auto f = sampler(xm, base.t0 - sm * sm);
    const double D = (x[k + 1] - x[k]) / h;
    e += h * (0.5 * f.A * D * D + 2.0 * sm * sm * f.S);
    if (grad) {
      const double common = h * (0.25 * f.A_x * D * D + sm * sm * f.S_x);
      (*grad)[k] += common - f.A * D;
      (*grad)[k + 1] += common + f.A * D;
    }
    if (weight) (*weight)[k] = f.A / h;
  }
  return e;
}

// Minimal discretized L over radial paths from the base to `target` with K segments.
double minimize_path(const HistorySampler& sampler, LBase base, double target, double tau_bar, int K) {
  const double h = std::sqrt(tau_bar) / K;
  std::vector<double> x(K + 1);
  for (int j = 0; j <= K; ++j) x[j] = base.x + (target - base.x) * j / K;
  std::vector<double> grad, weight, dir(K + 1), trial(K + 1);
  std::vector<double> c(K + 1), dd(K + 1);
  double e = path_energy(sampler, base, h, x, &grad, &weight);
  for (int iter = 0; iter < 5000; ++iter) {
    // Tridiagonal kinetic-energy preconditioner on interior nodes 1..K-1 (Thomas algorithm).
    const int n = K - 1;
    if (n <= 0) break;
    for (int i = 0; i < n; ++i) {
      const int j = i + 1;
      const double diag = weight[j - 1] + weight[j];
      const double lower = i > 0 ? -weight[j - 1] : 0.0;
      const double upper = i + 1 < n ? -weight[j] : 0.0;
      const double denom = diag - (i > 0 ? lower * c[i - 1] : 0.0);
      c[i] = upper / denom;
      dd[i] = (grad[j] - (i > 0 ? lower * dd[i - 1] : 0.0)) / denom;
    }
    for (int i = n - 1; i >= 0; --i) {
      dir[i + 1] = dd[i] - (i + 1 < n ? c[i] * dir[i + 2] : 0.0);
    }
    dir[0] = dir[K] = 0.0;
    double slope = 0.0;
    for (int j = 1; j < K; ++j) slope += grad[j] * dir[j];
    if (!(slope > 1e-30 * (1 + std::abs(e)))) break;
    double alpha = 1.0;
    double e_new = e;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      for (int j = 0; j <= K; ++j) trial[j] = x[j] - alpha * dir[j];
      e_new = path_energy(sampler, base, h, trial, nullptr, nullptr);
      if (e_new <= e - 1e-4 * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;
    x.swap(trial);
    const double de = e - e_new;
    e = path_energy(sampler, base, h, x, &grad, &weight);
    if (de < 1e-15 * (1 + std::abs(e))) break;
  }
  return e;
}

double extrapolate_two_levels(double coarse, double fine) { return (4.0 * fine - coarse) / 3.0; }

void fill_unresolved(EllField& f) {
  const int total = static_cast<int>(f.ell.size());
  for (int i = 0; i < total; ++i) {
    if (f.status[i] == SolveStatus::resolved) continue;
    for (int d = 1; d < total; ++d) {
      const int cand[2] = {i - d, i + d};
      int pick = -1;
      for (int c : cand)
        if (c >= 0 && c < total && f.status[c] == SolveStatus::resolved) {
          pick = c;
          break;
        }
      if (pick >= 0) {
        f.ell[i] = f.ell[pick];
        f.L[i] = f.L[pick];
        f.K[i] = f.K[pick];
        break;
      }
    }
  }
}

// Composite Simpson on a uniform grid, with a 3/8 panel when the interval count is odd.
double simpson(std::span<const double> f, double h) {
  const int n = static_cast<int>(f.size()) - 1;
  if (n < 1) return 0.0;
  if (n == 1) return 0.5 * h * (f[0] + f[1]);
  if (n == 2) return h / 3 * (f[0] + 4 * f[1] + f[2]);
  int even = n % 2 == 0 ? n : n - 3;
  double total = 0.0;
  for (int i = 0; i + 2 <= even; i += 2) total += h / 3 * (f[i] + 4 * f[i + 1] + f[i + 2]);
  if (even != n) total += 3 * h / 8 * (f[even] + 3 * f[even + 1] + 3 * f[even + 2] + f[even + 3]);
  return total;
}

// Per-node integrand a w^m int_fiber e^{-ell}; `psi_stride` thins the fiber samples.
std::vector<double> gaussian_columns(const WarpedMetric& metric, const EllField& field, int psi_stride) {
  const int m = metric.grid.fiber_dim;
  const int P = field.psi_count();
  const double dpsi = P > 1 ? pi / (P - 1) * psi_stride : 0.0;
  std::vector<double> column(metric.grid.nodes);
  for (int i = 0; i < metric.grid.nodes; ++i) {
    double fiber = 0.0;
    if (P > 1) {
      for (int j = 0; j < P; j += psi_stride) {
        const double wt = (j == 0 || j == P - 1) ? 0.5 : 1.0;
        fiber += 2.0 * dpsi * wt * std::exp(-field.at(i, j));
      }
    } else {
      fiber = sphere_volume(m) * std::exp(-field.at(i));
    }
    column[i] = metric.a[i] * std::pow(metric.w[i], m) * fiber;
  }
  return column;
}

// Trapezoid on periodic grids (spectrally accurate), Simpson between poles.
double integrate_columns(const Grid& g, std::span<const double> column) {
  if (g.periodic()) {
    double total = 0.0;
    for (double c : column) total += c;
    return total * g.spacing;
  }
  return simpson(column, g.spacing);
}

// Difference against the same rule at half resolution, in x and in psi.
double gaussian_quadrature_error(const WarpedMetric& metric, const EllField& field, std::span<const double> column) {
  const Grid& g = metric.grid;
  const int N = g.nodes;
  double err = 0.0;
  if (g.periodic()) {
    if (N % 2 == 0) {
      double coarse = 0.0;
      for (int i = 0; i < N; i += 2) coarse += column[i];
      err += std::abs(integrate_columns(g, column) - 2 * g.spacing * coarse);
    }
  } else {
    const int M = ((N - 1) / 2) * 2;
    if (M >= 4) {
      std::vector<double> coarse;
      for (int i = 0; i <= M; i += 2) coarse.push_back(column[i]);
      const double fine = simpson(column.first(M + 1), g.spacing);
      err += std::abs(fine - simpson(coarse, 2 * g.spacing)) / 15.0;
    }
  }
  const int P = field.psi_count();
  if (P > 1 && (P - 1) % 2 == 0) {
    const auto thin = gaussian_columns(metric, field, 2);
    err += std::abs(integrate_columns(g, column) - integrate_columns(g, thin));
  }
  return err;
}

struct NodeGeometry {
  WarpedMetric metric;
  std::vector<double> S;
};

NodeGeometry geometry_at(const HistorySampler& sampler, double t) {
  const auto st = sampler.state_at(t);
  return {st.metric, curvature(st.metric, st.phi).s};
}

}  // namespace

ReducedDistanceSample reduced_distance_2d(const HistorySampler& sampler, LBase base, double q_x, double q_psi,
                                          double tau_bar, const ReducedDistanceOptions& opts) {
  const Grid& g = sampler.grid();
  require_flat_circle_fiber(g);
  check_horizon(sampler, base, tau_bar);
  const auto quick = endpoint_only(opts);
  const auto f0 = sampler(base.x, base.t0);
  const double len = g.coordinate_length();
  const double xq = base.x + wrap_centered(q_x - base.x, len);
  const double pq = wrap_centered(q_psi, 2 * pi);
  std::vector<Image> images;
  for (int k = -1; k <= 1; ++k)
    for (int j = -1; j <= 1; ++j) {
      const double dx = xq + k * len - base.x, dp = pq + 2 * pi * j;
      images.push_back({xq + k * len, pq + 2 * pi * j, f0.A * dx * dx + f0.B * dp * dp});
    }
  double d2min = std::numeric_limits<double>::infinity();
  for (const auto& im : images) d2min = std::min(d2min, im.d2);
  Candidate best;
  for (const auto& im : images) {
    if (im.d2 > 1.5625 * d2min + 1e-24) continue;
    auto c = newton_2d(sampler, base, tau_bar, im, quick.shoot);
    if (c.found && (!best.found || c.geo.L < best.geo.L)) best = std::move(c);
  }
  ReducedDistanceSample out;
  out.q_x = q_x;
  out.q_psi = q_psi;
  out.tau_bar = tau_bar;
  if (best.found) out = to_sample(sampler, best.geo, q_x, q_psi);
  return out;
}

double oracle_reduced_distance(const HistorySampler& sampler, LBase base, double q_x, double tau_bar, int points) {
  is_pole_base(sampler, base);
  check_horizon(sampler, base, tau_bar);
  if (points < 2) throw DomainError("oracle needs at least 2 path segments");
  double best = std::numeric_limits<double>::infinity();
  for (double target : radial_targets(sampler.grid(), base, q_x))
    best = std::min(best, minimize_path(sampler, base, target, tau_bar, points));
  return best / (2.0 * std::sqrt(tau_bar));
}

double oracle_reduced_distance_extrapolated(const HistorySampler& sampler, LBase base, double q_x, double tau_bar,
                                            int points) {
  const double coarse = oracle_reduced_distance(sampler, base, q_x, tau_bar, points);
  const double fine = oracle_reduced_distance(sampler, base, q_x, tau_bar, 2 * points);
  return extrapolate_two_levels(coarse, fine);
}

EllField ell_field(const HistorySampler& sampler, LBase base, double tau, const ReducedDistanceOptions& opts) {
  is_pole_base(sampler, base);
  check_horizon(sampler, base, tau);
  const Grid& g = sampler.grid();
  const auto quick = endpoint_only(opts);
  const Fan fan = build_fan(sampler, base, tau, quick);
  EllField f;
  f.t0 = base.t0;
  f.tau = tau;
  f.psi = {0.0};
  const int N = g.nodes;
  f.x.resize(N);
  for (int i = 0; i < N; ++i) f.x[i] = g.x(i);
  f.ell.assign(N, 0.0);
  f.L.assign(N, 0.0);
  f.K.assign(N, 0.0);
  f.status.assign(N, SolveStatus::unresolved);
  parallel_for(N, [&](std::size_t i) {
    const auto targets = radial_targets(g, base, f.x[i]);
    const auto c = solve_target(sampler, base, tau, fan, targets, quick.shoot);
    if (!c.found) return;
    f.ell[i] = c.geo.ell();
    f.L[i] = c.geo.L;
    f.K[i] = c.geo.K;
    f.status[i] = SolveStatus::resolved;
  });
  f.unresolved = static_cast<int>(std::count(f.status.begin(), f.status.end(), SolveStatus::unresolved));
  fill_unresolved(f);
  return f;
}

EllField ell_field_2d(const HistorySampler& sampler, LBase base, double tau, int psi_samples,
                      const ReducedDistanceOptions& opts) {
  require_flat_circle_fiber(sampler.grid());
  check_horizon(sampler, base, tau);
  if (psi_samples < 2) throw DomainError("2D fields need at least 2 fiber intervals");
  const Grid& g = sampler.grid();
  EllField f;
  f.t0 = base.t0;
  f.tau = tau;
  const int N = g.nodes, P = psi_samples + 1;
  f.x.resize(N);
  for (int i = 0; i < N; ++i) f.x[i] = g.x(i);
  f.psi.resize(P);
  for (int j = 0; j < P; ++j) f.psi[j] = pi * j / psi_samples;
  const size_t total = static_cast<size_t>(N) * P;
  f.ell.assign(total, 0.0);
  f.L.assign(total, 0.0);
  f.K.assign(total, 0.0);
  f.status.assign(total, SolveStatus::unresolved);
  parallel_for(total, [&](std::size_t idx) {
    const auto r = reduced_distance_2d(sampler, base, f.x[idx / P], f.psi[idx % P], tau, opts);
    if (r.status != SolveStatus::resolved) return;
    f.ell[idx] = r.ell;
    f.L[idx] = r.L;
    f.K[idx] = r.K;
    f.status[idx] = SolveStatus::resolved;
  });
  f.unresolved = static_cast<int>(std::count(f.status.begin(), f.status.end(), SolveStatus::unresolved));
  fill_unresolved(f);
  return f;
}

DerivativeResiduals derivative_identity_check(const HistorySampler& sampler, LBase base,
                                              const ReducedDistanceSample& sample, const ReducedDistanceOptions& opts) {
  DerivativeResiduals out;
  if (sample.status != SolveStatus::resolved) {
    out.skipped = true;
    out.reason = "sample unresolved";
    return out;
  }
  const double tau = sample.tau_bar;
  const double dtau = 1e-3 * tau;
  const double dq = 1e-4 * sampler.grid().coordinate_length();
  auto solve = [&](double q, double t) { return reduced_distance(sampler, base, q, t, opts); };
  // Five-point centered differences in tau and in q.
  std::array<ReducedDistanceSample, 4> at_tau, at_q;
  const int offsets[4] = {-2, -1, 1, 2};
  for (int k = 0; k < 4; ++k) {
    at_tau[k] = solve(sample.q_x, tau + offsets[k] * dtau);
    at_q[k] = solve(sample.q_x + offsets[k] * dq, tau);
  }
  for (int k = 0; k < 4; ++k)
    if (at_tau[k].status != SolveStatus::resolved || at_q[k].status != SolveStatus::resolved) {
      out.skipped = true;
      out.reason = "neighboring solve unresolved";
      return out;
    }
  // A jump of the minimizing branch between neighbors marks a cut point.
  const double vp = at_q[2].v_rad, vm = at_q[1].v_rad;
  if (std::abs(vp - 2 * sample.v_rad + vm) > 0.1 * std::abs(vp - vm) + 1e-9 * (1 + std::abs(sample.v_rad))) {
    out.skipped = true;
    out.reason = "near a cut point";
    return out;
  }
  auto five_point = [](const std::array<ReducedDistanceSample, 4>& r, double step) {
    return (r[0].L - 8 * r[1].L + 8 * r[2].L - r[3].L) / (12 * step);
  };
  const auto f = sampler(sample.q_x, base.t0 - tau);
  const double L_tau = five_point(at_tau, dtau);
  const double grad_L = five_point(at_q, dq) / std::sqrt(f.A);
  const double st = std::sqrt(tau);
  out.r_tau = L_tau - (2 * st * f.S - sample.L / (2 * tau) + sample.K / tau);
  out.r_grad = grad_L * grad_L - (-4 * tau * f.S + 2 * sample.L / st - 4 * sample.K / st);
  out.r_X = grad_L / (2 * st) - sample.X_rad;
  out.scale = std::max({1.0, std::abs(L_tau), grad_L * grad_L});
  return out;
}

InequalityMargins inequality_check(const HistorySampler& sampler, LBase base, const EllField& before,
                                   const EllField& at, const EllField& after) {
  const Grid& g = sampler.grid();
  const int N = at.nodes(), P = at.psi_count();
  if (before.ell.size() != at.ell.size() || after.ell.size() != at.ell.size())
    throw DomainError("inequality check needs fields on the same samples");
  if (!(before.tau < at.tau && at.tau < after.tau)) throw DomainError("fields must bracket tau");
  if (g.periodic() && P == 1) throw DomainError("radial fields on a periodic grid miss the fiber directions");
  const int n = g.dim();
  const auto geo = geometry_at(sampler, base.t0 - at.tau);
  const auto& metric = geo.metric;
  const double tau = at.tau;
  const double dpsi = P > 1 ? at.psi[1] - at.psi[0] : 1.0;
  const double h = g.spacing;

  // Column-wise x-operators.
  std::vector<double> lap(at.ell.size()), grad2(at.ell.size()), col(N);
  for (int j = 0; j < P; ++j) {
    for (int i = 0; i < N; ++i) col[i] = at.at(i, j);
    const auto lx = laplacian(metric, col);
    const auto dx = d_dx(g, col);
    for (int i = 0; i < N; ++i) {
      const size_t idx = static_cast<size_t>(i) * P + j;
      lap[idx] = lx[i];
      grad2[idx] = dx[i] * dx[i] / (metric.a[i] * metric.a[i]);
      if (P > 1) {
        const double B = metric.w[i] * metric.w[i];
        const double lm = at.at(i, j > 0 ? j - 1 : 1), lp = at.at(i, j + 1 < P ? j + 1 : P - 2);
        lap[idx] += (lp - 2 * at.at(i, j) + lm) / (dpsi * dpsi * B);
        const double dp = (lp - lm) / (2 * dpsi);
        grad2[idx] += dp * dp / B;
      }
    }
  }

  auto ell_x = [&](int i, int j) {
    if (g.periodic()) return at.at(((i % N) + N) % N, j);
    if (i < 0) i = -i;
    if (i > N - 1) i = 2 * (N - 1) - i;
    return at.at(i, j);
  };
  auto ell_p = [&](int i, int j) {
    if (j < 0) j = -j;
    if (j > P - 1) j = 2 * (P - 1) - j;
    return at.at(i, j);
  };
  auto resolved = [&](int i, int j) {
    if (g.periodic()) i = ((i % N) + N) % N;
    else {
      if (i < 0) i = -i;
      if (i > N - 1) i = 2 * (N - 1) - i;
    }
    const size_t idx = static_cast<size_t>(i) * P + j;
    return at.status[idx] == SolveStatus::resolved && before.status[idx] == SolveStatus::resolved &&
           after.status[idx] == SolveStatus::resolved;
  };
  double d2max = 0.0;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < P; ++j)
      d2max = std::max(d2max, std::abs(ell_x(i + 1, j) - 2 * ell_x(i, j) + ell_x(i - 1, j)) / (h * h));
  auto smooth = [&](double d2h, double d22h) {
    return std::abs(d2h - d22h) <= 0.5 * std::max(std::abs(d2h), std::abs(d22h)) + 1e-8 * d2max;
  };

  InequalityMargins out;
  out.min_ell = std::numeric_limits<double>::infinity();
  out.worst_ell_ineq = out.worst_lbar_ineq = std::numeric_limits<double>::infinity();
  const double dtau = after.tau - before.tau;
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < P; ++j) {
      const size_t idx = static_cast<size_t>(i) * P + j;
      if (at.status[idx] == SolveStatus::resolved) out.min_ell = std::min(out.min_ell, at.ell[idx]);
      bool ok = true;
      for (int d = -2; d <= 2 && ok; ++d) ok = resolved(i + d, j);
      if (!ok) continue;
      const double c = ell_x(i, j);
      bool kink = !smooth((ell_x(i + 1, j) - 2 * c + ell_x(i - 1, j)) / (h * h),
                          (ell_x(i + 2, j) - 2 * c + ell_x(i - 2, j)) / (4 * h * h));
      if (P > 1)
        kink = kink || !smooth((ell_p(i, j + 1) - 2 * c + ell_p(i, j - 1)) / (dpsi * dpsi),
                               (ell_p(i, j + 2) - 2 * c + ell_p(i, j - 2)) / (4 * dpsi * dpsi));
      if (kink) {
        ++out.kinks;
        continue;
      }
      const double ell_tau = (after.ell[idx] - before.ell[idx]) / dtau;
      const double m1 = ell_tau - lap[idx] + grad2[idx] - geo.S[i] + n / (2 * tau);
      const double lbar_tau = 4 * c + 4 * tau * ell_tau;
      const double m2 = 2 * n - (lbar_tau + 4 * tau * lap[idx]);
      out.nodes.push_back(static_cast<int>(idx));
      out.ell_ineq.push_back(m1);
      out.lbar_ineq.push_back(m2);
      out.worst_ell_ineq = std::min(out.worst_ell_ineq, m1);
      out.worst_lbar_ineq = std::min(out.worst_lbar_ineq, m2);
    }
  }
  out.min_ell_margin = 0.5 * n - out.min_ell;
  return out;
}

JacobianResult l_jacobian(const HistorySampler& sampler, LBase base, double v, double tau, const ShootOptions& opts) {
  const Grid& g = sampler.grid();
  ShootOptions quick = opts;
  quick.record_path = false;
  JacobianResult out;
  const auto center = shoot(sampler, base, v, tau, quick);
  out.x_end = center.x_end();
  out.ell = center.ell();
  const auto fe = sampler(out.x_end, base.t0 - tau);
  const double a = std::sqrt(fe.A), w = std::sqrt(fe.B);
  const double dv = 1e-5 * (1 + std::abs(v)) / std::sqrt(tau);
  auto end = [&](double u, double u_fib = 0.0) {
    const auto geo = shoot(sampler, base, u, tau, quick, u_fib);
    return std::array<double, 3>{geo.x_end(), geo.psi_end(), geo.partial ? 1.0 : 0.0};
  };
  if (center.partial) {
    out.degenerate = true;
    return out;
  }
  if (is_pole_base(sampler, base)) {
    const double dir = std::abs(base.x) < 0.5 * g.coordinate_length() ? 1.0 : -1.0;
    const double r = std::abs(v);
    const int m = g.fiber_dim;
    // Derivative of the endpoint along the outward ray, one-sided near v = 0.
    double dxdr;
    if (r > dv) {
      const auto p = end(dir * (r + dv)), q = end(dir * (r - dv));
      dxdr = dir * (p[0] - q[0]) / (2 * dv);
    } else {
      const auto p1 = end(dir * (r + dv)), p2 = end(dir * (r + 2 * dv));
      dxdr = dir * (-3 * out.x_end + 4 * p1[0] - p2[0]) / (2 * dv);
    }
    double ratio;
    if (r > 1e-8) {
      ratio = w / r;
    } else {
      const auto e = end(dir * dv);
      ratio = std::sqrt(sampler(e[0], base.t0 - tau).B) / dv;
    }
    out.degenerate = !(dxdr > 0) || !(ratio > 0);
    out.J = a * std::abs(dxdr) * std::pow(ratio, m);
    return out;
  }
  require_flat_circle_fiber(g);
  const auto xp = end(v + dv), xm = end(v - dv);
  const auto pp = end(v, dv), pm = end(v, -dv);
  const double j00 = (xp[0] - xm[0]) / (2 * dv), j10 = (xp[1] - xm[1]) / (2 * dv);
  const double j01 = (pp[0] - pm[0]) / (2 * dv), j11 = (pp[1] - pm[1]) / (2 * dv);
  const double det = j00 * j11 - j01 * j10;
  out.degenerate = !(det > 0);
  out.J = a * w * std::abs(det);
  return out;
}

double ReducedVolumeSeries::monotonicity_margin() const {
  double margin = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k + 1 < vtilde.size(); ++k) margin = std::min(margin, vtilde[k] - vtilde[k + 1]);
  return margin;
}

double ReducedVolumeSeries::limit_at_zero() const {
  if (tau.size() < 2) throw DomainError("need two tau values to extrapolate");
  return vtilde[0] - tau[0] * (vtilde[1] - vtilde[0]) / (tau[1] - tau[0]);
}

double reduced_volume(const HistorySampler& sampler, const EllField& field, double* quad_err) {
  const auto st = sampler.state_at(field.t0 - field.tau);
  const int n = st.metric.grid.dim();
  const double norm = std::pow(4 * pi * field.tau, -0.5 * n);
  const auto column = gaussian_columns(st.metric, field, 1);
  if (quad_err) *quad_err = norm * gaussian_quadrature_error(st.metric, field, column);
  return norm * integrate_columns(st.metric.grid, column);
}

ReducedVolumeSeries reduced_volume_series(const HistorySampler& sampler, LBase base, std::span<const double> taus,
                                          int psi_samples, const ReducedDistanceOptions& opts) {
  ReducedVolumeSeries out;
  for (size_t k = 0; k < taus.size(); ++k) {
    if (k > 0 && !(taus[k] > taus[k - 1])) throw DomainError("tau values must increase");
    const bool two_d = sampler.grid().periodic();
    if (two_d && psi_samples <= 0) throw DomainError("periodic grids need psi_samples > 0");
    const auto field = two_d ? ell_field_2d(sampler, base, taus[k], psi_samples, opts) : ell_field(sampler, base, taus[k], opts);
    double err = 0.0;
    out.tau.push_back(taus[k]);
    out.vtilde.push_back(reduced_volume(sampler, field, &err));
    out.quad_err.push_back(err);
    out.unresolved.push_back(field.unresolved);
  }
  return out;
}

LemmaEstimate lemma_estimate_monitor(const HistorySampler& sampler, LBase base, std::span<const double> taus,
                                     const ReducedDistanceOptions& opts) {
  if (taus.size() < 2) throw DomainError("lemma estimate needs at least two tau values");
  const Grid& g = sampler.grid();
  std::vector<EllField> fields;
  for (double t : taus) fields.push_back(ell_field(sampler, base, t, opts));
  LemmaEstimate out;
  const int N = g.nodes;
  for (size_t k = 0; k < fields.size(); ++k) {
    const auto& f = fields[k];
    const double tau = f.tau;
    const auto st = sampler.state_at(base.t0 - tau);
    const auto s = arclength(st.metric);
    const double total = total_length(st.metric);
    const double u = (base.x - g.x0) / g.spacing;
    const int i0 = std::clamp(static_cast<int>(std::floor(u)), 0, std::max(0, static_cast<int>(s.size()) - 2));
    const double s_base = s[i0] + (u - i0) * (s[std::min<size_t>(i0 + 1, s.size() - 1)] - s[i0]);
    const auto dl = d_dx(g, f.ell);
    const size_t kp = std::min(k + 1, fields.size() - 1), km = k > 0 ? k - 1 : 0;
    for (int i = 0; i < N; ++i) {
      if (f.status[i] != SolveStatus::resolved) continue;
      double d = std::abs(s[i] - s_base);
      if (g.periodic()) d = std::min(d, total - d);
      const double D = d * d / tau;
      const double ell = f.ell[i];
      const double grad = std::abs(dl[i]) / st.metric.a[i];
      const double ell_tau = (fields[kp].ell[i] - fields[km].ell[i]) / (fields[kp].tau - fields[km].tau);
      const double c_dist = std::max(ell / (D + 1), 0.5 * (-ell + std::sqrt(ell * ell + 4 * D)));
      out.c_distance = std::max(out.c_distance, c_dist);
      out.c_gradient = std::max(out.c_gradient, std::sqrt(tau) * grad / (1 + D));
      out.c_time = std::max(out.c_time, tau * std::abs(ell_tau) / (1 + D));
      ++out.samples;
    }
    const auto base_sample = reduced_distance(sampler, base, base.x, tau, opts);
    out.ell_at_base_max = std::max(out.ell_at_base_max, std::abs(base_sample.ell));
  }
  out.c_meas = std::max({out.c_distance, out.c_gradient, out.c_time});
  return out;
}

}  // namespace cflow
