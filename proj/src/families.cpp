#include "cflow/families.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cflow {

namespace {

constexpr double pi = std::numbers::pi;

std::vector<double> phi_values(const Grid& g, const PhiProfile& p) {
  std::vector<double> out(g.nodes, 0.0);
  if (p.amplitude == 0.0) return out;
  const double len = g.coordinate_length();
  for (int i = 0; i < g.nodes; ++i) {
    const double u = (g.x(i) - g.x0) / len;
    out[i] = g.periodic() ? p.amplitude * std::sin(p.mode * 2.0 * pi * u)
                          : p.amplitude * std::cos(p.mode * pi * u);
  }
  return out;
}

double smoothstep5(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

}  // namespace

InitialData flat_torus(int nodes, double length, double radius, PhiProfile phi) {
  InitialData d;
  d.metric.grid = Grid::periodic(nodes, length, 1, 0);
  d.metric.a.assign(nodes, 1.0);
  d.metric.w.assign(nodes, radius);
  d.phi = phi_values(d.metric.grid, phi);
  return d;
}

InitialData round_sphere(int nodes, int n, double k0, PhiProfile phi) {
  InitialData d;
  d.metric.grid = Grid::interval(nodes, pi, n - 1);
  const double r = 1.0 / std::sqrt(k0);
  d.metric.a.assign(nodes, r);
  d.metric.w.resize(nodes);
  for (int i = 0; i < nodes; ++i) d.metric.w[i] = r * std::sin(d.metric.grid.x(i));
  d.metric.w.front() = 0.0;
  d.metric.w.back() = 0.0;
  d.phi = phi_values(d.metric.grid, phi);
  return d;
}

InitialData dumbbell(int nodes, double neck_w, int m, PhiProfile phi) {
  InitialData d;
  d.metric.grid = Grid::interval(nodes, pi, m);
  d.metric.a.assign(nodes, 1.0);
  d.metric.w.resize(nodes);
  // Flat-bottomed neck: full depth for |x - pi/2| <= 0.15, round profile beyond 0.75.
  const double inner = 0.15, outer = 0.75;
  for (int i = 0; i < nodes; ++i) {
    const double x = d.metric.grid.x(i);
    const double depth = 1.0 - smoothstep5((std::abs(x - 0.5 * pi) - inner) / (outer - inner));
    d.metric.w[i] = std::sin(x) * (1.0 - (1.0 - neck_w) * depth);
  }
  d.metric.w.front() = 0.0;
  d.metric.w.back() = 0.0;
  d.phi = phi_values(d.metric.grid, phi);
  return d;
}

InitialData perturbed_flat(int nodes, double eps, int mode, PhiProfile phi) {
  InitialData d;
  d.metric.grid = Grid::periodic(nodes, 2.0 * pi, 1, 0);
  d.metric.a.assign(nodes, 1.0);
  d.metric.w.resize(nodes);
  for (int i = 0; i < nodes; ++i) d.metric.w[i] = 1.0 + eps * std::cos(mode * d.metric.grid.x(i));
  d.phi = phi_values(d.metric.grid, phi);
  return d;
}

InitialData gaussian_cap(int nodes, double flat_radius, double band, int m, PhiProfile phi) {
  // w' = cos(theta(x)) with theta rising from 0 to pi across the band; the profile is
  // antisymmetric about the band centre, so w returns to 0 at x = 2 flat_radius + band.
  const double length = 2.0 * flat_radius + band;
  InitialData d;
  d.metric.grid = Grid::interval(nodes, length, m);
  d.metric.a.assign(nodes, 1.0);
  d.metric.w.assign(nodes, 0.0);
  auto slope = [&](double x) {
    const double theta = pi * smoothstep5((x - flat_radius) / band);
    return std::cos(theta);
  };
  const int sub = 64;
  const double h = d.metric.grid.spacing;
  double w = 0.0;
  for (int i = 1; i < nodes; ++i) {
    const double x0 = d.metric.grid.x(i - 1);
    const double hs = h / sub;
    double acc = 0.0;
    for (int k = 0; k < sub; ++k) {
      const double xa = x0 + k * hs;
      acc += hs / 6.0 * (slope(xa) + 4.0 * slope(xa + 0.5 * hs) + slope(xa + hs));
    }
    w += acc;
    d.metric.w[i] = w;
  }
  d.metric.w.back() = 0.0;
  d.phi = phi_values(d.metric.grid, phi);
  return d;
}

}  // namespace cflow
