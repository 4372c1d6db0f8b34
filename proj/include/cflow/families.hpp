// Named initial-data families.
#pragma once

#include <vector>

#include "cflow/geometry.hpp"

namespace cflow {

struct InitialData {
  WarpedMetric metric;
  std::vector<double> phi;
};

// phi_0 = amplitude * sin(mode * 2 pi x / L) on periodic grids and
// amplitude * cos(mode * pi x / L) on pole intervals (even about both poles).
struct PhiProfile {
  double amplitude = 0.0;
  int mode = 1;
};

// a = 1, w = radius on [0, length).
InitialData flat_torus(int nodes, double length, double radius, PhiProfile phi = {});
// Round S^n of curvature k0: a = 1/sqrt(k0), w = sin(x)/sqrt(k0) on [0, pi].
InitialData round_sphere(int nodes, int n, double k0, PhiProfile phi = {});
// Two round caps joined by a flat-bottomed neck of radius neck_w around x = pi/2,
// fiber S^m. With m >= 2 and neck_w ~ 0.25 the neck pinches before the caps shrink.
InitialData dumbbell(int nodes, double neck_w, int m, PhiProfile phi = {});
// Flat torus with w = 1 + eps cos(mode x).
InitialData perturbed_flat(int nodes, double eps, int mode, PhiProfile phi = {});
// Closed surface of revolution that is exactly flat (w = x) for x <= flat_radius near
// the north pole and closes up through a curved band of width `band`.
InitialData gaussian_cap(int nodes, double flat_radius, double band, int m, PhiProfile phi = {});

}  // namespace cflow
