// Conjugate heat equation -u_t = Lap u - S u solved backward along a flow history,
// the pointwise Harnack quantity v, the W-entropy, cutoff functions and distance checks.
#pragma once

#include <functional>
#include <vector>

#include "cflow/sampler.hpp"

namespace cflow {

// u = (4 pi tau)^{-n/2} e^{-f}, tau = t_bar - t. The kernel centre is a pole.
struct ConjHeatState {
  double x_bar = 0.0, t_bar = 0.0, t = 0.0;
  FlowState flow;  // metric and phi at time t
  std::vector<double> u, f;
  std::vector<char> masked;  // u at or below the floor; excluded from v statistics
  double mass = 0.0;
  double tau() const { return t_bar - t; }
};

// Fills f, mask and mass from u on the given geometry.
ConjHeatState conj_state_from_density(const FlowState& flow, double x_bar, double t_bar, std::vector<double> u,
                                      double u_floor = 1e-300);

struct ConjHeatOptions {
  double cfl = 0.8;
  double save_dt = 0.0;  // 0: fifty saves over the window
  double u_floor = 1e-300;
  double negativity_tol = 1e-10;  // relative to max u
};

// Starts from a normalized Gaussian exp(-d^2 / (4 sigma0^2)) at t_bar - sigma0^2 and
// integrates backward in t to t_stop with RK4. Returns the saved states, latest time first.
std::vector<ConjHeatState> solve_backward(const HistorySampler& sampler, double x_bar, double t_bar, double t_stop,
                                          double sigma0, const ConjHeatOptions& opts = {});

struct VField {
  std::vector<double> v;
  int masked = 0;
  double max_v = 0.0;  // over unmasked nodes
  double max_u = 0.0;
  double int_v = 0.0;
};
// v = (tau (2 Lap f - |grad f|^2 + S) + f - n) u.
VField v_field(const ConjHeatState& state);

// W = int (tau (|grad f|^2 + S) + f - n) u dV.
double w_functional(const ConjHeatState& state);

struct BoxStarResidual {
  std::vector<double> box;       // -v_t - Lap v + S v at the middle state
  std::vector<double> rhs;       // -2 tau (|Sic + Hess f - g / (2 tau)|^2 + (Lap phi - <grad phi, grad f>)^2) u
  std::vector<double> residual;  // box - rhs; zero on masked nodes and the two nodes at each pole
  double max_abs_residual = 0.0;
  double max_box = 0.0;  // sign check: should not exceed tolerance
};
// Three states ordered by decreasing t (as returned by solve_backward) on one grid.
BoxStarResidual box_star_v_residual(const ConjHeatState& later, const ConjHeatState& mid, const ConjHeatState& earlier);

// Piecewise cutoff profile: 1 on (-inf, 1], (1 - Q(y - 1))^2 on [1, 2], 0 beyond, with
// Q(y) = y^3 (3.7 - 3.9 y + 1.2 y^2). Satisfies (phi')^2 <= 10 phi and -phi'' <= 10 phi.
struct CutoffProfile {
  static double value(double y);
  static double d1(double y);
  static double d2(double y);
};

struct ProfileMargins {
  double gradient = 0.0;   // min (10 phi - phi'^2)
  double curvature = 0.0;  // min (10 phi + phi'')
  int samples = 0;
};
ProfileMargins verify_profile(int samples = 10000);

// h(x, t) = profile(d~ / (10 A eps)), d~ = d(x, t) + 200 n sqrt(t - t_origin), d measured
// from the pole `center`.
struct CutoffFunction {
  double A = 1.0, eps = 1.0;
  double center = 0.0;
  double t_origin = 0.0;
  double scale() const { return 10.0 * A * eps; }
  std::vector<double> h(const FlowState& state) const;
  std::vector<double> shifted_distance(const FlowState& state) const;
};
CutoffFunction build_cutoff(double A, double eps, const FlowHistory& history, double center = 0.0);

struct CutoffHeatCheck {
  // Margin of (d/dt - Lap) h <= -(10 A eps)^{-2} phi''(d~ / (10 A eps)) at nodes with
  // 9 A eps <= d~ <= 21 A eps.
  double worst_margin = 0.0;
  int nodes_checked = 0;
};
CutoffHeatCheck cutoff_heat_check(const CutoffFunction& cutoff, const FlowHistory& history);

struct LocalizedSeries {
  std::vector<double> t, integral;  // int h v dV
  std::vector<double> log_derivative;  // d/dt log int h (-v) dV between consecutive states
  double bound = 0.0;                  // 1 / (10 (A eps)^2)
  double worst_margin = 0.0;           // min (bound - log_derivative)
};
LocalizedSeries localized_integral(const CutoffFunction& cutoff, const std::vector<ConjHeatState>& states);

struct DistanceMargins {
  double one_ball = 0.0;  // min over samples of d_t - Lap d + (n-1)(2/3 K r0 + 1/r0)
  double two_ball = 0.0;  // min of d_t(x0, x1) + 2(n-1)(2/3 K r0 + 1/r0), x1 the opposite pole
  int samples = 0;
};
// Distance to the fiber orbit through x0; its Laplacian is +-m w_s / w. K = sup Ric / (n-1)
// over the r0-ball(s). Two-ball margins need an interval grid.
DistanceMargins distance_evolution_check(const FlowHistory& history, double x0, double r0);

}  // namespace cflow
