// L-length, L-geodesic shooting, reduced distance and reduced volume on a flow history.
//
// Paths are parametrized by s = sqrt(tau), tau = t0 - t. In that variable the
// L-length is int (1/2 |gamma'|^2 + 2 s^2 S) ds and the geodesic equation is regular at s = 0.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cflow/sampler.hpp"

namespace cflow {

// Base point on the orbit space (fiber angle 0) and base time.
struct LBase {
  double x = 0.0;
  double t0 = 0.0;
};

enum class SolveStatus { resolved, unresolved, partial };
std::string to_string(SolveStatus s);

struct ShootOptions {
  int steps = 128;  // RK4 steps in s
  bool record_path = true;  // false keeps only the first and last samples
};

struct LGeodesic {
  LBase base;
  double v_rad = 0.0, v_fib = 0.0;  // initial vector, orthonormal components at the base
  double momentum = 0.0;            // conserved fiber momentum B psi'
  // Samples at s_j = sqrt(tau_j); tau[0] = 0.
  std::vector<double> tau, x, psi;
  std::vector<double> x_s;                 // dx/ds
  std::vector<double> S, grad_S, sic_XX;  // along-path S, radial grad S, Sic(X, X) in the tau parametrization
  double L = 0.0;
  double K = 0.0;  // int_0^tau tau^{3/2} H(X) dtau
  bool partial = false;  // left the coordinate domain before tau_bar
  double tau_bar() const { return tau.back(); }
  double x_end() const { return x.back(); }
  double psi_end() const { return psi.back(); }
  double ell() const;
  // Radial component of X(tau_bar) = dgamma/dtau in the orthonormal frame.
  double X_rad_end(const HistorySampler& sampler) const;
};

LGeodesic shoot(const HistorySampler& sampler, LBase base, double v_rad, double tau_bar,
                const ShootOptions& opts = {}, double v_fib = 0.0);

// Midpoint quadrature of the s-form integrand along a sampled path (x_j, psi_j) at s_j.
// Second order. psi may be empty for radial paths.
double l_length(const HistorySampler& sampler, LBase base, std::span<const double> s,
                std::span<const double> x, std::span<const double> psi = {});

struct ReducedDistanceOptions {
  ShootOptions shoot;
  int fan = 128;            // shots per sign of v in the bracketing fan
  double v_max_scale = 10;  // v_max = v_max_scale / sqrt(tau_bar)
  bool oracle = false;
  int oracle_points = 40;   // coarse level; the fine level doubles it
};

struct ReducedDistanceSample {
  double q_x = 0.0, q_psi = 0.0;
  double tau_bar = 0.0;
  double L = 0.0, ell = 0.0, K = 0.0;
  double v_rad = 0.0, v_fib = 0.0;
  double X_rad = 0.0;  // radial X(tau_bar) of the minimizer
  SolveStatus status = SolveStatus::unresolved;
  std::optional<double> ell_oracle;
  double v_norm() const;
};

// Radial reduced distance to q_x (fiber angle 0). Base must be a pole of an interval
// grid or any point of a periodic grid.
ReducedDistanceSample reduced_distance(const HistorySampler& sampler, LBase base, double q_x,
                                       double tau_bar, const ReducedDistanceOptions& opts = {});

// Reduced distance to (q_x, q_psi) on a periodic grid with a flat circle fiber (m = 1),
// by 2D Newton shooting over the nine nearest lattice images.
ReducedDistanceSample reduced_distance_2d(const HistorySampler& sampler, LBase base, double q_x,
                                          double q_psi, double tau_bar,
                                          const ReducedDistanceOptions& opts = {});

// Path-minimization reference: midpoint-discretized s-form energy over radial paths with
// `points` segments, minimized by preconditioned gradient descent.
double oracle_reduced_distance(const HistorySampler& sampler, LBase base, double q_x,
                               double tau_bar, int points);
// Two levels (points, 2 points) combined by Richardson extrapolation.
double oracle_reduced_distance_extrapolated(const HistorySampler& sampler, LBase base, double q_x,
                                            double tau_bar, int points = 40);

// ell(., tau) on the grid nodes of the sampler. For the 2D case the fiber angle is
// sampled at psi_j = j pi / psi_samples, j = 0..psi_samples (ell is even in psi).
struct EllField {
  double t0 = 0.0;
  double tau = 0.0;
  std::vector<double> x;    // node coordinates
  std::vector<double> psi;  // {0} for radial fields
  std::vector<double> ell, L, K;  // row-major [node][psi]
  std::vector<SolveStatus> status;
  int unresolved = 0;
  int nodes() const { return static_cast<int>(x.size()); }
  int psi_count() const { return static_cast<int>(psi.size()); }
  double at(int i, int j = 0) const { return ell[static_cast<size_t>(i) * psi.size() + j]; }
};
EllField ell_field(const HistorySampler& sampler, LBase base, double tau,
                   const ReducedDistanceOptions& opts = {});
EllField ell_field_2d(const HistorySampler& sampler, LBase base, double tau, int psi_samples,
                      const ReducedDistanceOptions& opts = {});

struct DerivativeResiduals {
  bool skipped = false;
  std::string reason;
  double r_tau = 0.0;    // L_tau - (2 sqrt(tau) S - L/(2 tau) + K/tau)
  double r_grad = 0.0;   // |grad L|^2 - (-4 tau S + 2 L/sqrt(tau) - 4 K/sqrt(tau))
  double r_X = 0.0;      // grad ell - X(tau)
  double scale = 1.0;    // magnitude of the compared terms, for relative reporting
};
// Finite differences of L in q and tau around a resolved sample.
DerivativeResiduals derivative_identity_check(const HistorySampler& sampler, LBase base,
                                              const ReducedDistanceSample& sample,
                                              const ReducedDistanceOptions& opts = {});

struct InequalityMargins {
  // Pointwise margins on smooth interior nodes; negative values are violations.
  std::vector<int> nodes;
  std::vector<double> ell_ineq;   // ell_tau - Lap ell + |grad ell|^2 - S + n/(2 tau)
  std::vector<double> lbar_ineq;  // 2n - (Lbar_tau + Lap Lbar), Lbar = 4 tau ell
  double min_ell = 0.0;
  double min_ell_margin = 0.0;    // n/2 - min ell
  double worst_ell_ineq = 0.0, worst_lbar_ineq = 0.0;
  int kinks = 0;                  // nodes removed by the kink filter
};
// Needs radial fields at tau - dtau, tau, tau + dtau (same base).
InequalityMargins inequality_check(const HistorySampler& sampler, LBase base,
                                   const EllField& before, const EllField& at, const EllField& after);

struct JacobianResult {
  double J = 0.0;
  double x_end = 0.0;
  bool degenerate = false;  // conjugate point: endpoint map not locally invertible
  double ell = 0.0;         // L(gamma_v) / (2 sqrt(tau)) along this geodesic
};
// Volume distortion of the L-exponential map at radial v. Normalized so the static flat
// case gives (2 s)^n, s = sqrt(tau).
JacobianResult l_jacobian(const HistorySampler& sampler, LBase base, double v, double tau,
                          const ShootOptions& opts = {});

struct ReducedVolumeSeries {
  std::vector<double> tau, vtilde, quad_err;
  std::vector<int> unresolved;
  // min over adjacent pairs of V(tau_k) - V(tau_{k+1}); negative means an increase.
  double monotonicity_margin() const;
  // Linear extrapolation from the two smallest tau.
  double limit_at_zero() const;
};
double reduced_volume(const HistorySampler& sampler, const EllField& field, double* quad_err = nullptr);
// Radial fields for pole bases; 2D fields (psi_samples > 0) for periodic m = 1.
ReducedVolumeSeries reduced_volume_series(const HistorySampler& sampler, LBase base,
                                          std::span<const double> taus, int psi_samples = 0,
                                          const ReducedDistanceOptions& opts = {});

struct LemmaEstimate {
  double c_meas = 0.0;
  double c_distance = 0.0, c_gradient = 0.0, c_time = 0.0;
  double ell_at_base_max = 0.0;  // sup over tau of |ell(p, tau)|
  int samples = 0;
};
// Smallest C for which C^-1 D - C <= ell <= C D + C, tau|grad ell| <= C (1 + D) and
// tau |d ell/dtau| <= C (1 + D) hold over the radial fields, D = d^2 / tau.
LemmaEstimate lemma_estimate_monitor(const HistorySampler& sampler, LBase base,
                                     std::span<const double> taus, const ReducedDistanceOptions& opts = {});

}  // namespace cflow
