// Euclidean logarithmic Sobolev functionals of radial profiles, and decreasing
// rearrangement of fields on warped products onto radial functions on R^n.
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cflow/geometry.hpp"

namespace cflow {

// F sampled on a uniform radius grid [0, r_max]; U = (2 pi)^{-n/2} e^{-F}.
struct RadialProfile {
  int dim = 2;
  std::vector<double> r, F, dF;
  void validate() const;
};

// Samples F and F' (both callables of r) at samples + 1 points.
RadialProfile sample_profile(int dim, double r_max, int samples, const std::function<double(double)>& F,
                             const std::function<double(double)>& dF);
// F' by fourth-order differences when only values are known.
RadialProfile profile_from_values(int dim, std::vector<double> r, std::vector<double> F);

// |x|^2 / (2 sigma^2) + n log sigma: normalized Gaussian of width sigma.
RadialProfile gaussian_profile(int dim, double sigma, int samples = 4000);
// |x|^2 / 2 + eps sin |x|.
RadialProfile perturbed_gaussian_profile(int dim, double eps, int samples = 4000);
// "gaussian:<sigma>" or "perturbed:<eps>".
RadialProfile named_profile(const std::string& spec, int dim, int samples = 4000);

// int_{R^n} g(r) dx by composite Simpson in r; throws DomainError when the halved grid
// disagrees beyond tolerance or the integrand is not negligible at r_max.
double radial_integral(const RadialProfile& p, std::span<const double> g);

struct LogSobolevBasic {
  double lhs = 0.0;                // int (-1/2 |grad F|^2 - F + n) U dx, after normalization
  double normalization = 1.0;      // mass of U before renormalizing
};
LogSobolevBasic log_sobolev_basic(const RadialProfile& p);

struct LogSobolevOptimized {
  double lhs = 0.0;  // int |grad F|^2 U dx
  double rhs = 0.0;  // n exp(1 - (2/n) int F U dx)
  double normalization = 1.0;
  double c_closed = 0.0;  // sqrt(n / int |grad F|^2 U)
  double margin() const { return lhs - rhs; }
};
LogSobolevOptimized log_sobolev_optimized(const RadialProfile& p);

// The basic functional of the rescaled profile x -> F(c x) - n log c, evaluated by
// quadrature on a grid of c spanning [0.1, 5] r_rms / sqrt(n).
struct ScaleScan {
  std::vector<double> c, value;
  double c_closed = 0.0, c_argmax = 0.0, step = 0.0;
};
ScaleScan scale_scan(const RadialProfile& p, int points = 401);

struct RearrangementResult {
  WarpedMetric metric;
  std::vector<double> phi;
  int dim = 2;
  // Distribution table at levels s_k = max(phi) ((1 - cos(pi u_k)) / 2)^2, u_k = k / (levels - 1),
  // clustered at both ends of the range:
  // vol_m = Vol_g{phi >= s}, radius = radius of the Euclidean ball of that volume.
  std::vector<double> level, vol_m, radius;
  int plateaus = 0;  // levels where the distribution function jumps
  double vol_rn(int k) const;
  // phi* at Euclidean radius r (left-continuous inverse of the table).
  double value_at(double r) const;
  double max_phi() const { return level.back(); }
};
// phi >= 0 required. Superlevel volumes come from the cubic Hermite interpolant of phi.
RearrangementResult symmetrize(const WarpedMetric& metric, std::span<const double> phi, int levels = 1000);

struct RearrangementIntegrals {
  double l1_m = 0.0, l1_rn = 0.0;
  double l2_m = 0.0, l2_rn = 0.0;           // int phi^2
  double entropy_m = 0.0, entropy_rn = 0.0;  // int phi^2 log phi
};
// Manifold side by Gauss quadrature on the Hermite interpolant; Euclidean side by the
// layer-cake formula over the table.
RearrangementIntegrals rearrangement_integrals(const RearrangementResult& r);

struct EnergyComparison {
  double energy_m = 0.0;   // int |grad phi|^2 dV_g
  double energy_rn = 0.0;  // int |grad phi*|^2 dx
  double delta = 0.0;
  double margin = 0.0;     // energy_m - (1 - delta)^{2/n} energy_rn
};
// delta measured on the ball B(center, radius); phi must vanish outside it.
EnergyComparison energy_comparison(const RearrangementResult& r, double delta, int center, double radius);

}  // namespace cflow
