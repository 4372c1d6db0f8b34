// Warped-product metrics g = a(x)^2 dx^2 + w(x)^2 g_F on a uniform 1D grid.
#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cflow {

enum class Topology { periodic_circle, two_pole_interval };

std::string to_string(Topology t);
Topology topology_from_string(const std::string& s);

enum class FieldRole { phi, f, u, v, other };

std::string to_string(FieldRole r);
FieldRole role_from_string(const std::string& s);

struct InvalidMetric : std::runtime_error {
  int node;
  InvalidMetric(const std::string& what, int node_index)
      : std::runtime_error(what), node(node_index) {}
};

struct NumericError : std::runtime_error {
  int node;
  NumericError(const std::string& what, int node_index)
      : std::runtime_error(what), node(node_index) {}
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Grid {
  Topology topology = Topology::periodic_circle;
  int nodes = 0;
  double spacing = 0.0;
  int fiber_dim = 1;
  int fiber_curvature = 0;  // 0: flat circle fiber (m = 1 only), 1: unit round sphere
  double x0 = 0.0;

  // Periodic grid of `nodes` points covering [x0, x0 + length).
  static Grid periodic(int nodes, double length, int fiber_dim = 1, int fiber_curvature = 0);
  // Closed interval [0, length] with poles at both ends.
  static Grid interval(int nodes, double length, int fiber_dim = 1);

  int dim() const { return fiber_dim + 1; }
  double x(int i) const { return x0 + i * spacing; }
  double coordinate_length() const;
  bool periodic() const { return topology == Topology::periodic_circle; }
  bool is_pole(int i) const { return !periodic() && (i == 0 || i == nodes - 1); }
  void validate() const;
};

struct WarpedMetric {
  Grid grid;
  std::vector<double> a;
  std::vector<double> w;

  void validate() const;
};

struct ScalarField {
  std::vector<double> values;
  FieldRole role = FieldRole::other;
};

// Per-node curvature of (g, phi). For m = 1 the fiber-fiber plane does not exist
// and k_fib is stored as 0.
struct CurvatureState {
  std::vector<double> k_rad, k_fib;
  std::vector<double> ric_rad, ric_fib, scalar;
  std::vector<double> sic_rad, sic_fib, s;
  std::vector<double> phi_s;    // radial derivative of phi in arclength
  std::vector<double> rm_node;  // max(|k_rad|, |k_fib|) per node
  double rm_norm = 0.0;         // sup over nodes
};

// Unit round sphere volume |S^m| and Euclidean unit ball volume in R^n.
double sphere_volume(int m);
double unit_ball_volume(int n);
// n^n times the unit ball volume: Area(dB)^n = c_n Vol(B)^{n-1} for Euclidean balls.
double isoperimetric_constant(int n);

// Centered first/second x-derivatives. `odd` selects the reflection parity used
// for ghost nodes at poles (w is odd, a and phi are even).
std::vector<double> d_dx(const Grid& g, std::span<const double> f, bool odd = false);
std::vector<double> d2_dx2(const Grid& g, std::span<const double> f, bool odd = false);
// Fourth-order centered first derivative, same ghost conventions.
std::vector<double> d_dx4(const Grid& g, std::span<const double> f, bool odd = false);

CurvatureState curvature(const WarpedMetric& metric, std::span<const double> phi);
ScalarField laplacian(const WarpedMetric& metric, const ScalarField& field);
std::vector<double> laplacian(const WarpedMetric& metric, std::span<const double> field);
// Diagonal entries of the discrete Laplacian matrix (all <= 0).
std::vector<double> laplacian_diagonal(const WarpedMetric& metric);

// Arclength derivative d/ds = a^{-1} d/dx.
std::vector<double> d_ds(const WarpedMetric& metric, std::span<const double> f);

// Control-volume weights of the base quadrature: int f dV = |S^m| sum_i weights[i] f[i].
std::vector<double> volume_weights(const WarpedMetric& metric);
double integrate(const WarpedMetric& metric, std::span<const double> f);
double total_volume(const WarpedMetric& metric);

// Cumulative trapezoid arclength from node 0.
std::vector<double> arclength(const WarpedMetric& metric);
double radial_distance(const WarpedMetric& metric, int x1, int x2);
// Signed-free distance from node `center` to every node.
std::vector<double> distances_from(const WarpedMetric& metric, int center);
double total_length(const WarpedMetric& metric);

struct BallGeometry {
  double volume = 0.0;
  double boundary_area = 0.0;
};

BallGeometry ball_geometry(const WarpedMetric& metric, int center, double r);

struct DeficitScan {
  double delta = 0.0;
  double r_at_min = 0.0;
  int radii_scanned = 0;
  int radii_skipped = 0;
};

DeficitScan isoperimetric_deficit(const WarpedMetric& metric, int center, double r_max,
                                  int samples = 400);

}  // namespace cflow
