// Property checks over flow histories: evolution residuals, non-collapsing ratios, point
// selection, the pseudo-locality experiment, soliton identities and blow-up sequences.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cflow/flow.hpp"
#include "cflow/lgeodesic.hpp"

namespace cflow {

enum class CheckStatus { pass, fail, monitor };
std::string to_string(CheckStatus s);

struct Resolution {
  int nodes = 0;
  double value = 0.0;
};

struct VerificationReport {
  std::string id;
  std::string anchor;  // the property being checked, in words
  CheckStatus status = CheckStatus::monitor;
  double margin = 0.0;  // dimensionless; negative means violated
  std::vector<Resolution> resolutions;
  std::string notes;
  std::optional<int> node;  // offending location of a failure
  std::optional<double> t;
  std::string manifest_hash;
};

// ---- S evolution ---------------------------------------------------------------------

struct SEvolutionResidual {
  double max_residual = 0.0;  // max |S_t - (Lap S + 2|Sic|^2 + 2 (Lap phi)^2)|
  double scale = 0.0;         // max |S_t|
  int node = -1;
  double t = 0.0;
  int states_used = 0;
};
// S_t by five-point differences over saved states of one epoch. States with elapsed time
// above t_window (when positive) are ignored.
SEvolutionResidual s_evolution_residual(const FlowHistory& history, double t_window = 0.0);
// Round-sphere form: Lap S + 2|Sic|^2 against the closed-form rate (2/n) S^2, relative.
double sphere_identity_residual(const FlowHistory& history);
VerificationReport s_evolution_check(const FlowHistory& coarse, const FlowHistory& fine, double t_window = 0.0);

// ---- non-collapsing -------------------------------------------------------------------

struct KappaResult {
  double kappa = 0.0;  // min vol(B) / r^n over qualifying triples
  int qualifying = 0, skipped = 0;
  double x_at_min = 0.0, t_at_min = 0.0, r_at_min = 0.0;
  std::vector<double> t, kappa_at_t;  // per-state minima
};
// Volume of the geodesic ball of radius r about the orbit point (x0, fiber angle 0). Pole
// centres use caps; other centres integrate the fiber extent cut out by the geodesic circle.
// nullopt when the circle reaches a pole or wraps the fiber.
std::optional<double> geodesic_ball_volume(const WarpedMetric& metric, double x0, double r, int angles = 180);
KappaResult kappa_check(const FlowHistory& history, std::span<const double> radii, int state_stride = 1,
                        int node_stride = 8);

// ---- point selection ------------------------------------------------------------------

// |Rm| and distances on the saved-state x node lattice.
struct CurvatureLattice {
  std::vector<double> t;                     // elapsed time since the flow start
  std::vector<std::vector<double>> rm;       // [state][node]
  std::vector<std::vector<double>> arclen;   // [state][node]
  std::vector<double> total;                 // total base length per state
  std::vector<int> base;                     // node of p per state
  bool periodic = false;
  double distance(int k, int i, int j) const;
};
CurvatureLattice curvature_lattice(const FlowHistory& history, double p_x);

struct Selection {
  int state = 0, node = 0;
  double t = 0.0, Q = 0.0, d = 0.0;
  int iterations = 0;
};
// M = {|Rm| > alpha / t, t <= eps^2, d_t(x, p) <= eps}. Iterates toward a point whose
// curvature dominates (factor 4) every point of M that is no later and not much farther.
std::optional<Selection> point_select(const CurvatureLattice& lat, double alpha, double eps, double A);
struct SelectionCheck {
  bool domination = false;    // |Rm| <= 4Q on the selection's comparison set
  bool neighborhood = false;  // |Rm| <= 4Q on B_tbar(xbar, A Q^{-1/2} / 10) x [tbar - alpha / (2Q), tbar]
  int points_checked = 0;
  double worst_ratio = 0.0;   // max |Rm| / Q over both sets
};
SelectionCheck verify_selection(const CurvatureLattice& lat, const Selection& sel, double alpha, double eps,
                                double A);

// ---- pseudo-locality ------------------------------------------------------------------

struct PseudolocalityOptions {
  double alpha = 0.0;   // 0: 1 / (200 n)
  double eps = 0.5;
  double r0 = 1.0;
  double p_x = 0.0;
  double delta_max = 0.1;  // largest isoperimetric deficit accepted as near-Euclidean
  double phi_bound = 1.0;  // C in sup |phi_0| <= C
  int eps_levels = 10;
};
struct PseudolocalityResult {
  double s_margin = 0.0;  // min_{B(p, r0)} S(g(0)) + r0^{-2}
  double delta = 0.0;
  double phi_sup = 0.0;
  bool hypotheses = false;
  double eps_ok = 0.0;  // largest tested eps' <= eps with the conclusion holding
  double conclusion_margin = 0.0;  // min (bound - |Rm|) / bound over the eps region
  int points_checked = 0;
  double global_growth = 0.0;  // max sup|Rm| / initial sup|Rm|
};
PseudolocalityResult pseudolocality_experiment(const FlowHistory& history, const PseudolocalityOptions& opts);

// ---- solitons -------------------------------------------------------------------------

struct SolitonCandidate {
  WarpedMetric metric;
  std::vector<double> phi, f;
  double tau = 1.0;  // T - t
  double region = 0.0;  // when > 0, only nodes within this distance of `center` count
  int center = 0;
};
struct SolitonResiduals {
  double radial = 0.0, fiber = 0.0;  // |Sic + Hess f - g / (2 tau)| components
  double drift = 0.0;                // |Lap phi - <grad f, grad phi>|
  double dispersion = 0.0;           // max - min of tau (S + |grad f|^2) - f
  double trace_identity = 0.0;       // |Lap S - <grad f, grad S> - S / tau + 2|Sic|^2 + 2 (Lap phi)^2|
  double min_S = 0.0;
  double sup_grad_sqrt_f = 0.0;      // sup sqrt(tau) |grad sqrt f|, f > 0 only
  int masked = 0;                    // nodes with f <= 0
  double max_equation() const;       // max of radial, fiber, drift
};
// Fourth-order differences throughout, so exact shrinkers are reproduced to ~h^4.
SolitonResiduals soliton_residuals(const SolitonCandidate& c);

// ---- blow-up --------------------------------------------------------------------------

struct BlowupOptions {
  std::vector<double> lambdas{4, 16, 64};
  // The reduced distance is based at T_i = T_est - base_gap / lambda^2, i.e. at rescaled
  // time -base_gap / lambda, so the base approaches the singular time along the sequence.
  double base_gap = 0.01;
  double nontrivial_threshold = 0.4;
  // Residuals are taken within this fraction of the base length from the base pole, away
  // from the cut locus of the reduced distance.
  double region_fraction = 0.5;
  ReducedDistanceOptions ell;
};
struct BlowupLevel {
  double lambda = 0.0;
  double soliton_residual = 0.0;  // max soliton-equation component times 2 tau
  double gradient_margin = 0.0;   // min over rows of 1 - sup|grad phi|^2 t / C^2
  double rescaled_rm = 0.0;       // |Rm| at the singular node at t' = -1
  int unresolved = 0;
};
struct BlowupResult {
  bool type_one = false;
  double t_est = 0.0;
  int singular_node = -1;
  std::vector<BlowupLevel> levels;
};
BlowupResult blowup_analysis(const FlowHistory& history, const BlowupOptions& opts = {});

// ---- reduced volume near the singular time -------------------------------------------

struct ReducedVolumeTable {
  std::vector<double> base_times, t;
  std::vector<std::vector<double>> v;  // [base][t]; NaN when t >= base
  std::vector<std::vector<int>> unresolved;
  double max_v = 0.0;
  double monotonicity_margin = 0.0;  // min over bases of V(t_{k+1}) - V(t_k)
  double spread = 0.0;               // max over t of the spread across bases
};
ReducedVolumeTable reduced_volume_limit(const FlowHistory& history, double base_x, std::span<const double> base_times,
                                        std::span<const double> t, const ReducedDistanceOptions& opts = {});

}  // namespace cflow
