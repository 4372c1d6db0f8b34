// Coupled flow dg/dt = -2 Sic, phi_t = Laplacian(phi) on warped products.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cflow/geometry.hpp"

namespace cflow {

struct FlowState {
  WarpedMetric metric;
  std::vector<double> phi;
  double t = 0.0;
  int epoch = 0;  // bumped by every regrid; node indices are only comparable within an epoch
};

struct Diagnostics {
  double t = 0.0;
  double sup_rm = 0.0;
  double sup_gradphi2 = 0.0;
  double min_phi = 0.0, max_phi = 0.0;
  double min_s = 0.0, max_s = 0.0;
  double grid_quality = 1.0;  // max a / min a
};

Diagnostics diagnose(const FlowState& state, const CurvatureState& curv);
Diagnostics diagnose(const FlowState& state);

// Time derivatives of (a^2, w^2, phi).
struct FlowRates {
  std::vector<double> a2, w2, phi;
};

FlowRates rhs(const FlowState& state);
FlowRates rhs(const FlowState& state, const CurvatureState& curv);

enum class StopReason { t_max, curvature, min_warp, dt_underflow, numeric, max_steps };
std::string to_string(StopReason r);

struct FlowConfig {
  double cfl = 0.5;
  double t_max = 1.0;
  // Stop once sup|Rm| >= rm_ratio * max(initial sup|Rm|, 1/diameter^2).
  double rm_ratio = 1e6;
  // Stop once the smallest interior warp falls below this fraction of its initial value.
  double min_warp_ratio = 1e-4;
  double dt_min = 1e-14;
  long max_steps = 50'000'000;

  // Save cadence; a state is saved when any enabled trigger fires.
  int save_every_steps = 0;
  double save_dt = 0.0;
  double save_rm_factor = 1.05;  // 0 disables

  // Regrid to uniform arclength when max a / min a exceeds this (0 disables).
  double regrid_threshold = 0.0;

  void validate() const;
};

struct FlowHistory {
  std::vector<FlowState> states;
  std::vector<Diagnostics> saved;  // diagnostics of each saved state
  std::vector<Diagnostics> steps;  // one row per accepted step (and the final state)
  double t_origin = 0.0;           // flow start time; elapsed time is t - t_origin
  double phi0_min = 0.0, phi0_max = 0.0, phi0_sup = 0.0;
  double rm_initial = 0.0;
  StopReason stop = StopReason::t_max;
  long step_count = 0;
  int regrids = 0;
  std::optional<double> t_est;
  std::optional<double> type_one_constant;
};

FlowHistory run(const FlowState& initial, const FlowConfig& config);

// Largest stable step for the current state under `cfl`.
double stable_dt(const FlowState& state, const CurvatureState& curv, double cfl);

struct BlowupEstimate {
  double t_est = 0.0;
  std::vector<int> singular_nodes;  // indices in the final grid epoch
  double fit_window_start = 0.0;
};

// Fits 1/sup|Rm| ~ (T - t) over the last decade of growth. None for runs that
// stopped without a curvature, warp or step-size singularity.
std::optional<BlowupEstimate> detect_blowup(const FlowHistory& history,
                                            double threshold_fraction = 1e-2);
// sup over recorded t of (T - t) sup|Rm|.
std::optional<double> type_one_diagnostic(const FlowHistory& history);
// Fills t_est and type_one_constant when the run is singular.
void attach_blowup(FlowHistory& history);

// g -> lambda g(T + t/lambda); phi unchanged. Needs t_est.
FlowHistory parabolic_rescale(const FlowHistory& history, double lambda);

struct PhiMargins {
  double upper = 0.0;     // min_t (sup phi_0 - max phi(t))
  double lower = 0.0;     // min_t (min phi(t) - inf phi_0)
  double gradient = 0.0;  // min_{t > 0} (C^2 / t - sup|grad phi|^2), C = sup|phi_0|
  double t_worst_gradient = 0.0;
};

PhiMargins phi_monitors(const FlowHistory& history);

struct DerivativeMonitor {
  std::vector<double> t, ratio;
  double sup_ratio = 0.0;
};

// |nabla^order Phi|^2 / (r^-2 + t^-1)^(order + 2), Phi = (Rm, Hess phi), over saved states.
DerivativeMonitor derivative_estimate_monitor(const FlowHistory& history, int order);

// Re-parametrize to uniform arclength with monotone cubic interpolation.
FlowState regrid(const FlowState& state);

}  // namespace cflow
