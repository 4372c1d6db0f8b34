// Space-time lookup of flow fields between saved states.
#pragma once

#include <vector>

#include "cflow/flow.hpp"

namespace cflow {

// Fields at one space-time point. A = a^2 and B = w^2 are the metric coefficients.
struct SpaceTimeSample {
  double A = 0, A_x = 0;
  double B = 0, B_x = 0;
  double S = 0, S_x = 0, S_t = 0;
  double sic_rad = 0, sic_fib = 0;
};

// Cubic Hermite in x (fourth-order nodal slopes) and in t (three-point time slopes), so
// fields and their time derivatives are continuous. All states must share one grid
// epoch; interpolating across a regrid is refused.
class HistorySampler {
 public:
  explicit HistorySampler(const FlowHistory& history);
  explicit HistorySampler(std::vector<FlowState> states);

  SpaceTimeSample operator()(double x, double t) const;
  // Metric and phi at time t by linear interpolation of (a^2, w^2, phi) at the nodes.
  FlowState state_at(double t) const;

  double t_first() const { return layers_.front().t; }
  double t_last() const { return layers_.back().t; }
  const Grid& grid() const { return states_.front().metric.grid; }
  const std::vector<FlowState>& states() const { return states_; }
  // True when x lies on the coordinate domain (always true for periodic grids).
  bool inside(double x) const;

 private:
  struct Fields {
    std::vector<double> A, A_x, B, B_x, S, S_x, sic_rad, sic_fib;
  };
  struct Layer {
    double t = 0.0;
    Fields value, rate;  // rate: time derivative at the layer
  };
  struct Values {
    double A, A_x, B, B_x, S, S_x, sic_rad, sic_fib;
  };
  Values eval(const Fields& fields, double x) const;
  std::size_t bracket(double t) const;

  std::vector<FlowState> states_;
  std::vector<Layer> layers_;
};

}  // namespace cflow
