// Picking states and fields out of a saved history.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cflow/flow.hpp"

namespace cflow {

// Index of the saved state closest to t (the earlier one on ties).
std::size_t nearest_state(const FlowHistory& history, double t);
// Grid epoch in force at time t.
int epoch_at(const FlowHistory& history, double t);
// The states of one epoch with the run metadata, so samplers can interpolate in time.
FlowHistory epoch_slice(const FlowHistory& history, int epoch);
// Saved states with elapsed time (t - t_origin) at most `elapsed`.
FlowHistory up_to(const FlowHistory& history, double elapsed);

// Per-node fields by name: "phi", "phi_shifted" (phi - min phi), "rm" (|Rm|),
// "S_shifted" (S - min S).
std::vector<double> named_field(const FlowState& state, const std::string& name);
std::vector<std::string> field_names();

}  // namespace cflow
