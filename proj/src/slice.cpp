#include "cflow/slice.hpp"

#include <algorithm>
#include <cmath>

namespace cflow {

std::size_t nearest_state(const FlowHistory& history, double t) {
  if (history.states.empty()) throw DomainError("history holds no states");
  std::size_t best = 0;
  for (std::size_t k = 1; k < history.states.size(); ++k)
    if (std::abs(history.states[k].t - t) < std::abs(history.states[best].t - t)) best = k;
  return best;
}

int epoch_at(const FlowHistory& history, double t) {
  if (history.states.empty()) throw DomainError("history holds no states");
  int epoch = history.states.front().epoch;
  for (const auto& s : history.states)
    if (s.t <= t) epoch = s.epoch;
  return epoch;
}

FlowHistory epoch_slice(const FlowHistory& history, int epoch) {
  FlowHistory out = history;
  out.states.clear();
  out.saved.clear();
  for (std::size_t k = 0; k < history.states.size(); ++k) {
    if (history.states[k].epoch != epoch) continue;
    out.states.push_back(history.states[k]);
    if (k < history.saved.size()) out.saved.push_back(history.saved[k]);
  }
  if (out.states.empty()) throw DomainError("no saved states in the requested grid epoch");
  return out;
}

FlowHistory up_to(const FlowHistory& history, double elapsed) {
  FlowHistory out = history;
  out.states.clear();
  out.saved.clear();
  for (std::size_t k = 0; k < history.states.size(); ++k) {
    if (history.states[k].t - history.t_origin > elapsed) break;
    out.states.push_back(history.states[k]);
    if (k < history.saved.size()) out.saved.push_back(history.saved[k]);
  }
  return out;
}

std::vector<double> named_field(const FlowState& state, const std::string& name) {
  if (name == "phi") return state.phi;
  if (name == "phi_shifted") {
    auto f = state.phi;
    const double lo = *std::min_element(f.begin(), f.end());
    for (double& v : f) v -= lo;
    return f;
  }
  const auto curv = curvature(state.metric, state.phi);
  if (name == "rm") return curv.rm_node;
  if (name == "S_shifted") {
    auto f = curv.s;
    const double lo = *std::min_element(f.begin(), f.end());
    for (double& v : f) v -= lo;
    return f;
  }
  throw DomainError("unknown field '" + name + "' (phi, phi_shifted, rm, S_shifted)");
}

std::vector<std::string> field_names() { return {"phi", "phi_shifted", "rm", "S_shifted"}; }

}  // namespace cflow
