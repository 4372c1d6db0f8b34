#include "cflow/sampler.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace cflow {

HistorySampler::HistorySampler(const FlowHistory& history) : HistorySampler(history.states) {}

HistorySampler::HistorySampler(std::vector<FlowState> states) : states_(std::move(states)) {
  if (states_.empty()) throw DomainError("sampler needs at least one state");
  const int epoch = states_.front().epoch;
  for (size_t k = 0; k < states_.size(); ++k) {
    if (states_[k].epoch != epoch)
      throw DomainError(fmt::format("state {} lies in another grid epoch; cannot interpolate across a regrid", k));
    if (k > 0 && !(states_[k].t > states_[k - 1].t))
      throw DomainError("sampler states must have increasing times");
  }
  const Grid& g = grid();
  for (const auto& s : states_) {
    Layer layer;
    layer.t = s.t;
    Fields& v = layer.value;
    const auto c = curvature(s.metric, s.phi);
    const int n = g.nodes;
    v.A.resize(n);
    v.B.resize(n);
    for (int i = 0; i < n; ++i) {
      v.A[i] = s.metric.a[i] * s.metric.a[i];
      v.B[i] = s.metric.w[i] * s.metric.w[i];
    }
    v.A_x = d_dx4(g, v.A, false);
    v.B_x = d_dx4(g, v.B, false);
    v.S = c.s;
    v.S_x = d_dx4(g, v.S, false);
    v.sic_rad = c.sic_rad;
    v.sic_fib = c.sic_fib;
    layers_.push_back(std::move(layer));
  }
  // A single state is treated as a static history.
  if (layers_.size() == 1) {
    layers_.push_back(layers_.front());
    layers_.back().t = layers_.front().t + 1.0;
    states_.push_back(states_.front());
    states_.back().t = layers_.back().t;
  }
  // Three-point time slopes on the nonuniform save times; one-sided at the ends.
  const size_t K = layers_.size();
  auto slopes = [&](std::vector<double> Fields::*member) {
    for (size_t k = 0; k < K; ++k) {
      const auto& f = layers_[k].value.*member;
      auto& out = layers_[k].rate.*member;
      out.assign(f.size(), 0.0);
      if (k == 0 || k + 1 == K) {
        const size_t k0 = k == 0 ? 0 : k - 1;
        const auto& lo = layers_[k0].value.*member;
        const auto& hi = layers_[k0 + 1].value.*member;
        const double dt = layers_[k0 + 1].t - layers_[k0].t;
        for (size_t i = 0; i < f.size(); ++i) out[i] = (hi[i] - lo[i]) / dt;
        continue;
      }
      const auto& lo = layers_[k - 1].value.*member;
      const auto& hi = layers_[k + 1].value.*member;
      const double h0 = layers_[k].t - layers_[k - 1].t, h1 = layers_[k + 1].t - layers_[k].t;
      for (size_t i = 0; i < f.size(); ++i)
        out[i] = (h0 * h0 * (hi[i] - f[i]) + h1 * h1 * (f[i] - lo[i])) / (h0 * h1 * (h0 + h1));
    }
  };
  for (auto member : {&Fields::A, &Fields::A_x, &Fields::B, &Fields::B_x, &Fields::S, &Fields::S_x,
                      &Fields::sic_rad, &Fields::sic_fib})
    slopes(member);
}

bool HistorySampler::inside(double x) const {
  const Grid& g = grid();
  if (g.periodic()) return true;
  const double len = g.coordinate_length();
  return x >= -1e-12 * len && x <= len * (1.0 + 1e-12);
}

HistorySampler::Values HistorySampler::eval(const Fields& layer, double x) const {
  const Grid& g = grid();
  const int n = g.nodes;
  const double h = g.spacing;
  double sign = 1.0;  // parity flip for x-derivatives under reflection
  double y = x - g.x0;
  if (g.periodic()) {
    const double len = g.coordinate_length();
    y = std::fmod(y, len);
    if (y < 0) y += len;
  } else {
    const double len = g.coordinate_length();
    if (y < 0) {
      y = -y;
      sign = -1.0;
    }
    if (y > len) {
      y = 2 * len - y;
      sign = -sign;
    }
    y = std::clamp(y, 0.0, len);
  }
  int k = static_cast<int>(std::floor(y / h));
  if (g.periodic()) k = std::clamp(k, 0, n - 1);
  else k = std::clamp(k, 0, n - 2);
  const int k1 = (k + 1) % n;
  const double u = y / h - k;
  const double h00 = (1 + 2 * u) * (1 - u) * (1 - u), h10 = u * (1 - u) * (1 - u);
  const double h01 = u * u * (3 - 2 * u), h11 = -u * u * (1 - u);
  const double d00 = 6 * u * (u - 1) / h, d10 = (1 - u) * (1 - 3 * u);
  const double d01 = -d00, d11 = u * (3 * u - 2);
  auto herm = [&](const std::vector<double>& f, const std::vector<double>& df, double& val, double& der) {
    val = h00 * f[k] + h10 * h * df[k] + h01 * f[k1] + h11 * h * df[k1];
    der = sign * (d00 * f[k] + d10 * df[k] + d01 * f[k1] + d11 * df[k1]);
  };
  Values v{};
  herm(layer.A, layer.A_x, v.A, v.A_x);
  herm(layer.B, layer.B_x, v.B, v.B_x);
  herm(layer.S, layer.S_x, v.S, v.S_x);
  v.sic_rad = (1 - u) * layer.sic_rad[k] + u * layer.sic_rad[k1];
  v.sic_fib = (1 - u) * layer.sic_fib[k] + u * layer.sic_fib[k1];
  return v;
}

std::size_t HistorySampler::bracket(double t) const {
  const double span = t_last() - t_first();
  const double slack = 1e-9 * std::max(1.0, span);
  if (t < t_first() - slack || t > t_last() + slack)
    throw DomainError(fmt::format("time {} outside the saved history [{}, {}]", t, t_first(), t_last()));
  auto it = std::upper_bound(layers_.begin(), layers_.end(), t,
                             [](double value, const Layer& l) { return value < l.t; });
  std::size_t k = static_cast<std::size_t>(it - layers_.begin());
  k = std::clamp<std::size_t>(k, 1, layers_.size() - 1);
  return k - 1;
}

SpaceTimeSample HistorySampler::operator()(double x, double t) const {
  const std::size_t k = bracket(t);
  const Layer& l0 = layers_[k];
  const Layer& l1 = layers_[k + 1];
  const double dt = l1.t - l0.t;
  const double f = std::clamp((t - l0.t) / dt, 0.0, 1.0);
  const Values v0 = eval(l0.value, x), v1 = eval(l1.value, x);
  const Values r0 = eval(l0.rate, x), r1 = eval(l1.rate, x);
  const double h00 = (1 + 2 * f) * (1 - f) * (1 - f), h10 = f * (1 - f) * (1 - f);
  const double h01 = f * f * (3 - 2 * f), h11 = -f * f * (1 - f);
  auto mix = [&](double a, double b, double ra, double rb) { return h00 * a + h10 * dt * ra + h01 * b + h11 * dt * rb; };
  SpaceTimeSample s;
  s.A = mix(v0.A, v1.A, r0.A, r1.A);
  s.A_x = mix(v0.A_x, v1.A_x, r0.A_x, r1.A_x);
  s.B = mix(v0.B, v1.B, r0.B, r1.B);
  s.B_x = mix(v0.B_x, v1.B_x, r0.B_x, r1.B_x);
  s.S = mix(v0.S, v1.S, r0.S, r1.S);
  s.S_x = mix(v0.S_x, v1.S_x, r0.S_x, r1.S_x);
  s.S_t = 6 * f * (f - 1) * (v0.S - v1.S) / dt + (1 - f) * (1 - 3 * f) * r0.S + f * (3 * f - 2) * r1.S;
  s.sic_rad = mix(v0.sic_rad, v1.sic_rad, r0.sic_rad, r1.sic_rad);
  s.sic_fib = mix(v0.sic_fib, v1.sic_fib, r0.sic_fib, r1.sic_fib);
  return s;
}

FlowState HistorySampler::state_at(double t) const {
  const std::size_t k = bracket(t);
  const FlowState& s0 = states_[k];
  const FlowState& s1 = states_[k + 1];
  const double f = std::clamp((t - s0.t) / (s1.t - s0.t), 0.0, 1.0);
  FlowState out = s0;
  out.t = t;
  const int n = grid().nodes;
  for (int i = 0; i < n; ++i) {
    const double a2 = (1 - f) * s0.metric.a[i] * s0.metric.a[i] + f * s1.metric.a[i] * s1.metric.a[i];
    const double w2 = (1 - f) * s0.metric.w[i] * s0.metric.w[i] + f * s1.metric.w[i] * s1.metric.w[i];
    out.metric.a[i] = std::sqrt(a2);
    out.metric.w[i] = std::sqrt(w2);
    out.phi[i] = (1 - f) * s0.phi[i] + f * s1.phi[i];
  }
  return out;
}

}  // namespace cflow
