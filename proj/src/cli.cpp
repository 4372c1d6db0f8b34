#include "cflow/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>

#include "cflow/conjheat.hpp"
#include "cflow/functional.hpp"
#include "cflow/lgeodesic.hpp"
#include "cflow/parallel.hpp"
#include "cflow/report.hpp"
#include "cflow/slice.hpp"
#include "cflow/snapshot.hpp"

namespace cflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad command-line values and unusable input directories; reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
json optional_json(const std::optional<double>& v) { return v ? finite_or_null(*v) : json(nullptr); }

VerificationReport make_report(std::string id, std::string anchor, CheckStatus status, double margin,
                               std::vector<Resolution> resolutions, std::string notes) {
  VerificationReport r;
  r.id = std::move(id);
  r.anchor = std::move(anchor);
  r.status = status;
  r.margin = margin;
  r.resolutions = std::move(resolutions);
  r.notes = std::move(notes);
  return r;
}

CheckStatus at_least(double margin) { return margin >= 0.0 ? CheckStatus::pass : CheckStatus::fail; }

int nodes_of(const FlowHistory& h) { return h.states.front().metric.grid.nodes; }

// ---- run directories -----------------------------------------------------------------

struct LoadedRun {
  fs::path dir;
  RunConfig config;
  FlowHistory history;
  std::string manifest_hash;
};

LoadedRun load_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError(fmt::format("run directory '{}' does not exist", dir.string()));
  if (!fs::exists(dir / "manifest.json"))
    throw UsageError(fmt::format("'{}' has no manifest.json (incomplete or not a run directory)", dir.string()));
  const auto bad = manifest_mismatches(dir);
  if (!bad.empty()) throw UsageError(fmt::format("'{}': hash mismatch for {}", dir.string(), bad.front()));
  LoadedRun r;
  r.dir = dir;
  r.config = read_run_config(dir);
  r.history = read_run(dir);
  r.manifest_hash = sha256_file(dir / "manifest.json");
  return r;
}

// Records one stage in the manifest of `out`, with totals over all recorded stages.
void finish_stage(const fs::path& out, const std::string& stage, json info, const CheckCounts& counts,
                  const LoadedRun* source) {
  info["checks"] = to_json(counts);
  if (source && fs::weakly_canonical(source->dir) != fs::weakly_canonical(out))
    info["source_run"] = {{"path", source->dir.generic_string()}, {"manifest_sha256", source->manifest_hash}};
  json patch;
  patch["stages"][stage] = info;
  json existing = fs::exists(out / "manifest.json") ? read_manifest(out) : json::object();
  existing["stages"][stage] = info;
  CheckCounts total;
  for (const auto& [name, s] : existing["stages"].items()) {
    total.pass += s["checks"].value("pass", 0);
    total.fail += s["checks"].value("fail", 0);
    total.monitor += s["checks"].value("monitor", 0);
  }
  patch["checks"] = to_json(total);
  write_manifest(out, patch);
}

int exit_for(const std::vector<VerificationReport>& reports) {
  return count_checks(reports).fail > 0 ? exit_check_failed : exit_ok;
}

void print_reports(std::ostream& out, const std::vector<VerificationReport>& reports) {
  for (const auto& r : reports)
    out << fmt::format("{:<8} {:<32} margin {:.6g}  {}\n", to_string(r.status), r.id, r.margin, r.notes);
}

// ---- check builders shared by the suites and the standalone subcommands ---------------

std::vector<VerificationReport> phi_reports(const FlowHistory& coarse, const FlowHistory& fine) {
  const auto mc = phi_monitors(coarse), mf = phi_monitors(fine);
  auto clean = [](double v) { return std::isfinite(v) ? v : 0.0; };
  const double principle_c = clean(std::min(mc.upper, mc.lower)), principle_f = clean(std::min(mf.upper, mf.lower));
  const double grad_c = clean(mc.gradient), grad_f = clean(mf.gradient);
  std::vector<VerificationReport> out;
  out.push_back(make_report("phi_maximum_principle", "sup and inf of phi stay within their initial range",
                            at_least(principle_f + 1e-8), principle_f,
                            {{nodes_of(coarse), principle_c}, {nodes_of(fine), principle_f}},
                            "margin = min(sup phi_0 - max phi, min phi - inf phi_0) over all steps"));
  auto grad = make_report("phi_gradient_bound", "sup |grad phi|^2 <= C^2 / t with C = sup |phi_0|",
                          at_least(grad_f + 1e-8), grad_f, {{nodes_of(coarse), grad_c}, {nodes_of(fine), grad_f}},
                          "margin = min over steps of C^2 / t - sup |grad phi|^2");
  if (grad.status == CheckStatus::fail) grad.t = mf.t_worst_gradient;
  out.push_back(grad);
  return out;
}

VerificationReport pseudoloc_report(const PseudolocalityResult& fine, const PseudolocalityResult* coarse,
                                    int fine_nodes, int coarse_nodes, const PseudolocalityOptions& o) {
  std::vector<Resolution> res;
  if (coarse) res.push_back({coarse_nodes, coarse->conclusion_margin});
  res.push_back({fine_nodes, fine.conclusion_margin});
  const std::string notes =
      fmt::format("p = {}, r0 = {}, eps = {}; S margin {:.6g}, isoperimetric deficit {:.6g}, sup|phi_0| {:.6g}; "
                  "eps_ok {:.6g}; {} points; global sup|Rm| growth {:.6g}",
                  o.p_x, o.r0, o.eps, fine.s_margin, fine.delta, fine.phi_sup, fine.eps_ok, fine.points_checked,
                  fine.global_growth);
  if (!fine.hypotheses)
    return make_report("pseudolocality", "local curvature bound from near-Euclidean initial data",
                       CheckStatus::monitor, fine.conclusion_margin, res, "hypotheses not met; " + notes);
  const bool held = fine.eps_ok >= o.eps * (1 - 1e-12) && fine.conclusion_margin >= 0.0;
  return make_report("pseudolocality", "local curvature bound from near-Euclidean initial data",
                     held ? CheckStatus::pass : CheckStatus::fail, fine.conclusion_margin, res, notes);
}

VerificationReport blowup_report(const BlowupResult& fine, const BlowupResult* coarse, int fine_nodes,
                                 int coarse_nodes) {
  const char* anchor = "parabolic blow-up approaches a shrinking soliton";
  if (!fine.type_one)
    return make_report("blowup_sequence", anchor, CheckStatus::monitor, 0.0, {},
                       "run has no Type I singularity; nothing to rescale");
  const auto& lv = fine.levels;
  bool nonincreasing = true, nontrivial = true, gradient = true;
  std::string table;
  for (std::size_t k = 0; k < lv.size(); ++k) {
    if (k > 0 && lv[k].soliton_residual > lv[k - 1].soliton_residual) nonincreasing = false;
    if (lv[k].rescaled_rm < 0.4) nontrivial = false;
    if (!(lv[k].gradient_margin > 0.0)) gradient = false;
    table += fmt::format("{}lambda {}: residual {:.6g}, |Rm| {:.6g}, gradient margin {:.6g}", k ? "; " : "",
                         lv[k].lambda, lv[k].soliton_residual, lv[k].rescaled_rm, lv[k].gradient_margin);
  }
  const double last = lv.back().soliton_residual;
  const double margin = (1e-2 - last) / 1e-2;
  std::vector<Resolution> res;
  if (coarse && coarse->type_one && !coarse->levels.empty())
    res.push_back({coarse_nodes, coarse->levels.back().soliton_residual});
  res.push_back({fine_nodes, last});
  const bool ok = nonincreasing && nontrivial && gradient && margin >= 0.0;
  std::string notes = fmt::format("T_est {:.9g}; {}; residual uses the reduced distance from a finite base time "
                                  "as the potential",
                                  fine.t_est, table);
  if (!nonincreasing) notes += "; residual increases along the sequence";
  if (!nontrivial) notes += "; rescaled |Rm| below 0.4";
  if (!gradient) notes += "; gradient bound violated";
  auto r = make_report("blowup_sequence", anchor, ok ? CheckStatus::pass : CheckStatus::fail, margin, res, notes);
  if (!ok) r.node = fine.singular_node;
  return r;
}

// ---- verification suites -------------------------------------------------------------

double auto_window(const FlowHistory& h, double requested) {
  if (requested >= 0.0) return requested;
  if (h.stop != StopReason::curvature) return 0.0;
  return 0.6 * (h.states.back().t - h.t_origin);
}

std::vector<VerificationReport> core_checks(const RunConfig& config, const FlowHistory& coarse,
                                            const FlowHistory& fine, const SuiteOptions& o) {
  std::vector<VerificationReport> out;
  const double window = auto_window(fine, o.t_window);
  auto s = s_evolution_check(coarse, fine, window);
  if (window > 0.0) s.notes += fmt::format("; states with elapsed time <= {:.6g}", window);
  out.push_back(s);

  if (config.family == "round_sphere" && config.phi.amplitude == 0.0) {
    const double limit = window > 0.0 ? window : std::numeric_limits<double>::infinity();
    const double rc = sphere_identity_residual(up_to(coarse, limit));
    const double rf = sphere_identity_residual(up_to(fine, limit));
    out.push_back(make_report("sphere_identity", "round-sphere scalar curvature rate (2/n) S^2",
                              at_least(1e-3 - rf), (1e-3 - rf) / 1e-3,
                              {{nodes_of(coarse), rc}, {nodes_of(fine), rf}}, "relative residual, limit 1e-3"));
  }

  for (auto& r : phi_reports(coarse, fine)) out.push_back(r);

  // kappa over a few radii scaled to the base length; a monitor, since no bound is asserted.
  const double L = total_length(fine.states.front().metric);
  const double scale = L / std::numbers::pi;
  const std::vector<double> radii{0.25 * scale, 0.5 * scale, 1.0 * scale};
  const int state_stride = std::max(1, static_cast<int>(fine.states.size()) / 12);
  const int node_stride = std::max(1, nodes_of(fine) / 16);
  const auto kc = kappa_check(coarse, radii, state_stride, std::max(1, node_stride / 2));
  const auto kf = kappa_check(fine, radii, state_stride, node_stride);
  out.push_back(make_report("kappa_noncollapsing", "vol B(x, r) / r^n on balls with |Rm| <= r^-2",
                            CheckStatus::monitor, kf.kappa, {{nodes_of(coarse), kc.kappa}, {nodes_of(fine), kf.kappa}},
                            fmt::format("{} qualifying triples, {} skipped; minimum at x {:.6g}, t {:.6g}, r {:.6g}",
                                        kf.qualifying, kf.skipped, kf.x_at_min, kf.t_at_min, kf.r_at_min)));

  // point selection on both lattices; every selection must verify.
  const double alpha = 1.0 / (200.0 * fine.states.front().metric.grid.dim());
  const double A = 10.0;
  std::vector<Resolution> res;
  int selections = 0, verified = 0;
  std::string notes;
  for (const FlowHistory* h : {&coarse, &fine}) {
    const auto lat = curvature_lattice(*h, h->states.front().metric.grid.x0);
    const auto sel = point_select(lat, alpha, o.eps, A);
    if (!sel) {
      res.push_back({nodes_of(*h), 0.0});
      continue;
    }
    ++selections;
    const auto chk = verify_selection(lat, *sel, alpha, o.eps, A);
    if (chk.domination && chk.neighborhood) ++verified;
    res.push_back({nodes_of(*h), chk.worst_ratio});
    notes += fmt::format("{}{} nodes: state {}, node {}, Q {:.6g}, {} points checked, worst |Rm|/Q {:.6g}",
                         notes.empty() ? "" : "; ", nodes_of(*h), sel->state, sel->node, sel->Q,
                         chk.points_checked, chk.worst_ratio);
  }
  if (selections == 0) {
    out.push_back(make_report("point_selection", "selected point dominates nearby earlier curvature",
                              CheckStatus::monitor, 0.0, res, "the selection set is empty at both resolutions"));
  } else {
    const double frac = static_cast<double>(verified) / selections;
    out.push_back(make_report("point_selection", "selected point dominates nearby earlier curvature",
                              verified == selections ? CheckStatus::pass : CheckStatus::fail, frac - 1.0, res,
                              fmt::format("{} of {} selections verified; {}", verified, selections, notes)));
  }
  return out;
}

std::vector<VerificationReport> pseudoloc_checks(const FlowHistory& coarse, const FlowHistory& fine,
                                                 const SuiteOptions& o) {
  PseudolocalityOptions po;
  po.p_x = fine.states.front().metric.grid.x0;
  po.r0 = o.r0;
  po.eps = o.eps;
  const auto rc = pseudolocality_experiment(coarse, po);
  const auto rf = pseudolocality_experiment(fine, po);
  return {pseudoloc_report(rf, &rc, nodes_of(fine), nodes_of(coarse), po)};
}

// Exact shrinkers among the initial-data families, checked at two resolutions.
std::vector<VerificationReport> soliton_checks(const RunConfig& config) {
  const char* anchor = "shrinking soliton equations on an exact shrinker";
  std::optional<std::function<SolitonCandidate(const InitialData&)>> build;
  if (config.family == "round_sphere") {
    build = [&](const InitialData& d) {
      const int n = d.metric.grid.nodes;
      const double tau = 1.0 / (2.0 * (config.dim - 1) * config.curvature_k0);
      return SolitonCandidate{d.metric, std::vector<double>(n, 0.0), std::vector<double>(n, 1.0), tau};
    };
  } else if (config.family == "gaussian_cap") {
    build = [&](const InitialData& d) {
      const int n = d.metric.grid.nodes;
      std::vector<double> f(n);
      for (int i = 0; i < n; ++i) f[i] = d.metric.grid.x(i) * d.metric.grid.x(i) / 4.0;
      return SolitonCandidate{d.metric, std::vector<double>(n, 0.0), f, 1.0, 0.8 * config.flat_radius};
    };
  }
  if (!build)
    return {make_report("soliton_exact", anchor, CheckStatus::monitor, 0.0, {},
                        "no exact shrinker is known for family " + config.family)};

  const int fine_nodes = config.nodes, coarse_nodes = config.nodes / 2;
  const auto rf = soliton_residuals((*build)(config.initial()));
  const auto rc = soliton_residuals((*build)(config.refined(coarse_nodes).initial()));
  const std::string what = config.family == "round_sphere" ? "round sphere, f constant"
                                                           : "flat region of the cap, f = d^2 / 4, tau = 1";
  std::vector<VerificationReport> out;
  out.push_back(make_report("soliton_exact_equation", anchor, at_least(1e-6 - rf.max_equation()),
                            (1e-6 - rf.max_equation()) / 1e-6,
                            {{coarse_nodes, rc.max_equation()}, {fine_nodes, rf.max_equation()}},
                            fmt::format("{}; radial {:.3g}, fiber {:.3g}, drift {:.3g}", what, rf.radial, rf.fiber,
                                        rf.drift)));
  out.push_back(make_report("soliton_exact_dispersion", "tau (S + |grad f|^2) - f is constant",
                            at_least(1e-6 - rf.dispersion), (1e-6 - rf.dispersion) / 1e-6,
                            {{coarse_nodes, rc.dispersion}, {fine_nodes, rf.dispersion}}, what));
  out.push_back(make_report("soliton_exact_scalar_nonnegative", "S >= 0 on a shrinker", at_least(rf.min_S + 1e-10),
                            rf.min_S, {{coarse_nodes, rc.min_S}, {fine_nodes, rf.min_S}}, what));
  out.push_back(make_report("soliton_grad_sqrt_f", "sqrt(tau) |grad sqrt f| against 1/2", CheckStatus::monitor,
                            0.5 - rf.sup_grad_sqrt_f, {{coarse_nodes, rc.sup_grad_sqrt_f}, {fine_nodes, rf.sup_grad_sqrt_f}},
                            "bound 1/2 follows from S >= 0 and the normalized identity"));
  return out;
}

std::vector<VerificationReport> blowup_checks(const FlowHistory& coarse, const FlowHistory& fine) {
  const char* anchor = "parabolic blow-up approaches a shrinking soliton";
  // A run that stops before the rescaled window is covered cannot be analysed (a monitor);
  // an unresolved reduced distance inside the window is a failure.
  struct Outcome {
    std::optional<BlowupResult> result;
    std::string error;
    bool coverage = false;
  };
  auto attempt = [](const FlowHistory& h) {
    Outcome o;
    try {
      o.result = blowup_analysis(h);
    } catch (const DomainError& e) {
      o.error = e.what();
      o.coverage = true;
    } catch (const std::exception& e) {
      o.error = e.what();
    }
    return o;
  };
  const auto f = attempt(fine), c = attempt(coarse);
  if (!f.result) {
    if (f.coverage)
      return {make_report("blowup_sequence", anchor, CheckStatus::monitor, 0.0, {},
                          f.error + "; the run must stop closer to the singular time (raise rm_ratio)")};
    auto r = make_report("blowup_sequence", anchor, CheckStatus::fail, -1.0, {}, "analysis failed: " + f.error);
    return {r};
  }
  auto r = blowup_report(*f.result, c.result ? &*c.result : nullptr, nodes_of(fine), nodes_of(coarse));
  if (!c.result && f.result->type_one) r.notes += "; coarse analysis failed: " + c.error;
  return {r};
}

}  // namespace

std::vector<VerificationReport> verify_suite(const RunConfig& config, const FlowHistory& fine, const SuiteOptions& opts,
                                             const std::string& manifest_hash) {
  static const std::vector<std::string> suites{"core", "pseudoloc", "soliton", "blowup", "all"};
  if (std::find(suites.begin(), suites.end(), opts.suite) == suites.end())
    throw DomainError("unknown suite '" + opts.suite + "' (core, pseudoloc, soliton, blowup, all)");
  auto wants = [&](const char* s) { return opts.suite == "all" || opts.suite == s; };

  std::optional<FlowHistory> coarse;
  if (wants("core") || wants("pseudoloc") || wants("blowup")) coarse = simulate(config.refined(config.nodes / 2));

  std::vector<std::function<std::vector<VerificationReport>()>> stages;
  if (wants("core")) stages.emplace_back([&] { return core_checks(config, *coarse, fine, opts); });
  if (wants("pseudoloc")) stages.emplace_back([&] { return pseudoloc_checks(*coarse, fine, opts); });
  if (wants("soliton")) stages.emplace_back([&] { return soliton_checks(config); });
  if (wants("blowup")) stages.emplace_back([&] { return blowup_checks(*coarse, fine); });

  std::vector<std::vector<VerificationReport>> results(stages.size());
  parallel_for(stages.size(), [&](std::size_t i) { results[i] = stages[i](); });
  std::vector<VerificationReport> out;
  for (auto& r : results)
    for (auto& x : r) {
      x.manifest_hash = manifest_hash;
      out.push_back(std::move(x));
    }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

namespace {

// ---- subcommands ----------------------------------------------------------------------

json grid_json(const Grid& g) {
  return {{"topology", to_string(g.topology)}, {"nodes", g.nodes},     {"dim", g.dim()},
          {"fiber_dim", g.fiber_dim},          {"x0", g.x0},           {"spacing", g.spacing},
          {"fiber_curvature", g.fiber_curvature}};
}

int cmd_run(const fs::path& config_path, const fs::path& out_dir, std::ostream& out) {
  const RunConfig config = RunConfig::load(config_path);
  if (out_dir.empty()) throw UsageError("run: --out is required");
  const FlowHistory h = simulate(config);
  // A run directory is rebuilt from scratch; stale states or stage outputs would otherwise be hashed.
  if (fs::exists(out_dir / "manifest.json")) fs::remove(out_dir / "manifest.json");
  fs::remove_all(out_dir / "states");
  write_run(out_dir, config, h);
  const auto reports = phi_reports(h, h);
  const auto counts = count_checks(reports);
  json info;
  info["config"] = config.echo();
  info["grid"] = grid_json(h.states.front().metric.grid);
  info["T_est"] = optional_json(h.t_est);
  info["C0_measured"] = optional_json(h.type_one_constant);
  info["stop_reason"] = to_string(h.stop);
  info["steps"] = h.step_count;
  info["regrids"] = h.regrids;
  info["saved_states"] = h.states.size();
  json stage;
  stage["checks"] = to_json(counts);
  json patch = info;
  patch["stages"]["run"] = stage;
  patch["checks"] = to_json(counts);
  write_manifest(out_dir, patch);
  out << fmt::format("run: {} steps, {} saved states, stop {}, T_est {}, C0 {}\n", h.step_count, h.states.size(),
                     to_string(h.stop), h.t_est ? fmt17(*h.t_est) : "none",
                     h.type_one_constant ? fmt17(*h.type_one_constant) : "none");
  print_reports(out, reports);
  return exit_for(reports);
}

fs::path out_or(const std::string& out, const fs::path& fallback) {
  const fs::path p = out.empty() ? fallback : fs::path(out);
  fs::create_directories(p);
  return p;
}

HistorySampler sampler_at(const FlowHistory& h, double t) { return HistorySampler(epoch_slice(h, epoch_at(h, t))); }

int cmd_lgeo(const LoadedRun& run, double t0, const std::vector<double>& taus, bool oracle,
             std::optional<double> base_x, std::optional<int> psi_samples, const fs::path& dir, std::ostream& out) {
  const auto sampler = sampler_at(run.history, t0);
  const Grid& g = sampler.grid();
  const LBase base{base_x.value_or(g.x0), t0};
  for (double tau : taus)
    if (!(tau > 0.0) || t0 - tau < sampler.t_first() - 1e-12 || t0 > sampler.t_last() + 1e-12)
      throw UsageError(fmt::format("tau {} leaves the saved window [{}, {}] of the run below base time {}", tau,
                                   sampler.t_first(), sampler.t_last(), t0));
  ReducedDistanceOptions opts;
  opts.oracle = oracle;
  const int n = g.nodes;
  CsvTable lgeo({"tau", "q_x", "L", "ell", "K", "v_min", "status"});
  CsvTable oracle_table({"tau", "q_x", "ell", "ell_oracle", "abs_diff"});
  std::vector<VerificationReport> reports;
  double worst_oracle = std::numeric_limits<double>::infinity();
  double ell_margin = std::numeric_limits<double>::infinity();
  std::string ell_notes;
  const double ell_bound = 0.5 * g.dim() + 1e-2;
  for (double tau : taus) {
    std::vector<ReducedDistanceSample> samples(n);
    parallel_for(n, [&](std::size_t i) {
      samples[i] = reduced_distance(sampler, base, g.x(static_cast<int>(i)), tau, opts);
    });
    double min_ell = std::numeric_limits<double>::infinity();
    for (const auto& s : samples) {
      lgeo.add_row(std::vector<std::string>{fmt17(tau), fmt17(s.q_x), fmt17(s.L), fmt17(s.ell), fmt17(s.K),
                                            fmt17(s.v_norm()), to_string(s.status)});
      if (s.status == SolveStatus::resolved) min_ell = std::min(min_ell, s.ell);
      if (oracle && s.ell_oracle && s.status == SolveStatus::resolved) {
        const double diff = std::abs(s.ell - *s.ell_oracle);
        oracle_table.add_row({tau, s.q_x, s.ell, *s.ell_oracle, diff});
        worst_oracle = std::min(worst_oracle, 1e-3 * (1 + std::abs(s.ell)) - diff);
      }
    }
    ell_margin = std::min(ell_margin, ell_bound - min_ell);
    ell_notes += fmt::format("{}tau {:.6g}: {:.9g}", ell_notes.empty() ? "min ell over resolved nodes; " : ", ", tau,
                             min_ell);
  }
  reports.push_back(make_report("min_ell", "min ell <= n/2 at every tau", at_least(ell_margin), ell_margin,
                                {{n, ell_bound - ell_margin}}, ell_notes));
  lgeo.write(dir / "lgeo.csv");
  if (oracle) {
    oracle_table.write(dir / "lgeo_oracle.csv");
    reports.push_back(make_report("lgeo_oracle", "shooting agrees with path minimization",
                                  std::isfinite(worst_oracle) ? at_least(worst_oracle) : CheckStatus::monitor,
                                  std::isfinite(worst_oracle) ? worst_oracle : 0.0, {},
                                  "margin = min 1e-3 (1 + ell) - |ell - ell_oracle|"));
  }

  const int psi = psi_samples.value_or(g.periodic() && g.fiber_dim == 1 ? 16 : 0);
  std::vector<double> sorted = taus;
  std::sort(sorted.begin(), sorted.end());
  const auto series = reduced_volume_series(sampler, base, sorted, psi, opts);
  CsvTable vt({"tau", "vtilde", "quad_err"});
  for (std::size_t k = 0; k < series.tau.size(); ++k) vt.add_row({series.tau[k], series.vtilde[k], series.quad_err[k]});
  vt.write(dir / "vtilde.csv");
  if (series.tau.size() > 1) {
    const double m = series.monotonicity_margin();
    reports.push_back(make_report("vtilde_monotone", "reduced volume is nonincreasing in tau", at_least(m + 1e-6), m,
                                  {{n, m}}, "margin = min V(tau_k) - V(tau_k+1)"));
  }
  std::stable_sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  json info{{"base_time", t0}, {"base_x", base.x}, {"taus", taus}, {"oracle", oracle}, {"psi_samples", psi}};
  finish_stage(dir, "lgeo", info, count_checks(reports), &run);
  print_reports(out, reports);
  return exit_for(reports);
}

std::pair<double, double> parse_pair(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw UsageError("--base expects x,t");
  try {
    return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw UsageError("--base expects two numbers x,t, got '" + s + "'");
  }
}

int cmd_conj(const LoadedRun& run, const std::string& base, double sigma0, double t_stop, const fs::path& dir,
             std::ostream& out) {
  const auto [x_bar, t_bar] = parse_pair(base);
  const auto sampler = sampler_at(run.history, t_bar);
  const Grid& g = sampler.grid();
  const bool pole = std::abs(x_bar - g.x0) < 1e-12 || (!g.periodic() && std::abs(x_bar - g.x(g.nodes - 1)) < 1e-12);
  if (!pole && !g.periodic()) throw UsageError("conj: the kernel centre must be a pole of the grid");
  if (t_stop < sampler.t_first() - 1e-12)
    throw UsageError(fmt::format("conj: tstop {} precedes the saved window starting at {}", t_stop, sampler.t_first()));
  const auto states = solve_backward(sampler, x_bar, t_bar, t_stop, sigma0);
  fs::create_directories(dir / "conj");
  CsvTable table({"t", "mass", "max_v", "int_v", "W"});
  double mass_dev = 0.0, max_v = -std::numeric_limits<double>::infinity();
  double mono = std::numeric_limits<double>::infinity();
  std::vector<double> int_v;
  for (std::size_t j = states.size(); j-- > 0;) {  // increasing t
    const auto& s = states[j];
    const auto v = v_field(s);
    const double w = w_functional(s);
    table.add_row({s.t, s.mass, v.max_v, v.int_v, w});
    mass_dev = std::max(mass_dev, std::abs(s.mass - 1.0));
    max_v = std::max(max_v, v.max_v);
    if (!int_v.empty()) mono = std::min(mono, v.int_v - int_v.back());
    int_v.push_back(v.int_v);
    const std::size_t k = states.size() - 1 - j;
    write_snapshot(dir / "conj" / fmt::format("u_{:04d}.txt", k), Snapshot{s.flow.metric, s.u, FieldRole::u, s.t});
    write_snapshot(dir / "conj" / fmt::format("f_{:04d}.txt", k), Snapshot{s.flow.metric, s.f, FieldRole::f, s.t});
    write_snapshot(dir / "conj" / fmt::format("v_{:04d}.txt", k), Snapshot{s.flow.metric, v.v, FieldRole::v, s.t});
  }
  table.write(dir / "conj.csv");
  if (!std::isfinite(mono)) mono = 0.0;
  const int n = g.nodes;
  std::vector<VerificationReport> reports{
      make_report("conj_mass", "the conjugate heat kernel keeps unit mass", at_least(1e-3 - mass_dev),
                  (1e-3 - mass_dev) / 1e-3, {{n, mass_dev}}, "largest |mass - 1| over saved states"),
      make_report("conj_int_v_monotone", "int v dV is nondecreasing in t", at_least(mono + 1e-6), mono, {{n, mono}},
                  "smallest increment between consecutive saved states"),
      make_report("conj_max_v", "pointwise Harnack quantity v <= 0", CheckStatus::monitor, -max_v, {{n, max_v}},
                  "max v over unmasked nodes; its size depends on sigma0 and the grid")};
  json info{{"x_bar", x_bar}, {"t_bar", t_bar}, {"sigma0", sigma0}, {"t_stop", t_stop}, {"saved_states", states.size()}};
  finish_stage(dir, "conj", info, count_checks(reports), &run);
  print_reports(out, reports);
  return exit_for(reports);
}

RadialProfile load_profile(const std::string& spec, int dim) {
  if (!fs::exists(spec)) {
    try {
      return named_profile(spec, dim);
    } catch (const DomainError& e) {
      throw UsageError(fmt::format("--profile '{}' is neither a file nor a named profile: {}", spec, e.what()));
    }
  }
  std::istringstream in(read_text(spec));
  std::vector<double> r, F;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    double a = 0.0, b = 0.0;
    if (line.empty() || line[0] == '#') continue;
    if (!(ls >> a >> b)) {
      if (r.empty()) continue;  // header
      throw UsageError(fmt::format("{}:{}: expected two numbers 'r F'", spec, line_no));
    }
    r.push_back(a);
    F.push_back(b);
  }
  try {
    return profile_from_values(dim, r, F);
  } catch (const DomainError& e) {
    throw UsageError(fmt::format("{}: {}", spec, e.what()));
  }
}

int cmd_logsob(const std::string& spec, int dim, bool optimized, const fs::path& dir, std::ostream& out) {
  const auto p = load_profile(spec, dim);
  CsvTable table({"case", "lhs", "rhs", "margin"});
  std::vector<VerificationReport> reports;
  const auto basic = log_sobolev_basic(p);
  table.add_row(std::vector<std::string>{"basic", fmt17(basic.lhs), fmt17(0.0), fmt17(-basic.lhs)});
  reports.push_back(make_report("logsob_basic", "Euclidean log-Sobolev inequality, entropy form",
                                at_least(-basic.lhs + 1e-6), -basic.lhs, {}, "lhs <= 0 after normalization"));
  if (optimized) {
    const auto opt = log_sobolev_optimized(p);
    table.add_row(std::vector<std::string>{"optimized", fmt17(opt.lhs), fmt17(opt.rhs), fmt17(opt.margin())});
    reports.push_back(make_report("logsob_optimized", "scale-optimized log-Sobolev inequality",
                                  at_least(opt.margin() + 1e-6), opt.margin(), {},
                                  fmt::format("optimal scale {:.9g}", opt.c_closed)));
  }
  table.write(dir / "logsob.csv");
  finish_stage(dir, "logsob", json{{"profile", spec}, {"dim", dim}, {"optimized", optimized}}, count_checks(reports),
               nullptr);
  print_reports(out, reports);
  return exit_for(reports);
}

int cmd_symm(const LoadedRun& run, double t, const std::string& field, int levels, const fs::path& dir,
             std::ostream& out) {
  const auto names = field_names();
  if (std::find(names.begin(), names.end(), field) == names.end())
    throw UsageError(fmt::format("unknown field '{}' (phi, phi_shifted, rm, S_shifted)", field));
  const auto& state = run.history.states[nearest_state(run.history, t)];
  const auto values = named_field(state, field);
  if (*std::min_element(values.begin(), values.end()) < 0.0)
    throw UsageError(fmt::format("field '{}' takes negative values; rearrangement needs a nonnegative field "
                                 "(try phi_shifted)",
                                 field));
  const auto r = symmetrize(state.metric, values, levels);
  CsvTable table({"s", "vol_M", "vol_Rn"});
  double worst = 0.0;
  for (std::size_t k = 0; k < r.level.size(); ++k) {
    const double rn = r.vol_rn(static_cast<int>(k));
    table.add_row({r.level[k], r.vol_m[k], rn});
    worst = std::max(worst, std::abs(r.vol_m[k] - rn));
  }
  table.write(dir / "symm.csv");
  const auto in = rearrangement_integrals(r);
  const double vol = total_volume(state.metric);
  const double l2 = std::abs(in.l2_m - in.l2_rn), ent = std::abs(in.entropy_m - in.entropy_rn);
  const int n = state.metric.grid.nodes;
  std::vector<VerificationReport> reports{
      make_report("symm_distribution", "rearrangement preserves the distribution function",
                  at_least(1e-6 * vol - worst), (1e-6 * vol - worst) / (1e-6 * vol), {{n, worst}},
                  "max |vol_M - vol_Rn| over the level table"),
      make_report("symm_l2", "int phi^2 is preserved", at_least(1e-4 - l2), (1e-4 - l2) / 1e-4, {{n, l2}},
                  fmt::format("{:.9g} vs {:.9g}", in.l2_m, in.l2_rn)),
      make_report("symm_entropy", "int phi^2 log phi is preserved", at_least(1e-4 - ent), (1e-4 - ent) / 1e-4,
                  {{n, ent}}, fmt::format("{:.9g} vs {:.9g}", in.entropy_m, in.entropy_rn))};
  json info{{"t_requested", t}, {"t_state", state.t}, {"field", field}, {"levels", levels}, {"plateaus", r.plateaus}};
  finish_stage(dir, "symm", info, count_checks(reports), &run);
  print_reports(out, reports);
  return exit_for(reports);
}

int cmd_pseudoloc(const LoadedRun& run, std::optional<double> p, double r0, double eps, double alpha,
                  const fs::path& dir, std::ostream& out) {
  PseudolocalityOptions o;
  o.p_x = p.value_or(run.history.states.front().metric.grid.x0);
  o.r0 = r0;
  o.eps = eps;
  o.alpha = alpha;
  const auto r = pseudolocality_experiment(run.history, o);
  CsvTable table({"p_x", "r0", "eps", "s_margin", "delta", "phi_sup", "hypotheses", "eps_ok", "conclusion_margin",
                  "points_checked", "global_growth"});
  table.add_row(std::vector<std::string>{fmt17(o.p_x), fmt17(r0), fmt17(eps), fmt17(r.s_margin), fmt17(r.delta),
                                         fmt17(r.phi_sup), r.hypotheses ? "1" : "0", fmt17(r.eps_ok),
                                         fmt17(r.conclusion_margin), std::to_string(r.points_checked),
                                         fmt17(r.global_growth)});
  table.write(dir / "pseudoloc.csv");
  const std::vector<VerificationReport> reports{pseudoloc_report(r, nullptr, nodes_of(run.history), 0, o)};
  finish_stage(dir, "pseudoloc", json{{"p_x", o.p_x}, {"r0", r0}, {"eps", eps}}, count_checks(reports), &run);
  print_reports(out, reports);
  return exit_for(reports);
}

int cmd_blowup(const LoadedRun& run, const std::vector<double>& lambdas, const fs::path& dir, std::ostream& out) {
  BlowupOptions o;
  o.lambdas = lambdas;
  const auto b = blowup_analysis(run.history, o);
  CsvTable table({"lambda", "soliton_residual", "gradient_margin", "rescaled_rm", "unresolved"});
  for (const auto& l : b.levels)
    table.add_row({l.lambda, l.soliton_residual, l.gradient_margin, l.rescaled_rm, static_cast<double>(l.unresolved)});
  table.write(dir / "blowup.csv");
  const std::vector<VerificationReport> reports{blowup_report(b, nullptr, nodes_of(run.history), 0)};
  finish_stage(dir, "blowup", json{{"lambdas", lambdas}, {"type_one", b.type_one}}, count_checks(reports), &run);
  print_reports(out, reports);
  return exit_for(reports);
}

int cmd_verify(const LoadedRun& run, const SuiteOptions& opts, const fs::path& dir, std::ostream& out) {
  const auto reports = verify_suite(run.config, run.history, opts, run.manifest_hash);
  write_text(dir / "report.json", format_reports(reports));
  json info{{"suite", opts.suite}, {"r0", opts.r0}, {"eps", opts.eps}, {"t_window", opts.t_window}};
  finish_stage(dir, "verify_" + opts.suite, info, count_checks(reports), &run);
  print_reports(out, reports);
  return exit_for(reports);
}

}  // namespace

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Coupled Ricci-harmonic flow on warped products: simulation and property checks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tool_version());

  std::string config, out_dir, run_dir, taus_arg, base, profile, field, suite = "core";
  double base_time = 0.0, sigma0 = 0.0, t_stop = 0.0, state_t = 0.0, r0 = 1.0, eps = 0.5, alpha = 0.0;
  double t_window = -1.0;
  std::optional<double> base_x, p_x;
  std::optional<int> psi_samples;
  std::vector<double> taus, lambdas{4, 16, 64};
  bool oracle = false, optimized = false;
  int dim = 2, levels = 1000;

  auto* run = app.add_subcommand("run", "integrate the flow from a config and write a run directory");
  run->add_option("--config", config, "flat JSON config")->required();
  run->add_option("--out", out_dir, "output directory (required)");

  auto* lgeo = app.add_subcommand("lgeo", "reduced distance and reduced volume");
  lgeo->add_option("--run", run_dir)->required();
  lgeo->add_option("--base-time", base_time)->required();
  lgeo->add_option("--taus", taus, "comma-separated list")->required()->delimiter(',');
  lgeo->add_flag("--oracle", oracle, "compare against path minimization");
  lgeo->add_option("--base-x", base_x, "base coordinate (default: first grid point)");
  lgeo->add_option("--psi-samples", psi_samples, "fiber samples for 2D fields");
  lgeo->add_option("--out", out_dir);

  auto* conj = app.add_subcommand("conj", "conjugate heat kernel backward from a base point");
  conj->add_option("--run", run_dir)->required();
  conj->add_option("--base", base, "x,t")->required();
  conj->add_option("--sigma0", sigma0)->required()->check(CLI::PositiveNumber);
  conj->add_option("--tstop", t_stop)->required();
  conj->add_option("--out", out_dir);

  auto* verify = app.add_subcommand("verify", "run a verification suite on a run directory");
  verify->add_option("--run", run_dir)->required();
  verify->add_option("--suite", suite)->check(CLI::IsMember({"core", "pseudoloc", "soliton", "blowup", "all"}));
  verify->add_option("--t-window", t_window, "elapsed-time window for evolution residuals");
  verify->add_option("--r0", r0)->check(CLI::PositiveNumber);
  verify->add_option("--eps", eps)->check(CLI::PositiveNumber);
  verify->add_option("--out", out_dir);

  auto* logsob = app.add_subcommand("logsob", "log-Sobolev functionals of a radial profile");
  logsob->add_option("--profile", profile, "file with 'r F' rows, or gaussian:<sigma> / perturbed:<eps>")->required();
  logsob->add_option("--dim", dim)->check(CLI::Range(1, 16));
  logsob->add_flag("--optimized", optimized);
  logsob->add_option("--out", out_dir);

  auto* symm = app.add_subcommand("symm", "decreasing rearrangement of a field");
  symm->add_option("--run", run_dir)->required();
  symm->add_option("--state", state_t, "time; the nearest saved state is used")->required();
  symm->add_option("--field", field)->required();
  symm->add_option("--levels", levels)->check(CLI::Range(3, 100000));
  symm->add_option("--out", out_dir);

  auto* pseudo = app.add_subcommand("pseudoloc", "pseudo-locality experiment");
  pseudo->add_option("--run", run_dir)->required();
  pseudo->add_option("--p", p_x, "centre coordinate (default: first grid point)");
  pseudo->add_option("--r0", r0)->check(CLI::PositiveNumber);
  pseudo->add_option("--eps", eps)->check(CLI::PositiveNumber);
  pseudo->add_option("--alpha", alpha, "0 selects 1/(200 n)")->check(CLI::NonNegativeNumber);
  pseudo->add_option("--out", out_dir);

  auto* blowup = app.add_subcommand("blowup", "parabolic rescaling at the singular time");
  blowup->add_option("--run", run_dir)->required();
  blowup->add_option("--lambdas", lambdas)->delimiter(',');
  blowup->add_option("--out", out_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_usage;
  }

  try {
    if (run->parsed()) return cmd_run(config, out_dir, out);
    if (logsob->parsed()) return cmd_logsob(profile, dim, optimized, out_or(out_dir, "."), out);
    const LoadedRun loaded = load_run(run_dir);
    const fs::path dir = out_or(out_dir, run_dir);
    if (lgeo->parsed()) return cmd_lgeo(loaded, base_time, taus, oracle, base_x, psi_samples, dir, out);
    if (conj->parsed()) return cmd_conj(loaded, base, sigma0, t_stop, dir, out);
    if (symm->parsed()) return cmd_symm(loaded, state_t, field, levels, dir, out);
    if (pseudo->parsed()) return cmd_pseudoloc(loaded, p_x, r0, eps, alpha, dir, out);
    if (blowup->parsed()) return cmd_blowup(loaded, lambdas, dir, out);
    if (verify->parsed()) return cmd_verify(loaded, SuiteOptions{suite, t_window, r0, eps}, dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << (config.empty() ? "" : config + ": ") << e.what() << "\n";
    return exit_usage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const DomainError& e) {
    err << "input error: " << e.what() << "\n";
    return exit_usage;
  } catch (const InvalidMetric& e) {
    err << "invalid metric at node " << e.node << ": " << e.what() << "\n";
    return exit_usage;
  } catch (const NumericError& e) {
    err << "numerical failure at node " << e.node << ": " << e.what() << "\n";
    return exit_check_failed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  }
  return exit_usage;
}

}  // namespace cflow
