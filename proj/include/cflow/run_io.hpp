// Run configuration, run-directory persistence and the hashed manifest.
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "cflow/families.hpp"
#include "cflow/flow.hpp"

namespace cflow {

// Bad or incomplete configuration. `field` names the offending key ("" for syntax errors)
// and `line` is 1-based in the source text, 0 when unknown.
struct ConfigError : std::runtime_error {
  std::string field;
  int line = 0;
  ConfigError(const std::string& what, std::string field_name, int line_no)
      : std::runtime_error(what), field(std::move(field_name)), line(line_no) {}
};

// Flat JSON run configuration. Every physical knob is required; the few solver guards
// that have defaults are written back into the echo.
struct RunConfig {
  std::string family;
  int nodes = 0;
  // family parameters (only the ones the family uses are read)
  double length = 0.0, fiber_radius = 0.0;      // flat_torus
  int dim = 2;                                  // round_sphere
  double curvature_k0 = 1.0;                    // round_sphere
  double neck_radius = 0.0;                     // dumbbell
  int fiber_dim = 1;                            // dumbbell, gaussian_cap
  double perturbation_eps = 0.0;                // perturbed_flat
  int perturbation_mode = 1;                    // perturbed_flat
  double flat_radius = 0.0, band_width = 0.0;   // gaussian_cap
  PhiProfile phi;
  FlowConfig flow;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json echo() const;
  InitialData initial() const;
  // Same setup at another resolution; the save interval scales with the grid spacing.
  RunConfig refined(int new_nodes) const;
};

FlowHistory simulate(const RunConfig& config);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

// Writes config.json, history.json, diagnostics.csv and states/ (snapshots plus index.csv).
void write_run(const std::filesystem::path& dir, const RunConfig& config, const FlowHistory& history);
// Reconstructs the history written by write_run, bit for bit.
FlowHistory read_run(const std::filesystem::path& dir);
RunConfig read_run_config(const std::filesystem::path& dir);

// Hashes every regular file under dir except manifest.json and writes manifest.json
// through a temporary file and rename, so its presence marks a complete directory.
// `info` is merged recursively into the existing manifest, if any.
void write_manifest(const std::filesystem::path& dir, const nlohmann::json& info);
nlohmann::json read_manifest(const std::filesystem::path& dir);
// Files whose hash no longer matches, or that are unlisted or missing.
std::vector<std::string> manifest_mismatches(const std::filesystem::path& dir);

std::string tool_version();
nlohmann::json library_versions();

}  // namespace cflow
