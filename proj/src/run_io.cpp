#include "cflow/run_io.hpp"

#include <boost/version.hpp>
#include <fmt/format.h>
#include <openssl/evp.h>
#include <openssl/opensslv.h>
#include <fcntl.h>
#include <sys/file.h>
#include <tbb/version.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "cflow/snapshot.hpp"

namespace cflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// 1-based line of the first occurrence of "key" in the source text.
int line_of_key(const std::string& text, const std::string& key) {
  const auto pos = text.find('"' + key + '"');
  if (pos == std::string::npos) return 0;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
}

class FieldReader {
 public:
  FieldReader(const json& obj, const std::string& text) : obj_(obj), text_(text) {}

  double number(const std::string& key) {
    const json& v = require(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }
  double positive(const std::string& key) {
    const double v = number(key);
    if (!(v > 0.0)) fail(key, "must be positive");
    return v;
  }
  double nonnegative(const std::string& key) {
    const double v = number(key);
    if (!(v >= 0.0)) fail(key, "must be non-negative");
    return v;
  }
  long integer(const std::string& key, long min_value) {
    const json& v = require(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    const long i = v.get<long>();
    if (i < min_value) fail(key, fmt::format("must be at least {}", min_value));
    return i;
  }
  std::string string(const std::string& key) {
    const json& v = require(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }
  bool has(const std::string& key) const { return obj_.contains(key); }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const int line = line_of_key(text_, key);
    throw ConfigError(line > 0 ? fmt::format("line {}: field '{}': {}", line, key, msg)
                               : fmt::format("field '{}': {}", key, msg),
                      key, line);
  }
  void reject_unknown() const {
    for (const auto& [key, value] : obj_.items())
      if (!used_.count(key)) fail(key, "unknown field for this family");
  }

 private:
  const json& require(const std::string& key) {
    used_.insert(key);
    if (!obj_.contains(key)) throw ConfigError(fmt::format("missing required field '{}'", key), key, 0);
    return obj_.at(key);
  }
  const json& obj_;
  const std::string& text_;
  std::set<std::string> used_;
};

const std::vector<std::string> families{"flat_torus", "round_sphere", "dumbbell", "perturbed_flat", "gaussian_cap"};

std::string hex(const unsigned char* data, unsigned len) {
  std::string out;
  for (unsigned i = 0; i < len; ++i) out += fmt::format("{:02x}", data[i]);
  return out;
}

// Relative paths of regular files under dir, sorted, excluding the manifest and temporaries.
std::vector<std::string> listed_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json" || rel == ".manifest.lock" || rel.ends_with(".tmp")) continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Recursive object merge. Unlike a JSON merge patch, null values are stored, not deleted.
void merge_into(json& target, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && target.contains(key) && target[key].is_object())
      merge_into(target[key], value);
    else
      target[key] = value;
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto byte = std::min<std::size_t>(e.byte, text.size());
    const int line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n'));
    throw ConfigError(fmt::format("line {}: malformed JSON ({})", line, e.what()), "", line);
  }
  if (!obj.is_object()) throw ConfigError("config must be a JSON object", "", 1);
  for (const auto& [key, value] : obj.items())
    if (value.is_object() || value.is_array())
      FieldReader(obj, text).fail(key, "config is flat: nested values are not allowed");

  FieldReader r(obj, text);
  RunConfig c;
  c.family = r.string("family");
  if (std::find(families.begin(), families.end(), c.family) == families.end())
    r.fail("family", "unknown family (flat_torus, round_sphere, dumbbell, perturbed_flat, gaussian_cap)");
  c.nodes = static_cast<int>(r.integer("nodes", 8));

  if (c.family == "flat_torus") {
    c.length = r.positive("length");
    c.fiber_radius = r.positive("fiber_radius");
  } else if (c.family == "round_sphere") {
    c.dim = static_cast<int>(r.integer("dim", 2));
    c.curvature_k0 = r.positive("curvature_k0");
  } else if (c.family == "dumbbell") {
    c.neck_radius = r.positive("neck_radius");
    c.fiber_dim = static_cast<int>(r.integer("fiber_dim", 1));
  } else if (c.family == "perturbed_flat") {
    c.perturbation_eps = r.number("perturbation_eps");
    if (std::abs(c.perturbation_eps) >= 1.0) r.fail("perturbation_eps", "must satisfy |eps| < 1");
    c.perturbation_mode = static_cast<int>(r.integer("perturbation_mode", 1));
  } else {
    c.flat_radius = r.positive("flat_radius");
    c.band_width = r.positive("band_width");
    c.fiber_dim = static_cast<int>(r.integer("fiber_dim", 1));
  }

  c.phi.amplitude = r.number("phi_amplitude");
  c.phi.mode = static_cast<int>(r.integer("phi_mode", 1));
  c.flow.t_max = r.positive("t_max");
  c.flow.cfl = r.positive("cfl_factor");
  c.flow.rm_ratio = r.positive("rm_ratio");
  c.flow.save_dt = r.nonnegative("save_dt");
  c.flow.save_rm_factor = r.nonnegative("save_rm_factor");
  c.flow.regrid_threshold = r.nonnegative("regrid_threshold");
  if (r.has("min_warp_ratio")) c.flow.min_warp_ratio = r.positive("min_warp_ratio");
  if (r.has("dt_min")) c.flow.dt_min = r.positive("dt_min");
  if (r.has("max_steps")) c.flow.max_steps = r.integer("max_steps", 1);
  if (r.has("save_every_steps")) c.flow.save_every_steps = static_cast<int>(r.integer("save_every_steps", 0));
  r.reject_unknown();
  try {
    c.flow.validate();
  } catch (const DomainError& e) {
    throw ConfigError(fmt::format("invalid solver settings: {}", e.what()), "", 0);
  }
  try {
    c.initial();
  } catch (const std::exception& e) {
    throw ConfigError(fmt::format("family '{}' rejected its parameters: {}", c.family, e.what()), "family",
                      line_of_key(text, "family"));
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(fmt::format("cannot read config {}: {}", path.string(), e.what()), "", 0);
  }
  return parse(text);
}

json RunConfig::echo() const {
  json j;
  j["family"] = family;
  j["nodes"] = nodes;
  if (family == "flat_torus") {
    j["length"] = length;
    j["fiber_radius"] = fiber_radius;
  } else if (family == "round_sphere") {
    j["dim"] = dim;
    j["curvature_k0"] = curvature_k0;
  } else if (family == "dumbbell") {
    j["neck_radius"] = neck_radius;
    j["fiber_dim"] = fiber_dim;
  } else if (family == "perturbed_flat") {
    j["perturbation_eps"] = perturbation_eps;
    j["perturbation_mode"] = perturbation_mode;
  } else {
    j["flat_radius"] = flat_radius;
    j["band_width"] = band_width;
    j["fiber_dim"] = fiber_dim;
  }
  j["phi_amplitude"] = phi.amplitude;
  j["phi_mode"] = phi.mode;
  j["t_max"] = flow.t_max;
  j["cfl_factor"] = flow.cfl;
  j["rm_ratio"] = flow.rm_ratio;
  j["save_dt"] = flow.save_dt;
  j["save_rm_factor"] = flow.save_rm_factor;
  j["regrid_threshold"] = flow.regrid_threshold;
  j["min_warp_ratio"] = flow.min_warp_ratio;
  j["dt_min"] = flow.dt_min;
  j["max_steps"] = flow.max_steps;
  j["save_every_steps"] = flow.save_every_steps;
  return j;
}

InitialData RunConfig::initial() const {
  if (family == "flat_torus") return flat_torus(nodes, length, fiber_radius, phi);
  if (family == "round_sphere") return round_sphere(nodes, dim, curvature_k0, phi);
  if (family == "dumbbell") return dumbbell(nodes, neck_radius, fiber_dim, phi);
  if (family == "perturbed_flat") return perturbed_flat(nodes, perturbation_eps, perturbation_mode, phi);
  if (family == "gaussian_cap") return gaussian_cap(nodes, flat_radius, band_width, fiber_dim, phi);
  throw DomainError("unknown family " + family);
}

RunConfig RunConfig::refined(int new_nodes) const {
  RunConfig c = *this;
  const double ratio = static_cast<double>(nodes) / new_nodes;
  c.nodes = new_nodes;
  c.flow.save_dt = flow.save_dt * ratio;
  return c;
}

FlowHistory simulate(const RunConfig& config) {
  const InitialData d = config.initial();
  FlowState s;
  s.metric = d.metric;
  s.phi = d.phi;
  return run(s, config.flow);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  return hex(md, len);
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

void write_run(const fs::path& dir, const RunConfig& config, const FlowHistory& history) {
  fs::create_directories(dir / "states");
  write_text(dir / "config.json", config.echo().dump(2) + "\n");

  json meta;
  meta["t_origin"] = history.t_origin;
  meta["phi0_min"] = history.phi0_min;
  meta["phi0_max"] = history.phi0_max;
  meta["phi0_sup"] = history.phi0_sup;
  meta["rm_initial"] = history.rm_initial;
  meta["stop_reason"] = to_string(history.stop);
  meta["step_count"] = history.step_count;
  meta["regrids"] = history.regrids;
  meta["t_est"] = history.t_est ? json(*history.t_est) : json(nullptr);
  meta["type_one_constant"] = history.type_one_constant ? json(*history.type_one_constant) : json(nullptr);
  meta["saved_states"] = history.states.size();
  write_text(dir / "history.json", meta.dump(2) + "\n");

  CsvTable diag({"t", "sup_rm", "sup_gradphi2", "min_phi", "max_phi", "min_S", "max_S", "grid_quality"});
  for (const auto& d : history.steps)
    diag.add_row({d.t, d.sup_rm, d.sup_gradphi2, d.min_phi, d.max_phi, d.min_s, d.max_s, d.grid_quality});
  diag.write(dir / "diagnostics.csv");

  CsvTable index({"index", "t", "epoch", "x0", "spacing", "file"});
  for (std::size_t k = 0; k < history.states.size(); ++k) {
    const auto& s = history.states[k];
    const std::string name = fmt::format("state_{:05d}.txt", k);
    write_snapshot(dir / "states" / name, Snapshot{s.metric, s.phi, FieldRole::phi, s.t});
    index.add_row(std::vector<std::string>{std::to_string(k), fmt17(s.t), std::to_string(s.epoch),
                                           fmt17(s.metric.grid.x0), fmt17(s.metric.grid.spacing), name});
  }
  index.write(dir / "states" / "index.csv");
}

RunConfig read_run_config(const fs::path& dir) { return RunConfig::load(dir / "config.json"); }

FlowHistory read_run(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json"))
    throw DomainError(fmt::format("{} is not a complete run directory (no manifest.json)", dir.string()));
  FlowHistory h;
  const json meta = json::parse(read_text(dir / "history.json"));
  h.t_origin = meta.at("t_origin").get<double>();
  h.phi0_min = meta.at("phi0_min").get<double>();
  h.phi0_max = meta.at("phi0_max").get<double>();
  h.phi0_sup = meta.at("phi0_sup").get<double>();
  h.rm_initial = meta.at("rm_initial").get<double>();
  const std::string stop = meta.at("stop_reason").get<std::string>();
  for (auto r : {StopReason::t_max, StopReason::curvature, StopReason::min_warp, StopReason::dt_underflow,
                 StopReason::numeric, StopReason::max_steps})
    if (to_string(r) == stop) h.stop = r;
  h.step_count = meta.at("step_count").get<long>();
  h.regrids = meta.at("regrids").get<int>();
  if (!meta.at("t_est").is_null()) h.t_est = meta.at("t_est").get<double>();
  if (!meta.at("type_one_constant").is_null()) h.type_one_constant = meta.at("type_one_constant").get<double>();

  std::istringstream index(read_text(dir / "states" / "index.csv"));
  std::string line;
  std::getline(index, line);
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 6) throw DomainError("states/index.csv: malformed row " + line);
    Snapshot snap = read_snapshot(dir / "states" / cells[5]);
    FlowState s;
    s.metric = std::move(snap.metric);
    s.metric.grid.x0 = std::stod(cells[3]);
    s.metric.grid.spacing = std::stod(cells[4]);
    s.phi = std::move(snap.field);
    s.t = snap.t;
    s.epoch = std::stoi(cells[2]);
    h.saved.push_back(diagnose(s));
    h.states.push_back(std::move(s));
  }
  if (h.states.empty()) throw DomainError("run directory holds no states");

  std::istringstream diag(read_text(dir / "diagnostics.csv"));
  std::getline(diag, line);
  while (std::getline(diag, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 8) throw DomainError("diagnostics.csv: malformed row " + line);
    Diagnostics d;
    d.t = std::stod(c[0]);
    d.sup_rm = std::stod(c[1]);
    d.sup_gradphi2 = std::stod(c[2]);
    d.min_phi = std::stod(c[3]);
    d.max_phi = std::stod(c[4]);
    d.min_s = std::stod(c[5]);
    d.max_s = std::stod(c[6]);
    d.grid_quality = std::stod(c[7]);
    h.steps.push_back(d);
  }
  return h;
}

void write_manifest(const fs::path& dir, const json& info) {
  // Stages sharing a directory serialize here; each stage's own files are already written.
  const int lock = ::open((dir / ".manifest.lock").c_str(), O_CREAT | O_RDWR, 0644);
  if (lock < 0) throw std::runtime_error("cannot open manifest lock in " + dir.string());
  ::flock(lock, LOCK_EX);
  json m = fs::exists(dir / "manifest.json") ? read_manifest(dir) : json::object();
  merge_into(m, info);
  m["tool"] = "coupled-flow";
  m["version"] = tool_version();
  m["libraries"] = library_versions();
  json files = json::object();
  for (const auto& rel : listed_files(dir)) files[rel] = sha256_file(dir / rel);
  m["files"] = files;
  const fs::path tmp = dir / "manifest.json.tmp";
  write_text(tmp, m.dump(2) + "\n");
  fs::rename(tmp, dir / "manifest.json");
  ::flock(lock, LOCK_UN);
  ::close(lock);
}

json read_manifest(const fs::path& dir) { return json::parse(read_text(dir / "manifest.json")); }

std::vector<std::string> manifest_mismatches(const fs::path& dir) {
  std::vector<std::string> bad;
  const json m = read_manifest(dir);
  const json& files = m.at("files");
  std::set<std::string> listed;
  for (const auto& [rel, hash] : files.items()) {
    listed.insert(rel);
    if (!fs::exists(dir / rel) || sha256_file(dir / rel) != hash.get<std::string>()) bad.push_back(rel);
  }
  for (const auto& rel : listed_files(dir))
    if (!listed.count(rel)) bad.push_back(rel);
  return bad;
}

std::string tool_version() { return "1.0.0"; }

json library_versions() {
  json j;
  j["fmt"] = FMT_VERSION;
  j["nlohmann_json"] = fmt::format("{}.{}.{}", NLOHMANN_JSON_VERSION_MAJOR, NLOHMANN_JSON_VERSION_MINOR,
                                   NLOHMANN_JSON_VERSION_PATCH);
  j["boost"] = BOOST_LIB_VERSION;
  j["tbb"] = fmt::format("{}.{}", TBB_VERSION_MAJOR, TBB_VERSION_MINOR);
  j["openssl"] = OPENSSL_VERSION_TEXT;
  return j;
}

}  // namespace cflow
