#include "cflow/snapshot.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

namespace cflow {

std::string fmt17(double v) { return fmt::format("{:.17g}", v); }

std::string format_snapshot(const Snapshot& snap) {
  const Grid& g = snap.metric.grid;
  std::string out = fmt::format("# n={} m={} topology={} nodes={} t={}", g.dim(), g.fiber_dim,
                                to_string(g.topology), g.nodes, fmt17(snap.t));
  if (snap.role != FieldRole::phi) out += " role=" + to_string(snap.role);
  out += '\n';
  for (int i = 0; i < g.nodes; ++i)
    out += fmt::format("{} {} {} {}\n", fmt17(g.x(i)), fmt17(snap.metric.a[i]),
                       fmt17(snap.metric.w[i]), fmt17(snap.field[i]));
  return out;
}

Snapshot parse_snapshot(const std::string& text) {
  std::istringstream in(text);
  std::string header;
  std::getline(in, header);
  if (header.size() < 2 || header[0] != '#') throw DomainError("snapshot: missing header line");
  std::map<std::string, std::string> kv;
  std::istringstream hs(header.substr(1));
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq != std::string::npos) kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  for (const char* key : {"n", "m", "topology", "nodes", "t"})
    if (!kv.count(key)) throw DomainError(fmt::format("snapshot: header lacks '{}'", key));

  Snapshot snap;
  const int nodes = std::stoi(kv["nodes"]);
  const int m = std::stoi(kv["m"]);
  if (std::stoi(kv["n"]) != m + 1) throw DomainError("snapshot: n != m + 1");
  snap.t = std::stod(kv["t"]);
  snap.role = kv.count("role") ? role_from_string(kv["role"]) : FieldRole::phi;
  std::vector<double> x(nodes);
  snap.metric.a.resize(nodes);
  snap.metric.w.resize(nodes);
  snap.field.resize(nodes);
  for (int i = 0; i < nodes; ++i) {
    if (!(in >> x[i] >> snap.metric.a[i] >> snap.metric.w[i] >> snap.field[i]))
      throw DomainError(fmt::format("snapshot: row {} malformed", i));
  }
  Grid g;
  g.topology = topology_from_string(kv["topology"]);
  g.nodes = nodes;
  g.fiber_dim = m;
  g.x0 = x.front();
  g.spacing = (x.back() - x.front()) / (nodes - 1);
  // A flat circle fiber only occurs with m = 1 on periodic grids; otherwise round.
  g.fiber_curvature = (g.periodic() && m == 1 && !kv.count("fiber_curvature"))
                          ? 0
                          : (kv.count("fiber_curvature") ? std::stoi(kv["fiber_curvature"]) : 1);
  g.validate();
  snap.metric.grid = g;
  return snap;
}

void write_snapshot(const std::filesystem::path& path, const Snapshot& snap) {
  write_text(path, format_snapshot(snap));
}

Snapshot read_snapshot(const std::filesystem::path& path) { return parse_snapshot(read_text(path)); }

void CsvTable::add_row(const std::vector<double>& row) {
  std::vector<std::string> cells;
  cells.reserve(row.size());
  for (double v : row) cells.push_back(fmt17(v));
  rows_.push_back(std::move(cells));
}

void CsvTable::add_row(const std::vector<std::string>& cells) { rows_.push_back(cells); }

std::string CsvTable::str() const {
  std::string out;
  auto join = [&](const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  join(header_);
  for (const auto& r : rows_) join(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const { write_text(path, str()); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace cflow
