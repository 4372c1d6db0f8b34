// Columnar text snapshots of metric + one field, and 17-digit CSV helpers.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cflow/geometry.hpp"

namespace cflow {

struct Snapshot {
  WarpedMetric metric;
  std::vector<double> field;  // phi unless role says otherwise
  FieldRole role = FieldRole::phi;
  double t = 0.0;
};

// Header: "# n=<dim> m=<fiber_dim> topology=<...> nodes=<N> t=<time>", rows "x a w phi".
std::string format_snapshot(const Snapshot& snap);
Snapshot parse_snapshot(const std::string& text);
void write_snapshot(const std::filesystem::path& path, const Snapshot& snap);
Snapshot read_snapshot(const std::filesystem::path& path);

std::string fmt17(double v);

// Minimal CSV table with a header row; numbers rendered with 17 significant digits.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}
  void add_row(const std::vector<double>& row);
  void add_row(const std::vector<std::string>& cells);
  std::string str() const;
  void write(const std::filesystem::path& path) const;
  size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Whole-file helpers used by the run directory writer.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace cflow
