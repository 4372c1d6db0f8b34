#include "cflow/report.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cflow {

using nlohmann::json;

namespace {

// JSON has no NaN; non-finite values travel as null.
json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double number(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

}  // namespace

json to_json(const VerificationReport& r) {
  json j;
  j["id"] = r.id;
  j["anchor"] = r.anchor;
  j["status"] = to_string(r.status);
  j["margin"] = number(r.margin);
  json res = json::array();
  for (const auto& x : r.resolutions) res.push_back({{"nodes", x.nodes}, {"value", number(x.value)}});
  j["resolutions"] = res;
  j["notes"] = r.notes;
  if (r.node) j["node"] = *r.node;
  if (r.t) j["t"] = *r.t;
  if (!r.manifest_hash.empty()) j["manifest_hash"] = r.manifest_hash;
  return j;
}

VerificationReport report_from_json(const json& j) {
  VerificationReport r;
  r.id = j.at("id").get<std::string>();
  r.anchor = j.at("anchor").get<std::string>();
  const auto status = j.at("status").get<std::string>();
  if (status == "pass")
    r.status = CheckStatus::pass;
  else if (status == "fail")
    r.status = CheckStatus::fail;
  else if (status == "monitor")
    r.status = CheckStatus::monitor;
  else
    throw DomainError("report: unknown status " + status);
  r.margin = number(j.at("margin"));
  for (const auto& x : j.at("resolutions")) r.resolutions.push_back({x.at("nodes").get<int>(), number(x.at("value"))});
  r.notes = j.at("notes").get<std::string>();
  if (j.contains("node")) r.node = j.at("node").get<int>();
  if (j.contains("t")) r.t = j.at("t").get<double>();
  if (j.contains("manifest_hash")) r.manifest_hash = j.at("manifest_hash").get<std::string>();
  return r;
}

std::string format_reports(std::vector<VerificationReport> reports) {
  std::stable_sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  return arr.dump(2) + "\n";
}

std::vector<VerificationReport> parse_reports(const std::string& text) {
  std::vector<VerificationReport> out;
  for (const auto& j : json::parse(text)) out.push_back(report_from_json(j));
  return out;
}

CheckCounts count_checks(const std::vector<VerificationReport>& reports) {
  CheckCounts c;
  for (const auto& r : reports) {
    if (r.status == CheckStatus::pass) ++c.pass;
    if (r.status == CheckStatus::fail) ++c.fail;
    if (r.status == CheckStatus::monitor) ++c.monitor;
  }
  return c;
}

json to_json(const CheckCounts& c) { return {{"pass", c.pass}, {"fail", c.fail}, {"monitor", c.monitor}}; }

}  // namespace cflow
