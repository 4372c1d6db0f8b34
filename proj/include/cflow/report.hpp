// report.json: the machine-readable list of verification results.
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cflow/verify.hpp"

namespace cflow {

nlohmann::json to_json(const VerificationReport& r);
VerificationReport report_from_json(const nlohmann::json& j);

// Entries sorted by id, so output order does not depend on evaluation order.
std::string format_reports(std::vector<VerificationReport> reports);
std::vector<VerificationReport> parse_reports(const std::string& text);

struct CheckCounts {
  int pass = 0, fail = 0, monitor = 0;
};
CheckCounts count_checks(const std::vector<VerificationReport>& reports);
nlohmann::json to_json(const CheckCounts& c);

}  // namespace cflow
