#pragma once

// Report files: one JSON object per line for each EvalReport, a per-cell CSV
// table and a mean/std summary per (attack, eps_d).

#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "plab/config.hpp"

namespace plab {

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        out.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.emplace_back();
    } else if (ch != '\r') {
      out.back() += ch;
    }
  }
  return out;
}

}  // namespace detail

inline nlohmann::ordered_json report_record(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["attack"] = r.attack;
  j["eps_d"] = r.eps_d;
  j["seed"] = r.seed;
  j["clean_acc"] = r.clean_acc;
  j["poisoned_acc"] = r.poisoned_acc;
  j["drop"] = r.drop;
  j["reach_gap"] = r.reach_gap ? nlohmann::ordered_json(*r.reach_gap) : nlohmann::ordered_json();
  j["poison_linf"] = r.poison_linf;
  j["n_poison"] = r.n_poison;
  j["n_removed_by_defense"] = r.n_removed_by_defense;
  j["error"] = r.ok() ? nlohmann::ordered_json() : nlohmann::ordered_json(r.error);
  return j;
}

inline EvalReport report_from_record(const nlohmann::json& j) {
  EvalReport r;
  r.attack = j.at("attack").get<std::string>();
  r.eps_d = j.at("eps_d").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.clean_acc = j.at("clean_acc").get<double>();
  r.poisoned_acc = j.at("poisoned_acc").get<double>();
  r.drop = j.at("drop").get<double>();
  if (!j.at("reach_gap").is_null()) r.reach_gap = j.at("reach_gap").get<double>();
  r.poison_linf = j.at("poison_linf").get<double>();
  r.n_poison = j.at("n_poison").get<std::size_t>();
  r.n_removed_by_defense = j.at("n_removed_by_defense").get<std::size_t>();
  if (!j.at("error").is_null()) r.error = j.at("error").get<std::string>();
  return r;
}

inline std::string reports_jsonl(const std::vector<EvalReport>& reports) {
  std::string out;
  for (const auto& r : reports) out += report_record(r).dump() + "\n";
  return out;
}

inline std::vector<EvalReport> parse_reports_jsonl(std::string_view text) {
  std::vector<EvalReport> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(report_from_record(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatError::Kind::malformed,
                        "report line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline constexpr std::string_view kReportCsvHeader =
    "attack,eps_d,seed,clean_acc,poisoned_acc,drop,reach_gap,poison_linf";

// Failed cells keep their key columns and leave the numbers empty.
inline std::string reports_csv(const std::vector<EvalReport>& reports) {
  using detail::g17;
  std::string out(kReportCsvHeader);
  out += "\n";
  for (const auto& r : reports) {
    out += detail::csv_field(r.attack) + "," + g17(r.eps_d) + "," + std::to_string(r.seed) + ",";
    if (r.ok()) {
      out += g17(r.clean_acc) + "," + g17(r.poisoned_acc) + "," + g17(r.drop) + "," +
             (r.reach_gap ? g17(*r.reach_gap) : "") + "," + g17(r.poison_linf);
    } else {
      out += ",,,,";
    }
    out += "\n";
  }
  return out;
}

struct CsvRow {
  std::string attack;
  double eps_d = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::optional<double>> values;  // clean_acc .. poison_linf
};

inline std::vector<CsvRow> parse_reports_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kReportCsvHeader) {
    throw FormatError(FormatError::Kind::malformed, "report CSV: unexpected header");
  }
  std::vector<CsvRow> out;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 8) throw FormatError(FormatError::Kind::malformed, "report CSV: bad row '" + line + "'");
    CsvRow row{f[0], std::stod(f[1]), std::stoull(f[2]), {}};
    for (std::size_t i = 3; i < 8; ++i) {
      row.values.push_back(f[i].empty() ? std::nullopt : std::optional{std::stod(f[i])});
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline std::string summary_csv(const std::vector<CellSummary>& cells) {
  using detail::g17;
  std::string out =
      "attack,eps_d,runs,failed,mean_clean_acc,mean_poisoned_acc,std_poisoned_acc,mean_drop,"
      "std_drop,mean_reach_gap,std_reach_gap,mean_poison_linf,std_poison_linf\n";
  auto opt = [](const Stat& s, double v) { return s.count ? g17(v) : std::string(); };
  for (const auto& c : cells) {
    out += detail::csv_field(c.attack) + "," + g17(c.eps_d) + "," + std::to_string(c.runs) + "," +
           std::to_string(c.failed) + "," + opt(c.clean_acc, c.clean_acc.mean) + "," +
           opt(c.poisoned_acc, c.poisoned_acc.mean) + "," + opt(c.poisoned_acc, c.poisoned_acc.std) +
           "," + opt(c.drop, c.drop.mean) + "," + opt(c.drop, c.drop.std) + "," +
           opt(c.reach_gap, c.reach_gap.mean) + "," + opt(c.reach_gap, c.reach_gap.std) + "," +
           opt(c.poison_linf, c.poison_linf.mean) + "," + opt(c.poison_linf, c.poison_linf.std) +
           "\n";
  }
  return out;
}

struct ReportPaths {
  std::string jsonl;
  std::string csv;
  std::string summary;  // optional
};

inline void emit_report(const std::vector<EvalReport>& reports, const ReportPaths& paths) {
  if (reports.empty()) throw Error("emit_report: no reports to write");
  if (!paths.jsonl.empty()) detail::write_file(paths.jsonl, reports_jsonl(reports));
  if (!paths.csv.empty()) detail::write_file(paths.csv, reports_csv(reports));
  if (!paths.summary.empty()) detail::write_file(paths.summary, summary_csv(summarize(reports)));
}

}  // namespace plab
