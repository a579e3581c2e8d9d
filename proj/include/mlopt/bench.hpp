#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mlopt/gridopf.hpp"
#include "mlopt/ipm.hpp"
#include "mlopt/nlp.hpp"
#include "mlopt/table.hpp"

namespace mlopt {

/// One solve of the benchmark matrix, as written to a stats file.
struct RunRecord {
  std::string label = "--";      // network name, "--" without a surrogate
  std::size_t parameters = 0;    // 0 without a surrogate
  std::string formulation = "none";  // none, full, reduced, graybox
  std::string hessian = "exact";     // exact, lbfgs
  std::string platform;
  double build_seconds = 0.0;
  StructureReport structure;
  SolveStats stats;
};

struct ScopfRun {
  RunRecord record;
  ScopfSolution solution;
};

/// Builds the SCOPF over the case's contingencies, attaches `net` when given,
/// and solves. Build time covers model construction, embedding and sealing.
ScopfRun run_scopf(const GridCase& c, const MlpNetwork* net, Formulation f, double eta,
                   const IpmOptions& options, const std::string& label = "--");

/// Free-text host descriptor for the Platform column.
std::string platform_descriptor();

TableRow stats_csv_header();
TableRow stats_csv_fields(const RunRecord& r);
/// Header plus one line per record.
std::string stats_to_csv(const std::vector<RunRecord>& records);

/// Parses stats files. Lines that do not parse are skipped and described in
/// `warnings`; a missing or unknown header throws std::invalid_argument.
std::vector<RunRecord> parse_stats_csv(const std::string& text,
                                       std::vector<std::string>* warnings = nullptr);

/// "--", "950", "7k", "102k", "1M".
std::string format_parameters(std::size_t n);
/// "45 ms", "0.4 s", "699 s".
std::string format_duration(double seconds);
std::string format_percent(double p);

struct ReportTable {
  std::string title;
  TableRow header;
  std::vector<TableRow> rows;
};

/// Structure, solve times and breakdown tables, one row per record.
std::vector<ReportTable> build_reports(const std::vector<RunRecord>& records);
std::string render_reports(const std::vector<ReportTable>& tables, bool markdown);

}  // namespace mlopt
