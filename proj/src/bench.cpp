#include "mlopt/bench.hpp"

#include <sys/utsname.h>

#include <chrono>
#include <charconv>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

namespace mlopt {

namespace {

const TableRow kColumns = {
    "label",         "parameters",     "formulation",    "hessian",        "platform",
    "status",        "objective",      "iterations",     "build_seconds",  "solve_seconds",
    "function_seconds", "jacobian_seconds", "hessian_seconds", "solver_seconds", "other_seconds",
    "variables",     "constraints",    "jacobian_nnz",   "hessian_nnz",    "restorations",
    "primal_infeasibility", "dual_infeasibility", "message"};

SolveStatus parse_status(const std::string& s) {
  for (auto st : {SolveStatus::Optimal, SolveStatus::MaxIter, SolveStatus::Diverged,
                  SolveStatus::FactorizationFailure}) {
    if (s == status_name(st)) return st;
  }
  throw std::invalid_argument("unknown status '" + s + "'");
}

double to_double(const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw std::invalid_argument("bad number '" + s + "'");
  }
  return v;
}

std::size_t to_size(const std::string& s) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw std::invalid_argument("bad count '" + s + "'");
  }
  return v;
}

std::string formulation_display(const std::string& f) {
  if (f == "none") return "No surrogate";
  return formulation_label(parse_formulation(f));
}

std::string hessian_display(const std::string& h) { return h == "lbfgs" ? "Approx." : "Exact"; }

}  // namespace

ScopfRun run_scopf(const GridCase& c, const MlpNetwork* net, Formulation f, double eta,
                   const IpmOptions& options, const std::string& label) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  ScopfModel s = build_scopf(c, c.contingencies);
  if (net) attach_stability(s, *net, f, eta, options.hessian == HessianMode::Exact);
  s.model.seal();
  const double build = std::chrono::duration<double>(clock::now() - t0).count();

  ScopfRun run;
  run.record.label = net ? label : "--";
  run.record.parameters = net ? net->parameter_count() : 0;
  run.record.formulation = net ? formulation_name(f) : "none";
  run.record.hessian = hessian_mode_name(options.hessian);
  run.record.platform = platform_descriptor();
  run.record.build_seconds = build;
  run.record.structure = structure_report(s.model);
  ScopfResult r = solve_scopf(s, options);
  run.record.stats = r.ipm.stats;
  run.solution = std::move(r.solution);
  return run;
}

std::string platform_descriptor() {
  utsname u{};
  const std::string machine = uname(&u) == 0 ? u.machine : "unknown";
  const unsigned n = std::thread::hardware_concurrency();
  return fmt::format("CPU ({}, {} thread{})", machine, n, n == 1 ? "" : "s");
}

TableRow stats_csv_header() { return kColumns; }

TableRow stats_csv_fields(const RunRecord& r) {
  const auto& s = r.stats;
  return {r.label,
          std::to_string(r.parameters),
          r.formulation,
          r.hessian,
          r.platform,
          status_name(s.status),
          fmt::format("{}", s.objective),
          std::to_string(s.iterations),
          fmt::format("{}", r.build_seconds),
          fmt::format("{}", s.wall_seconds),
          fmt::format("{}", s.seconds[kFunction]),
          fmt::format("{}", s.seconds[kJacobian]),
          fmt::format("{}", s.seconds[kHessian]),
          fmt::format("{}", s.seconds[kSolver]),
          fmt::format("{}", s.seconds[kOther]),
          std::to_string(r.structure.variables),
          std::to_string(r.structure.constraints),
          std::to_string(r.structure.jacobian_nnz),
          std::to_string(r.structure.hessian_nnz),
          std::to_string(s.restorations),
          fmt::format("{}", s.primal_infeasibility),
          fmt::format("{}", s.dual_infeasibility),
          s.message};
}

std::string stats_to_csv(const std::vector<RunRecord>& records) {
  std::vector<TableRow> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back(stats_csv_fields(r));
  return render_csv(kColumns, rows);
}

std::vector<RunRecord> parse_stats_csv(const std::string& text, std::vector<std::string>* warnings) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || parse_csv_line(line) != kColumns) {
    throw std::invalid_argument("missing or unknown stats header");
  }
  std::vector<RunRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const TableRow f = parse_csv_line(line);
      if (f.size() != kColumns.size()) {
        throw std::invalid_argument(fmt::format("{} fields, expected {}", f.size(), kColumns.size()));
      }
      RunRecord r;
      r.label = f[0];
      r.parameters = to_size(f[1]);
      r.formulation = f[2];
      if (r.formulation != "none") parse_formulation(r.formulation);
      r.hessian = hessian_mode_name(parse_hessian_mode(f[3]));
      r.platform = f[4];
      auto& s = r.stats;
      s.status = parse_status(f[5]);
      s.objective = to_double(f[6]);
      s.iterations = to_size(f[7]);
      r.build_seconds = to_double(f[8]);
      s.wall_seconds = to_double(f[9]);
      for (std::size_t k = 0; k < kTimerCount; ++k) s.seconds[k] = to_double(f[10 + k]);
      r.structure.variables = to_size(f[15]);
      r.structure.constraints = to_size(f[16]);
      r.structure.jacobian_nnz = to_size(f[17]);
      r.structure.hessian_nnz = to_size(f[18]);
      s.restorations = to_size(f[19]);
      s.primal_infeasibility = to_double(f[20]);
      s.dual_infeasibility = to_double(f[21]);
      s.message = f[22];
      out.push_back(std::move(r));
    } catch (const std::invalid_argument& e) {
      if (warnings) warnings->push_back(fmt::format("line {}: {}", lineno, e.what()));
    }
  }
  return out;
}

std::string format_parameters(std::size_t n) {
  if (n == 0) return "--";
  const auto v = static_cast<double>(n);
  if (n < 1000) return std::to_string(n);
  if (v < 1e6) return fmt::format("{:.0f}k", v / 1e3);
  if (v < 1e9) return fmt::format("{:.0f}M", v / 1e6);
  return fmt::format("{:.0f}G", v / 1e9);
}

std::string format_duration(double s) {
  if (s < 1.0) {
    const double ms = s * 1e3;
    return ms < 10.0 ? fmt::format("{:.1f} ms", ms) : fmt::format("{:.0f} ms", ms);
  }
  return s < 10.0 ? fmt::format("{:.1f} s", s) : fmt::format("{:.0f} s", s);
}

std::string format_percent(double p) {
  if (p < 0.1) return "<0.1";
  if (p > 99.0 && p < 100.0) return "99+";
  return p < 10.0 ? fmt::format("{:.1f}", p) : fmt::format("{:.0f}", p);
}

std::vector<ReportTable> build_reports(const std::vector<RunRecord>& records) {
  ReportTable structure{"Numbers of variables, constraints, and nonzeros",
                        {"Parameters", "Formulation", "N. Variables", "N. Constraints",
                         "Jacobian NNZ", "Hessian NNZ"},
                        {}};
  ReportTable times{"Solve times",
                    {"Parameters", "Formulation", "Hessian", "Platform", "Build time", "Solve time",
                     "Iterations", "Time/iter."},
                    {}};
  ReportTable breakdown{"Solve time breakdown (percent of solve time)",
                        {"Formulation", "Parameters", "Hessian", "Platform", "Solve time",
                         "Function", "Jacobian", "Hessian", "Solver", "Other"},
                        {}};
  for (const auto& r : records) {
    const auto& s = r.stats;
    const std::string params = format_parameters(r.parameters);
    const std::string form = formulation_display(r.formulation);
    const std::string hess = hessian_display(r.hessian);
    structure.rows.push_back({params, form, std::to_string(r.structure.variables),
                              std::to_string(r.structure.constraints),
                              std::to_string(r.structure.jacobian_nnz),
                              std::to_string(r.structure.hessian_nnz)});
    const bool ok = s.status == SolveStatus::Optimal;
    times.rows.push_back({params, form, hess, r.platform, format_duration(r.build_seconds),
                          ok ? format_duration(s.wall_seconds) : std::string(status_name(s.status)),
                          std::to_string(s.iterations), format_duration(s.time_per_iteration())});
    TableRow b{form, params, hess, r.platform, format_duration(s.wall_seconds)};
    const auto pct = s.percentages();
    for (std::size_t k = 0; k < kTimerCount; ++k) {
      if (k == kHessian && r.hessian == "lbfgs") {
        b.push_back("--");
      } else {
        b.push_back(format_percent(pct[k]));
      }
    }
    breakdown.rows.push_back(std::move(b));
  }
  return {structure, times, breakdown};
}

std::string render_reports(const std::vector<ReportTable>& tables, bool markdown) {
  std::string out;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const auto& t = tables[i];
    if (i) out += '\n';
    if (markdown) {
      out += "## " + t.title + "\n\n" + render_markdown(t.header, t.rows);
    } else {
      out += "# " + t.title + "\n" + render_csv(t.header, t.rows);
    }
  }
  return out;
}

}  // namespace mlopt
