#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "mlopt/bench.hpp"
#include "mlopt/gridopf.hpp"
#include "mlopt/neural.hpp"
#include "mlopt/transim.hpp"

namespace fs = std::filesystem;
using namespace mlopt;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kNonOptimal = 3, kIo = 4 };

struct Failure : std::runtime_error {
  Failure(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

const char* kind_name(int code) {
  switch (code) {
    case kUsage: return "usage";
    case kNonOptimal: return "non-optimal";
    case kIo: return "io";
    default: return "error";
  }
}

// One JSON object per line on stderr.
void diagnose(int code, const std::string& message) {
  nlohmann::json j{{"error", kind_name(code)}, {"code", code}, {"message", message}};
  std::cerr << j.dump() << '\n';
}

void warn(const std::string& message) {
  nlohmann::json j{{"warning", message}};
  std::cerr << j.dump() << '\n';
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw Failure(kIo, fmt::format("{} not found: {}", what, path));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure(kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Failure(kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Failure(kIo, "failed writing " + path.string());
}

std::vector<std::size_t> parse_widths(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v <= 0) throw Failure(kUsage, "bad width list '" + text + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw Failure(kUsage, "empty width list");
  return out;
}

GridCase load_case(const std::string& path) {
  require_file(path, "case file");
  try {
    return parse_case(path);
  } catch (const CaseError& e) {
    throw Failure(kIo, e.what());
  }
}

MlpNetwork load_net(const std::string& path) {
  require_file(path, "weight file");
  try {
    return load_weights(path);
  } catch (const NetworkFormatError& e) {
    throw Failure(kIo, e.what());
  }
}

// ---------------------------------------------------------------------------
// simulate-data

struct SimulateArgs {
  std::string case_path;
  std::string out;
  std::size_t n = 110;
  std::uint64_t seed = 1;
  double spread = 0.2;
  double horizon = 30.0;
  double step = 0.01;
  long outage = -1;
  std::size_t threads = 0;
};

int cmd_simulate(const SimulateArgs& a) {
  if (a.n == 0) throw Failure(kUsage, "--n must be positive");
  const GridCase c = load_case(a.case_path);
  TransientConfig cfg;
  cfg.horizon = a.horizon;
  cfg.step = a.step;
  if (a.outage >= 0) {
    cfg.outage = static_cast<std::size_t>(a.outage);
  } else {
    for (const auto& k : c.contingencies) {
      if (!k.generators.empty()) {
        cfg.outage = k.generators.front();
        break;
      }
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw Failure(kUsage, e.what());
  }
  const SampleReport rep = sample_dataset(c, cfg, a.n, a.seed, a.spread, a.threads);
  write_text(a.out, dataset_to_csv(rep.data));
  fmt::print("wrote {} samples to {} (resampled {})\n", rep.data.inputs.rows(), a.out, rep.resampled);
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string history;
  std::string hidden;
  std::string widths;
  TrainConfig cfg;
  std::string activation = "tanh";
};

int cmd_train(TrainArgs a) {
  require_file(a.data, "dataset");
  Dataset d;
  try {
    d = read_dataset_csv(a.data);
  } catch (const std::runtime_error& e) {
    throw Failure(kIo, e.what());
  }
  const auto nin = static_cast<std::size_t>(d.inputs.cols());
  const auto nout = static_cast<std::size_t>(d.targets.cols());
  std::vector<std::size_t> widths;
  if (!a.widths.empty()) {
    widths = parse_widths(a.widths);
    if (widths.size() < 2 || widths.front() != nin || widths.back() != nout) {
      throw Failure(kUsage, fmt::format("widths {} do not match the dataset ({} features, {} targets)",
                                        a.widths, nin, nout));
    }
  } else {
    widths.push_back(nin);
    if (!a.hidden.empty()) {
      for (auto w : parse_widths(a.hidden)) widths.push_back(w);
    }
    widths.push_back(nout);
  }
  try {
    a.cfg.hidden = parse_activation(a.activation);
    a.cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw Failure(kUsage, e.what());
  }
  const TrainResult r = train_adam(d, widths, a.cfg);
  try {
    save_weights(r.network, a.out);
  } catch (const std::runtime_error& e) {
    throw Failure(kIo, e.what());
  }
  const std::string hist = a.history.empty() ? a.out + ".loss.csv" : a.history;
  std::string text = "epoch,mse\n";
  for (std::size_t e = 0; e < r.loss_history.size(); ++e) {
    text += fmt::format("{},{}\n", e + 1, r.loss_history[e]);
  }
  write_text(hist, text);
  const double last = r.loss_history.empty() ? 0.0 : r.loss_history.back();
  fmt::print("{} after {} epochs, final standardized MSE {:.6g}, {} parameters -> {}\n",
             r.converged ? "converged" : "not converged", r.epochs, last,
             r.network.parameter_count(), a.out);
  if (!r.converged) {
    throw Failure(kNonOptimal, fmt::format("training did not converge within {} epochs", a.cfg.max_epochs));
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// solve / sweep

struct SolveArgs {
  std::string case_path;
  std::vector<std::string> nets;
  std::vector<std::string> formulations;
  std::vector<std::string> hessians;
  std::string widen;
  std::uint64_t seed = 0;
  double eta = 59.4;
  double time_limit = 0.0;
  std::string out = "results";
  std::string format = "md";
  bool baseline = true;
  bool verbose = false;
  std::size_t jobs = 1;
};

struct Cell {
  std::optional<std::size_t> net;  // index into the loaded networks
  Formulation formulation = Formulation::GrayBox;
  HessianMode hessian = HessianMode::Exact;
};

struct NamedNet {
  std::string label;
  MlpNetwork net;
};

std::vector<NamedNet> load_nets(const SolveArgs& a) {
  std::vector<NamedNet> nets;
  for (const auto& p : a.nets) nets.push_back({fs::path(p).stem().string(), load_net(p)});
  if (a.widen.empty()) return nets;
  if (nets.size() != 1) throw Failure(kUsage, "--widen needs exactly one --net");
  std::vector<NamedNet> wide;
  const auto& base = nets.front();
  for (auto w : parse_widths(a.widen)) {
    const std::vector<std::size_t> hidden(base.net.depth() - 1, w);
    try {
      wide.push_back({fmt::format("{}-w{}", base.label, w), base.net.widened(hidden, a.seed)});
    } catch (const std::invalid_argument& e) {
      throw Failure(kUsage, e.what());
    }
  }
  return wide;
}

IpmOptions solver_options(const SolveArgs& a, HessianMode h) {
  IpmOptions o;
  o.hessian = h;
  o.max_wall_seconds = a.time_limit;
  if (a.verbose) o.log = &std::cerr;
  return o;
}

nlohmann::json solution_json(const ScopfRun& run) {
  const auto& s = run.record.stats;
  nlohmann::json j;
  j["status"] = status_name(s.status);
  j["message"] = s.message;
  j["objective"] = s.objective;
  j["cost"] = run.solution.cost;
  j["iterations"] = s.iterations;
  j["formulation"] = run.record.formulation;
  j["hessian"] = run.record.hessian;
  j["network"] = run.record.label;
  j["parameters"] = run.record.parameters;
  j["build_seconds"] = run.record.build_seconds;
  j["solve_seconds"] = s.wall_seconds;
  j["pg"] = run.solution.pg;
  j["qg"] = run.solution.qg;
  j["vm"] = run.solution.vm;
  j["va"] = run.solution.va;
  return j;
}

void write_reports(const std::vector<RunRecord>& records, const fs::path& dir, const std::string& format) {
  const bool md = format == "md";
  write_text(dir / (md ? "report.md" : "report.csv"), render_reports(build_reports(records), md));
}

int cmd_solve(const SolveArgs& a) {
  const GridCase c = load_case(a.case_path);
  const auto nets = load_nets(a);
  if (nets.size() > 1) throw Failure(kUsage, "solve takes at most one network; use sweep for several");
  const Formulation f = parse_formulation(a.formulations.front());
  const HessianMode h = parse_hessian_mode(a.hessians.front());
  const MlpNetwork* net = nets.empty() ? nullptr : &nets.front().net;
  const std::string label = nets.empty() ? "--" : nets.front().label;
  const ScopfRun run = run_scopf(c, net, f, a.eta, solver_options(a, h), label);
  const fs::path dir(a.out);
  write_text(dir / "solution.json", solution_json(run).dump(2) + "\n");
  write_text(dir / "stats.csv", stats_to_csv({run.record}));
  const auto& s = run.record.stats;
  fmt::print("{} {} {}: {} objective {:.10g} iterations {} build {} solve {}\n",
             run.record.formulation, run.record.hessian, format_parameters(run.record.parameters),
             status_name(s.status), s.objective, s.iterations, format_duration(run.record.build_seconds),
             format_duration(s.wall_seconds));
  if (s.status != SolveStatus::Optimal) throw Failure(kNonOptimal, s.message);
  return kOk;
}

int cmd_sweep(const SolveArgs& a) {
  const GridCase c = load_case(a.case_path);
  const auto nets = load_nets(a);
  std::vector<Formulation> forms;
  for (const auto& f : a.formulations) forms.push_back(parse_formulation(f));
  std::vector<HessianMode> modes;
  for (const auto& h : a.hessians) modes.push_back(parse_hessian_mode(h));

  std::vector<Cell> cells;
  if (a.baseline) cells.push_back({std::nullopt, Formulation::GrayBox, HessianMode::Exact});
  for (std::size_t k = 0; k < nets.size(); ++k) {
    for (auto f : forms) {
      for (auto h : modes) cells.push_back({k, f, h});
    }
  }
  if (cells.empty()) throw Failure(kUsage, "sweep has no cells");

  std::vector<RunRecord> records(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex print;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const Cell& cell = cells[i];
      const MlpNetwork* net = cell.net ? &nets[*cell.net].net : nullptr;
      const std::string label = cell.net ? nets[*cell.net].label : "--";
      ScopfRun run = run_scopf(c, net, cell.formulation, a.eta, solver_options(a, cell.hessian), label);
      {
        std::lock_guard lock(print);
        const auto& s = run.record.stats;
        fmt::print("[{}/{}] {} {} {}: {} objective {:.10g} iterations {} solve {}\n", i + 1, cells.size(),
                   run.record.formulation, run.record.hessian, format_parameters(run.record.parameters),
                   status_name(s.status), s.objective, s.iterations, format_duration(s.wall_seconds));
      }
      records[i] = std::move(run.record);
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(a.jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  const fs::path dir(a.out);
  write_text(dir / "stats.csv", stats_to_csv(records));
  write_reports(records, dir, a.format);
  std::size_t failed = 0;
  for (const auto& r : records) failed += r.stats.status != SolveStatus::Optimal;
  if (failed) throw Failure(kNonOptimal, fmt::format("{} of {} cells did not reach optimal", failed, records.size()));
  return kOk;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  std::vector<std::string> files;
  std::string format = "md";
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  std::vector<RunRecord> records;
  for (const auto& f : a.files) {
    require_file(f, "stats file");
    std::vector<std::string> warnings;
    std::vector<RunRecord> part;
    try {
      part = parse_stats_csv(read_text(f), &warnings);
    } catch (const std::invalid_argument& e) {
      throw Failure(kIo, fmt::format("{}: {}", f, e.what()));
    }
    for (const auto& w : warnings) warn(fmt::format("{}: skipped {}", f, w));
    records.insert(records.end(), part.begin(), part.end());
  }
  const std::string text = render_reports(build_reports(records), a.format == "md");
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
  }
  return kOk;
}

void add_solve_options(CLI::App* cmd, SolveArgs& a, bool sweep) {
  cmd->add_option("--case", a.case_path, "Case file (.json or .m)")->required();
  cmd->add_option("--eta", a.eta, "Minimum-frequency threshold (Hz)");
  cmd->add_option("--out", a.out, "Output directory");
  cmd->add_option("--widen", a.widen, "Widen every hidden layer of the network to these widths (comma list)");
  cmd->add_option("--seed", a.seed, "Seed for widened units");
  cmd->add_option("--time-limit", a.time_limit, "Wall-clock limit per solve (s), 0 = none");
  cmd->add_flag("--verbose", a.verbose, "Iteration log on stderr");
  const std::vector<std::string> forms{"full", "reduced", "graybox"};
  const std::vector<std::string> modes{"exact", "lbfgs"};
  if (sweep) {
    a.formulations = forms;
    a.hessians = modes;
    cmd->add_option("--net", a.nets, "Weight files")->expected(0, -1);
    cmd->add_option("--formulation", a.formulations, "Formulations")->check(CLI::IsMember(forms));
    cmd->add_option("--hessian", a.hessians, "Hessian modes")->check(CLI::IsMember(modes));
    cmd->add_option("--format", a.format, "Report format")->check(CLI::IsMember({"csv", "md"}));
    cmd->add_option("--jobs", a.jobs, "Cells solved concurrently");
    cmd->add_flag("!--no-baseline", a.baseline, "Skip the no-surrogate row");
  } else {
    a.formulations = {"graybox"};
    a.hessians = {"exact"};
    cmd->add_option("--net", a.nets, "Weight file; omit for the no-surrogate baseline")->expected(0, 1);
    cmd->add_option("--formulation", a.formulations, "Formulation")
        ->expected(1)
        ->check(CLI::IsMember(forms));
    cmd->add_option("--hessian", a.hessians, "Hessian mode")->expected(1)->check(CLI::IsMember(modes));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-network-constrained SCOPF benchmark pipeline"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate-data", "Sample operating points and simulate the outage");
  c_sim->add_option("--case", sim.case_path, "Case file")->required();
  c_sim->add_option("--out", sim.out, "Dataset CSV")->required();
  c_sim->add_option("--n", sim.n, "Number of samples");
  c_sim->add_option("--seed", sim.seed, "Sampling seed");
  c_sim->add_option("--spread", sim.spread, "Relative sampling half-width");
  c_sim->add_option("--horizon", sim.horizon, "Simulated time (s)");
  c_sim->add_option("--step", sim.step, "Integration step (s)");
  c_sim->add_option("--outage", sim.outage, "Generator index to trip (default: first contingency)");
  c_sim->add_option("--threads", sim.threads, "Simulation threads, 0 = hardware");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a surrogate with Adam");
  c_train->add_option("--data", tr.data, "Dataset CSV")->required();
  c_train->add_option("--out", tr.out, "Weight file (.json or binary)")->required();
  c_train->add_option("--history", tr.history, "Loss-history CSV (default <out>.loss.csv)");
  auto* o_hidden = c_train->add_option("--hidden", tr.hidden, "Hidden widths, e.g. 64,64");
  auto* o_widths = c_train->add_option("--widths", tr.widths, "All layer widths, e.g. 12,64,64,5");
  o_hidden->excludes(o_widths);
  c_train->add_option("--seed", tr.cfg.seed, "Initialization and shuffling seed");
  c_train->add_option("--lr", tr.cfg.learning_rate, "Adam learning rate");
  c_train->add_option("--batch", tr.cfg.batch_size, "Minibatch size, 0 = full batch");
  c_train->add_option("--max-epochs", tr.cfg.max_epochs, "Epoch budget");
  c_train->add_option("--threshold", tr.cfg.loss_threshold, "Standardized MSE threshold");
  c_train->add_option("--consecutive", tr.cfg.consecutive_epochs, "Epochs below threshold to stop");
  c_train->add_option("--activation", tr.activation, "Hidden activation")
      ->check(CLI::IsMember({"tanh", "sigmoid"}));

  SolveArgs so;
  auto* c_solve = app.add_subcommand("solve", "Solve one SCOPF with an optional surrogate");
  add_solve_options(c_solve, so, false);

  SolveArgs sw;
  auto* c_sweep = app.add_subcommand("sweep", "Solve the network x formulation x Hessian matrix");
  add_solve_options(c_sweep, sw, true);

  ReportArgs rep;
  auto* c_report = app.add_subcommand("report", "Render structure, time and breakdown tables");
  c_report->add_option("files", rep.files, "Stats CSV files")->required();
  c_report->add_option("--format", rep.format, "Output format")->check(CLI::IsMember({"csv", "md"}));
  c_report->add_option("--out", rep.out, "Output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    diagnose(kUsage, e.what());
    return kUsage;
  }

  try {
    if (c_sim->parsed()) return cmd_simulate(sim);
    if (c_train->parsed()) return cmd_train(tr);
    if (c_solve->parsed()) return cmd_solve(so);
    if (c_sweep->parsed()) return cmd_sweep(sw);
    if (c_report->parsed()) return cmd_report(rep);
  } catch (const Failure& e) {
    diagnose(e.code, e.what());
    return e.code;
  } catch (const fs::filesystem_error& e) {
    diagnose(kIo, e.what());
    return kIo;
  } catch (const std::invalid_argument& e) {
    diagnose(kUsage, e.what());
    return kUsage;
  } catch (const std::exception& e) {
    diagnose(kIo, e.what());
    return kIo;
  }
  return kUsage;
}
