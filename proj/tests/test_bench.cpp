#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <gtest/gtest.h>

#include "mlopt/bench.hpp"

using namespace mlopt;
namespace fs = std::filesystem;

namespace {

const std::string kCase = std::string(MLOPT_DATA_DIR) + "/cases/case5.json";
const std::string kNet = std::string(MLOPT_DATA_DIR) + "/nets/case5_32x32.json";
const std::string kData = std::string(MLOPT_DATA_DIR) + "/datasets/case5_110.csv";

RunRecord sample_record() {
  RunRecord r;
  r.label = "net, \"quoted\"";
  r.parameters = 7055;
  r.formulation = "graybox";
  r.hessian = "exact";
  r.platform = "CPU (x86_64, 8 threads)";
  r.build_seconds = 0.1 + 0.2;
  r.structure = {29, 54, 256, 81, {}};
  auto& s = r.stats;
  s.status = SolveStatus::Optimal;
  s.message = "KKT error below tolerance";
  s.objective = 9783.317790375575;
  s.iterations = 12;
  s.wall_seconds = 1.0;
  s.seconds = {0.1, 0.2, 0.3, 0.35, 0.05};
  s.restorations = 1;
  s.primal_infeasibility = 1e-12;
  s.dual_infeasibility = 3e-11;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           fmt::format("mlopt-cli-{}-{}", ::testing::UnitTest::GetInstance()->current_test_info()->name(),
                       ::getpid());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Exit status of benchcli with `args`; output goes to files in the test directory.
  int run(const std::string& args) {
    const std::string cmd = fmt::format("{} {} > {} 2> {}", BENCHCLI_PATH, args, (dir_ / "stdout").string(),
                                        (dir_ / "stderr").string());
    const int raw = std::system(cmd.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  }
  std::string out() const { return slurp(dir_ / "stdout"); }
  std::string err() const { return slurp(dir_ / "stderr"); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST(Format, Parameters) {
  EXPECT_EQ(format_parameters(0), "--");
  EXPECT_EQ(format_parameters(950), "950");
  EXPECT_EQ(format_parameters(7055), "7k");
  EXPECT_EQ(format_parameters(101995), "102k");
  EXPECT_EQ(format_parameters(1008935), "1M");
}

TEST(Format, Durations) {
  EXPECT_EQ(format_duration(0.045), "45 ms");
  EXPECT_EQ(format_duration(0.0021), "2.1 ms");
  EXPECT_EQ(format_duration(0.4), "400 ms");
  EXPECT_EQ(format_duration(2.04), "2.0 s");
  EXPECT_EQ(format_duration(699.2), "699 s");
}

TEST(Format, Percentages) {
  EXPECT_EQ(format_percent(0.05), "<0.1");
  EXPECT_EQ(format_percent(0.4), "0.4");
  EXPECT_EQ(format_percent(42.3), "42");
  EXPECT_EQ(format_percent(99.6), "99+");
  EXPECT_EQ(format_percent(100.0), "100");
}

TEST(Stats, CsvRoundTripIsExact) {
  const auto r = sample_record();
  std::vector<std::string> warnings;
  const auto back = parse_stats_csv(stats_to_csv({r, r}), &warnings);
  EXPECT_TRUE(warnings.empty());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(stats_to_csv(back), stats_to_csv({r, r}));
  EXPECT_EQ(back[0].label, r.label);
  EXPECT_EQ(back[0].build_seconds, r.build_seconds);
  EXPECT_EQ(back[0].stats.objective, r.stats.objective);
  EXPECT_EQ(back[0].stats.seconds, r.stats.seconds);
}

TEST(Stats, MalformedRowsAreSkippedWithWarning) {
  std::string text = stats_to_csv({sample_record()});
  text += "x,1,graybox\n";
  text += stats_to_csv({sample_record()}).substr(text.find('\n') + 1);
  std::string bad = stats_to_csv({sample_record()}).substr(text.find('\n') + 1);
  bad.replace(bad.find("optimal"), 7, "happy");
  text += bad;
  std::vector<std::string> warnings;
  const auto rows = parse_stats_csv(text, &warnings);
  EXPECT_EQ(rows.size(), 2u);
  ASSERT_EQ(warnings.size(), 2u);
  EXPECT_NE(warnings[0].find("line 3"), std::string::npos);
  EXPECT_NE(warnings[1].find("status"), std::string::npos);
}

TEST(Stats, UnknownHeaderThrows) {
  EXPECT_THROW(parse_stats_csv("a,b,c\n1,2,3\n"), std::invalid_argument);
  EXPECT_THROW(parse_stats_csv(""), std::invalid_argument);
}

TEST(Report, ColumnSets) {
  const auto tables = build_reports({sample_record()});
  ASSERT_EQ(tables.size(), 3u);
  EXPECT_EQ(tables[0].header, (TableRow{"Parameters", "Formulation", "N. Variables", "N. Constraints",
                                        "Jacobian NNZ", "Hessian NNZ"}));
  EXPECT_EQ(tables[1].header, (TableRow{"Parameters", "Formulation", "Hessian", "Platform", "Build time",
                                        "Solve time", "Iterations", "Time/iter."}));
  EXPECT_EQ(tables[2].header, (TableRow{"Formulation", "Parameters", "Hessian", "Platform", "Solve time",
                                        "Function", "Jacobian", "Hessian", "Solver", "Other"}));
  for (const auto& t : tables) EXPECT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(tables[1].rows[0], (TableRow{"7k", "Gray-box", "Exact", "CPU (x86_64, 8 threads)", "300 ms",
                                         "1.0 s", "12", "83 ms"}));
  EXPECT_EQ(tables[2].rows[0], (TableRow{"Gray-box", "7k", "Exact", "CPU (x86_64, 8 threads)", "1.0 s", "10",
                                         "20", "30", "35", "5.0"}));
}

TEST(Report, LbfgsHessianShareIsDashed) {
  auto r = sample_record();
  r.hessian = "lbfgs";
  r.stats.seconds[kHessian] = 0.0;
  const auto tables = build_reports({r});
  EXPECT_EQ(tables[1].rows[0][2], "Approx.");
  EXPECT_EQ(tables[2].rows[0][7], "--");
}

TEST(Report, BaselineRowLabels) {
  RunRecord r;
  const auto tables = build_reports({r});
  EXPECT_EQ(tables[0].rows[0][0], "--");
  EXPECT_EQ(tables[0].rows[0][1], "No surrogate");
}

TEST(Report, RendersBothFormats) {
  const auto tables = build_reports({sample_record()});
  const auto md = render_reports(tables, true);
  const auto csv = render_reports(tables, false);
  EXPECT_NE(md.find("| Parameters"), std::string::npos);
  EXPECT_NE(csv.find("Parameters,Formulation,N. Variables"), std::string::npos);
}

TEST(RunScopf, BaselineIsOptimal) {
  const auto c = parse_case(kCase);
  const auto run = run_scopf(c, nullptr, Formulation::GrayBox, 59.4, {});
  EXPECT_EQ(run.record.stats.status, SolveStatus::Optimal);
  EXPECT_EQ(run.record.formulation, "none");
  EXPECT_EQ(run.record.parameters, 0u);
  EXPECT_GT(run.record.structure.variables, 0u);
}

TEST(RunScopf, GrayBoxLbfgsMatchesFullSpaceExact) {
  const auto c = parse_case(kCase);
  const auto net = load_weights(kNet);
  IpmOptions lb;
  lb.hessian = HessianMode::Lbfgs;
  const auto a = run_scopf(c, &net, Formulation::GrayBox, 59.4, lb);
  const auto b = run_scopf(c, &net, Formulation::FullSpace, 59.4, {});
  ASSERT_EQ(a.record.stats.status, SolveStatus::Optimal);
  ASSERT_EQ(b.record.stats.status, SolveStatus::Optimal);
  EXPECT_NEAR(a.record.stats.objective, b.record.stats.objective, 1e-5 * b.record.stats.objective);
  EXPECT_EQ(a.record.hessian, "lbfgs");
  EXPECT_EQ(a.record.parameters, net.parameter_count());
}

TEST(RunScopf, TimersSumToWallClock) {
  const auto c = parse_case(kCase);
  const auto net = load_weights(kNet);
  for (auto f : {Formulation::FullSpace, Formulation::ReducedSpace, Formulation::GrayBox}) {
    const auto run = run_scopf(c, &net, f, 59.4, {});
    double sum = 0.0;
    for (double s : run.record.stats.seconds) sum += s;
    EXPECT_NEAR(sum, run.record.stats.wall_seconds, 0.01 * run.record.stats.wall_seconds);
    double pct = 0.0;
    for (double p : run.record.stats.percentages()) pct += p;
    EXPECT_NEAR(pct, 100.0, 1.0);
  }
}

TEST_F(Cli, SimulateRejectsZeroSamples) {
  EXPECT_EQ(run(fmt::format("simulate-data --case {} --n 0 --out {}", kCase, path("d.csv"))), 2);
  EXPECT_NE(err().find("\"error\":\"usage\""), std::string::npos);
}

TEST_F(Cli, SimulateIsDeterministic) {
  ASSERT_EQ(run(fmt::format("simulate-data --case {} --n 6 --seed 4 --out {}", kCase, path("a.csv"))), 0);
  EXPECT_NE(out().find("resampled"), std::string::npos);
  ASSERT_EQ(run(fmt::format("simulate-data --case {} --n 6 --seed 4 --out {}", kCase, path("b.csv"))), 0);
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
  std::istringstream in(slurp(path("a.csv")));
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 7);
}

TEST_F(Cli, MissingCaseIsIoError) {
  EXPECT_EQ(run(fmt::format("simulate-data --case {} --out {}", path("none.json"), path("d.csv"))), 4);
}

TEST_F(Cli, TrainIsDeterministicAndWritesHistory) {
  const auto args = [&](const std::string& out) {
    return fmt::format("train --data {} --hidden 8 --seed 2 --out {}", kData, path(out));
  };
  ASSERT_EQ(run(args("a.json")), 0) << err();
  ASSERT_EQ(run(args("b.json")), 0) << err();
  EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
  EXPECT_EQ(slurp(path("a.json.loss.csv")).rfind("epoch,mse\n", 0), 0u);
}

TEST_F(Cli, TrainRejectsMismatchedWidths) {
  EXPECT_EQ(run(fmt::format("train --data {} --widths 11,8,5 --out {}", kData, path("n.json"))), 2);
  EXPECT_EQ(run(fmt::format("train --data {} --widths 12,8 --out {}", kData, path("n.json"))), 2);
}

TEST_F(Cli, TrainReportsNonConvergence) {
  EXPECT_EQ(run(fmt::format("train --data {} --hidden 4 --max-epochs 3 --out {}", kData, path("n.json"))), 3);
  EXPECT_TRUE(fs::exists(path("n.json")));
}

TEST_F(Cli, SolveBaselineAndSurrogate) {
  ASSERT_EQ(run(fmt::format("solve --case {} --out {}", kCase, path("base"))), 0) << err();
  ASSERT_EQ(run(fmt::format("solve --case {} --net {} --formulation reduced --hessian lbfgs --out {}", kCase, kNet,
                            path("nn"))),
            0)
      << err();
  const auto rows = parse_stats_csv(slurp(path("nn/stats.csv")));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].formulation, "reduced");
  EXPECT_EQ(rows[0].stats.status, SolveStatus::Optimal);
  EXPECT_NE(slurp(path("nn/solution.json")).find("\"status\": \"optimal\""), std::string::npos);
}

TEST_F(Cli, SolveMissingNetIsIoError) {
  EXPECT_EQ(run(fmt::format("solve --case {} --net {} --out {}", kCase, path("none.json"), path("o"))), 4);
  EXPECT_NE(err().find("weight file not found"), std::string::npos);
}

TEST_F(Cli, SolveRejectsUnknownFormulation) {
  EXPECT_EQ(run(fmt::format("solve --case {} --formulation sideways --out {}", kCase, path("o"))), 2);
}

TEST_F(Cli, SolveFailureExitsThreeWithStats) {
  // A one microsecond time limit cannot reach optimality.
  EXPECT_EQ(run(fmt::format("solve --case {} --net {} --time-limit 1e-6 --out {}", kCase, kNet, path("o"))), 3);
  const auto rows = parse_stats_csv(slurp(path("o/stats.csv")));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NE(rows[0].stats.status, SolveStatus::Optimal);
}

TEST_F(Cli, SweepAndReport) {
  ASSERT_EQ(run(fmt::format("sweep --case {} --net {} --widen 40 --formulation graybox reduced --out {} --jobs 2",
                            kCase, kNet, path("sw"))),
            0)
      << err();
  const auto rows = parse_stats_csv(slurp(path("sw/stats.csv")));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].formulation, "none");
  EXPECT_EQ(rows[1].formulation, "graybox");
  EXPECT_EQ(rows[1].hessian, "exact");
  EXPECT_EQ(rows[2].hessian, "lbfgs");
  for (std::size_t i = 2; i < rows.size(); ++i) {
    EXPECT_NEAR(rows[i].stats.objective, rows[1].stats.objective, 1e-5 * rows[1].stats.objective);
  }
  EXPECT_TRUE(fs::exists(path("sw/report.md")));

  std::ofstream(path("extra.csv")) << slurp(path("sw/stats.csv")) << "broken,row\n";
  ASSERT_EQ(run(fmt::format("report {} --format csv", path("extra.csv"))), 0) << err();
  EXPECT_NE(err().find("skipped"), std::string::npos);
  EXPECT_NE(out().find("percent of solve time"), std::string::npos);
  EXPECT_EQ(run("report"), 2);
}
