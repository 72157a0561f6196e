#include "test_util.hpp"

#include "vcee/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace vcee;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("vcee_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path / name) << text;
    return (path / name).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "vcee");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

} // namespace

TEST(Csv, ParsesMatrix) {
  std::istringstream in("1, 2.5,-3\n\n4,5e-1,+6\n");
  const Matrix M = parse_csv(in);
  ASSERT_EQ(M.rows(), 2);
  ASSERT_EQ(M.cols(), 3);
  EXPECT_EQ(M(0, 1), 2.5);
  EXPECT_EQ(M(1, 2), 6.0);
}

TEST(Csv, ErrorsCarryLineNumbers) {
  auto line_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_csv(in, "x.csv");
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find("x.csv:"), std::string::npos);
      return e.line();
    }
    return -1;
  };
  EXPECT_EQ(line_of("1,2\n3,abc\n"), 2);
  EXPECT_EQ(line_of("1,2\n3,4\n5\n"), 3);
  EXPECT_EQ(line_of("1,2,\n"), 1);
  EXPECT_EQ(line_of("1,,2\n"), 1);
  EXPECT_EQ(line_of(""), 0);
}

TEST(Csv, RoundTrip) {
  std::mt19937_64 rng(81);
  const Matrix M = testutil::random_matrix(rng, 4, 3) * 1e-3;
  std::stringstream ss;
  write_csv(ss, M);
  EXPECT_EQ(parse_csv(ss), M);
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(Config, ModelForms) {
  const json fh = json::parse(R"({"type":"fh","design":{"repeats":2},"Ke":1.5})");
  const LmmSpec a = model_from_json(fh);
  EXPECT_EQ(a.N(), 10);
  EXPECT_EQ(a.Ke, 1.5);
  const json ner = json::parse(R"({"type":"ner","design":{"repeats":1,"covariate_seed":3}})");
  const LmmSpec b = model_from_json(ner);
  EXPECT_EQ(b.N(), 29);
  EXPECT_EQ(b.p(), 3);
  const LmmSpec c = model_from_json(model_to_json(b));
  EXPECT_EQ(c.X, b.X);
  EXPECT_EQ(c.cluster_sizes, b.cluster_sizes);
  EXPECT_THROW(model_from_json(json::parse(R"({"type":"xyz"})")), ConfigError);
  EXPECT_THROW(model_from_json(json::parse(R"({"type":"ner","n":[2,1.5]})")), ConfigError);
  EXPECT_THROW(method_from_json("NOPE"), ConfigError);
  EXPECT_EQ(method_from_json(json::parse(R"({"weights":"FH","map":"OLS"})")).tag, Method::OFH);
}

TEST(Cli, EstimateThenAsymptotics) {
  TempDir dir;
  dir.write("D.csv", "1\n1\n1\n");
  const std::string cfg = dir.write("est.json", R"({
    "schema": "vc-estim/1",
    "model": {"type": "fh", "D_file": "D.csv"},
    "y": [0, 1, 2],
    "method": "Q"
  })");
  const std::string out = (dir.path / "est_out.json").string();
  const CliRun r = run_cli({"estimate", "--config", cfg, "--output", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const json doc = json::parse(slurp(out));
  EXPECT_NEAR(doc["result"]["psi_raw"][0].get<double>(), 0.0, 1e-14);
  EXPECT_EQ(doc["result"]["status"], "converged");

  const CliRun a = run_cli({"asymptotics", "--config", out});
  ASSERT_EQ(a.code, 0) << a.err;
  const json rep = json::parse(a.out);
  EXPECT_EQ(rep["method"], "Q");
  EXPECT_TRUE(rep["unbiased"].get<bool>());
}

TEST(Cli, NoSolutionExitCode) {
  TempDir dir;
  const std::string cfg = dir.write("est.json", R"({
    "schema": "vc-estim/1",
    "model": {"type": "fh", "D": [1, 1, 1, 1]},
    "y": [2, 2, 2, 2],
    "method": "RE"
  })");
  const CliRun r = run_cli({"estimate", "--config", cfg});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(json::parse(r.out)["result"]["status"], "no_solution");
}

TEST(Cli, ConfigErrors) {
  TempDir dir;
  EXPECT_EQ(run_cli({"estimate", "--config", (dir.path / "missing.json").string()}).code, 1);
  const std::string bad = dir.write("bad.json", "{ not json");
  EXPECT_EQ(run_cli({"estimate", "--config", bad}).code, 1);
  const std::string noschema = dir.write("s.json", R"({"model": {"type": "fh", "D": [1, 1]}})");
  const CliRun r = run_cli({"estimate", "--config", noschema});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("schema"), std::string::npos);
  const std::string zero = dir.write("z.json", R"({
    "schema": "vc-estim/1",
    "model": {"type": "fh", "design": {"repeats": 1}},
    "psi_true": 1, "numeric": {"replications": 0}
  })");
  EXPECT_EQ(run_cli({"simulate", "--config", zero}).code, 1);
  const std::string csv = dir.write("x.csv", "1,2\n3\n");
  const std::string withcsv = dir.write("c.json", R"({
    "schema": "vc-estim/1",
    "model": {"type": "fh", "D": [1, 1], "X_file": "x.csv"},
    "y": [1, 2], "method": "RE"
  })");
  const CliRun c = run_cli({"estimate", "--config", withcsv});
  EXPECT_EQ(c.code, 1);
  EXPECT_NE(c.err.find("x.csv:2"), std::string::npos);
  EXPECT_EQ(run_cli({"bogus"}).code, 1);
}

TEST(Cli, SimulationDeterministic) {
  TempDir dir;
  const std::string cfg = dir.write("sim.json", R"({
    "schema": "vc-estim/1",
    "model": {"type": "ner", "design": {"repeats": 1, "covariate_seed": 7}},
    "psi_true": [0.5, 1], "beta_true": [1, 1, 1],
    "estimators": ["RE", "FH", "Q", "PR"],
    "numeric": {"replications": 50, "seed": 5}
  })");
  const std::string o1 = (dir.path / "a.csv").string(), o2 = (dir.path / "b.csv").string();
  ASSERT_EQ(run_cli({"simulate", "--config", cfg, "--output", o1}).code, 0);
  ASSERT_EQ(run_cli({"simulate", "--config", cfg, "--output", o2, "--threads", "3"}).code, 0);
  const std::string a = slurp(o1);
  EXPECT_EQ(a, slurp(o2));
  EXPECT_EQ(a.substr(0, a.find('\n')), "estimator,psi_component,rmse,rmse_raw,bias,n_fail,n_nosolution");
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 1 + 4 * 2);
  const json meta = json::parse(slurp(o1 + ".json"));
  EXPECT_EQ(meta["config"]["numeric"]["seed"], 5);
  ASSERT_EQ(run_cli({"simulate", "--config", cfg, "--output", o2, "--seed", "6"}).code, 0);
  EXPECT_NE(a, slurp(o2));
}

TEST(Cli, BundledConfigsParse) {
  for (const auto& entry : fs::directory_iterator(VCEE_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    const json j = json::parse(in);
    EXPECT_NO_THROW(config::check_schema(j)) << entry.path();
    EXPECT_NO_THROW(model_from_json(j.at("model"), entry.path().parent_path())) << entry.path();
  }
}
