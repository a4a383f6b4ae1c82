#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "disparity/cli.hpp"
#include "disparity/synthetic.hpp"

using namespace disparity;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int status = 0;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.status = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("disparity_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Every regular file under `a` exists under `b` with identical bytes.
void check_same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    INFO(e.path().filename().string());
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  CHECK(files > 0);
}

// Shared 10k-loan calibrated market and its fitted model.
struct Pipeline {
  fs::path dir;
  std::string loans;
  std::string model;

  Pipeline() : dir(scratch("pipeline")) {
    REQUIRE(run({"simulate", "--n", "10000", "--seed", "17", "--out", (dir / "sim").string()}).status == 0);
    loans = (dir / "sim" / "loans.csv").string();
    REQUIRE(run({"fit", "--loans", loans, "--out", (dir / "fit").string(), "--df", "3"}).status == 0);
    model = (dir / "fit" / "model.json").string();
  }
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("--version prints the schema versions") {
  const Result r = run({"--version"});
  CHECK(r.status == 0);
  CHECK(r.out.find("hazard_model 1") != std::string::npos);
  CHECK(r.out.find("market_spec 1") != std::string::npos);
  CHECK(r.out.find("report 1") != std::string::npos);
}

TEST_CASE("null market pipeline: DI confidence interval covers zero") {
  MarketSpec s = MarketSpec::calibrated();
  s.n = 10000;
  s.seed = 23;
  s.female_covariates = s.male_covariates;
  s.rates.female_p = s.rates.male_p;
  s.hazard.coefficients.erase("male");
  s.hazard.time_profiles.erase("male");
  s.decision.female = s.decision.male;
  const fs::path dir = scratch("null");
  {
    std::ofstream out(dir / "spec.json");
    out << spec_to_json(s).dump(2);
  }
  REQUIRE(run({"simulate", "--spec", (dir / "spec.json").string(), "--out", (dir / "sim").string()}).status == 0);
  const std::string loans = (dir / "sim" / "loans.csv").string();
  REQUIRE(run({"fit", "--loans", loans, "--out", (dir / "fit").string(), "--df", "3", "--no-robust"}).status == 0);
  const Result r = run({"estimate-di", "--loans", loans, "--model", (dir / "fit" / "model.json").string(), "--out",
                        (dir / "di").string(), "--seed", "4", "--bootstrap", "40"});
  REQUIRE(r.status == 0);
  const json est = read_json(dir / "di" / "di.json")["estimate"];
  CHECK(est["ci_low"].get<double>() <= 0.0);
  CHECK(est["ci_high"].get<double>() >= 0.0);
  CHECK(est["bootstrap_replicates"].get<int>() == 40);
}

TEST_CASE("reports carry a schema tag and plot files have headers") {
  const Pipeline& p = pipeline();
  const json fit = read_json(p.dir / "fit" / "fit.json");
  CHECK(fit["schema"] == "disparity.fit_report");
  CHECK(fit["version"] == cli::kReportVersion);
  CHECK(fit["coefficients"].size() > 10);

  const fs::path diag = p.dir / "diag";
  REQUIRE(run({"diagnose", "--loans", p.loans, "--model", p.model, "--out", diag.string()}).status == 0);
  const json d = read_json(diag / "diagnostics.json");
  CHECK(d["schema"] == "disparity.diagnostics_report");
  CHECK(d["schoenfeld"]["global"]["df"].get<int>() > 0);
  for (const auto& [file, header] : std::vector<std::pair<std::string, std::string>>{
           {"hazard.csv", "month,baseline,male,female"},
           {"schoenfeld_points.csv", "column,event_time,residual,scaled"},
           {"schoenfeld_smooth.csv", "column,time,estimate,lower,upper"},
           {"cox_snell.csv", "residual,event,cumulative_hazard"},
           {"default_rank.csv", "month,defaults,at_risk,mean_rank,lower,upper"}}) {
    const std::string text = slurp(diag / file);
    CHECK(text.substr(0, text.find('\n')) == header);
  }
}

TEST_CASE("stochastic subcommands are byte-identical across reruns and thread counts") {
  const Pipeline& p = pipeline();
  const std::vector<std::vector<std::string>> commands = {
      {"simulate", "--n", "3000", "--seed", "9"},
      {"estimate-di", "--loans", p.loans, "--model", p.model, "--seed", "5", "--bootstrap", "6", "--subset",
       "young=age<30"},
      {"estimate-di", "--loans", p.loans, "--model", p.model, "--seed", "5", "--bootstrap", "3", "--second-stage",
       "ols-di-controls"},
      {"decompose", "--loans", p.loans, "--model", p.model, "--seed", "5"},
      {"sensitivity", "--loans", p.loans, "--model", p.model, "--seed", "5", "--multipliers", "1,2,3"},
      {"threshold-test", "--loans", p.loans, "--model", p.model, "--seed", "5", "--warmup", "600", "--draws", "600"},
      {"threshold-test", "--loans", p.loans, "--model", p.model, "--seed", "5", "--warmup", "400", "--draws", "400",
       "--bootstrap", "2"},
  };
  int k = 0;
  for (const auto& cmd : commands) {
    INFO(cmd[0]);
    const fs::path base = scratch("det" + std::to_string(k++));
    std::vector<fs::path> outs;
    for (const std::string threads : {"1", "1", "3"}) {
      const fs::path out = base / ("t" + std::to_string(outs.size()));
      std::vector<std::string> args = {"--threads", threads};
      args.insert(args.end(), cmd.begin(), cmd.end());
      args.insert(args.end(), {"--out", out.string()});
      const Result r = run(args);
      INFO(r.err);
      REQUIRE(r.status == 0);
      outs.push_back(out);
    }
    check_same_tree(outs[0], outs[1]);
    check_same_tree(outs[0], outs[2]);
  }
}

TEST_CASE("a different seed changes the stochastic output") {
  const Pipeline& p = pipeline();
  const fs::path base = scratch("seed");
  for (const std::string seed : {"1", "2"}) {
    REQUIRE(run({"decompose", "--loans", p.loans, "--model", p.model, "--seed", seed, "--out", (base / seed).string()})
                .status == 0);
  }
  CHECK(slurp(base / "1" / "decompose.json") != slurp(base / "2" / "decompose.json"));
}

TEST_CASE("config file supplies options and flags override it") {
  const Pipeline& p = pipeline();
  const fs::path base = scratch("config");
  {
    std::ofstream cfg(base / "run.toml");
    cfg << "threads = 2\n[estimate-di]\nseed = 3\nbootstrap = 4\nbins = \"0:1.4:0.1\"\n";
  }
  const std::string cfg = (base / "run.toml").string();
  REQUIRE(run({"--config", cfg, "estimate-di", "--loans", p.loans, "--model", p.model, "--out", (base / "a").string()})
              .status == 0);
  const json a = read_json(base / "a" / "di.json");
  CHECK(a["bootstrap"] == 4);
  CHECK(a["estimate"]["bins"].size() == 14);
  REQUIRE(run({"--config", cfg, "estimate-di", "--loans", p.loans, "--model", p.model, "--out", (base / "b").string(),
               "--bootstrap", "0"})
              .status == 0);
  CHECK(read_json(base / "b" / "di.json")["bootstrap"] == 0);
}

TEST_CASE("invalid configurations fail before any output with a structured error") {
  const Pipeline& p = pipeline();
  const fs::path base = scratch("errors");
  const std::string out = (base / "out").string();

  auto expect_error = [&](const std::vector<std::string>& args, int status, const std::string& kind) {
    const Result r = run(args);
    CHECK(r.status == status);
    REQUIRE(!r.err.empty());
    const json e = json::parse(r.err);
    CHECK(e["error"]["kind"] == kind);
    CHECK(!fs::exists(out));
    return e["error"]["message"].get<std::string>();
  };

  expect_error({"estimate-di", "--loans", p.loans, "--model", p.model, "--out", out}, 2, "usage");
  expect_error({"threshold-test", "--loans", p.loans, "--model", p.model, "--out", out}, 2, "usage");
  expect_error({"simulate", "--n", "100", "--out", out}, 2, "invalid_input");
  expect_error({"estimate-di", "--loans", (base / "missing.csv").string(), "--model", p.model, "--seed", "1", "--out",
                out},
               2, "usage");
  expect_error({"estimate-di", "--loans", p.loans, "--model", p.model, "--seed", "1", "--bins", "1:0:0.1", "--out", out},
               2, "invalid_input");
  expect_error({"estimate-di", "--loans", p.loans, "--model", p.model, "--seed", "1", "--bootstrap", "1", "--out", out},
               2, "invalid_input");
  expect_error({"estimate-di", "--loans", p.loans, "--model", p.model, "--seed", "1", "--second-stage", "logit",
                "--out", out},
               2, "usage");
  expect_error({"estimate-di", "--loans", p.loans, "--model", p.model, "--seed", "1", "--subset", "bad", "--out", out},
               2, "invalid_input");
  expect_error({"sensitivity", "--loans", p.loans, "--model", p.model, "--seed", "1", "--multipliers", "0.5,2", "--out",
                out},
               2, "invalid_input");
  expect_error({"fit", "--loans", p.loans, "--df-override", "nonsense=2", "--out", out}, 2, "invalid_input");

  // Malformed CSV: the message names the row and the column.
  std::string text = slurp(p.loans);
  const auto first = text.find('\n');
  const auto second = text.find('\n', first + 1);
  std::string row = text.substr(first + 1, second - first - 1);
  const auto c1 = row.find(',');
  const auto c2 = row.find(',', c1 + 1);
  row.replace(c1 + 1, c2 - c1 - 1, "x");  // gender
  {
    std::ofstream bad(base / "bad.csv");
    bad << text.substr(0, first + 1) << row << '\n';
  }
  const std::string msg = expect_error({"fit", "--loans", (base / "bad.csv").string(), "--out", out}, 2, "invalid_input");
  CHECK(msg.find("row") != std::string::npos);
  CHECK(msg.find("gender") != std::string::npos);
}
