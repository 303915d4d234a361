#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rgwsaw/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using rgwsaw::cli::run_cli;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "rgwsaw");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "rgwsaw_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

json load(const fs::path& p) { return json::parse(slurp(p)); }

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    std::vector<std::string> row;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("config parser") {
  const auto c = rgwsaw::cli::parse_config("# comment\nmass-sq = 0.5\n\n  L=4   # trailing\nsweep = 4, 8\n");
  CHECK(c.size() == 3);
  CHECK(c.at("mass_sq") == "0.5");
  CHECK(c.at("L") == "4");
  CHECK(c.at("sweep") == "4, 8");
  CHECK_THROWS_AS(rgwsaw::cli::parse_config("a = 1\na = 2\n"), std::invalid_argument);
  CHECK_THROWS_AS(rgwsaw::cli::parse_config("just words\n"), std::invalid_argument);
  CHECK_THROWS_AS(rgwsaw::cli::parse_config(" = 3\n"), std::invalid_argument);
}

TEST_CASE("sha256") {
  CHECK(rgwsaw::cli::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(rgwsaw::cli::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("green sweep") {
  const auto dir = scratch("green");
  const auto r0 = run({"green", "--out", (dir / "m0").string()});
  REQUIRE(r0.code == 0);
  const auto rows = csv_rows(slurp(dir / "m0" / "green.csv"));
  REQUIRE(rows.size() == 21);
  CHECK(rows[0] == std::vector<std::string>{"x1", "x2", "x3", "x4", "green", "asymptote", "ratio"});
  CHECK(std::stod(rows[1][4]) == doctest::Approx(0.029933390231060203).epsilon(1e-9));
  // Beyond the first couple of radii the ratio decreases monotonically towards 1.
  for (std::size_t k = 3; k < rows.size(); ++k) {
    CHECK(std::stod(rows[k][6]) < std::stod(rows[k - 1][6]));
    CHECK(std::stod(rows[k][6]) > 1.0);
  }
  CHECK(std::stod(rows[20][6]) == doctest::Approx(1.00253).epsilon(1e-5));

  const auto r1 = run({"green", "--mass-sq", "0.01", "--out", (dir / "m1").string()});
  REQUIRE(r1.code == 0);
  const auto massive = csv_rows(slurp(dir / "m1" / "green.csv"));
  for (std::size_t k = 1; k < rows.size(); ++k) CHECK(std::stod(massive[k][4]) < std::stod(rows[k][4]));

  const auto bad = run({"green", "--r-min", "0", "--out", (dir / "bad").string()});
  CHECK(bad.code == rgwsaw::cli::kExitUsage);
  CHECK(bad.err.find("x = 0") != std::string::npos);
  CHECK(load(dir / "bad" / "manifest.json")["status"] == "error");
  CHECK(run({"green", "--d", "3", "--direction", "1,0,0", "--out", (dir / "d3").string()}).code == 1);
  CHECK(run({"green", "--r-max", "abc", "--out", (dir / "p").string()}).code == 1);
  CHECK(run({"green", "--no-such-flag"}).code != 0);
}

TEST_CASE("manifest contents") {
  const auto dir = scratch("manifest");
  spit(dir / "g.cfg", "r_max = 5\nmass-sq = 0.1\n");
  REQUIRE(run({"green", "--config", (dir / "g.cfg").string(), "--r-max", "4", "--out", (dir / "o").string()}).code == 0);
  const json m = load(dir / "o" / "manifest.json");
  CHECK(m["command"] == "green");
  CHECK(m["config"]["r_max"] == "4");
  CHECK(m["sources"]["r_max"] == "flag");
  CHECK(m["config"]["mass_sq"] == "0.1");
  CHECK(m["sources"]["mass_sq"] == "config");
  CHECK(m["sources"]["d"] == "default");
  CHECK(m["inputs"][(dir / "g.cfg").string()] == rgwsaw::cli::sha256_hex(slurp(dir / "g.cfg")));
  CHECK(m["outputs"]["green.csv"] == rgwsaw::cli::sha256_hex(slurp(dir / "o" / "green.csv")));
  CHECK(m["exit_code"] == 0);
  CHECK(m["violation"].is_null());
  CHECK(m["versions"].contains("gsl"));
  CHECK(slurp(dir / "o" / "manifest.json").find("time") == std::string::npos);

  spit(dir / "bad.cfg", "bogus = 1\n");
  const auto r = run({"green", "--config", (dir / "bad.cfg").string(), "--out", (dir / "b").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("bogus") != std::string::npos);
  CHECK(run({"green", "--config", (dir / "missing.cfg").string(), "--out", (dir / "c").string()}).code == 1);
}

TEST_CASE("frd: validation, export and tampered import") {
  const auto dir = scratch("frd");
  const auto r = run({"frd", "--out", (dir / "ok").string()});
  REQUIRE(r.code == 0);
  const json v = load(dir / "ok" / "validation.json");
  CHECK(v["ok"] == true);
  CHECK(v["passed"] == json({"finite_range", "symmetry", "telescoping", "convergence"}));
  for (int j = 1; j <= 4; ++j) CHECK(fs::exists(dir / "ok" / "slices" / ("C_" + std::to_string(j) + ".frd")));

  const auto slice = dir / "ok" / "slices" / "C_2.frd";
  REQUIRE(run({"frd", "--import", slice.string(), "--out", (dir / "rt").string()}).code == 0);
  CHECK(load(dir / "rt" / "import.json")["round_trip_identical"] == true);

  spit(dir / "tampered.frd", slurp(dir / "ok" / "slices" / "C_1.frd") + "2 0 0 0 0.001\n");
  const auto t = run({"frd", "--import", (dir / "tampered.frd").string(), "--out", (dir / "t").string()});
  CHECK(t.code == rgwsaw::cli::kExitViolation);
  const json m = load(dir / "t" / "manifest.json");
  CHECK(m["status"] == "violation");
  CHECK(m["violation"]["invariant"] == "import");
  CHECK(m["violation"]["detail"].get<std::string>().find("outside the finite range") != std::string::npos);

  CHECK(run({"frd", "--L", "2", "--out", (dir / "L2").string()}).code == 1);
}

TEST_CASE("flow: defaults, identity bound, errors") {
  const auto dir = scratch("flow");
  REQUIRE(run({"flow", "--out", (dir / "def").string()}).code == 0);
  const json m = load(dir / "def" / "manifest.json");
  CHECK(m["derived"]["j_ab"] == 2);
  const json s = load(dir / "def" / "summary.json");
  for (const char* k : {"q_infinity", "green_ab", "ratio", "error_budget", "j_ab", "j_m"}) CHECK(s.contains(k));
  CHECK(std::abs(s["ratio"].get<double>() - s["lambda_product"].get<double>()) <=
        s["error_budget"].get<double>() / s["green_ab"].get<double>());
  CHECK(lines(slurp(dir / "def" / "flow.csv")).front() == "j,gbar,gtilde,nu,z,lambda_a,lambda_b,q_a,q_b,delta_q,v_lambda,v_q");
  CHECK(lines(slurp(dir / "def" / "flow.csv")).size() == 8);

  const auto tr = run({"flow", "--g0", "20", "--out", (dir / "tr").string()});
  CHECK(tr.code == rgwsaw::cli::kExitViolation);
  CHECK(load(dir / "tr" / "manifest.json")["violation"]["invariant"] == "trust_region");

  CHECK(run({"flow", "--mass-sq", "0", "--out", (dir / "m0").string()}).code == 1);
  CHECK(run({"flow", "--mass-sq", "0", "--massless-budget", "1e-6", "--out", (dir / "m0b").string()}).code == 0);
  CHECK(run({"flow", "--bulk", "sideways", "--out", (dir / "bp").string()}).code == 1);
  CHECK(run({"flow", "--bulk", "file", "--out", (dir / "bf").string()}).code == 1);
}

TEST_CASE("flow: bulk trajectory file") {
  const auto dir = scratch("flow_file");
  std::string traj = "j,g,nu,z\n";
  for (int j = 0; j <= 6; ++j) traj += std::to_string(j) + ",0.05,-0.001,0\n";
  spit(dir / "bulk.csv", traj);
  const auto r = run({"flow", "--bulk", "file", "--bulk-file", (dir / "bulk.csv").string(), "--out", (dir / "o").string()});
  REQUIRE(r.code == 0);
  CHECK(load(dir / "o" / "manifest.json")["inputs"].size() == 1);
  CHECK(load(dir / "o" / "summary.json")["closed_form_error"].get<double>() <= 1e-12);
}

TEST_CASE("seed precedence: flag > config > env > default") {
  const auto dir = scratch("seed");
  auto seed_of = [&](const std::vector<std::string>& extra) {
    std::vector<std::string> args{"flow", "--remainder", "bounded-random", "--out", (dir / "o").string()};
    args.insert(args.end(), extra.begin(), extra.end());
    REQUIRE(run(args).code == 0);
    const json m = load(dir / "o" / "manifest.json");
    return m["config"]["seed"].get<std::string>() + "/" + m["sources"]["seed"].get<std::string>();
  };
  spit(dir / "s.cfg", "seed = 5\n");
  unsetenv("RGWSAW_SEED");
  CHECK(seed_of({}) == "1/default");
  setenv("RGWSAW_SEED", "9", 1);
  CHECK(seed_of({}) == "9/env");
  CHECK(seed_of({"--config", (dir / "s.cfg").string()}) == "5/config");
  CHECK(seed_of({"--config", (dir / "s.cfg").string(), "--seed", "3"}) == "3/flag");
  unsetenv("RGWSAW_SEED");
}

TEST_CASE("flow reruns and j_max extension are byte-stable") {
  const auto dir = scratch("flow_det");
  const std::vector<std::string> common{"flow", "--remainder", "bounded-random", "--seed", "11", "--mass-sq", "0.01"};
  auto with = [&](std::vector<std::string> extra, const std::string& out) {
    auto args = common;
    args.insert(args.end(), extra.begin(), extra.end());
    args.push_back("--out");
    args.push_back((dir / out).string());
    REQUIRE(run(args).code == 0);
  };
  with({"--j-max", "6"}, "a");
  with({"--j-max", "6"}, "b");
  with({"--j-max", "8"}, "c");
  CHECK(slurp(dir / "a" / "flow.csv") == slurp(dir / "b" / "flow.csv"));
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));
  CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
  const auto short_rows = lines(slurp(dir / "a" / "flow.csv"));
  const auto long_rows = lines(slurp(dir / "c" / "flow.csv"));
  REQUIRE(long_rows.size() == short_rows.size() + 2);
  for (std::size_t i = 0; i < short_rows.size(); ++i) CHECK(short_rows[i] == long_rows[i]);
}

TEST_CASE("flow sweep and report") {
  const auto dir = scratch("sweep");
  REQUIRE(run({"flow", "--sweep", "4,8,16,32", "--remainder", "bounded-random", "--draws", "3", "--mass-sq", "0.1",
               "--j-max", "5", "--out", (dir / "s").string()})
              .code == 0);
  const auto rows = csv_rows(slurp(dir / "s" / "sweep.csv"));
  REQUIRE(rows.size() == 13);
  CHECK(rows[0][0] == "separation");
  CHECK(rows[0][1] == "log_separation");
  CHECK(std::stod(rows[1][1]) == doctest::Approx(std::log(4.0)));
  const json m = load(dir / "s" / "manifest.json");
  CHECK(m["derived"]["j_ab"]["8"] == 2);
  CHECK(m["derived"]["j_ab"]["32"] == 3);

  REQUIRE(run({"report", "--sweep", (dir / "s" / "sweep.csv").string(), "--out", (dir / "r").string()}).code == 0);
  const json r = load(dir / "r" / "report.json");
  CHECK(r["mode"] == "sweep");
  CHECK(r["points"] == 12);
  CHECK(r["medians"].size() == 4);
  // Oracle: least-squares slope through the origin recomputed from the sweep rows.
  double sxy = 0, sxx = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double x = 1.0 / std::log(std::stod(rows[i][0]));
    sxy += x * (std::stod(rows[i][10]) - 1.0);
    sxx += x * x;
  }
  CHECK(r["K_fit"].get<double>() == doctest::Approx(sxy / sxx).epsilon(1e-12));
  CHECK(lines(slurp(dir / "r" / "report.csv")).size() == 13);
}

TEST_CASE("report: identity mode, single pair, schema errors") {
  const auto dir = scratch("report");
  REQUIRE(run({"flow", "--sweep", "4,8,16", "--freeze-lambda", "--mass-sq", "0.1", "--j-max", "5", "--out",
               (dir / "id").string()})
              .code == 0);
  const auto id = run({"report", "--sweep", (dir / "id" / "sweep.csv").string(), "--identity", "--out", (dir / "ri").string()});
  CHECK(id.code == 0);
  const auto rep = csv_rows(slurp(dir / "ri" / "report.csv"));
  const auto sweep = csv_rows(slurp(dir / "id" / "sweep.csv"));
  for (std::size_t i = 1; i < rep.size(); ++i) {
    CHECK(std::abs(std::stod(rep[i][6])) <= std::stod(sweep[i][11]) / std::stod(sweep[i][8]));
  }

  REQUIRE(run({"flow", "--freeze-lambda", "--mass-sq", "0.1", "--out", (dir / "one").string()}).code == 0);
  REQUIRE(run({"report", "--summary", (dir / "one" / "summary.json").string(), "--identity", "--out",
               (dir / "r1").string()})
              .code == 0);
  const auto three = csv_rows(slurp(dir / "r1" / "report.csv"));
  CHECK(three[0] == std::vector<std::string>{"q_infinity", "green_ab", "asymptote"});
  CHECK(std::stod(three[1][2]) == doctest::Approx(0.025330295910584444 / 64.0));

  // A moving lambda is not the identity.
  REQUIRE(run({"flow", "--mass-sq", "0.1", "--out", (dir / "mv").string()}).code == 0);
  const auto bad = run({"report", "--summary", (dir / "mv" / "summary.json").string(), "--identity", "--out",
                        (dir / "r2").string()});
  CHECK(bad.code == rgwsaw::cli::kExitViolation);
  CHECK(load(dir / "r2" / "manifest.json")["violation"]["invariant"] == "identity");

  spit(dir / "short.csv", "separation,seed,q_infinity\n4,1,0.1\n");
  const auto miss = run({"report", "--sweep", (dir / "short.csv").string(), "--out", (dir / "r3").string()});
  CHECK(miss.code == 1);
  CHECK(miss.err.find("missing column 'green_ab'") != std::string::npos);
  CHECK(run({"report", "--sweep", (dir / "nope.csv").string(), "--out", (dir / "r4").string()}).code == 1);
  CHECK(run({"report", "--out", (dir / "r5").string()}).code == 1);
}

TEST_CASE("simulate: determinism, tail discipline, g=0 suite") {
  const auto dir = scratch("simulate");
  const std::vector<std::string> base{"simulate", "--samples", "2000", "--tmax", "16", "--seed", "4"};
  auto go = [&](std::vector<std::string> extra, const std::string& out) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    args.push_back("--out");
    args.push_back((dir / out).string());
    return run(args);
  };
  REQUIRE(go({}, "a").code == 0);
  REQUIRE(go({"--threads", "3", "--block-size", "4096"}, "b").code == 0);
  CHECK(slurp(dir / "a" / "kernel.csv") == slurp(dir / "b" / "kernel.csv"));
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));
  CHECK(lines(slurp(dir / "a" / "kernel.csv")).front() == "T,mean,stderr,n");
  REQUIRE(go({"--seed", "5"}, "c").code == 0);
  CHECK(slurp(dir / "a" / "kernel.csv") != slurp(dir / "c" / "kernel.csv"));

  const auto tail = go({"--tmax", "2"}, "t");
  CHECK(tail.code == rgwsaw::cli::kExitViolation);
  const json tm = load(dir / "t" / "manifest.json");
  CHECK(tm["violation"]["invariant"] == "tail_budget");
  CHECK(tm["violation"]["data"]["tail_budget"].get<double>() == doctest::Approx(2.0 * std::exp(-1.0)));
  REQUIRE(go({"--tmax", "2", "--allow-tail"}, "ta").code == 0);
  CHECK(load(dir / "ta" / "summary.json")["two_point"]["tail_within_tolerance"] == false);

  REQUIRE(go({"--validate", "--kernel-samples", "20000"}, "v").code == 0);
  const json v = load(dir / "v" / "summary.json")["validation"];
  CHECK(v["cells"] == 25);
  CHECK(v["pass"] == true);
  CHECK(lines(slurp(dir / "v" / "kernel_grid.csv")).size() == 26);
  CHECK(go({"--validate", "--g", "0.1"}, "vg").code == 1);

  REQUIRE(go({"--g", "0.2", "--sides", "4,8", "--tmax", "20"}, "sw").code == 0);
  CHECK(lines(slurp(dir / "sw" / "side_sweep.csv")).size() == 3);
  CHECK(load(dir / "sw" / "summary.json")["side_sweep"]["pairs"].size() == 1);
}
