#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "rwre/env_io.hpp"
#include "rwre/harness.hpp"

using namespace rwre;
namespace fs = std::filesystem;

namespace {

std::string scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("rwre_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::vector<std::string> lines(const std::string& path) {
  std::ifstream f(path);
  std::vector<std::string> out;
  std::string l;
  while (std::getline(f, l)) out.push_back(l);
  return out;
}

// Header without its timestamp, then every other line verbatim.
std::vector<std::string> payload(const std::string& path) {
  auto ls = lines(path);
  if (!ls.empty()) {
    auto h = json::parse(ls[0]);
    h.erase("timestamp");
    ls[0] = h.dump();
  }
  return ls;
}

json with(json j, const json& patch) {
  j.update(patch);
  return j;
}

ExperimentConfig cfg(json j, const std::string& out) {
  j["output_path"] = out;
  return parse_config(j);
}

struct ThreadGuard {
  int saved = thread_override();
  ~ThreadGuard() { thread_override() = saved; }
};

int sh(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

const json kDstar = {{"experiment", "dstar"}, {"seed", 7},          {"L", {6}},
                     {"epsilon", {0, 0.05}},  {"psi", {2}},         {"n_envs", 3}};

}  // namespace

// ---------------------------------------------------------------------------
// configs

TEST(Config, RejectsMalformedInput) {
  auto bad = [](json j) {
    try {
      parse_config(j);
    } catch (const Error& e) {
      return e.code() == ErrorCode::config_invalid;
    }
    return false;
  };
  json ok = kDstar;
  EXPECT_NO_THROW(parse_config(ok));
  EXPECT_TRUE(bad(json::array()));
  EXPECT_TRUE(bad(with(kDstar, {{"colour", 1}})));
  json no_seed = kDstar;
  no_seed.erase("seed");
  EXPECT_TRUE(bad(no_seed));
  json no_L = kDstar;
  no_L.erase("L");
  EXPECT_TRUE(bad(no_L));
  EXPECT_TRUE(bad(with(kDstar, {{"r_mode", {{"mode", "override"}, {"s", 2}, {"r", 4}}}})));
  EXPECT_TRUE(bad(with(kDstar, {{"r_mode", {{"mode", "override"}, {"s", 8}, {"r", 2}}}})));
  EXPECT_TRUE(bad(with(kDstar, {{"r_mode", {{"mode", "constant"}, {"r", 1}, {"s", 2}}}})));
  EXPECT_TRUE(bad(with(kDstar, {{"r_mode", {{"mode", "banana"}}}})));
  EXPECT_TRUE(bad(with(kDstar, {{"eta", 1.5}})));
  EXPECT_TRUE(bad(with(kDstar, {{"n_envs", "three"}})));
  EXPECT_TRUE(bad(with(kDstar, {{"psi", {-1}}})));
  EXPECT_TRUE(bad(with(kDstar, {{"experiment", "nope"}})));
  const json tr = {{"experiment", "transience"}, {"seed", 1}, {"radii_pairs", {{4, 4}}}, {"start_radii", {4}}};
  EXPECT_TRUE(bad(tr));
  const json hit = {{"experiment", "hitprob"}, {"seed", 1}, {"L", 20}, {"a", {8}}};
  EXPECT_TRUE(bad(hit));
  EXPECT_TRUE(bad(with(hit, {{"a", {2}}, {"annulus", {10, 4, 20}}})));
}

TEST(Config, InvalidEpsilonIsAConfigError) {
  EXPECT_THROW(parse_config(with(kDstar, {{"epsilon", {0.2}}})), Error);
}

TEST(Config, HashIgnoresOutputPathOnly) {
  const auto a = cfg(kDstar, "/tmp/a"), b = cfg(kDstar, "/tmp/b");
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 8u);
  EXPECT_NE(config_hash(a), config_hash(cfg(with(kDstar, {{"seed", 8}}), "/tmp/a")));
}

TEST(Config, CanonicalFormRoundTrips) {
  const auto a = cfg(kDstar, "/tmp/a");
  json j = to_json(a);
  j["output_path"] = "/tmp/a";
  EXPECT_EQ(to_json(parse_config(j)), to_json(a));
}

TEST(Config, DegenerateScheduleWarns) {
  const json soj = {{"experiment", "sojourn"}, {"seed", 1}, {"L", {12}}};
  EXPECT_FALSE(config_warnings(parse_config(soj)).empty());
  EXPECT_TRUE(config_warnings(parse_config(with(soj, {{"r_mode", {{"mode", "override"}, {"s", 4}, {"r", 2}}}})))
                  .empty());
}

// ---------------------------------------------------------------------------
// output files

TEST(Output, JsonlHasHeaderRowsFooter) {
  const auto res = run(cfg(kDstar, scratch("jsonl")));
  const auto ls = lines(res.jsonl_path);
  ASSERT_GE(ls.size(), 3u);
  std::vector<json> js;
  for (const auto& l : ls) js.push_back(json::parse(l));
  const auto& h = js.front();
  EXPECT_EQ(h["type"], "header");
  EXPECT_EQ(h["schema_version"], kSchemaVersion);
  EXPECT_EQ(h["experiment"], "dstar");
  EXPECT_EQ(h["seed"], 7);
  EXPECT_EQ(h["config_hash"], config_hash(cfg(kDstar, "x")));
  for (const char* k : {"build_id", "mollifier_Z", "mollifier_panels", "h_p_cal", "solver_tolerance", "solver_accept",
                        "step_cap"})
    EXPECT_TRUE(h["provenance"].contains(k)) << k;
  EXPECT_TRUE(h["warnings"].is_array());
  EXPECT_TRUE(h["timestamp"].is_string());
  const auto& f = js.back();
  EXPECT_EQ(f["type"], "footer");
  EXPECT_EQ(f["rows"], ls.size() - 2);
  EXPECT_EQ(f["errors"], 0);
  for (std::size_t i = 1; i + 1 < js.size(); ++i) {
    const auto& r = js[i];
    EXPECT_EQ(r["type"], "row");
    for (const char* k : {"group", "index", "env_seed", "metric", "status", "value"}) EXPECT_TRUE(r.contains(k)) << k;
    EXPECT_EQ(r["status"], "ok");
  }
  EXPECT_EQ(res.exit_code(), 0);
}

TEST(Output, EveryLinePrefixIsReadable) {
  const auto res = run(cfg(kDstar, scratch("prefix")));
  const auto ls = lines(res.jsonl_path);
  const std::string cut = scratch("prefix_cut") + "/cut.jsonl";
  for (std::size_t k = 1; k <= ls.size(); ++k) {
    std::ofstream f(cut, std::ios::trunc);
    for (std::size_t i = 0; i < k; ++i) f << ls[i] << '\n';
    f.close();
    const auto rows = read_rows(cut);
    EXPECT_EQ(rows.size(), std::min(k - 1, ls.size() - 2));
  }
}

TEST(Output, AppendsOnRerun) {
  const auto dir = scratch("append");
  const auto a = run(cfg(kDstar, dir));
  const auto n = lines(a.jsonl_path).size();
  run(cfg(kDstar, dir));
  const auto ls = lines(a.jsonl_path);
  EXPECT_EQ(ls.size(), 2 * n);
  EXPECT_EQ(json::parse(ls[n])["type"], "header");
}

TEST(Output, SummaryIsReproducibleFromRows) {
  const auto c = cfg(with(kDstar, {{"experiment", "c1scan"}}), scratch("csv"));
  const auto res = run(c);
  const auto again = summarize(c, read_rows(res.jsonl_path));
  const auto csv = read_summary_csv(res.csv_path);
  ASSERT_EQ(again.size(), csv.size());
  for (std::size_t i = 0; i < csv.size(); ++i) {
    EXPECT_EQ(again[i].group, csv[i].group);
    EXPECT_EQ(again[i].metric, csv[i].metric);
    EXPECT_EQ(again[i].stat, csv[i].stat);
    EXPECT_NEAR(again[i].value, csv[i].value, 1e-9 * std::max(1.0, std::abs(csv[i].value)));
  }
  bool freq = false;
  for (const auto& e : csv) freq = freq || e.stat == "freq_b1";
  EXPECT_TRUE(freq);
}

TEST(Output, SummaryStatistics) {
  ExperimentConfig c;
  c.experiment = Experiment::dstar;
  std::vector<Row> rows(3);
  for (int i = 0; i < 3; ++i) {
    rows[i].group = "g";
    rows[i].metric = "m";
    rows[i].value = 1.0 + i;
  }
  rows.push_back(Row{"g", 9, std::nullopt, "m", 0, std::nullopt, false, "capacity", "x"});
  const auto s = summarize(c, rows);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[0].value, 3);
  EXPECT_DOUBLE_EQ(s[1].value, 2);
  EXPECT_DOUBLE_EQ(s[2].value, 1);
  EXPECT_EQ(s[3].value, 1);
  EXPECT_EQ(s[4].value, 3);
}

TEST(Output, RowJsonRoundTrip) {
  Row r{"L=8", 3, 42u, "D_star", 0.25, Interval{0.1, 0.4}, true, "", ""};
  const Row back = row_from_json(to_json(r));
  EXPECT_EQ(back.group, r.group);
  EXPECT_EQ(back.index, 3);
  EXPECT_EQ(*back.env_seed, 42u);
  EXPECT_EQ(back.value, 0.25);
  EXPECT_EQ(back.ci->hi, 0.4);
  Row e{"L=8", 1, std::nullopt, "D_star", 0, std::nullopt, false, "capacity", "too big"};
  const auto j = to_json(e);
  EXPECT_EQ(j["status"], "error");
  EXPECT_TRUE(j["env_seed"].is_null());
  EXPECT_EQ(j["error"]["code"], "capacity");
}

TEST(Output, FailedSamplesBecomeErrorRows) {
  const auto res = run(cfg(with(kDstar, {{"capacity", 50}}), scratch("errors")));
  EXPECT_EQ(res.n_errors, 6u);
  EXPECT_EQ(res.exit_code(), 1);
  const auto ls = lines(res.jsonl_path);
  EXPECT_EQ(json::parse(ls.back())["errors"], 6);
  EXPECT_EQ(json::parse(ls[1])["error"]["code"], "capacity");
}

// ---------------------------------------------------------------------------
// determinism

TEST(Determinism, ThreadCountDoesNotChangeOutput) {
  ThreadGuard g;
  const std::vector<json> configs = {
      kDstar,
      {{"experiment", "transience"}, {"seed", 7}, {"radii_pairs", {{3, 10}}}, {"start_radii", {4, 7}}, {"epsilon", {0.05}},
       {"n_walks", 9000}},
      {{"experiment", "c2scan"}, {"seed", 2}, {"L", {6}}, {"epsilon", {0.05}}, {"n_envs", 3}}};
  for (const auto& j : configs) {
    thread_override() = 1;
    const auto a = run(cfg(j, scratch("det1")));
    thread_override() = 8;
    const auto b = run(cfg(j, scratch("det8")));
    EXPECT_EQ(payload(a.jsonl_path), payload(b.jsonl_path)) << j["experiment"];
    std::ifstream fa(a.csv_path), fb(b.csv_path);
    EXPECT_EQ(std::string(std::istreambuf_iterator<char>(fa), {}), std::string(std::istreambuf_iterator<char>(fb), {}));
  }
}

TEST(Determinism, SimpleRandomWalkHasZeroDistance) {
  const auto res = run(cfg(with(kDstar, {{"epsilon", {0}}}), scratch("dstar0")));
  for (const auto& e : res.summary) {
    if (e.stat == "n") {
      EXPECT_EQ(e.value, 3);
    }
    if (e.stat == "max") {
      EXPECT_EQ(e.value, 0);
    }
  }
}

// ---------------------------------------------------------------------------
// Monte Carlo

TEST(MonteCarlo, OneDimensionalUnitBall) {
  Environment env({Family::srw, 1, 0, 0}, 1);
  const std::size_t n = 10000;
  const auto mc = mc_exit(env, Point{0}, 1, n, 5);
  ASSERT_EQ(mc.freq.size(), 2u);
  const double sigma = std::sqrt(0.25 / n);
  for (double f : mc.freq) EXPECT_NEAR(f, 0.5, 3 * sigma);
  EXPECT_EQ(mc.walks, n);
}

TEST(MonteCarlo, ExitLawMatchesSolver) {
  Environment env({Family::srw, 3, 0, 0}, 1);
  const std::size_t n = 1'000'000;
  const auto mc = mc_exit(env, Point::zero(3), 8, n, 11);
  GreenOperator G(srw_kernel(mc.domain));
  const double tv = mc.tv(G.exit_measure(Point::zero(3)));
  EXPECT_LE(tv, 2 * std::sqrt(static_cast<double>(mc.domain->n_boundary()) / static_cast<double>(n)));
}

TEST(MonteCarlo, SeedDeterminesCounts) {
  Environment env({Family::isotropic_tilt, 3, 0.05, 0}, 3);
  const auto a = mc_exit(env, Point{1, 0, 0}, 4, 5000, 9), b = mc_exit(env, Point{1, 0, 0}, 4, 5000, 9);
  const auto c = mc_exit(env, Point{1, 0, 0}, 4, 5000, 10);
  EXPECT_EQ(a.counts, b.counts);
  EXPECT_NE(a.counts, c.counts);
}

TEST(MonteCarlo, StepCapAbortsWalks) {
  Environment env({Family::srw, 3, 0, 0}, 1);
  const auto mc = mc_exit(env, Point::zero(3), 6, 1000, 2, 3);
  EXPECT_EQ(mc.aborted, 1000u);
  EXPECT_EQ(mc.walks, 0u);
}

TEST(Transience, MatchesExactAndDecreasesAlongRay) {
  Environment env({Family::srw, 3, 0, 0}, 1);
  const std::size_t n = 40000;
  double prev = 1.0;
  for (double radius : {4.0, 6.0, 9.0}) {
    const auto row = transience_row(env, 3, 12, radius, 2, n, 7);
    const double exact = 1 - annulus_exit_exact(3, Point{static_cast<std::int32_t>(radius), 0, 0}, 12);
    EXPECT_NEAR(row.p_hit, exact, 4 * std::sqrt(exact * (1 - exact) / n)) << radius;
    EXPECT_LT(row.p_hit, prev);
    EXPECT_NEAR(row.majorant, std::pow(2.0 / 3.0, row.k), 1e-15);
    prev = row.p_hit;
  }
  EXPECT_THROW(transience_row(env, 3, 12, 2, 2, 10, 1), Error);
  EXPECT_THROW(transience_row(env, 12, 12, 12, 2, 10, 1), Error);
}

TEST(Conditions, C2PassesForSimpleRandomWalk) {
  const auto res =
      run(cfg({{"experiment", "c2scan"}, {"seed", 1}, {"L", {6, 8}}, {"epsilon", {0}}, {"n_envs", 2}}, scratch("c2")));
  for (const auto& r : res.rows)
    if (r.metric == "pass") {
      EXPECT_EQ(r.value, 1.0);
    }
}

// ---------------------------------------------------------------------------
// command line

TEST(Cli, ValidateConfigExitCodes) {
  const std::string cli = RWRE_CLI_PATH, dir = scratch("cli");
  {
    std::ofstream(dir + "/ok.json") << json(kDstar).dump();
    std::ofstream(dir + "/bad.json") << with(kDstar, {{"bogus", 1}}).dump();
    std::ofstream(dir + "/broken.json") << "{\"seed\": ";
  }
  EXPECT_EQ(sh(cli + " validate-config " + dir + "/ok.json"), 0);
  EXPECT_EQ(sh(cli + " validate-config " + dir + "/bad.json"), 2);
  EXPECT_EQ(sh(cli + " validate-config " + dir + "/broken.json"), 2);
  EXPECT_EQ(sh(cli + " validate-config " + dir + "/missing.json"), 2);
  EXPECT_EQ(sh(cli + " c2scan --config " + dir + "/ok.json"), 2);
  EXPECT_EQ(sh(cli + " frobnicate"), 2);
}

TEST(Cli, RunsAnExperiment) {
  const std::string cli = RWRE_CLI_PATH, dir = scratch("cli_run");
  std::ofstream(dir + "/c.json") << json(kDstar).dump();
  EXPECT_EQ(sh(cli + " dstar --config " + dir + "/c.json --out " + dir + "/out --seed 3 --threads 2"), 0);
  const auto ls = lines(dir + "/out/dstar.jsonl");
  ASSERT_FALSE(ls.empty());
  EXPECT_EQ(json::parse(ls[0])["seed"], 3);
  EXPECT_TRUE(fs::exists(dir + "/out/dstar_summary.csv"));
}

TEST(Cli, EnvironmentGenerateAndDump) {
  const std::string cli = RWRE_CLI_PATH, dir = scratch("cli_env");
  const std::string file = dir + "/e.bin";
  EXPECT_EQ(sh(cli + " env gen --family balanced_axis --epsilon 0.05 --seed 4 --L 3 --out " + file), 0);
  const auto rec = deserialize(read_file(file));
  EXPECT_EQ(rec.laws.size(), Domain::ball(Point::zero(3), 3).n_interior());
  EXPECT_EQ(rec.seed, 4u);
  EXPECT_EQ(sh(cli + " env dump " + file + " --limit 3"), 0);
  EXPECT_EQ(sh(cli + " env gen --family nope --epsilon 0.05 --seed 4 --L 3 --out " + file), 2);
  EXPECT_EQ(sh(cli + " env dump " + dir + "/missing.bin"), 2);
}
