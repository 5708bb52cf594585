// rwre: run experiments, validate configs, generate and inspect environments.
//
//   rwre <experiment> --config path.json [--seed N] [--out dir] [--threads N]
//   rwre validate-config path.json
//   rwre env gen --family F --epsilon E --seed N --L R [--d D] [--axis A] --out file
//   rwre env dump file [--limit N]
//
// Exit codes: 0 success, 1 some sample errored, 2 invalid input.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "rwre/env_io.hpp"
#include "rwre/harness.hpp"

namespace {

int run_experiment(const std::string& name, const std::string& path, std::optional<std::uint64_t> seed,
                   std::optional<std::string> out, int threads) {
  auto j = [&] {
    std::ifstream f(path);
    if (!f) throw rwre::Error(rwre::ErrorCode::config_invalid, "cannot open config '" + path + "'");
    try {
      return rwre::json::parse(f);
    } catch (const rwre::json::parse_error& e) {
      throw rwre::Error(rwre::ErrorCode::config_invalid, std::string("malformed JSON: ") + e.what());
    }
  }();
  if (!j.is_object()) throw rwre::Error(rwre::ErrorCode::config_invalid, "config must be a JSON object");
  if (j.contains("experiment") && j["experiment"] != name)
    throw rwre::Error(rwre::ErrorCode::config_invalid,
                      "config is for '" + j["experiment"].dump() + "', not '" + name + "'");
  j["experiment"] = name;
  if (seed) j["seed"] = *seed;
  if (out) j["output_path"] = *out;
  const auto cfg = rwre::parse_config(j);
  if (threads > 0) rwre::thread_override() = threads;
  const auto res = rwre::run(cfg);
  std::cout << res.jsonl_path << "\n" << res.csv_path << "\n"
            << res.n_rows << " rows, " << res.n_errors << " errors\n";
  return res.exit_code();
}

int validate(const std::string& path) {
  const auto cfg = rwre::load_config(path);
  std::cout << "valid " << rwre::experiment_name(cfg.experiment) << " config_hash=" << rwre::config_hash(cfg) << "\n";
  for (const auto& w : rwre::config_warnings(cfg)) std::cout << "warning: " << w << "\n";
  return 0;
}

int env_gen(const std::string& family, double eps, std::uint64_t seed, double L, int d, int axis,
            const std::string& out) {
  rwre::FamilySpec spec;
  spec.family = rwre::parse_family(family);
  spec.dim = d;
  spec.epsilon = eps;
  spec.axis = axis;
  rwre::Environment env(spec, seed);
  const auto region = rwre::Domain::ball(rwre::Point::zero(d), L);
  rwre::write_file(out, rwre::serialize(env, region));
  std::cout << out << ": " << region.n_interior() << " sites\n";
  return 0;
}

int env_dump(const std::string& path, std::size_t limit) {
  const auto rec = rwre::deserialize(rwre::read_file(path));
  std::cout << "# version " << rec.version << " family " << rwre::family_name(rec.spec.family) << " d "
            << rec.spec.dim << " epsilon " << rec.spec.epsilon << " axis " << rec.spec.axis << " seed " << rec.seed
            << " sites " << rec.laws.size() << "\n";
  std::cout << "# point";
  for (int k = 0; k < 2 * rec.spec.dim; ++k) std::cout << " p" << (k % 2 ? "-" : "+") << (k / 2 + 1);
  std::cout << "\n";
  std::size_t n = 0;
  for (const auto& [x, q] : rec.laws) {
    if (limit && n++ >= limit) break;
    std::cout << x.str();
    for (int k = 0; k < q.n(); ++k) std::cout << ' ' << rwre::format_number(q.p[k]);
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Random walks in random environment: experiments and tools"};
  app.require_subcommand(1);
  int rc = 0;

  std::string cfg_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int threads = 0;
  for (const auto& [e, name] : rwre::experiment_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--config", cfg_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out, "override the output directory");
    sub->add_option("--threads", threads, "worker count (default RWRE_THREADS or 1)");
    sub->callback([&, n = name] { rc = run_experiment(n, cfg_path, seed, out, threads); });
  }

  std::string vpath;
  auto* val = app.add_subcommand("validate-config", "check a config against the schema");
  val->add_option("config", vpath)->required();
  val->callback([&] { rc = validate(vpath); });

  auto* env = app.add_subcommand("env", "environment files");
  env->require_subcommand(1);
  std::string family = "isotropic_tilt", gen_out;
  double eps = 0, L = 8;
  std::uint64_t env_seed = 0;
  int d = 3, axis = 0;
  auto* gen = env->add_subcommand("gen", "sample an environment on V_L and write it");
  gen->add_option("--family", family);
  gen->add_option("--epsilon", eps)->required();
  gen->add_option("--seed", env_seed)->required();
  gen->add_option("--L", L)->required();
  gen->add_option("--d", d);
  gen->add_option("--axis", axis);
  gen->add_option("--out", gen_out)->required();
  gen->callback([&] { rc = env_gen(family, eps, env_seed, L, d, axis, gen_out); });
  std::string dump_path;
  std::size_t limit = 0;
  auto* dump = env->add_subcommand("dump", "print an environment file");
  dump->add_option("file", dump_path)->required();
  dump->add_option("--limit", limit, "print at most N sites");
  dump->callback([&] { rc = env_dump(dump_path, limit); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const rwre::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return rc;
}
