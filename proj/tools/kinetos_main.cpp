#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"
#include "kinetos/runner.hpp"

namespace fs = std::filesystem;
using namespace kinetos;

namespace {

constexpr int kExitError = 1;

ExperimentSpec load_for(const std::string& command, const fs::path& config) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(config));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", config.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("", config.string() + ": expected a JSON object");
  if (!j.contains("command")) j["command"] = command;
  if (j.at("command") != command) {
    throw ConfigError("command", "config declares " + j.at("command").dump() + " but the tool was invoked as " + command);
  }
  return ExperimentSpec::from_json(j);
}

int run_command(const std::string& command, const fs::path& config, std::optional<std::uint64_t> seed,
                const std::optional<std::string>& out) {
  ExperimentSpec spec = load_for(command, config);
  if (seed) spec.seed = *seed;
  if (out) spec.output_dir = *out;
  const auto rec = execute(spec, spec.output_dir);
  for (const auto& c : rec.checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << "  value=" << fmt(c.value) << "  bound=" << fmt(c.bound)
              << '\n';
  }
  std::cout << "wrote " << (fs::path(spec.output_dir) / "manifest.json").string() << "  (" << rec.files.size()
            << " files, spec " << rec.spec_hash << ", " << fmt(rec.wall_seconds) << " s)\n";
  return rec.exit_code();
}

int run_sweep(const fs::path& manifest, std::size_t jobs, const std::optional<std::string>& out) {
  fs::path root;
  const auto list = load_sweep(manifest, &root);
  if (out) root = *out;
  const auto report = sweep(list, jobs, root);
  for (const auto& r : report.rows) {
    const char* status = r.exit_code == 0 ? "PASS " : r.exit_code == 2 ? "FAIL " : "ERROR";
    std::cout << status << ' ' << r.name;
    if (!r.error.empty()) std::cout << "  " << r.error;
    std::cout << '\n';
  }
  std::cout << "wrote " << (root / "sweep.csv").string() << "  (" << report.rows.size() << " jobs)\n";
  return report.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Drift-modified Boltzmann experiments for Maxwell molecules"};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  const char* commands[] = {"kernel-report", "eig", "simulate", "profile",
                            "stability", "contraction", "comparison", "shear"};
  for (const char* name : commands) {
    auto* sub = app.add_subcommand(name, std::string("run the ") + name + " experiment");
    sub->add_option("--config", config, "experiment spec (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the master seed");
    sub->add_option("--out", out, "override the output directory");
  }
  std::string manifest;
  std::size_t jobs = 1;
  auto* sweep_cmd = app.add_subcommand("sweep", "run a list of specs");
  sweep_cmd->add_option("--manifest", manifest, "sweep manifest (JSON)")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--jobs", jobs, "concurrent jobs")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--out", out, "override the sweep output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitError;
  }

  const auto* chosen = app.get_subcommands().front();
  try {
    if (chosen == sweep_cmd) return run_sweep(manifest, jobs, out);
    return run_command(chosen->get_name(), config, seed, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error at " << (e.path().empty() ? "<root>" : e.path()) << ": " << e.message() << '\n';
  } catch (const std::exception& e) {
    std::cerr << chosen->get_name() << " failed: " << e.what() << '\n';
  }
  return kExitError;
}
