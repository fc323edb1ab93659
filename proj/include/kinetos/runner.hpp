#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kinetos/kernel.hpp"
#include "kinetos/particles.hpp"
#include "kinetos/shear.hpp"
#include "kinetos/types.hpp"

namespace kinetos {

const char* version() noexcept;

enum class Command { KernelReport, Eig, Simulate, Profile, Stability, Contraction, Comparison, Shear };

std::string to_string(Command c);
Command command_from_string(const std::string& name, const std::string& path = "command");

// Zero means "command default" for dt, T and observe.
struct NumericSpec {
  std::size_t N = 100000;
  double dt = 0.0;
  double T = 0.0;
  double observe = 0.0;  // observation lag
  std::size_t directions = 64;
  std::size_t radii = 48;
  double k_min = 0.1;
  double k_max = 10.0;
  double K = 3.0;  // profile second-moment scale
  double p = 3.0;  // comparison order and stability guide order
  std::vector<double> p_orders;
  double min_r2 = 0.9;
  double admissible_cap = 1.0;
  std::size_t threads = 0;

  nlohmann::json to_json() const;
  static NumericSpec from_json(const nlohmann::json& j, const std::string& path = "numeric");
};

struct ExperimentSpec {
  Command command = Command::KernelReport;
  KernelSpec kernel{Kernel::constant(1.0), 0.0};
  Mat3 drift = Mat3::Zero();
  std::optional<ShearScenario> scenario;  // drift block {"scenario": …}, shear only
  InitialSpec initial;
  std::optional<InitialSpec> initial_other;  // second law of contraction / comparison
  NumericSpec numeric;
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  // Every field written, defaults included.
  nlohmann::json to_json() const;
  static ExperimentSpec from_json(const nlohmann::json& j);
  static ExperimentSpec load(const std::filesystem::path& path);
  std::string canonical() const;
  // FNV-1a 64 of canonical().
  std::string hash() const;
};

struct Check {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double bound = 0.0;
};

struct ManifestEntry {
  std::string file;  // relative to the run directory
  std::string hash;
  std::uintmax_t bytes = 0;
};

struct ExperimentRecord {
  std::string spec_hash;
  double wall_seconds = 0.0;
  std::vector<ManifestEntry> files;
  std::vector<Check> checks;
  nlohmann::json summary;

  bool passed() const;
  // 0 when every check passes, 2 otherwise.
  int exit_code() const { return passed() ? 0 : 2; }
  nlohmann::json to_json() const;
};

// Runs the command, writing spec.json, the observables, summary.json and
// manifest.json under `out`. Module errors propagate.
ExperimentRecord execute(const ExperimentSpec& spec, const std::filesystem::path& out);
ExperimentRecord execute(const ExperimentSpec& spec);

struct SweepJob {
  ExperimentSpec spec;
  std::string name;
};

struct SweepRow {
  std::string name;
  std::string command;
  std::uint64_t seed = 0;
  std::string spec_hash;
  int exit_code = 0;  // 0 pass, 2 check failure, 1 error
  std::string error;
  nlohmann::json scalars;  // flattened numeric summary
};

struct SweepReport {
  std::vector<SweepRow> rows;
  int exit_code() const;
  // Per-column count, mean, standard deviation; "dispersed" when sd > 0.5|mean|.
  nlohmann::json aggregate() const;
  void write_csv(std::ostream& os) const;
};

// {"output_dir": DIR, "runs": [{"config": FILE, "seed"?: S, "name"?: NAME} | {"spec": {…}, "name"?: NAME}]}
// Relative config paths resolve against the manifest's directory.
std::vector<SweepJob> load_sweep(const std::filesystem::path& manifest, std::filesystem::path* output_dir);

// At most `workers` jobs at a time; job i writes to root/NAME. A failing job is
// recorded and the rest continue.
SweepReport sweep(const std::vector<SweepJob>& jobs, std::size_t workers,
                  const std::filesystem::path& root);

// Flatten nested objects of numbers and booleans to dotted keys.
nlohmann::json flatten_scalars(const nlohmann::json& j);

}  // namespace kinetos
