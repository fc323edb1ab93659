#include "kinetos/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "json_util.hpp"
#include "kinetos/errors.hpp"
#include "kinetos/fourier.hpp"
#include "kinetos/io.hpp"
#include "kinetos/moments.hpp"
#include "kinetos/rng.hpp"
#include "kinetos/selfsimilar.hpp"
#include "kinetos/stats.hpp"

namespace kinetos {

namespace fs = std::filesystem;
using nlohmann::json;

const char* version() noexcept { return KINETOS_VERSION; }

namespace {

const std::vector<std::pair<Command, const char*>>& command_names() {
  static const std::vector<std::pair<Command, const char*>> names = {
      {Command::KernelReport, "kernel-report"}, {Command::Eig, "eig"},
      {Command::Simulate, "simulate"},          {Command::Profile, "profile"},
      {Command::Stability, "stability"},        {Command::Contraction, "contraction"},
      {Command::Comparison, "comparison"},      {Command::Shear, "shear"}};
  return names;
}

std::size_t count_at(const json& j, const char* key, const std::string& path, std::size_t min) {
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < static_cast<std::int64_t>(min)) {
    throw ConfigError(path + "." + key, "expected an integer >= " + std::to_string(min));
  }
  return v.get<std::size_t>();
}

void require_top_keys(const json& j, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("", "expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(key, "unknown key");
    }
  }
}

std::uint64_t seed_at(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw ConfigError(path, "expected an unsigned 64-bit integer");
}

bool particle_command(Command c) { return c != Command::KernelReport && c != Command::Eig; }

bool two_law_command(Command c) { return c == Command::Contraction || c == Command::Comparison; }

}  // namespace

std::string to_string(Command c) {
  for (const auto& [cmd, name] : command_names()) {
    if (cmd == c) return name;
  }
  throw InvalidArgument("unknown command");
}

Command command_from_string(const std::string& name, const std::string& path) {
  for (const auto& [cmd, n] : command_names()) {
    if (name == n) return cmd;
  }
  throw ConfigError(path, "unknown command \"" + name + "\"");
}

// Spec -----------------------------------------------------------------------

json NumericSpec::to_json() const {
  return {{"N", N},           {"dt", dt},
          {"T", T},           {"observe", observe},
          {"directions", directions}, {"radii", radii},
          {"k_min", k_min},   {"k_max", k_max},
          {"K", K},           {"p", p},
          {"p_orders", p_orders},     {"min_r2", min_r2},
          {"admissible_cap", admissible_cap}, {"threads", threads}};
}

NumericSpec NumericSpec::from_json(const json& j, const std::string& path) {
  detail::require_keys(j,
                       {"N", "dt", "T", "observe", "directions", "radii", "k_min", "k_max", "K", "p",
                        "p_orders", "min_r2", "admissible_cap", "threads"},
                       path);
  NumericSpec n;
  auto number = [&](const char* key, double& out) {
    if (j.contains(key)) out = detail::number_at(j, key, path);
  };
  auto non_negative = [&](const char* key, double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(path + "." + key, "must be finite and >= 0");
  };
  if (j.contains("N")) n.N = count_at(j, "N", path, 2);
  if (j.contains("directions")) n.directions = count_at(j, "directions", path, 4);
  if (j.contains("radii")) n.radii = count_at(j, "radii", path, 2);
  if (j.contains("threads")) n.threads = count_at(j, "threads", path, 0);
  number("dt", n.dt);
  number("T", n.T);
  number("observe", n.observe);
  number("k_min", n.k_min);
  number("k_max", n.k_max);
  number("K", n.K);
  number("p", n.p);
  number("min_r2", n.min_r2);
  number("admissible_cap", n.admissible_cap);
  non_negative("dt", n.dt);
  non_negative("T", n.T);
  non_negative("observe", n.observe);
  non_negative("K", n.K);
  if (!(n.k_min > 0.0)) throw ConfigError(path + ".k_min", "must be positive");
  if (!(n.k_max > n.k_min) || !std::isfinite(n.k_max)) throw ConfigError(path + ".k_max", "must exceed k_min");
  if (!(n.p >= 2.0 && n.p <= 4.0)) throw ConfigError(path + ".p", "must lie in [2, 4]");
  if (!(n.min_r2 >= 0.0 && n.min_r2 <= 1.0)) throw ConfigError(path + ".min_r2", "must lie in [0, 1]");
  if (!(n.admissible_cap > 0.0)) throw ConfigError(path + ".admissible_cap", "must be positive");
  if (j.contains("p_orders")) {
    const auto& a = j.at("p_orders");
    if (!a.is_array()) throw ConfigError(path + ".p_orders", "expected an array of numbers");
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_number() || !(a[i].get<double>() > 0.0)) {
        throw ConfigError(path + ".p_orders[" + std::to_string(i) + "]", "expected a positive number");
      }
      n.p_orders.push_back(a[i].get<double>());
    }
  }
  return n;
}

json ExperimentSpec::to_json() const {
  json j;
  j["command"] = to_string(command);
  j["kernel"] = kernel.to_json();
  if (scenario) {
    j["drift"] = {{"scenario", scenario->to_json()}};
  } else {
    j["drift"] = {{"matrix", detail::mat_to_json(drift)}};
  }
  j["initial"] = initial.to_json();
  if (initial_other) j["initial_other"] = initial_other->to_json();
  j["numeric"] = numeric.to_json();
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  return j;
}

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  require_top_keys(j, {"command", "kernel", "drift", "initial", "initial_other", "numeric", "seed", "output_dir"});
  ExperimentSpec s;
  if (!j.contains("command") || !j.at("command").is_string()) throw ConfigError("command", "expected a string");
  s.command = command_from_string(j.at("command").get<std::string>());
  if (j.contains("kernel")) s.kernel = KernelSpec::from_json(j.at("kernel"), "kernel");
  if (j.contains("drift")) {
    const auto& d = j.at("drift");
    detail::require_keys(d, {"matrix", "scenario"}, "drift");
    if (d.contains("matrix") == d.contains("scenario")) {
      throw ConfigError("drift", "expected exactly one of \"matrix\" or \"scenario\"");
    }
    if (d.contains("matrix")) {
      s.drift = detail::mat_from_json(d.at("matrix"), "drift.matrix");
    } else {
      s.scenario = ShearScenario::from_json(d.at("scenario"), "drift.scenario");
    }
  }
  if (j.contains("initial")) s.initial = InitialSpec::from_json(j.at("initial"), "initial");
  if (j.contains("initial_other")) s.initial_other = InitialSpec::from_json(j.at("initial_other"), "initial_other");
  if (j.contains("numeric")) s.numeric = NumericSpec::from_json(j.at("numeric"), "numeric");
  if (j.contains("seed")) {
    s.seed = seed_at(j.at("seed"), "seed");
  }
  if (j.contains("output_dir")) {
    if (!j.at("output_dir").is_string()) throw ConfigError("output_dir", "expected a string");
    s.output_dir = j.at("output_dir").get<std::string>();
  }

  if (s.command == Command::Shear && !s.scenario) {
    throw ConfigError("drift.scenario", "required by the shear command");
  }
  if (s.command != Command::Shear && s.scenario) {
    throw ConfigError("drift.scenario", "only the shear command takes a scenario");
  }
  if (two_law_command(s.command) && !s.initial_other) {
    throw ConfigError("initial_other", "required by the " + to_string(s.command) + " command");
  }
  if (!two_law_command(s.command) && s.initial_other) {
    throw ConfigError("initial_other", "only contraction and comparison take a second law");
  }
  if (particle_command(s.command) && !(s.kernel.theta_min > 0.0)) {
    throw ConfigError("kernel.theta_min", "particle commands need a positive cutoff");
  }
  return s;
}

ExperimentSpec ExperimentSpec::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("", path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentSpec::canonical() const { return to_json().dump(2); }

std::string ExperimentSpec::hash() const { return hex64(fnv1a64(canonical())); }

// Records ----------------------------------------------------------------------

bool ExperimentRecord::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

namespace {

json checks_json(const std::vector<Check>& checks) {
  json a = json::array();
  for (const auto& c : checks) a.push_back({{"name", c.name}, {"pass", c.pass}, {"value", c.value}, {"bound", c.bound}});
  return a;
}

}  // namespace

json ExperimentRecord::to_json() const {
  json files_json = json::array();
  for (const auto& f : files) files_json.push_back({{"file", f.file}, {"hash", f.hash}, {"bytes", f.bytes}});
  return {{"spec_hash", spec_hash}, {"wall_seconds", wall_seconds}, {"files", files_json},
          {"checks", checks_json(checks)}, {"passed", passed()}};
}

// Commands ---------------------------------------------------------------------

namespace {

struct Outcome {
  json summary;
  std::vector<Check> checks;
};

Check at_most(std::string name, double value, double bound) {
  return {std::move(name), value <= bound, value, bound};
}

Check at_least(std::string name, double value, double bound) {
  return {std::move(name), value >= bound, value, bound};
}

SimulationParams sim_params(const ExperimentSpec& s) {
  SimulationParams sim;
  sim.particles = s.numeric.N;
  sim.dt = s.numeric.dt;
  sim.seed = s.seed;
  sim.threads = s.numeric.threads;
  sim.directions = s.numeric.directions;
  sim.radii = s.numeric.radii;
  sim.k_min = s.numeric.k_min;
  sim.k_max = s.numeric.k_max;
  sim.admissible_cap = s.numeric.admissible_cap;
  return sim;
}

double step_for(const ExperimentSpec& s, const CutoffKernel& k) {
  const double dt = s.numeric.dt > 0.0 ? s.numeric.dt : default_dt(k);
  if (dt * k.total_rate() > kMaxRateStep) {
    throw StepTooLarge("dt*S = " + fmt(dt * k.total_rate()) + " exceeds " + fmt(kMaxRateStep));
  }
  return dt;
}

std::size_t observe_every(double lag, double dt) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(lag / dt)));
}

// Largest |a − b| / se over the six entries.
double max_z(const SymMat3& a, const SymMat3& b, const SymMat3& se) {
  double z = 0.0;
  for (int i = 0; i < 6; ++i) {
    const double diff = std::abs(a.entries()[i] - b.entries()[i]);
    const double s = se.entries()[i];
    z = std::max(z, s > 0.0 ? diff / s : (diff == 0.0 ? 0.0 : INFINITY));
  }
  return z;
}

Outcome kernel_report(const ExperimentSpec& s, const fs::path& out) {
  const Kernel& b = s.kernel.base;
  const double tmin = s.kernel.theta_min;
  const auto constants = angular_constants(b, tmin);
  std::vector<double> orders = s.numeric.p_orders.empty() ? std::vector<double>{2.0, 3.0, 4.0} : s.numeric.p_orders;
  std::sort(orders.begin(), orders.end());
  orders.erase(std::unique(orders.begin(), orders.end()), orders.end());
  Outcome o;
  o.summary = s.kernel.to_json();
  o.summary["bbar"] = constants.bbar;
  o.summary["Lambda"] = constants.Lambda;
  o.summary["S"] = total_rate(b, tmin);  // null when infinite
  json lambda = json::object();
  std::vector<double> values;
  for (double p : orders) {
    values.push_back(lambda_p(b, p, tmin));
    lambda[fmt(p)] = values.back();
  }
  o.summary["lambda"] = lambda;
  write_file(out / "kernel_report.json", o.summary.dump(2) + "\n");

  o.checks.push_back(at_most("lambda_2_zero", std::abs(lambda_p(b, 2.0, tmin)), 1e-8 * std::max(1.0, constants.bbar)));
  bool increasing = true;
  for (std::size_t i = 1; i < values.size(); ++i) increasing = increasing && values[i] > values[i - 1];
  o.checks.push_back({"lambda_increasing", increasing, static_cast<double>(values.size()), 0.0});
  return o;
}

Outcome eig(const ExperimentSpec& s, const fs::path& out) {
  const double alpha = angular_constants(s.kernel.base, s.kernel.theta_min).bbar;
  const auto op = assemble_operator(alpha, s.drift);
  const auto rep = leading_eigenpair(op);
  Outcome o;
  o.summary = to_json(rep);
  o.summary["alpha"] = alpha;
  o.summary["drift_norm"] = entry_norm(s.drift);
  if (!s.drift.isZero(0.0)) {
    const auto probe = probe_radius(alpha, s.drift, s.numeric.admissible_cap * alpha);
    o.summary["radius"] = probe.radius;
    o.summary["radius_capped"] = probe.capped;
  }
  write_file(out / "eig.json", o.summary.dump(2) + "\n");
  o.checks.push_back(at_most("residual", rep.residual, 1e-10));
  o.checks.push_back(at_least("N_bar_positive", rep.N_bar.min_eigenvalue(), 0.0));
  return o;
}

Outcome simulate(const ExperimentSpec& s, const fs::path& out) {
  const CutoffKernel k = s.kernel.cutoff();
  const double dt = step_for(s, k);
  const double T = s.numeric.T > 0.0 ? s.numeric.T : 5.0 / k.bbar();
  const double lag = s.numeric.observe > 0.0 ? s.numeric.observe : T / 50.0;
  Ensemble e = init_ensemble(s.initial, s.numeric.N, s.seed, "init");
  const Vec3 mean0 = e.mean();
  const SymMat3 cov0 = e.covariance();
  const double energy0 = e.second_moment().trace();

  DriftSpec drift(s.drift, dt);
  Collider collider(k);
  RunOptions ro;
  ro.dt = dt;
  ro.t_end = T;
  ro.observe_every = observe_every(lag, dt);
  ro.p_orders = s.numeric.p_orders;
  ro.threads = s.numeric.threads;
  const auto rec = run(e, drift, collider, ro);

  std::ostringstream series;
  write_series_csv(series, rec, s.numeric.p_orders);
  write_file(out / "series.csv", series.str());
  write_snapshot(out / "final.kens", e);

  const SymMat3 ode = integrate_moments(s.drift, k.bbar(), cov0, {0.0, e.time}).back();
  Ensemble centered = e;
  const Vec3 mean = e.mean();
  for (auto& v : centered.v) v -= mean;
  const SymMat3 cov = centered.second_moment();
  const double z_cov = max_z(cov, ode, centered.second_moment_stderr());
  const Vec3 transported = drift.flow(0.0, e.time) * mean0;
  double z_mean = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double se = std::sqrt(std::max(cov(c, c), 0.0) / static_cast<double>(e.size()));
    const double diff = std::abs(mean[c] - transported[c]);
    z_mean = std::max(z_mean, se > 0.0 ? diff / se : (diff <= 1e-12 ? 0.0 : INFINITY));
  }

  Outcome o;
  o.summary = {{"t_end", e.time},
               {"dt", dt},
               {"steps", rec.steps},
               {"pairs", rec.collisions.pairs},
               {"mean", detail::vec_to_json(mean)},
               {"covariance", to_json(cov)},
               {"covariance_ode", to_json(ode)},
               {"covariance_z", z_cov},
               {"mean_z", z_mean}};
  o.checks.push_back(at_most("covariance_ode", z_cov, 5.0));
  o.checks.push_back(at_most("mean_transport", z_mean, 5.0));
  if (s.drift.isZero(0.0)) {
    const double drift_rel = std::abs(e.second_moment().trace() - energy0) / std::max(energy0, 1e-300);
    o.summary["energy_drift"] = drift_rel;
    o.checks.push_back(at_most("energy", drift_rel, 1e-9));
  }
  write_file(out / "simulate_summary.json", o.summary.dump(2) + "\n");
  return o;
}

ProfileOptions profile_options(const ExperimentSpec& s, bool own_clock) {
  ProfileOptions po;
  po.sim = sim_params(s);
  if (own_clock) {
    po.lag = s.numeric.observe;
    po.max_time = s.numeric.T;
  }
  return po;
}

Outcome profile(const ExperimentSpec& s, const fs::path& out) {
  const CutoffKernel k = s.kernel.cutoff();
  const auto r = find_profile(s.drift, k, s.numeric.K, profile_options(s, true));
  write_profile(out, r);
  Outcome o;
  o.summary = r.summary();
  o.checks.push_back(at_most("moments", max_z(r.snapshot.second_moment(), r.N_bar * r.K,
                                               r.snapshot.second_moment_stderr()),
                             5.0));
  o.checks.push_back(at_most("successive_d2", r.terminal_d2, 2.0 * r.terminal_floor));
  return o;
}

StabilityOptions stability_options(const ExperimentSpec& s) {
  StabilityOptions so;
  so.sim = sim_params(s);
  so.t_end = s.numeric.T;
  so.observe_lag = s.numeric.observe;
  so.p = s.numeric.p;
  so.p_orders = s.numeric.p_orders;
  so.min_r2 = s.numeric.min_r2;
  return so;
}

Outcome stability(const ExperimentSpec& s, const fs::path& out) {
  const CutoffKernel k = s.kernel.cutoff();
  const auto prof = find_profile(s.drift, k, s.numeric.K, profile_options(s, false));
  const auto res = stability_run(s.initial, s.drift, k, prof, stability_options(s));
  write_profile(out, prof);
  write_stability(out, res, s.numeric.p_orders);
  Outcome o;
  o.summary = {{"profile", prof.summary()}, {"stability", res.summary()}};
  o.checks.push_back({"log_linear", res.log_linear(), res.r2, res.min_r2});
  o.checks.push_back({"theta_positive", res.indeterminate || res.theta > 0.0,
                      std::isnan(res.theta) ? 0.0 : res.theta, 0.0});
  return o;
}

struct PairedRun {
  CfSeries a, b;
  double dt = 0.0;
};

PairedRun paired_run(const ExperimentSpec& s, const CutoffKernel& k) {
  const double dt = step_for(s, k);
  const double T = s.numeric.T > 0.0 ? s.numeric.T : 5.0 / k.bbar();
  const double lag = s.numeric.observe > 0.0 ? s.numeric.observe : T / 20.0;
  const auto grid = sim_params(s).grid();
  EcfOptions eo;
  eo.threads = s.numeric.threads;
  DriftSpec drift(s.drift, dt);
  PairedRun pr;
  pr.dt = dt;
  auto one = [&](const InitialSpec& law, const std::string& tag, CfSeries& series) {
    Ensemble e = init_ensemble(law, s.numeric.N, s.seed, tag + ".init");
    Collider collider(k);
    RunOptions ro;
    ro.dt = dt;
    ro.t_end = T;
    ro.observe_every = observe_every(lag, dt);
    ro.label = tag + ".collide";
    ro.threads = s.numeric.threads;
    run(e, drift, collider, ro, [&](const Ensemble& en) {
      series.times.push_back(en.time);
      series.snapshots.push_back(ecf(en, grid, eo));
    });
  };
  one(s.initial, "a", pr.a);
  one(*s.initial_other, "b", pr.b);
  return pr;
}

void write_d2_csv(const fs::path& path, const PairedRun& pr, const std::vector<double>& ratios) {
  std::ostringstream os;
  os << "t,d2,noise_floor,ratio\n";
  for (std::size_t i = 0; i < pr.a.times.size(); ++i) {
    const auto d = d2(pr.a.snapshots[i], pr.b.snapshots[i]);
    os << fmt(pr.a.times[i]) << ',' << fmt(d.value) << ',' << fmt(d.noise_floor) << ','
       << fmt(i < ratios.size() ? ratios[i] : NAN) << '\n';
  }
  write_file(path, os.str());
}

Outcome contraction(const ExperimentSpec& s, const fs::path& out) {
  const CutoffKernel k = s.kernel.cutoff();
  const auto pr = paired_run(s, k);
  const auto rep = check_contraction(pr.a, pr.b, s.drift);
  write_d2_csv(out / "d2.csv", pr, rep.ratios);
  Outcome o;
  o.summary = rep.to_json();
  o.summary["drift_norm"] = entry_norm(s.drift);
  write_file(out / "contraction.json", o.summary.dump(2) + "\n");
  const double worst = rep.ratios.empty() ? 0.0 : *std::max_element(rep.ratios.begin(), rep.ratios.end());
  o.checks.push_back({"contraction", rep.pass, worst, rep.degenerate ? 0.0 : 1.0 + rep.tolerance});
  return o;
}

Outcome comparison(const ExperimentSpec& s, const fs::path& out) {
  const CutoffKernel k = s.kernel.cutoff();
  const double p = s.numeric.p;
  const auto pr = paired_run(s, k);
  const double lambda_p = k.lambda(p);
  const auto env = fit_envelope(pr.a.snapshots.front(), pr.b.snapshots.front(), p);
  const auto rep = check_comparison(pr.a, pr.b, p, s.drift, lambda_p, env);
  write_d2_csv(out / "d2.csv", pr, rep.check.ratios);
  Outcome o;
  o.summary = rep.to_json();
  o.summary["p"] = p;
  write_file(out / "comparison.json", o.summary.dump(2) + "\n");
  o.checks.push_back(at_most("envelope", static_cast<double>(rep.violations), 0.0));
  const double target = lambda_p - p * entry_norm(s.drift);
  o.checks.push_back(at_least("envelope_rate", rep.envelope_rate, 0.8 * target));
  return o;
}

Outcome shear(const ExperimentSpec& s, const fs::path& out) {
  const CutoffKernel k = s.kernel.cutoff();
  ShearOptions so;
  so.K = s.numeric.K;
  so.profile = profile_options(s, false);
  so.stability = stability_options(s);
  const auto r = run_shear(*s.scenario, k, s.initial, so);
  write_shear(out, r);
  Outcome o;
  o.summary = r.summary();
  o.checks.push_back(at_most("mass", r.mass_error, 1e-9));
  o.checks.push_back(at_most("frame", r.frame_z, 5.0));
  if (!s.scenario->unperturbed()) {
    o.checks.push_back({"alpha_settles", r.alpha_settles(),
                        r.alpha_windows.empty() ? 0.0 : r.alpha_windows.back().gap, 2.0 * r.alpha2_se});
  }
  o.checks.push_back({"log_linear", r.stability.log_linear(), r.stability.r2, r.stability.min_r2});
  return o;
}

Outcome dispatch(const ExperimentSpec& s, const fs::path& out) {
  switch (s.command) {
    case Command::KernelReport: return kernel_report(s, out);
    case Command::Eig: return eig(s, out);
    case Command::Simulate: return simulate(s, out);
    case Command::Profile: return profile(s, out);
    case Command::Stability: return stability(s, out);
    case Command::Contraction: return contraction(s, out);
    case Command::Comparison: return comparison(s, out);
    case Command::Shear: return shear(s, out);
  }
  throw InvalidArgument("unknown command");
}

std::vector<ManifestEntry> list_files(const fs::path& dir) {
  std::vector<ManifestEntry> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    files.push_back({rel, file_hash(entry.path()), entry.file_size()});
  }
  std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) { return a.file < b.file; });
  return files;
}

}  // namespace

ExperimentRecord execute(const ExperimentSpec& spec, const fs::path& out) {
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(out);
  write_file(out / "spec.json", spec.canonical() + "\n");

  Outcome o = dispatch(spec, out);
  ExperimentRecord rec;
  rec.spec_hash = spec.hash();
  rec.summary = std::move(o.summary);
  rec.checks = std::move(o.checks);

  json summary = {{"command", to_string(spec.command)},
                  {"spec_hash", rec.spec_hash},
                  {"version", version()},
                  {"seed", spec.seed},
                  {"results", rec.summary},
                  {"checks", checks_json(rec.checks)},
                  {"passed", rec.passed()}};
  write_file(out / "summary.json", summary.dump(2) + "\n");

  rec.files = list_files(out);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json manifest = rec.to_json();
  manifest["version"] = version();
  manifest["config_hash"] = rec.spec_hash;
  manifest["spec"] = spec.to_json();
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  return rec;
}

ExperimentRecord execute(const ExperimentSpec& spec) { return execute(spec, spec.output_dir); }

// Sweeps -----------------------------------------------------------------------

json flatten_scalars(const json& j) {
  json flat = json::object();
  auto walk = [&](auto&& self, const json& node, const std::string& prefix) -> void {
    for (const auto& [key, value] : node.items()) {
      const std::string name = prefix.empty() ? key : prefix + "." + key;
      if (value.is_object()) {
        self(self, value, name);
      } else if (value.is_number() || value.is_boolean()) {
        flat[name] = value;
      }
    }
  };
  if (j.is_object()) walk(walk, j, "");
  return flat;
}

int SweepReport::exit_code() const {
  int code = 0;
  for (const auto& r : rows) {
    if (r.exit_code == 1) return 1;
    code = std::max(code, r.exit_code);
  }
  return code;
}

json SweepReport::aggregate() const {
  std::map<std::string, std::vector<double>> columns;
  std::size_t passed = 0, failed = 0, errors = 0;
  for (const auto& r : rows) {
    (r.exit_code == 0 ? passed : r.exit_code == 2 ? failed : errors)++;
    for (const auto& [key, value] : r.scalars.items()) {
      if (value.is_number()) columns[key].push_back(value.get<double>());
    }
  }
  json stats = json::object();
  for (const auto& [key, values] : columns) {
    const double m = mean(values);
    const double sd = values.size() >= 2 ? sample_std(values) : 0.0;
    stats[key] = {{"count", values.size()}, {"mean", m}, {"sd", sd},
                  {"dispersed", values.size() >= 2 && sd > 0.5 * std::abs(m)}};
  }
  return {{"jobs", rows.size()}, {"passed", passed}, {"check_failed", failed}, {"errors", errors},
          {"columns", stats}};
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c == '\n' ? ' ' : c;
  }
  return q + "\"";
}

}  // namespace

void SweepReport::write_csv(std::ostream& os) const {
  std::set<std::string> keys;
  for (const auto& r : rows) {
    for (const auto& [key, value] : r.scalars.items()) keys.insert(key);
  }
  os << "name,command,seed,spec_hash,exit_code,error";
  for (const auto& k : keys) os << ',' << csv_field(k);
  os << '\n';
  for (const auto& r : rows) {
    os << csv_field(r.name) << ',' << r.command << ',' << r.seed << ',' << r.spec_hash << ',' << r.exit_code
       << ',' << csv_field(r.error);
    for (const auto& k : keys) {
      os << ',';
      if (!r.scalars.contains(k)) continue;
      const auto& v = r.scalars.at(k);
      if (v.is_boolean()) {
        os << (v.get<bool>() ? "true" : "false");
      } else {
        os << fmt(v.get<double>());
      }
    }
    os << '\n';
  }
}

std::vector<SweepJob> load_sweep(const fs::path& manifest, fs::path* output_dir) {
  json j;
  try {
    j = json::parse(read_file(manifest));
  } catch (const json::parse_error& e) {
    throw ConfigError("", manifest.string() + ": " + e.what());
  }
  require_top_keys(j, {"output_dir", "runs"});
  const fs::path base = manifest.parent_path();
  if (output_dir) {
    *output_dir = "sweep";
    if (j.contains("output_dir")) {
      if (!j.at("output_dir").is_string()) throw ConfigError("output_dir", "expected a string");
      *output_dir = j.at("output_dir").get<std::string>();
    }
  }
  std::vector<SweepJob> jobs;
  if (!j.contains("runs")) return jobs;
  if (!j.at("runs").is_array()) throw ConfigError("runs", "expected an array");
  std::set<std::string> names;
  for (std::size_t i = 0; i < j.at("runs").size(); ++i) {
    const auto& r = j.at("runs")[i];
    const std::string path = "runs[" + std::to_string(i) + "]";
    detail::require_keys(r, {"config", "spec", "seed", "name"}, path);
    if (r.contains("config") == r.contains("spec")) {
      throw ConfigError(path, "expected exactly one of \"config\" or \"spec\"");
    }
    SweepJob job;
    try {
      if (r.contains("config")) {
        if (!r.at("config").is_string()) throw ConfigError(path + ".config", "expected a string");
        fs::path cfg = r.at("config").get<std::string>();
        if (cfg.is_relative()) cfg = base / cfg;
        job.spec = ExperimentSpec::load(cfg);
      } else {
        job.spec = ExperimentSpec::from_json(r.at("spec"));
      }
    } catch (const ConfigError& e) {
      if (e.path().rfind(path, 0) == 0) throw;
      throw ConfigError(path + (e.path().empty() ? "" : "." + e.path()), e.message());
    }
    if (r.contains("seed")) {
      job.spec.seed = seed_at(r.at("seed"), path + ".seed");
    }
    char index[16];
    std::snprintf(index, sizeof index, "%03zu", i);
    job.name = std::string(index) + "_" + to_string(job.spec.command);
    if (r.contains("name")) {
      if (!r.at("name").is_string() || r.at("name").get<std::string>().empty()) {
        throw ConfigError(path + ".name", "expected a non-empty string");
      }
      job.name = r.at("name").get<std::string>();
    }
    if (!names.insert(job.name).second) throw ConfigError(path + ".name", "duplicate job name");
    jobs.push_back(std::move(job));
  }
  return jobs;
}

SweepReport sweep(const std::vector<SweepJob>& jobs, std::size_t workers, const fs::path& root) {
  SweepReport report;
  report.rows.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto& job = jobs[i];
      SweepRow& row = report.rows[i];
      row.name = job.name;
      row.command = to_string(job.spec.command);
      row.seed = job.spec.seed;
      row.spec_hash = job.spec.hash();
      try {
        const auto rec = execute(job.spec, root / job.name);
        row.exit_code = rec.exit_code();
        row.scalars = flatten_scalars(rec.summary);
        for (const auto& c : rec.checks) row.scalars["check." + c.name] = c.pass;
      } catch (const std::exception& e) {
        row.exit_code = 1;
        row.error = e.what();
        row.scalars = json::object();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, jobs.size()));
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(work);
    work();
  }
  fs::create_directories(root);
  std::ostringstream csv;
  report.write_csv(csv);
  write_file(root / "sweep.csv", csv.str());
  write_file(root / "sweep_summary.json", report.aggregate().dump(2) + "\n");
  return report;
}

}  // namespace kinetos
