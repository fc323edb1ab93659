#include "kinetos/selfsimilar.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"
#include "kinetos/stats.hpp"

namespace kinetos {

std::shared_ptr<const KGrid> SimulationParams::grid() const {
  return KGrid::fibonacci(directions, radii, k_min, k_max);
}

namespace {

void check_sim(const SimulationParams& sim, const char* what) {
  if (sim.particles < 2) throw InvalidArgument(std::string(what) + ": need at least 2 particles");
  if (sim.dt < 0.0) throw InvalidArgument(std::string(what) + ": dt must be non-negative");
  if (!(sim.admissible_cap > 0.0)) throw InvalidArgument(std::string(what) + ": admissible_cap must be positive");
}

EigenReport admissible_eigen(const Mat3& drift, const CutoffKernel& kernel, double cap) {
  const double bbar = kernel.bbar();
  require_admissible(bbar, drift, cap * bbar);
  return leading_eigenpair(assemble_operator(bbar, drift));
}

std::size_t steps_for(double span, double dt) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(span / dt)));
}

}  // namespace

ProfileResult find_profile(const Mat3& drift, const CutoffKernel& kernel, double K,
                           const ProfileOptions& opts) {
  check_sim(opts.sim, "find_profile");
  if (!(K >= 0.0)) throw InvalidArgument("find_profile: K must be non-negative");
  const auto eig = admissible_eigen(drift, kernel, opts.sim.admissible_cap);

  ProfileResult r;
  r.drift = drift;
  r.K = K;
  r.alpha = std::sqrt(K);
  r.beta_bar = eig.beta_bar;
  r.N_bar = eig.N_bar;
  r.nu = eig.gap;

  const double dt = opts.sim.dt > 0.0 ? opts.sim.dt : default_dt(kernel);
  const std::size_t lag_steps = steps_for(opts.lag > 0.0 ? opts.lag : 1.0 / r.nu, dt);
  const double max_time = opts.max_time > 0.0 ? opts.max_time : 60.0 / r.nu;

  InitialSpec init;
  if (K == 0.0) {
    init.law = DiracLaw{};
  } else {
    init.law = GaussianLaw{Vec3::Zero(), (r.N_bar * K).matrix()};
    init.moment_match = true;
  }
  Ensemble e = init_ensemble(init, opts.sim.particles, opts.sim.seed, "profile.init");
  const DriftSpec rescaled(drift + r.beta_bar * Mat3::Identity(), dt);
  Collider collider(kernel);
  const auto grid = opts.sim.grid();
  EcfOptions eo;
  eo.centered = true;
  eo.threads = opts.sim.threads;

  RunOptions ro;
  ro.dt = dt;
  ro.t_end = static_cast<double>(lag_steps) * dt;
  ro.observe_every = lag_steps;
  ro.label = "profile.collide";
  ro.threads = opts.sim.threads;

  const SymMat3 target = r.N_bar * K;
  CharGrid previous = ecf(e, grid, eo);
  int hits = 0;
  while (e.time < max_time - 1e-9 * max_time) {
    run(e, rescaled, collider, ro);
    CharGrid current = ecf(e, grid, eo);
    const auto d = d2(previous, current);
    r.diagnostics.push_back({e.time, (e.second_moment() - target).frobenius(), d.value, d.noise_floor});
    previous = std::move(current);
    hits = d.value <= 2.0 * d.noise_floor ? hits + 1 : 0;
    if (hits >= 2) {
      r.terminal_d2 = d.value;
      r.terminal_floor = d.noise_floor;
      r.snapshot = std::move(e);
      return r;
    }
  }
  const double plateau = r.diagnostics.empty() ? 0.0 : r.diagnostics.back().d2;
  std::ostringstream os;
  os << "find_profile: successive d2 still " << plateau << " (floor "
     << (r.diagnostics.empty() ? 0.0 : r.diagnostics.back().noise_floor) << ") at t = " << e.time;
  throw NoConvergence(os.str(), plateau);
}

nlohmann::json ProfileResult::summary() const {
  nlohmann::json j;
  j["K"] = K;
  j["alpha"] = alpha;
  j["beta_bar"] = beta_bar;
  j["N_bar"] = to_json(N_bar);
  j["nu"] = nu;
  j["particles"] = snapshot.size();
  j["seed"] = snapshot.seed;
  j["time"] = snapshot.time;
  j["terminal_d2"] = terminal_d2;
  j["terminal_floor"] = terminal_floor;
  j["second_moment"] = to_json(snapshot.second_moment());
  j["second_moment_se"] = to_json(snapshot.second_moment_stderr());
  j["pass_flags"] = {{"converged", terminal_d2 <= 2.0 * terminal_floor}};
  return j;
}

// Stability -----------------------------------------------------------------

bool StabilityResult::log_linear() const {
  if (indeterminate) return true;
  return theta > 0.0 && decades >= 1.0 && r2 >= min_r2;
}

nlohmann::json StabilityResult::summary() const {
  nlohmann::json j;
  j["beta_bar"] = beta_bar;
  j["N_bar"] = to_json(N_bar);
  j["nu"] = nu;
  j["alpha"] = std::sqrt(std::max(alpha2, 0.0));
  j["alpha2"] = alpha2;
  j["alpha2_residual"] = alpha2_residual;
  j["dilation"] = dilation;
  j["theta_fit"] = theta;
  j["theta_se"] = theta_se;
  j["r2"] = r2;
  j["decades"] = decades;
  j["window"] = {window_first, window_last};
  j["moment_rate"] = moment_rate;
  j["guide"] = guide;
  j["noise_floor"] = noise_floor;
  j["indeterminate"] = indeterminate;
  j["pass_flags"] = {{"log_linear", log_linear()}, {"theta_positive", indeterminate || theta > 0.0}};
  return j;
}

StabilityResult stability_run(const InitialSpec& f0, const Mat3& drift, const CutoffKernel& kernel,
                              const ProfileResult& profile, const StabilityOptions& opts) {
  check_sim(opts.sim, "stability_run");
  const double dt = opts.sim.dt > 0.0 ? opts.sim.dt : default_dt(kernel);
  StabilityModel model{DriftSpec(drift, dt), kernel, {}, admissible_eigen(drift, kernel, opts.sim.admissible_cap)};
  return stability_run(f0, model, profile, opts);
}

StabilityResult stability_run(const InitialSpec& f0, const StabilityModel& model,
                              const ProfileResult& profile, const StabilityOptions& opts) {
  check_sim(opts.sim, "stability_run");
  if (!(opts.p > 2.0 && opts.p <= 4.0)) throw InvalidArgument("stability_run: p must lie in (2, 4]");
  StabilityResult res;
  res.beta_bar = model.eigen.beta_bar;
  res.N_bar = model.eigen.N_bar;
  res.nu = model.eigen.gap;
  res.min_r2 = opts.min_r2;
  const double dt = model.drift.dt();
  const double t_end = opts.t_end > 0.0 ? opts.t_end : 10.0 / res.nu;
  const std::size_t obs_steps = steps_for(opts.observe_lag > 0.0 ? opts.observe_lag : 0.25 / res.nu, dt);

  Ensemble e = init_ensemble(f0, opts.sim.particles, opts.sim.seed, "stability.init");
  Collider collider(model.kernel);
  const auto grid = opts.sim.grid();
  EcfOptions eo;
  eo.centered = true;
  eo.threads = opts.sim.threads;

  RunOptions ro;
  ro.dt = dt;
  ro.observe_every = obs_steps;
  ro.label = "stability.collide";
  ro.threads = opts.sim.threads;
  ro.rate = model.rate;

  std::vector<CharGrid> ecfs;
  auto record = [&] {
    const Vec3 u = e.mean();
    const double shrink = std::exp(-res.beta_bar * e.time);
    Ensemble tilde;
    tilde.v.reserve(e.size());
    for (const auto& x : e.v) tilde.v.push_back(shrink * (x - u));
    StabilityPoint pt;
    pt.t = e.time;
    pt.mean = u;
    pt.moments = tilde.second_moment();
    pt.moments_se = tilde.second_moment_stderr();
    pt.alpha2 = pt.moments.dot(res.N_bar);
    for (double p : opts.p_orders) pt.p_moments.push_back(empirical_pth_moment(tilde, p));
    res.series.push_back(std::move(pt));
    ecfs.push_back(ecf(tilde, grid, eo));
  };
  record();
  while (e.time < t_end - 1e-9 * t_end) {
    ro.t_end = std::min(static_cast<double>(obs_steps) * dt, t_end - e.time);
    run(e, model.drift, collider, ro);
    record();
  }

  // α² from the last third of the run.
  const std::size_t n = res.series.size();
  const std::size_t late = n - std::max<std::size_t>(1, n / 3);
  std::vector<double> a2;
  for (std::size_t i = late; i < n; ++i) a2.push_back(res.series[i].alpha2);
  res.alpha2 = mean(a2);
  const SymMat3 target = res.N_bar * res.alpha2;
  std::vector<double> late_residual;
  for (std::size_t i = 0; i < n; ++i) {
    res.series[i].moment_residual = (res.series[i].moments - target).frobenius();
    if (i >= late) late_residual.push_back(res.series[i].moment_residual);
  }
  res.alpha2_residual = mean(late_residual);

  if (profile.K > 0.0) {
    res.dilation = std::sqrt(std::max(res.alpha2, 0.0) / profile.K);
  } else if (res.alpha2 > 0.0) {
    throw InvalidArgument("stability_run: the Dirac profile cannot be dilated to alpha^2 = " + fmt(res.alpha2));
  } else {
    res.dilation = 1.0;
  }
  EcfOptions ref_opts = eo;
  ref_opts.scale = res.dilation;
  const CharGrid reference = ecf(profile.snapshot, grid, ref_opts);
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = d2(ecfs[i], reference);
    res.series[i].d2 = d.value;
    res.series[i].noise_floor = d.noise_floor;
  }
  res.noise_floor = res.series.back().noise_floor;
  res.guide = std::min(model.rate_limit * model.kernel.lambda(opts.p) / 4.0, res.nu / 4.0);

  auto usable = [&](std::size_t i) { return res.series[i].d2 > 3.0 * res.series[i].noise_floor; };
  if (!usable(0)) {
    res.indeterminate = true;
  } else {
    std::vector<double> t, logd;
    for (std::size_t i = 0; i < n && usable(i); ++i) {
      t.push_back(res.series[i].t);
      logd.push_back(std::log(res.series[i].d2));
    }
    if (t.size() < 4) {
      throw RateUnresolvable("stability_run: only " + std::to_string(t.size()) +
                             " points above the noise floor before it is reached");
    }
    const auto fit = linear_fit(t, logd);
    res.theta = -fit.slope;
    res.theta_se = fit.slope_se;
    res.r2 = fit.r2;
    res.window_first = 0;
    res.window_last = t.size() - 1;
    res.decades = res.theta * (t.back() - t.front()) / std::log(10.0);
  }

  std::vector<double> mt, logm;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pt = res.series[i];
    if (!(pt.moment_residual > 3.0 * pt.moments_se.frobenius())) break;
    mt.push_back(pt.t);
    logm.push_back(std::log(pt.moment_residual));
  }
  if (mt.size() >= 3) res.moment_rate = -linear_fit(mt, logm).slope;
  return res;
}

// Persistence -----------------------------------------------------------------

void write_profile(const std::filesystem::path& dir, const ProfileResult& r) {
  std::filesystem::create_directories(dir);
  write_snapshot(dir / "profile.kens", r.snapshot);
  std::ostringstream csv;
  csv << "t,moment_residual,d2,noise_floor\n";
  for (const auto& d : r.diagnostics) {
    csv << fmt(d.t) << ',' << fmt(d.moment_residual) << ',' << fmt(d.d2) << ',' << fmt(d.noise_floor) << '\n';
  }
  write_file(dir / "profile_diagnostics.csv", csv.str());
  write_file(dir / "profile_summary.json", r.summary().dump(2) + "\n");
}

void write_stability(const std::filesystem::path& dir, const StabilityResult& r,
                     const std::vector<double>& p_orders) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  csv << "t,d2,noise_floor,alpha2,moment_residual,m11,m22,m33,m12,m13,m23";
  for (double p : p_orders) csv << ",p" << fmt(p);
  csv << '\n';
  for (const auto& pt : r.series) {
    csv << fmt(pt.t) << ',' << fmt(pt.d2) << ',' << fmt(pt.noise_floor) << ',' << fmt(pt.alpha2) << ','
        << fmt(pt.moment_residual);
    for (double m : pt.moments.entries()) csv << ',' << fmt(m);
    for (double m : pt.p_moments) csv << ',' << fmt(m);
    csv << '\n';
  }
  write_file(dir / "stability.csv", csv.str());
  write_file(dir / "stability_summary.json", r.summary().dump(2) + "\n");
}

}  // namespace kinetos
