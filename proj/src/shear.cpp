#include "kinetos/shear.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/numeric/odeint.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "json_util.hpp"
#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"

namespace kinetos {

namespace {

void validate(const ShearScenario& s) {
  if (!(s.M_rescale > 0.0) || !std::isfinite(s.M_rescale)) {
    throw InvalidArgument("shear scenario: M_rescale must be positive");
  }
  if (!std::isfinite(s.shear_rate)) throw InvalidArgument("shear scenario: shear_rate must be finite");
  if (!s.R.allFinite()) throw InvalidArgument("shear scenario: B matrix must be finite");
}

const char* kind_name(ShearKind k) { return k == ShearKind::Simple ? "simple" : "planar"; }

}  // namespace

Mat3 ShearScenario::drift() const {
  Mat3 a = Mat3::Zero();
  if (kind == ShearKind::Simple) {
    a(0, 1) = shear_rate;
  } else {
    a(1, 2) = shear_rate;
    a(2, 2) = 1.0;
  }
  return a;
}

Mat3 ShearScenario::perturbation(double t) const { return std::exp(-t) * R; }

double ShearScenario::mass_factor(double t) const {
  return std::exp(-R.trace() * -std::expm1(-t) / M_rescale);
}

double ShearScenario::mass_limit() const { return std::exp(-R.trace() / M_rescale); }

nlohmann::json ShearScenario::to_json() const {
  nlohmann::json j;
  j["kind"] = kind_name(kind);
  j["shear_rate"] = shear_rate;
  j["M_rescale"] = M_rescale;
  j["B"] = {{"type", "exp_decay"}, {"matrix", detail::mat_to_json(R)}};
  return j;
}

ShearScenario ShearScenario::from_json(const nlohmann::json& j, const std::string& path) {
  detail::require_keys(j, {"kind", "shear_rate", "M_rescale", "B"}, path);
  ShearScenario s;
  if (!j.contains("kind") || !j.at("kind").is_string()) throw ConfigError(path + ".kind", "expected a string");
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "simple") {
    s.kind = ShearKind::Simple;
  } else if (kind == "planar") {
    s.kind = ShearKind::Planar;
  } else {
    throw ConfigError(path + ".kind", "expected \"simple\" or \"planar\"");
  }
  s.shear_rate = detail::number_at(j, "shear_rate", path);
  if (j.contains("M_rescale")) {
    s.M_rescale = detail::number_at(j, "M_rescale", path);
    if (!(s.M_rescale > 0.0)) throw ConfigError(path + ".M_rescale", "must be positive");
  }
  if (j.contains("B")) {
    const auto& b = j.at("B");
    detail::require_keys(b, {"type", "matrix"}, path + ".B");
    if (!b.contains("type") || b.at("type") != "exp_decay") {
      throw ConfigError(path + ".B.type", "expected \"exp_decay\"");
    }
    if (!b.contains("matrix")) throw ConfigError(path + ".B.matrix", "missing");
    s.R = detail::mat_from_json(b.at("matrix"), path + ".B.matrix");
  }
  return s;
}

PlanarTransform planar_transform(const ShearScenario& s, double t_physical) {
  validate(s);
  if (!(t_physical >= 0.0)) throw InvalidArgument("planar_transform: t must be non-negative");
  PlanarTransform p;
  p.tau = s.M_rescale * std::log1p(t_physical);
  p.A_over_M = s.drift() / s.M_rescale;
  p.B_tau = s.perturbation(p.tau) / s.M_rescale;
  return p;
}

double physical_time(const ShearScenario& s, double tau) { return std::expm1(tau / s.M_rescale); }

std::vector<FrameState> evolve_frame(const ShearScenario& s, const std::vector<double>& tau_grid) {
  validate(s);
  namespace ode = boost::numeric::odeint;
  using boost::math::quadrature::gauss_kronrod;
  using State = std::array<double, 9>;
  const Mat3 a = s.drift();
  const double M = s.M_rescale;
  auto rhs = [&](const State& x, State& dxdt, double t) {
    const Eigen::Map<const Mat3> e(x.data());
    Eigen::Map<Mat3>(dxdt.data()) = -(a + s.perturbation(t)) * e / M;
  };
  auto trace_b = [&](double u) { return s.perturbation(u).trace(); };

  State x{};
  Eigen::Map<Mat3>(x.data()).setIdentity();
  auto stepper = ode::make_controlled(1e-13, 1e-13, ode::runge_kutta_dopri5<State>());
  std::vector<FrameState> out;
  out.reserve(tau_grid.size());
  double now = 0.0;
  for (double tau : tau_grid) {
    if (!(tau >= now)) throw InvalidArgument("evolve_frame: grid must be non-negative and non-decreasing");
    if (tau > now) {
      try {
        ode::integrate_adaptive(stepper, rhs, x, now, tau, (tau - now) / 8.0);
      } catch (const std::exception& err) {
        throw IntegratorError(std::string("evolve_frame: ") + err.what(), now, 0);
      }
      now = tau;
    }
    FrameState f;
    f.tau = tau;
    f.t_physical = physical_time(s, tau);
    double err = 0.0;
    const double integral =
        tau > 0.0 ? gauss_kronrod<double, 31>::integrate(trace_b, 0.0, tau, 15, 1e-13, &err) : 0.0;
    f.m = std::exp(-integral / M);
    f.E = Eigen::Map<const Mat3>(x.data());
    out.push_back(f);
  }
  return out;
}

void write_frames_csv(std::ostream& os, const std::vector<FrameState>& frames) {
  os << "t,tau,m_t";
  for (int i = 1; i <= 3; ++i) {
    for (int j = 1; j <= 3; ++j) os << ",E" << i << j;
  }
  os << '\n';
  for (const auto& f : frames) {
    os << fmt(f.t_physical) << ',' << fmt(f.tau) << ',' << fmt(f.m);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) os << ',' << fmt(f.E(i, j));
    }
    os << '\n';
  }
}

ShearResult run_shear(const ShearScenario& s, const CutoffKernel& kernel, const InitialSpec& f0,
                         const ShearOptions& opts) {
  validate(s);
  const double M = s.M_rescale;
  const double m_limit = s.mass_limit();
  const Mat3 drift = s.drift() / M;
  const CutoffKernel pipeline_kernel = kernel.scaled(1.0 / M);
  const CutoffKernel limit_kernel = kernel.scaled(m_limit / M);

  ShearResult res;
  res.scenario = s;
  res.profile = find_profile(drift, limit_kernel, opts.K, opts.profile);

  const auto& sim = opts.stability.sim;
  const double dt = sim.dt > 0.0 ? sim.dt : default_dt(pipeline_kernel);
  const double cap = sim.admissible_cap * limit_kernel.bbar();
  require_admissible(limit_kernel.bbar(), drift, cap);
  auto eigen = leading_eigenpair(assemble_operator(limit_kernel.bbar(), drift));
  StabilityModel model{
      s.unperturbed() ? DriftSpec(drift, dt)
                      : DriftSpec(drift, dt, [s](double t) { return Mat3(s.perturbation(t) / s.M_rescale); }),
      pipeline_kernel,
      s.unperturbed() ? std::function<double(double)>{}
                      : std::function<double(double)>([s](double t) { return s.mass_factor(t); }),
      eigen, m_limit};
  res.stability = stability_run(f0, model, res.profile, opts.stability);

  std::vector<double> times;
  for (const auto& pt : res.stability.series) times.push_back(pt.t);
  res.frames = evolve_frame(s, times);

  const Vec3 u0 = f0.mean();
  const double n = static_cast<double>(sim.particles);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const auto& pt = res.stability.series[i];
    const auto& fr = res.frames[i];
    res.mass_error = std::max(res.mass_error, std::abs(fr.m - s.mass_factor(fr.tau)));
    const Vec3 predicted = fr.E * u0;
    const double grow = std::exp(res.stability.beta_bar * pt.t);
    for (int c = 0; c < 3; ++c) {
      const double se = grow * std::sqrt(std::max(pt.moments(c, c), 0.0) / n);
      const double diff = std::abs(pt.mean[c] - predicted[c]);
      const double z = se > 0.0 ? diff / se : (diff <= 1e-12 ? 0.0 : std::numeric_limits<double>::infinity());
      res.frame_z = std::max(res.frame_z, z);
    }
  }

  const auto& series = res.stability.series;
  if (!series.empty()) {
    const auto se = series.back().moments_se;
    const auto& nb = res.stability.N_bar;
    double var = 0.0;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) var += std::pow(nb(i, j) * se(i, j), 2);
    }
    res.alpha2_se = std::sqrt(var);
  }
  for (double k : {2.0, 4.0, 6.0}) {
    AlphaWindow w;
    w.T = k / res.stability.nu;
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& pt : series) {
      if (pt.t >= w.T) {
        sum += pt.alpha2;
        ++count;
      }
    }
    if (count == 0) break;
    w.alpha2 = sum / static_cast<double>(count);
    w.gap = std::abs(w.alpha2 - res.stability.alpha2);
    res.alpha_windows.push_back(w);
  }
  return res;
}

bool ShearResult::alpha_settles() const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& w : alpha_windows) {
    if (w.gap > best + 2.0 * alpha2_se) return false;
    best = std::min(best, w.gap);
  }
  return !alpha_windows.empty();
}

ShearResult simple_shear_entry(double shear_rate, double M_rescale, const CutoffKernel& kernel,
                               const InitialSpec& f0, const ShearOptions& opts) {
  ShearScenario s;
  s.kind = ShearKind::Simple;
  s.shear_rate = shear_rate;
  s.M_rescale = M_rescale;
  return run_shear(s, kernel, f0, opts);
}

nlohmann::json ShearResult::summary() const {
  nlohmann::json j;
  j["scenario"] = scenario.to_json();
  j["mass_limit"] = scenario.mass_limit();
  j["mass_error"] = mass_error;
  j["frame_z"] = frame_z;
  j["profile"] = profile.summary();
  j["stability"] = stability.summary();
  j["alpha2_se"] = alpha2_se;
  j["alpha_windows"] = nlohmann::json::array();
  for (const auto& w : alpha_windows) {
    j["alpha_windows"].push_back({{"T", w.T}, {"alpha2", w.alpha2}, {"gap", w.gap}});
  }
  if (!frames.empty()) {
    j["t_final"] = frames.back().t_physical;
    j["tau_final"] = frames.back().tau;
  }
  j["pass_flags"] = {{"mass", mass_error <= 1e-9},
                     {"frame", frame_z <= 5.0},
                     {"alpha_settles", alpha_settles()},
                     {"log_linear", stability.log_linear()}};
  return j;
}

void write_shear(const std::filesystem::path& dir, const ShearResult& r) {
  write_profile(dir, r.profile);
  write_stability(dir, r.stability);
  std::ostringstream frames;
  write_frames_csv(frames, r.frames);
  write_file(dir / "frames.csv", frames.str());
  write_file(dir / "shear_summary.json", r.summary().dump(2) + "\n");
}

}  // namespace kinetos
