#pragma once

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "kinetos/fourier.hpp"
#include "kinetos/kernel.hpp"
#include "kinetos/moments.hpp"
#include "kinetos/particles.hpp"
#include "kinetos/types.hpp"

namespace kinetos {

// Particle and grid settings shared by the profile and stability drivers.
struct SimulationParams {
  std::size_t particles = 100000;
  double dt = 0.0;  // 0: default_dt of the kernel
  std::uint64_t seed = 1;
  std::size_t threads = 0;
  std::size_t directions = KGrid::kDefaultDirections;
  std::size_t radii = KGrid::kDefaultRadii;
  double k_min = 0.1;
  double k_max = 10.0;
  // Scan limit of the admissibility probe in units of b̄; the radius is capped there.
  double admissible_cap = 1.0;

  std::shared_ptr<const KGrid> grid() const;
};

struct ProfileOptions {
  SimulationParams sim;
  double lag = 0.0;       // 0: 1/ν
  double max_time = 0.0;  // 0: 60/ν
};

struct ProfileDiagnostic {
  double t = 0.0;
  double moment_residual = 0.0;  // ‖M_t − K N̄‖_F
  double d2 = 0.0;               // against the snapshot one lag earlier
  double noise_floor = 0.0;
};

struct ProfileResult {
  Ensemble snapshot;
  Mat3 drift = Mat3::Zero();
  double K = 0.0;
  double alpha = 0.0;  // √K
  double beta_bar = 0.0;
  SymMat3 N_bar;
  double nu = 0.0;
  double terminal_d2 = 0.0;
  double terminal_floor = 0.0;
  std::vector<ProfileDiagnostic> diagnostics;
  nlohmann::json summary() const;
};

// Long-time run of the rescaled equation (drift A + β̄I) from zero-mean Gaussian data
// with second moments K·N̄, stopped once the successive-snapshot d₂ at lag 1/ν is
// within twice the noise floor on two consecutive checks. Throws NoConvergence.
ProfileResult find_profile(const Mat3& drift, const CutoffKernel& kernel, double K,
                           const ProfileOptions& opts = {});

struct StabilityOptions {
  SimulationParams sim;
  double t_end = 0.0;        // 0: 10/ν
  double observe_lag = 0.0;  // 0: 0.25/ν
  double p = 3.0;            // order in the min(λ(p)/4, ν/4) guide
  std::vector<double> p_orders;  // moments recorded on the rescaled ensemble
  // Lower bound on r² for the log-linear verdict.
  double min_r2 = 0.9;
};

struct StabilityPoint {
  double t = 0.0;
  Vec3 mean = Vec3::Zero();      // before de-meaning
  double d2 = 0.0;
  double noise_floor = 0.0;
  SymMat3 moments;               // rescaled, de-meaned second moments
  SymMat3 moments_se;
  double alpha2 = 0.0;           // ⟨M̃_t, N̄⟩_F
  double moment_residual = 0.0;  // ‖M̃_t − α² N̄‖_F with the final α²
  std::vector<double> p_moments;
};

struct StabilityResult {
  std::vector<StabilityPoint> series;
  double beta_bar = 0.0;
  SymMat3 N_bar;
  double nu = 0.0;
  double alpha2 = 0.0;           // late-window mean of ⟨M̃_t, N̄⟩
  double alpha2_residual = 0.0;  // late-window ‖M̃ − α² N̄‖_F
  double dilation = 0.0;         // profile argument scale √(α²/K)
  // d₂ already within 3 noise floors at t = 0.
  bool indeterminate = false;
  double theta = std::numeric_limits<double>::quiet_NaN();
  double theta_se = 0.0;
  double r2 = 0.0;
  double decades = 0.0;
  std::size_t window_first = 0;
  std::size_t window_last = 0;
  double moment_rate = std::numeric_limits<double>::quiet_NaN();
  double guide = 0.0;  // min(λ(p)/4, ν/4)
  double noise_floor = 0.0;
  double min_r2 = 0.9;

  // Decreasing, positive rate over at least one decade with r² ≥ min_r2; true when indeterminate.
  bool log_linear() const;
  nlohmann::json summary() const;
};

// Data handed to the shared stability loop.
struct StabilityModel {
  DriftSpec drift;
  CutoffKernel kernel;
  std::function<double(double)> rate;  // empty: 1
  EigenReport eigen;
  double rate_limit = 1.0;  // long-time value of rate, for the guide
};

// Simulates f₀ under the model, rescales by e^{−β̄t} after de-meaning, and tracks
// d₂ against the profile dilated to the run's α². Throws RateUnresolvable.
StabilityResult stability_run(const InitialSpec& f0, const Mat3& drift, const CutoffKernel& kernel,
                              const ProfileResult& profile, const StabilityOptions& opts = {});
StabilityResult stability_run(const InitialSpec& f0, const StabilityModel& model,
                              const ProfileResult& profile, const StabilityOptions& opts);

// profile.kens, profile_diagnostics.csv, profile_summary.json.
void write_profile(const std::filesystem::path& dir, const ProfileResult& r);
// stability.csv, stability_summary.json.
void write_stability(const std::filesystem::path& dir, const StabilityResult& r,
                     const std::vector<double>& p_orders = {});

}  // namespace kinetos
