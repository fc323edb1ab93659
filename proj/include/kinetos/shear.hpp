#pragma once

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "kinetos/kernel.hpp"
#include "kinetos/particles.hpp"
#include "kinetos/selfsimilar.hpp"
#include "kinetos/types.hpp"

namespace kinetos {

enum class ShearKind { Simple, Planar };

// Drift A + B_t with B_t = e^{−t}R in the pipeline clock, generator scaled by 1/M.
struct ShearScenario {
  ShearKind kind = ShearKind::Simple;
  double shear_rate = 0.0;
  double M_rescale = 1.0;
  Mat3 R = Mat3::Zero();

  // simple: A₁₂ = shear_rate; planar: A₂₃ = shear_rate, A₃₃ = 1.
  Mat3 drift() const;
  Mat3 perturbation(double t) const;
  bool unperturbed() const { return R.isZero(0.0); }
  // exp(−tr R (1 − e^{−t})/M) and its limit e^{−tr R/M}.
  double mass_factor(double t) const;
  double mass_limit() const;

  nlohmann::json to_json() const;
  static ShearScenario from_json(const nlohmann::json& j, const std::string& path = "scenario");
};

struct PlanarTransform {
  double tau = 0.0;
  Mat3 A_over_M = Mat3::Zero();
  Mat3 B_tau = Mat3::Zero();  // e^{−τ}R/M
};

// τ = M log(1 + t).
PlanarTransform planar_transform(const ShearScenario& s, double t_physical);
// Inverse clock: t = e^{τ/M} − 1.
double physical_time(const ShearScenario& s, double tau);

struct FrameState {
  double tau = 0.0;
  double t_physical = 0.0;
  double m = 1.0;
  Mat3 E = Mat3::Identity();
};

// m by adaptive quadrature of tr B, E by E' = −(A + B)E/M from the identity.
std::vector<FrameState> evolve_frame(const ShearScenario& s, const std::vector<double>& tau_grid);
void write_frames_csv(std::ostream& os, const std::vector<FrameState>& frames);

struct ShearOptions {
  double K = 3.0;  // second-moment scale of the reference profile
  ProfileOptions profile;
  StabilityOptions stability;
};

// α² re-fitted from the points with t ≥ T, and its distance to the full-run α².
struct AlphaWindow {
  double T = 0.0;
  double alpha2 = 0.0;
  double gap = 0.0;
};

struct ShearResult {
  ShearScenario scenario;
  ProfileResult profile;
  StabilityResult stability;
  std::vector<FrameState> frames;  // at the stability observation times
  double mass_error = 0.0;         // max |quadrature m − closed form|
  double frame_z = 0.0;            // max |mean − E·U| in standard errors
  std::vector<AlphaWindow> alpha_windows;  // T ∈ {2, 4, 6}/ν
  double alpha2_se = 0.0;                  // standard error of one ⟨M̃, N̄⟩ reading
  // Each window gap stays below the smallest earlier gap plus 2 standard errors.
  bool alpha_settles() const;
  nlohmann::json summary() const;
};

// Particles carry F/m; collisions run at rate m_t with kernel b/M and the drift is
// (A + B_t)/M. The profile solves the limit problem with kernel m_∞ b/M.
ShearResult run_shear(const ShearScenario& s, const CutoffKernel& kernel, const InitialSpec& f0,
                         const ShearOptions& opts = {});
// Simple shear with B ≡ 0 through the same pipeline.
ShearResult simple_shear_entry(double shear_rate, double M_rescale, const CutoffKernel& kernel,
                               const InitialSpec& f0, const ShearOptions& opts = {});

// Profile and stability files plus frames.csv and shear_summary.json.
void write_shear(const std::filesystem::path& dir, const ShearResult& r);

}  // namespace kinetos
