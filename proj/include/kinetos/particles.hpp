#pragma once

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "kinetos/kernel.hpp"
#include "kinetos/moments.hpp"
#include "kinetos/rng.hpp"
#include "kinetos/types.hpp"

namespace kinetos {

// Empirical measure with uniform weights 1/N.
struct Ensemble {
  std::vector<Vec3> v;
  double time = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;  // collision steps taken; the RNG counter
  std::string kernel_id;
  std::string drift_id;

  std::size_t size() const noexcept { return v.size(); }
  Vec3 mean() const;
  // ⟨v vᵀ⟩ about the origin.
  SymMat3 second_moment() const;
  // ⟨(v−ū)(v−ū)ᵀ⟩.
  SymMat3 covariance() const;
  // Entrywise standard error of second_moment(): sd(v_i v_j)/√N.
  SymMat3 second_moment_stderr() const;
};

double empirical_pth_moment(const Ensemble& e, double p);

// Initial laws.
struct DiracLaw {
  Vec3 at = Vec3::Zero();
};
struct GaussianLaw {
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
};
struct UniformBallLaw {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
};
// weight_a·δ_a + (1 − weight_a)·δ_b, assigned deterministically.
struct TwoPointLaw {
  Vec3 a = Vec3::UnitX();
  Vec3 b = -Vec3::UnitX();
  double weight_a = 0.5;
};
struct MixtureComponent {
  double weight = 1.0;
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
};
struct GaussianMixtureLaw {
  std::vector<MixtureComponent> components;
};
struct SnapshotLaw {
  std::string path;
};

struct InitialSpec {
  std::variant<DiracLaw, GaussianLaw, UniformBallLaw, TwoPointLaw, GaussianMixtureLaw, SnapshotLaw>
      law;
  // Recenter and linearly transform samples so the empirical mean and covariance
  // equal the law's exactly.
  bool moment_match = false;

  Vec3 mean() const;
  Mat3 covariance() const;
  nlohmann::json to_json() const;
  static InitialSpec from_json(const nlohmann::json& j, const std::string& path = "initial");
};

Ensemble init_ensemble(const InitialSpec& spec, std::size_t n, std::uint64_t seed,
                       const std::string& label = "init");

// Exact linear transform of an ensemble onto a target mean and covariance.
void match_moments(Ensemble& e, const Vec3& mean, const Mat3& cov);

// v' = −(A + B(t)) v along characteristics.
class DriftSpec {
 public:
  DriftSpec(const Mat3& a, double dt);
  DriftSpec(const Mat3& a, double dt, std::function<Mat3(double)> perturbation);

  const Mat3& matrix() const noexcept { return a_; }
  double dt() const noexcept { return dt_; }
  double norm() const { return entry_norm(a_); }
  bool time_dependent() const noexcept { return static_cast<bool>(b_); }
  // e^{−A dt} and e^{−A dt/2} for the configured step.
  const Mat3& cached_flow() const noexcept { return flow_; }
  const Mat3& half_flow() const noexcept { return half_; }
  // Propagator over [t0, t0 + h].
  Mat3 flow(double t0, double h) const;
  std::string id() const;

 private:
  Mat3 a_;
  double dt_;
  std::function<Mat3(double)> b_;
  Mat3 flow_;
  Mat3 half_;
};

void apply_flow(Ensemble& e, const Mat3& flow, std::size_t threads = 1);
void drift_step(Ensemble& e, const DriftSpec& d, double dt, std::size_t threads = 1);

struct CollisionStats {
  std::uint64_t pairs = 0;
  std::uint64_t skipped = 0;  // zero relative velocity
};

// Post-collision pair in the σ-representation.
inline void collide_pair(Vec3& v, Vec3& w, const Vec3& sigma) {
  const Vec3 center = 0.5 * (v + w);
  const double half = 0.5 * (v - w).norm();
  v = center + half * sigma;
  w = center - half * sigma;
}

// Nanbu–Babovsky pair collisions with the cutoff kernel; owns its scatter table
// and a scratch permutation.
class Collider {
 public:
  explicit Collider(CutoffKernel kernel, std::size_t table_nodes = 4096);

  const CutoffKernel& kernel() const noexcept { return kernel_; }
  const ScatterTable& table() const noexcept { return table_; }

  // One step of length dt at rate multiplier `rate` (total rate S·rate). Advances e.steps.
  CollisionStats step(Ensemble& e, double dt, double rate = 1.0, const std::string& label = "collide",
                      std::size_t threads = 1);

 private:
  CutoffKernel kernel_;
  ScatterTable table_;
  std::vector<std::uint32_t> perm_;
  std::vector<std::uint32_t> swaps_;
};

// Largest admissible value of dt·S·rate.
inline constexpr double kMaxRateStep = 0.5;
// Default step: dt·S = 0.1.
inline double default_dt(const CutoffKernel& k, double rate = 1.0) {
  return 0.1 / (k.total_rate() * rate);
}

CollisionStats collision_step(Ensemble& e, const CutoffKernel& kernel, double dt,
                              const ScatterTable& table, const std::string& label = "collide");

struct Observation {
  double t = 0.0;
  Vec3 mean = Vec3::Zero();
  SymMat3 second;
  std::vector<double> p_moments;
};

struct RunOptions {
  double dt = 0.0;
  double t_end = 0.0;
  std::size_t observe_every = 1;
  std::vector<double> p_orders;
  std::string label = "collide";
  std::size_t threads = 0;  // 0: default_threads()
  // Multiplier of the collision rate at time t (mass factor bookkeeping).
  std::function<double(double)> rate;
};

struct RunRecord {
  std::vector<Observation> series;
  CollisionStats collisions;
  std::size_t steps = 0;
};

using Observer = std::function<void(const Ensemble&)>;

// Strang splitting: half drift, collide, half drift. The observer sees the
// ensemble at t = 0 and after every observe_every steps.
RunRecord run(Ensemble& e, const DriftSpec& drift, Collider& collider, const RunOptions& opts,
              const Observer& observer = {});

Observation observe(const Ensemble& e, const std::vector<double>& p_orders);

void write_series_csv(std::ostream& os, const RunRecord& rec, const std::vector<double>& p_orders);

// Binary snapshot: "KENS", u32 version, u64 count, then little-endian float64 triples.
void write_snapshot(const std::filesystem::path& path, const Ensemble& e);
Ensemble read_snapshot(const std::filesystem::path& path);

}  // namespace kinetos
