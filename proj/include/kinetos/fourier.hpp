#pragma once

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <complex>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <vector>

#include "kinetos/kernel.hpp"
#include "kinetos/particles.hpp"
#include "kinetos/types.hpp"

namespace kinetos {

using Complex = std::complex<double>;

// Directions × log-spaced radii. Node index = direction · radii() + radius.
class KGrid {
 public:
  static constexpr std::size_t kDefaultDirections = 64;
  static constexpr std::size_t kDefaultRadii = 48;

  // Fibonacci-sphere directions; `paired` adds the antipode of each of directions/2 points.
  static std::shared_ptr<const KGrid> fibonacci(std::size_t directions = kDefaultDirections,
                                                std::size_t radii = kDefaultRadii,
                                                double k_min = 0.1, double k_max = 10.0,
                                                bool paired = false, int radial_order = 6);

  KGrid(std::vector<Vec3> directions, std::size_t radii, double k_min, double k_max,
        int radial_order = 6);

  std::size_t directions() const noexcept { return dirs_.size(); }
  std::size_t radii() const noexcept { return radii_.size(); }
  std::size_t size() const noexcept { return dirs_.size() * radii_.size(); }
  double k_min() const noexcept { return radii_.front(); }
  double k_max() const noexcept { return radii_.back(); }
  int radial_order() const noexcept { return order_; }
  const std::vector<Vec3>& direction_set() const noexcept { return dirs_; }
  const std::vector<double>& radius_set() const noexcept { return radii_; }
  const std::vector<std::array<std::uint32_t, 3>>& triangles() const noexcept { return tris_; }

  std::size_t index(std::size_t direction, std::size_t radius) const noexcept {
    return direction * radii_.size() + radius;
  }
  std::size_t direction_of(std::size_t node) const noexcept { return node / radii_.size(); }
  std::size_t radius_of(std::size_t node) const noexcept { return node % radii_.size(); }
  double norm(std::size_t node) const noexcept { return radii_[radius_of(node)]; }
  Vec3 node(std::size_t i) const { return radii_[radius_of(i)] * dirs_[direction_of(i)]; }
  // Index of -node if the antipodal direction is present.
  std::size_t antipode(std::size_t node) const;

  struct DirectionWeights {
    std::array<std::uint32_t, 3> vertex;
    std::array<double, 3> weight;
  };
  // Barycentric weights on the hull triangle hit by the ray through `unit`.
  DirectionWeights locate(const Vec3& unit) const;

  struct RadialWeights {
    std::size_t first = 0;
    int count = 0;
    std::array<double, 8> weight{};
  };
  // Lagrange weights in log r; requires k_min ≤ r ≤ k_max.
  RadialWeights radial(double r) const;

  // Same layout, bit for bit.
  bool same_layout(const KGrid& other) const noexcept;

 private:
  void triangulate();

  std::vector<Vec3> dirs_;
  std::vector<double> radii_;
  double log_min_;
  double log_step_;
  int order_;
  std::vector<std::array<std::uint32_t, 3>> tris_;
  std::vector<std::array<std::uint32_t, 3>> neighbours_;  // across the edge opposite vertex j
  std::vector<Eigen::Matrix3d> inverse_;                   // inverse of [p0 p1 p2]
  std::vector<std::uint32_t> start_;                       // walking start per (z, azimuth) bin
  std::vector<std::size_t> antipode_;
};

// Characteristic function sampled on a KGrid.
class CharGrid {
 public:
  CharGrid(std::shared_ptr<const KGrid> grid, std::vector<Complex> values, Complex origin = 1.0,
           std::vector<double> std_error = {}, std::size_t samples = 0);

  const KGrid& grid() const noexcept { return *grid_; }
  const std::shared_ptr<const KGrid>& grid_ptr() const noexcept { return grid_; }
  const std::vector<Complex>& values() const noexcept { return values_; }
  Complex operator[](std::size_t node) const noexcept { return values_[node]; }
  Complex origin_value() const noexcept { return origin_; }
  // Per-node standard error of the estimate; empty for analytic CFs.
  const std::vector<double>& std_error() const noexcept { return se_; }
  std::size_t samples() const noexcept { return samples_; }
  // 3/√N for empirical CFs, 0 for analytic ones.
  double eps_stat() const noexcept;

  // Interpolated value at an arbitrary k with |k| ≤ k_max; below k_min the radial
  // profile is bridged to the origin value by a quadratic in |k|².
  Complex at(const Vec3& k) const;

  // Largest |φ(k)| − 1 and largest |φ(−k) − conj φ(k)| over paired nodes.
  double modulus_excess() const;
  double hermitian_defect() const;

 private:
  std::shared_ptr<const KGrid> grid_;
  std::vector<Complex> values_;
  Complex origin_;
  std::vector<double> se_;
  std::size_t samples_;
};

struct EcfOptions {
  // Subtract the empirical mean before transforming.
  bool centered = false;
  // Transform the law of scale·v.
  double scale = 1.0;
  std::size_t threads = 0;
};

CharGrid ecf(const Ensemble& e, std::shared_ptr<const KGrid> grid, const EcfOptions& opts = {});
CharGrid analytic_cf(std::shared_ptr<const KGrid> grid, const std::function<Complex(const Vec3&)>& cf);
std::function<Complex(const Vec3&)> gaussian_cf(const Vec3& mean, const Mat3& cov);

struct D2Result {
  double value = 0.0;
  std::size_t argmax_node = 0;
  // |φ−ψ|/|k|² grows as |k| ↓ k_min beyond the noise: unequal means or noise domination.
  bool low_k_trend = false;
  double low_k_slope = 0.0;
  double noise_floor = 0.0;
  std::vector<double> per_radius;  // max over directions
};

D2Result d2(const CharGrid& phi, const CharGrid& psi);
// max_k sqrt(se_φ² + se_ψ²)/|k|²: one standard error of |φ−ψ|/|k|² at the noisiest node.
double noise_floor(const CharGrid& phi, const CharGrid& psi);

struct D2Measurement {
  D2Result coarse;
  D2Result refined;
  bool stable = false;  // refined value within 2% of the coarse one
};
// d₂ on a grid and on its doubling (twice the directions, 2R−1 radii).
D2Measurement measure_d2(const Ensemble& a, const Ensemble& b, std::size_t directions,
                         std::size_t radii, double k_min, double k_max, const EcfOptions& opts = {});

// Polar nodes in log θ on [theta_min, π] times a uniform azimuth.
class BobylevQuadrature {
 public:
  BobylevQuadrature(const CutoffKernel& kernel, std::size_t polar = 64, std::size_t azimuth = 32);

  struct Point {
    double theta;
    double phi;
    double weight;  // includes b(cos θ) sin θ and the Jacobian
  };
  const std::vector<Point>& points() const noexcept { return points_; }
  // Σ weights, the quadrature's value of S.
  double total_weight() const noexcept { return total_; }
  // k_± = (k ± |k|σ)/2 with σ at (θ, φ) about k̂.
  static std::pair<Vec3, Vec3> split(const Vec3& k, double theta, double phi);

 private:
  std::vector<Point> points_;
  double total_ = 0.0;
};

struct BobylevOptions {
  std::size_t polar = 64;
  std::size_t azimuth = 32;
  // Nodes whose kernel-weighted fraction of bridged evaluations (|k_±| < k_min)
  // exceeds this raise InterpolationOutOfRange.
  double max_bridge_fraction = 1.0;
  std::size_t threads = 0;
};

struct BobylevResult {
  CharGrid values;
  std::vector<double> bridge_fraction;
};

// Q̂(φ,φ)(k) = ∫ b {φ(k₊)φ(k₋) − φ(k)φ(0)} dσ on every node.
BobylevResult bobylev_apply(const CharGrid& phi, const CutoffKernel& kernel,
                            const BobylevOptions& opts = {});
// Gain part linearized at the Dirac mass: ∫ b {ϕ(k₊) + ϕ(k₋)} dσ.
BobylevResult linearized_gain(const CharGrid& phi, const CutoffKernel& kernel,
                              const BobylevOptions& opts = {});

// CF snapshots of one run on a shared grid.
struct CfSeries {
  std::vector<double> times;
  std::vector<CharGrid> snapshots;
};

struct CheckReport {
  bool pass = false;
  bool degenerate = false;
  std::size_t worst_node = 0;
  double worst_time = 0.0;
  double margin = 0.0;  // allowed minus observed at the worst point
  double tolerance = 0.0;
  std::vector<double> ratios;
  nlohmann::json to_json() const;
};

CheckReport check_contraction(const CfSeries& a, const CfSeries& b, const Mat3& drift);

struct Envelope {
  double c1 = 0.0;
  double c2 = 0.0;
};
// Two-term fit of |φ₀−ψ₀| by C₁|k|^p + C₂|k|², raised until it covers every node, times 1.1.
Envelope fit_envelope(const CharGrid& phi0, const CharGrid& psi0, double p);

struct ComparisonReport {
  CheckReport check;
  Envelope envelope;
  double lambda_p = 0.0;
  double band = 0.0;
  std::size_t violations = 0;
  std::vector<double> c1_series;  // fitted |k|^p coefficient per time
  double envelope_rate = 0.0;     // −d log c1/dt over the resolved times
  nlohmann::json to_json() const;
};

// lambda_p is λ(p) (or λ_n(p)) of the kernel driving both runs.
ComparisonReport check_comparison(const CfSeries& a, const CfSeries& b, double p, const Mat3& drift,
                                  double lambda_p, const Envelope& envelope);

struct InterpolationBound {
  double gamma = 0.0;
  double d2_bound = 0.0;  // γ + γ^{2/p}
  double d2 = 0.0;
  double ratio = 0.0;     // d₂/(γ + γ^{2/p}); 0 when γ = 0
};
InterpolationBound interpolation_bound(const CharGrid& phi, const CharGrid& psi, double p);

void write_chargrid_csv(std::ostream& os, const CharGrid& phi);

}  // namespace kinetos
