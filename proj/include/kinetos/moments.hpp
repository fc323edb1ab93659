#pragma once

#include <nlohmann/json_fwd.hpp>

#include <Eigen/Core>
#include <array>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "kinetos/types.hpp"

namespace kinetos {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// Symmetric 3×3 matrix stored as (m11, m22, m33, m12, m13, m23).
class SymMat3 {
 public:
  SymMat3() = default;
  SymMat3(double m11, double m22, double m33, double m12, double m13, double m23)
      : e_{m11, m22, m33, m12, m13, m23} {}

  static SymMat3 from_matrix(const Mat3& m);
  static SymMat3 identity(double scale = 1.0) { return {scale, scale, scale, 0, 0, 0}; }
  // Inverse of basis_vector(): off-diagonal coordinates carry a √2 weight so that
  // the Euclidean norm of the 6-vector is the Frobenius norm.
  static SymMat3 from_basis_vector(const Vec6& v);

  Vec6 basis_vector() const;
  Mat3 matrix() const;
  const std::array<double, 6>& entries() const noexcept { return e_; }
  double operator()(int i, int j) const;

  double trace() const noexcept { return e_[0] + e_[1] + e_[2]; }
  double frobenius() const;
  double min_eigenvalue() const;
  bool positive_semidefinite(double tol = 1e-12) const { return min_eigenvalue() >= -tol; }
  // Unit Frobenius projection coefficient ⟨this, dir⟩_F.
  double dot(const SymMat3& other) const;

  SymMat3 operator+(const SymMat3& o) const;
  SymMat3 operator-(const SymMat3& o) const;
  SymMat3 operator*(double s) const;
  bool operator==(const SymMat3& o) const = default;

 private:
  std::array<double, 6> e_{};
};

// Linear map M ↦ −AM − (AM)ᵀ − 2α(M − tr(M)/3·I) on symmetric matrices.
class MomentOperator {
 public:
  // alpha = 0 gives the collisionless drift operator.
  MomentOperator(double alpha, const Mat3& drift);

  static SymMat3 formula(double alpha, const Mat3& drift, const SymMat3& m);

  SymMat3 apply(const SymMat3& m) const;
  const Mat6& matrix() const noexcept { return mat_; }
  double alpha() const noexcept { return alpha_; }
  const Mat3& drift() const noexcept { return drift_; }
  double norm() const { return mat_.norm(); }

 private:
  double alpha_;
  Mat3 drift_;
  Mat6 mat_;
};

// Requires alpha > 0.
MomentOperator assemble_operator(double alpha, const Mat3& drift);

struct EigenOptions {
  double simplicity_tol = 1e-8;  // relative to ‖op‖
  double realness_tol = 1e-10;   // relative to max(1, ‖op‖)
};

struct EigenReport {
  double beta_bar = 0.0;  // half the leading eigenvalue
  SymMat3 N_bar;          // unit Frobenius norm, positive trace
  double gap = 0.0;       // ν
  bool simple = true;
  double residual = 0.0;  // ‖op N̄ − 2β̄ N̄‖_F
};

// Throws NonSimpleLeading, ComplexLeading, or NonAdmissible if N̄ is not positive definite.
EigenReport leading_eigenpair(const MomentOperator& op, const EigenOptions& opts = {});

nlohmann::json to_json(const EigenReport& r);
nlohmann::json to_json(const SymMat3& m);
SymMat3 sym_from_json(const nlohmann::json& j, const std::string& path);

// Exact flow exp(t·op) M0 at every grid time.
std::vector<SymMat3> integrate_moments(const Mat3& drift, double alpha, const SymMat3& m0,
                                       const std::vector<double>& t_grid);

struct OdeOptions {
  double rel_tol = 1e-10;
  double abs_tol = 1e-14;
  std::size_t max_steps = 2000000;
};

// dM/dt = −(A+B_t)M − ((A+B_t)M)ᵀ − 2α_t(M − tr M/3·I), adaptive Dormand–Prince.
std::vector<SymMat3> integrate_perturbed_moments(const Mat3& drift,
                                                 const std::function<double(double)>& alpha_of_t,
                                                 const std::function<Mat3(double)>& b_of_t,
                                                 const SymMat3& m0,
                                                 const std::vector<double>& t_grid,
                                                 const OdeOptions& opts = {});

struct RadiusProbe {
  double radius = 0.0;  // in units of ‖A‖ = Σ|A_ij|
  bool capped = false;  // no failure found up to s_max
  std::string reason;   // failure mode at the boundary
};

// Largest s such that the eigenproblem for s·Â (Â = direction/‖direction‖) has a
// simple real leading eigenvalue with positive definite N̄, scanned up to s_max.
RadiusProbe probe_radius(double alpha, const Mat3& direction, double s_max,
                         int scan_points = 64, double tol = 1e-6);

// Throws NonAdmissible when ‖A‖ exceeds the probed radius along A's own direction.
RadiusProbe require_admissible(double alpha, const Mat3& drift, double s_max);

void write_moments_csv(std::ostream& os, const std::vector<double>& t,
                       const std::vector<SymMat3>& traj);

}  // namespace kinetos
