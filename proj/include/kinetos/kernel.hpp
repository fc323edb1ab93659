#pragma once

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

#include "kinetos/types.hpp"

namespace kinetos {

enum class KernelForm { PowerLaw, Constant, Tabulated };

std::string to_string(KernelForm form);
KernelForm kernel_form_from_string(const std::string& name);

struct QuadratureTolerance {
  double abs = 1e-10;
  double rel = 1e-8;
};

// Angular cross-section b(cos θ) of a Maxwell gas.
//   power_law: b = strength · θ^{-1-2κ} / sin θ, so sin θ · b · θ^{1+2κ} = strength
//   constant:  b = strength
//   tabulated: b linear in cos θ between nodes, held constant outside
class Kernel {
 public:
  static Kernel power_law(double kappa, double strength = 1.0);
  static Kernel constant(double value, double kappa = 0.5);
  static Kernel tabulated(std::vector<double> cos_theta, std::vector<double> values,
                          double kappa = 0.5);

  KernelForm form() const noexcept { return form_; }
  double kappa() const noexcept { return kappa_; }
  double strength() const noexcept { return strength_; }
  // Non-integrable total rate without a cutoff.
  bool singular() const noexcept { return form_ == KernelForm::PowerLaw; }

  double operator()(double theta) const;
  // b(cos θ) sin θ, evaluated without the 1/sin θ round trip.
  double sin_weighted(double theta) const;

  Kernel scaled(double factor) const;

  const std::vector<double>& table_cos() const noexcept { return cos_; }
  const std::vector<double>& table_values() const noexcept { return values_; }

 private:
  Kernel(KernelForm form, double kappa, double strength);

  KernelForm form_;
  double kappa_;
  double strength_;
  std::vector<double> cos_;
  std::vector<double> values_;
};

struct AngularConstants {
  double Lambda;  // ∫ sin θ b θ² dθ
  double bbar;    // (3π/4) ∫ b sin³θ dθ
};

// theta_min = 0 means no cutoff.
AngularConstants angular_constants(const Kernel& kernel, double theta_min = 0.0,
                                   const QuadratureTolerance& tol = {});
// 2π ∫_{theta_min}^{π} b sin θ dθ; +inf for a singular kernel without cutoff.
double total_rate(const Kernel& kernel, double theta_min, const QuadratureTolerance& tol = {});
// ∫_{S²} b [1 − Ω₊^{p/2} − Ω₋^{p/2}] dσ with Ω± = (1 ± cos θ)/2.
double lambda_p(const Kernel& kernel, double p, double theta_min = 0.0,
                const QuadratureTolerance& tol = {});

// Below this angle the λ bracket switches to its Taylor form.
inline constexpr double kBracketTaylorSwitch = 1e-3;
double lambda_bracket(double theta, double p);

// b restricted to θ ≥ theta_min, with its scalar functionals cached.
class CutoffKernel {
 public:
  CutoffKernel(Kernel base, double theta_min, const QuadratureTolerance& tol = {});

  const Kernel& base() const noexcept { return base_; }
  double theta_min() const noexcept { return theta_min_; }
  double total_rate() const noexcept { return rate_; }
  double bbar() const noexcept { return constants_.bbar; }
  double Lambda() const noexcept { return constants_.Lambda; }
  const AngularConstants& constants() const noexcept { return constants_; }
  const QuadratureTolerance& tolerance() const noexcept { return tol_; }

  double lambda(double p) const;
  CutoffKernel scaled(double factor) const;

 private:
  Kernel base_;
  double theta_min_;
  QuadratureTolerance tol_;
  AngularConstants constants_;
  double rate_;
};

// Config block {form, kappa, strength, theta_min}; theta_min = 0 means no cutoff.
struct KernelSpec {
  Kernel base;
  double theta_min;

  CutoffKernel cutoff(const QuadratureTolerance& tol = {}) const {
    return CutoffKernel(base, theta_min, tol);
  }
  nlohmann::json to_json() const;
  static KernelSpec from_json(const nlohmann::json& j, const std::string& path = "kernel");
};

// Inverse-CDF table for the scattering angle density ∝ b(cos θ) sin θ on [theta_min, π].
class ScatterTable {
 public:
  explicit ScatterTable(const CutoffKernel& kernel, std::size_t nodes = 4096);

  double sample_theta(double u) const;
  const std::vector<double>& grid() const noexcept { return theta_; }
  const std::vector<double>& cdf() const noexcept { return cdf_; }
  // Unnormalized ∫ b sin θ dθ accumulated by the table, for consistency checks.
  double mass() const noexcept { return mass_; }

 private:
  std::vector<double> theta_;
  std::vector<double> cdf_;
  double mass_ = 0.0;
};

// Orthonormal e1, e2 completing the unit vector n.
void complete_basis(const Vec3& n, Vec3& e1, Vec3& e2);

// σ with n̂·σ = cos θ, θ from the table, azimuth 2π·u_phi.
Vec3 sample_scatter(const ScatterTable& table, double u_theta, double u_phi, const Vec3& axis);

}  // namespace kinetos
