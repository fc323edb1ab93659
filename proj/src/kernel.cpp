#include "kinetos/kernel.hpp"

#include <boost/math/quadrature/gauss.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "kinetos/errors.hpp"
#include "quadrature.hpp"

namespace kinetos {

namespace {

constexpr double pi = std::numbers::pi;

void check_kappa(double kappa) {
  if (!(kappa > 0.0 && kappa < 1.0)) throw InvalidArgument("kernel: kappa must lie in (0,1)");
}

}  // namespace

std::string to_string(KernelForm form) {
  switch (form) {
    case KernelForm::PowerLaw: return "power_law";
    case KernelForm::Constant: return "constant";
    case KernelForm::Tabulated: return "tabulated";
  }
  return "unknown";
}

KernelForm kernel_form_from_string(const std::string& name) {
  if (name == "power_law") return KernelForm::PowerLaw;
  if (name == "constant") return KernelForm::Constant;
  if (name == "tabulated") return KernelForm::Tabulated;
  throw InvalidArgument("unknown kernel form '" + name + "'");
}

Kernel::Kernel(KernelForm form, double kappa, double strength)
    : form_(form), kappa_(kappa), strength_(strength) {
  check_kappa(kappa);
  if (!(strength > 0.0) || !std::isfinite(strength)) {
    throw InvalidArgument("kernel: strength must be positive");
  }
}

Kernel Kernel::power_law(double kappa, double strength) {
  return Kernel(KernelForm::PowerLaw, kappa, strength);
}

Kernel Kernel::constant(double value, double kappa) {
  return Kernel(KernelForm::Constant, kappa, value);
}

Kernel Kernel::tabulated(std::vector<double> cos_theta, std::vector<double> values, double kappa) {
  if (cos_theta.size() < 2 || cos_theta.size() != values.size()) {
    throw InvalidArgument("tabulated kernel: need at least two (cos θ, b) pairs");
  }
  for (std::size_t i = 0; i < cos_theta.size(); ++i) {
    if (cos_theta[i] < -1.0 || cos_theta[i] > 1.0) {
      throw InvalidArgument("tabulated kernel: cos θ outside [-1,1]");
    }
    if (i > 0 && !(cos_theta[i] > cos_theta[i - 1])) {
      throw InvalidArgument("tabulated kernel: cos θ nodes must increase strictly");
    }
    if (!(values[i] >= 0.0) || !std::isfinite(values[i])) {
      throw InvalidArgument("tabulated kernel: values must be finite and non-negative");
    }
  }
  Kernel k(KernelForm::Tabulated, kappa, 1.0);
  k.cos_ = std::move(cos_theta);
  k.values_ = std::move(values);
  return k;
}

double Kernel::operator()(double theta) const {
  switch (form_) {
    case KernelForm::PowerLaw: return sin_weighted(theta) / std::sin(theta);
    case KernelForm::Constant: return strength_;
    case KernelForm::Tabulated: {
      const double mu = std::cos(theta);
      if (mu <= cos_.front()) return strength_ * values_.front();
      if (mu >= cos_.back()) return strength_ * values_.back();
      const auto it = std::upper_bound(cos_.begin(), cos_.end(), mu);
      const auto i = static_cast<std::size_t>(it - cos_.begin()) - 1;
      const double w = (mu - cos_[i]) / (cos_[i + 1] - cos_[i]);
      return strength_ * ((1.0 - w) * values_[i] + w * values_[i + 1]);
    }
  }
  return 0.0;
}

double Kernel::sin_weighted(double theta) const {
  if (form_ == KernelForm::PowerLaw) return strength_ * std::pow(theta, -1.0 - 2.0 * kappa_);
  return (*this)(theta) * std::sin(theta);
}

Kernel Kernel::scaled(double factor) const {
  if (!(factor > 0.0)) throw InvalidArgument("kernel: scale factor must be positive");
  Kernel k = *this;
  k.strength_ = strength_ * factor;
  return k;
}

double lambda_bracket(double theta, double p) {
  const double q = 0.5 * p;
  const double h = std::sin(0.5 * theta);
  const double x = h * h;  // Ω₋
  if (theta < kBracketTaylorSwitch) {
    // 1 − (1−x)^q ≈ q x − q(q−1)/2 x² for small Ω₋.
    return q * x - 0.5 * q * (q - 1.0) * x * x - std::pow(x, q);
  }
  if (theta < 0.5 * pi) return -std::expm1(q * std::log1p(-x)) - std::pow(x, q);
  const double c = std::cos(0.5 * theta);
  return 1.0 - std::pow(c * c, q) - std::pow(x, q);
}

AngularConstants angular_constants(const Kernel& kernel, double theta_min,
                                   const QuadratureTolerance& tol) {
  if (theta_min < 0.0 || theta_min > pi) throw InvalidArgument("theta_min outside [0, π]");
  const auto lam = detail::angular_integral(
      [&](double th) { return kernel.sin_weighted(th) * th * th; }, theta_min, tol, "Lambda");
  const auto cube = detail::angular_integral(
      [&](double th) {
        const double s = std::sin(th);
        return kernel.sin_weighted(th) * s * s;
      },
      theta_min, tol, "bbar");
  return {lam.value, 0.75 * pi * cube.value};
}

double total_rate(const Kernel& kernel, double theta_min, const QuadratureTolerance& tol) {
  if (theta_min < 0.0 || theta_min > pi) throw InvalidArgument("theta_min outside [0, π]");
  if (kernel.singular() && theta_min == 0.0) return std::numeric_limits<double>::infinity();
  if (theta_min == pi) return 0.0;
  const auto r = detail::angular_integral([&](double th) { return kernel.sin_weighted(th); },
                                          theta_min, tol, "total rate");
  return 2.0 * pi * r.value;
}

double lambda_p(const Kernel& kernel, double p, double theta_min, const QuadratureTolerance& tol) {
  if (!std::isfinite(p) || p <= 0.0) throw InvalidArgument("lambda_p: p must be positive");
  if (p < 2.0 && kernel.singular() && theta_min == 0.0) {
    throw InvalidArgument("lambda_p: p < 2 is not integrable for a singular kernel");
  }
  if (theta_min < 0.0 || theta_min > pi) throw InvalidArgument("theta_min outside [0, π]");
  const auto r = detail::angular_integral(
      [&](double th) { return kernel.sin_weighted(th) * lambda_bracket(th, p); }, theta_min, tol,
      "lambda_p");
  return 2.0 * pi * r.value;
}

CutoffKernel::CutoffKernel(Kernel base, double theta_min, const QuadratureTolerance& tol)
    : base_(std::move(base)), theta_min_(theta_min), tol_(tol) {
  if (!(theta_min > 0.0 && theta_min <= pi)) {
    throw InvalidArgument("cutoff kernel: theta_min must lie in (0, π]");
  }
  constants_ = angular_constants(base_, theta_min_, tol_);
  rate_ = kinetos::total_rate(base_, theta_min_, tol_);
  if (!(rate_ > 0.0)) throw InvalidArgument("cutoff kernel: total rate must be positive");
}

double CutoffKernel::lambda(double p) const { return lambda_p(base_, p, theta_min_, tol_); }

CutoffKernel CutoffKernel::scaled(double factor) const {
  return CutoffKernel(base_.scaled(factor), theta_min_, tol_);
}

nlohmann::json KernelSpec::to_json() const {
  if (base.form() == KernelForm::Tabulated) {
    throw InvalidArgument("tabulated kernels have no config representation");
  }
  return {{"form", to_string(base.form())},
          {"kappa", base.kappa()},
          {"strength", base.strength()},
          {"theta_min", theta_min}};
}

KernelSpec KernelSpec::from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  static const std::set<std::string> keys = {"form", "kappa", "strength", "theta_min"};
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError(path + "." + k, "unknown key");
  }
  for (const auto& k : keys) {
    if (!j.contains(k)) throw ConfigError(path + "." + k, "missing");
  }
  if (!j["form"].is_string()) throw ConfigError(path + ".form", "expected a string");
  const auto form_name = j["form"].get<std::string>();
  if (form_name != "power_law" && form_name != "constant") {
    throw ConfigError(path + ".form", "expected \"power_law\" or \"constant\"");
  }
  auto number = [&](const char* key) {
    if (!j[key].is_number()) throw ConfigError(path + "." + key, "expected a number");
    return j[key].get<double>();
  };
  const double kappa = number("kappa"), strength = number("strength"), tmin = number("theta_min");
  if (!(kappa > 0.0 && kappa < 1.0)) throw ConfigError(path + ".kappa", "must lie in (0,1)");
  if (!(strength > 0.0)) throw ConfigError(path + ".strength", "must be positive");
  if (!(tmin >= 0.0 && tmin <= pi)) throw ConfigError(path + ".theta_min", "must lie in [0, π]");
  Kernel base = form_name == "power_law" ? Kernel::power_law(kappa, strength)
                                         : Kernel::constant(strength, kappa);
  return KernelSpec{std::move(base), tmin};
}

ScatterTable::ScatterTable(const CutoffKernel& kernel, std::size_t nodes) {
  if (nodes < 2) throw InvalidArgument("scatter table needs at least two nodes");
  const double lo = kernel.theta_min();
  theta_.resize(nodes);
  cdf_.resize(nodes);
  if (lo >= pi) throw InvalidArgument("scatter table: empty angular range");
  const double ratio = std::log(pi / lo);
  for (std::size_t i = 0; i < nodes; ++i) {
    theta_[i] = lo * std::exp(ratio * static_cast<double>(i) / static_cast<double>(nodes - 1));
  }
  theta_.front() = lo;
  theta_.back() = pi;
  const Kernel& b = kernel.base();
  double acc = 0.0;
  cdf_[0] = 0.0;
  for (std::size_t i = 0; i + 1 < nodes; ++i) {
    acc += boost::math::quadrature::gauss<double, 10>::integrate(
        [&](double th) { return b.sin_weighted(th); }, theta_[i], theta_[i + 1]);
    cdf_[i + 1] = acc;
  }
  if (!(acc > 0.0)) throw InvalidArgument("scatter table: kernel has no mass above theta_min");
  mass_ = acc;
  for (auto& c : cdf_) c /= acc;
  cdf_.back() = 1.0;
}

double ScatterTable::sample_theta(double u) const {
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  if (it == cdf_.begin()) return theta_.front();
  if (it == cdf_.end()) return theta_.back();
  const auto i = static_cast<std::size_t>(it - cdf_.begin()) - 1;
  const double span = cdf_[i + 1] - cdf_[i];
  const double w = span > 0.0 ? (u - cdf_[i]) / span : 0.0;
  return theta_[i] + w * (theta_[i + 1] - theta_[i]);
}

void complete_basis(const Vec3& n, Vec3& e1, Vec3& e2) {
  // Duff et al. 2017, branch-free apart from the sign.
  const double sign = std::copysign(1.0, n.z());
  const double a = -1.0 / (sign + n.z());
  const double b = n.x() * n.y() * a;
  e1 = Vec3(1.0 + sign * n.x() * n.x() * a, sign * b, -sign * n.x());
  e2 = Vec3(b, sign + n.y() * n.y() * a, -n.y());
}

Vec3 sample_scatter(const ScatterTable& table, double u_theta, double u_phi, const Vec3& axis) {
  const double len = axis.norm();
  if (!(len > 0.0) || !std::isfinite(len)) throw InvalidArgument("sample_scatter: degenerate axis");
  const Vec3 n = axis / len;
  Vec3 e1, e2;
  complete_basis(n, e1, e2);
  const double th = table.sample_theta(u_theta);
  const double phi = 2.0 * pi * u_phi;
  const double st = std::sin(th);
  return std::cos(th) * n + st * (std::cos(phi) * e1 + std::sin(phi) * e2);
}

}  // namespace kinetos
