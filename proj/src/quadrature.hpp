#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <limits>
#include <sstream>

#include "kinetos/errors.hpp"
#include "kinetos/kernel.hpp"

namespace kinetos::detail {

struct QuadResult {
  double value = 0.0;
  double error = 0.0;
};

// Boost's stopping rule is relative only, so a vanishing integral would recurse to
// full depth; shallower passes stop as soon as the absolute tolerance is met.
template <class F>
QuadResult gk(F&& f, double a, double b, const QuadratureTolerance& tol) {
  double v = 0.0, err = 0.0, l1 = 0.0;
  for (unsigned depth : {5u, 10u, 20u}) {
    v = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a, b, depth, 0.1 * tol.rel,
                                                                     &err, &l1);
    if (err <= 0.1 * std::max(tol.abs, tol.rel * std::abs(v))) break;
  }
  return {v, err};
}

inline void require_converged(const QuadResult& r, const QuadratureTolerance& tol,
                              const char* what) {
  if (!std::isfinite(r.value) || r.error > std::max(tol.abs, tol.rel * std::abs(r.value))) {
    std::ostringstream os;
    os << what << ": quadrature did not converge (value " << r.value << ", error estimate "
       << r.error << ")";
    throw QuadratureError(os.str(), r.error);
  }
}

// ∫_{theta_min}^{π} f(θ) dθ. The region next to the lower endpoint is mapped by
// θ = theta_min·e^u (or θ = e^u when theta_min = 0, down to a floor with a
// power-law tail correction), which flattens algebraic endpoint behaviour.
template <class F>
QuadResult angular_integral(F&& f, double theta_min, const QuadratureTolerance& tol,
                            const char* what) {
  constexpr double pi = 3.14159265358979323846;
  constexpr double split = 0.5;
  QuadResult total;
  auto add = [&](const QuadResult& r) {
    total.value += r.value;
    total.error += r.error;
  };
  if (theta_min >= split) {
    add(gk(f, theta_min, pi, tol));
  } else {
    add(gk(f, split, pi, tol));
    auto mapped = [&](double u) {
      const double th = std::exp(u);
      return f(th) * th;
    };
    if (theta_min > 0.0) {
      const double lo = std::log(theta_min);
      add(gk(mapped, lo, std::log(split), tol));
    } else {
      const double floor = 1e-12;
      add(gk(mapped, std::log(floor), std::log(split), tol));
      const double f0 = f(floor), f1 = f(2.0 * floor);
      if (f0 != 0.0) {
        const double slope = std::log(std::abs(f1 / f0)) / std::log(2.0);
        if (!(slope > -1.0)) {
          throw QuadratureError(std::string(what) + ": integrand not integrable at 0",
                                std::numeric_limits<double>::infinity());
        }
        const double tail = f0 * floor / (slope + 1.0);
        total.value += tail;
        total.error += 1e-3 * std::abs(tail);
      }
    }
  }
  require_converged(total, tol, what);
  return total;
}

}  // namespace kinetos::detail
