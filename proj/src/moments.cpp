#include "kinetos/moments.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <boost/numeric/odeint.hpp>
#include <nlohmann/json.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"

namespace kinetos {

namespace {

constexpr double sqrt2 = 1.41421356237309504880;

// (row, col) of each stored entry.
constexpr int kRow[6] = {0, 1, 2, 0, 0, 1};
constexpr int kCol[6] = {0, 1, 2, 1, 2, 2};

}  // namespace

SymMat3 SymMat3::from_matrix(const Mat3& m) {
  return {m(0, 0), m(1, 1), m(2, 2), 0.5 * (m(0, 1) + m(1, 0)), 0.5 * (m(0, 2) + m(2, 0)),
          0.5 * (m(1, 2) + m(2, 1))};
}

SymMat3 SymMat3::from_basis_vector(const Vec6& v) {
  return {v[0], v[1], v[2], v[3] / sqrt2, v[4] / sqrt2, v[5] / sqrt2};
}

Vec6 SymMat3::basis_vector() const {
  Vec6 v;
  v << e_[0], e_[1], e_[2], sqrt2 * e_[3], sqrt2 * e_[4], sqrt2 * e_[5];
  return v;
}

Mat3 SymMat3::matrix() const {
  Mat3 m;
  m << e_[0], e_[3], e_[4], e_[3], e_[1], e_[5], e_[4], e_[5], e_[2];
  return m;
}

double SymMat3::operator()(int i, int j) const {
  if (i > j) std::swap(i, j);
  for (int k = 0; k < 6; ++k) {
    if (kRow[k] == i && kCol[k] == j) return e_[k];
  }
  throw InvalidArgument("SymMat3 index out of range");
}

double SymMat3::frobenius() const { return basis_vector().norm(); }

double SymMat3::min_eigenvalue() const {
  Eigen::SelfAdjointEigenSolver<Mat3> es(matrix(), Eigen::EigenvaluesOnly);
  return es.eigenvalues()[0];
}

double SymMat3::dot(const SymMat3& o) const { return basis_vector().dot(o.basis_vector()); }

SymMat3 SymMat3::operator+(const SymMat3& o) const {
  SymMat3 r;
  for (int k = 0; k < 6; ++k) r.e_[k] = e_[k] + o.e_[k];
  return r;
}

SymMat3 SymMat3::operator-(const SymMat3& o) const {
  SymMat3 r;
  for (int k = 0; k < 6; ++k) r.e_[k] = e_[k] - o.e_[k];
  return r;
}

SymMat3 SymMat3::operator*(double s) const {
  SymMat3 r;
  for (int k = 0; k < 6; ++k) r.e_[k] = e_[k] * s;
  return r;
}

MomentOperator::MomentOperator(double alpha, const Mat3& drift) : alpha_(alpha), drift_(drift) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw InvalidArgument("moment operator: alpha must be non-negative");
  }
  if (!drift.allFinite()) throw InvalidArgument("moment operator: drift must be finite");
  for (int k = 0; k < 6; ++k) {
    Vec6 unit = Vec6::Zero();
    unit[k] = 1.0;
    mat_.col(k) = formula(alpha, drift, SymMat3::from_basis_vector(unit)).basis_vector();
  }
}

SymMat3 MomentOperator::formula(double alpha, const Mat3& drift, const SymMat3& m) {
  const Mat3 mm = m.matrix();
  const Mat3 am = drift * mm;
  const Mat3 out =
      -am - am.transpose() - 2.0 * alpha * (mm - (mm.trace() / 3.0) * Mat3::Identity());
  return SymMat3::from_matrix(out);
}

SymMat3 MomentOperator::apply(const SymMat3& m) const {
  return SymMat3::from_basis_vector(mat_ * m.basis_vector());
}

EigenReport leading_eigenpair(const MomentOperator& op, const EigenOptions& opts) {
  const Mat6& a = op.matrix();
  const double scale = op.norm();
  Eigen::EigenSolver<Mat6> es(a, false);
  if (es.info() != Eigen::Success) throw NonAdmissible("moment eigen-solve failed");
  std::array<std::complex<double>, 6> ev;
  for (int i = 0; i < 6; ++i) ev[i] = es.eigenvalues()[i];
  std::sort(ev.begin(), ev.end(), [](auto x, auto y) { return x.real() > y.real(); });

  if (std::abs(ev[0].imag()) > opts.realness_tol * std::max(1.0, scale)) {
    std::ostringstream os;
    os << "leading eigenvalue " << ev[0] << " is not real";
    throw ComplexLeading(os.str());
  }
  const double gap = ev[0].real() - ev[1].real();
  if (gap < opts.simplicity_tol * scale) {
    std::ostringstream os;
    os << "leading eigenvalue is not simple (gap " << gap << ")";
    throw NonSimpleLeading(os.str());
  }

  // Refine the eigenvector as the null direction of (op − λI).
  const Mat6 shifted = a - ev[0].real() * Mat6::Identity();
  Eigen::JacobiSVD<Mat6> svd(shifted, Eigen::ComputeFullV);
  Vec6 v = svd.matrixV().col(5);
  v.normalize();
  SymMat3 n = SymMat3::from_basis_vector(v);
  if (n.trace() < 0.0) {
    v = -v;
    n = n * -1.0;
  }
  const double lead = v.dot(a * v);

  EigenReport r;
  r.beta_bar = 0.5 * lead;
  r.N_bar = n;
  r.gap = lead - ev[1].real();
  r.simple = true;
  r.residual = (a * v - lead * v).norm();
  if (!(n.min_eigenvalue() > 0.0)) {
    throw NonAdmissible("leading eigenmatrix is not positive definite");
  }
  return r;
}

nlohmann::json to_json(const SymMat3& m) {
  const auto& e = m.entries();
  return nlohmann::json::array({e[0], e[1], e[2], e[3], e[4], e[5]});
}

SymMat3 sym_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected an array");
  std::array<double, 9> v{};
  if (j.size() == 6) {
    for (std::size_t i = 0; i < 6; ++i) {
      if (!j[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]", "not a number");
      v[i] = j[i].get<double>();
    }
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }
  if (j.size() == 9) {
    Mat3 m;
    for (std::size_t i = 0; i < 9; ++i) {
      if (!j[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]", "not a number");
      m(int(i / 3), int(i % 3)) = j[i].get<double>();
    }
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff())) {
      throw ConfigError(path, "matrix is not symmetric");
    }
    return SymMat3::from_matrix(m);
  }
  throw ConfigError(path, "expected 6 or 9 numbers");
}

nlohmann::json to_json(const EigenReport& r) {
  return {{"beta_bar", r.beta_bar},
          {"N_bar", to_json(r.N_bar)},
          {"gap", r.gap},
          {"simple", r.simple},
          {"residual", r.residual}};
}

MomentOperator assemble_operator(double alpha, const Mat3& drift) {
  if (!(alpha > 0.0)) throw InvalidArgument("assemble_operator: alpha must be positive");
  return MomentOperator(alpha, drift);
}

std::vector<SymMat3> integrate_moments(const Mat3& drift, double alpha, const SymMat3& m0,
                                       const std::vector<double>& t_grid) {
  const MomentOperator op(alpha, drift);
  const Vec6 x0 = m0.basis_vector();
  std::vector<SymMat3> out;
  out.reserve(t_grid.size());
  for (const double t : t_grid) {
    const Mat6 flow = (op.matrix() * t).exp();
    out.push_back(SymMat3::from_basis_vector(flow * x0));
  }
  return out;
}

std::vector<SymMat3> integrate_perturbed_moments(const Mat3& drift,
                                                 const std::function<double(double)>& alpha_of_t,
                                                 const std::function<Mat3(double)>& b_of_t,
                                                 const SymMat3& m0,
                                                 const std::vector<double>& t_grid,
                                                 const OdeOptions& opts) {
  namespace ode = boost::numeric::odeint;
  using State = std::array<double, 6>;
  if (t_grid.empty()) return {};
  if (!std::is_sorted(t_grid.begin(), t_grid.end())) {
    throw InvalidArgument("integrate_perturbed_moments: t_grid must be sorted");
  }
  auto rhs = [&](const State& x, State& dx, double t) {
    Vec6 v;
    for (int k = 0; k < 6; ++k) v[k] = x[k];
    const SymMat3 m = SymMat3::from_basis_vector(v);
    const Vec6 d = MomentOperator::formula(alpha_of_t(t), drift + b_of_t(t), m).basis_vector();
    for (int k = 0; k < 6; ++k) dx[k] = d[k];
  };
  State x;
  const Vec6 v0 = m0.basis_vector();
  for (int k = 0; k < 6; ++k) x[k] = v0[k];

  std::vector<SymMat3> out;
  out.reserve(t_grid.size());
  auto observe = [&](const State& s, double) {
    Vec6 v;
    for (int k = 0; k < 6; ++k) v[k] = s[k];
    out.push_back(SymMat3::from_basis_vector(v));
  };
  auto stepper = ode::make_controlled<ode::runge_kutta_dopri5<State>>(opts.abs_tol, opts.rel_tol);
  const double span = t_grid.back() - t_grid.front();
  const double dt0 = span > 0.0 ? 1e-3 * span : 1e-3;
  std::size_t steps = 0;
  try {
    steps = ode::integrate_times(stepper, rhs, x, t_grid.begin(), t_grid.end(), dt0, observe,
                                 ode::max_step_checker(opts.max_steps));
  } catch (const std::exception& e) {
    const double reached = out.empty() ? t_grid.front() : t_grid[out.size() - 1];
    throw IntegratorError(std::string("moment ODE integration failed: ") + e.what(), reached,
                          steps);
  }
  return out;
}

RadiusProbe probe_radius(double alpha, const Mat3& direction, double s_max, int scan_points,
                         double tol) {
  const double norm = entry_norm(direction);
  if (!(norm > 0.0)) throw InvalidArgument("probe_radius: zero direction");
  if (!(s_max > 0.0)) throw InvalidArgument("probe_radius: s_max must be positive");
  const Mat3 unit = direction / norm;
  auto failure = [&](double s) -> std::string {
    try {
      leading_eigenpair(MomentOperator(alpha, s * unit));
      return {};
    } catch (const NonSimpleLeading&) {
      return "non-simple leading eigenvalue";
    } catch (const ComplexLeading&) {
      return "complex leading eigenvalue";
    } catch (const NonAdmissible&) {
      return "eigenmatrix not positive definite";
    }
  };
  double lo = 0.0;
  for (int k = 1; k <= scan_points; ++k) {
    const double s = s_max * k / scan_points;
    auto why = failure(s);
    if (why.empty()) {
      lo = s;
      continue;
    }
    double hi = s;
    while (hi - lo > tol * s_max) {
      const double mid = 0.5 * (lo + hi);
      auto w = failure(mid);
      if (w.empty()) {
        lo = mid;
      } else {
        hi = mid;
        why = std::move(w);
      }
    }
    return {lo, false, why};
  }
  return {s_max, true, "no failure up to s_max"};
}

RadiusProbe require_admissible(double alpha, const Mat3& drift, double s_max) {
  const double norm = entry_norm(drift);
  if (norm == 0.0) return {s_max, true, "zero drift"};
  auto probe = probe_radius(alpha, drift, s_max);
  if (norm > probe.radius) {
    std::ostringstream os;
    os << "drift norm " << norm << " exceeds the probed admissible radius " << probe.radius
       << " (" << probe.reason << ")";
    throw NonAdmissible(os.str());
  }
  return probe;
}

void write_moments_csv(std::ostream& os, const std::vector<double>& t,
                       const std::vector<SymMat3>& traj) {
  if (t.size() != traj.size()) throw InvalidArgument("write_moments_csv: length mismatch");
  os << "t,m11,m22,m33,m12,m13,m23\n";
  for (std::size_t i = 0; i < t.size(); ++i) {
    os << fmt(t[i]);
    for (const double e : traj[i].entries()) os << ',' << fmt(e);
    os << '\n';
  }
}

}  // namespace kinetos
