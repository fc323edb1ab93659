#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "kinetos/errors.hpp"
#include "kinetos/moments.hpp"

using namespace kinetos;
using std::numbers::pi;

namespace {

Mat3 simple_shear(double s) {
  Mat3 a = Mat3::Zero();
  a(0, 1) = s;
  return a;
}

double angle(const SymMat3& a, const SymMat3& b) {
  const double c = a.dot(b) / (a.frobenius() * b.frobenius());
  return std::acos(std::clamp(c, -1.0, 1.0));
}

SymMat3 random_sym(std::mt19937_64& g) {
  std::normal_distribution<double> n;
  return {n(g), n(g), n(g), n(g), n(g), n(g)};
}

Mat3 random_mat(std::mt19937_64& g) {
  std::normal_distribution<double> n;
  Mat3 m;
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = n(g);
  return m;
}

}  // namespace

TEST_CASE("assembled operator agrees with the defining formula") {
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat3 a = random_mat(g);
    const double alpha = 0.1 + 3.0 * std::uniform_real_distribution<double>()(g);
    const SymMat3 m = random_sym(g);
    const MomentOperator op(alpha, a);
    const SymMat3 direct = MomentOperator::formula(alpha, a, m);
    CHECK((op.apply(m) - direct).frobenius() <= 1e-12 * std::max(1.0, direct.frobenius()));
    // direct formula from the full matrix, independent of the 6-vector basis
    const Mat3 mm = m.matrix();
    const Mat3 ref = -a * mm - (a * mm).transpose() - 2 * alpha * (mm - mm.trace() / 3 * Mat3::Identity());
    CHECK((op.apply(m).matrix() - ref).norm() <= 1e-12 * std::max(1.0, ref.norm()));
    CHECK((op.apply(m).matrix() - op.apply(m).matrix().transpose()).norm() == 0.0);
  }
}

TEST_CASE("basis vector norm is the Frobenius norm") {
  const SymMat3 m(1, 2, 3, 4, 5, 6);
  CHECK(m.frobenius() == doctest::Approx(m.matrix().norm()).epsilon(1e-15));
  CHECK(SymMat3::from_basis_vector(m.basis_vector()).frobenius() ==
        doctest::Approx(m.frobenius()).epsilon(1e-15));
  CHECK(m(2, 0) == 5.0);
}

TEST_CASE("operator special cases") {
  const double bbar = 2.5;
  const MomentOperator iso(bbar, Mat3::Zero());
  CHECK(iso.apply(SymMat3::identity(3.7)).frobenius() < 1e-14);
  const SymMat3 dev(1.0, -0.4, -0.6, 0.3, -0.2, 0.9);
  CHECK((iso.apply(dev) - dev * (-2 * bbar)).frobenius() < 1e-13);

  const double alpha = 1.3;
  const MomentOperator dil(alpha, Mat3::Identity());
  const SymMat3 m(2, 1, 0.5, 0.1, 0.2, 0.3);
  const SymMat3 expect = m * -2.0 - (m - SymMat3::identity(m.trace() / 3)) * (2 * alpha);
  CHECK((dil.apply(m) - expect).frobenius() < 1e-13);
}

TEST_CASE("isotropic eigenproblem") {
  const double bbar = 2.8683767045753009;
  const auto r = leading_eigenpair(MomentOperator(bbar, Mat3::Zero()));
  CHECK(std::abs(r.beta_bar) <= 1e-12);
  CHECK((r.N_bar - SymMat3::identity(1 / std::sqrt(3.0))).frobenius() <= 1e-12);
  CHECK(std::abs(r.gap - 2 * bbar) <= 1e-10);
  CHECK(r.simple);
}

TEST_CASE("pure dilation fixes sign conventions") {
  for (const double eps : {0.1, -0.3}) {
    const auto r = leading_eigenpair(MomentOperator(2.0, eps * Mat3::Identity()));
    CHECK(r.beta_bar == doctest::Approx(-eps).epsilon(1e-12));
    CHECK((r.N_bar - SymMat3::identity(1 / std::sqrt(3.0))).frobenius() <= 1e-12);
  }
}

TEST_CASE("simple shear eigenpair against a dense reference") {
  const double alpha = pi, s = 0.05 * pi;
  const MomentOperator op(alpha, simple_shear(s));
  const auto r = leading_eigenpair(op);
  CHECK(r.beta_bar == doctest::Approx(1.3079076961728840e-03).epsilon(1e-9));
  const SymMat3 ref(0.5777105503286488, 0.5769899130934999, 0.5769899130934999,
                    -0.014418745016134646, 0.0, 0.0);
  CHECK((r.N_bar - ref).frobenius() < 1e-12);
  CHECK(r.gap == doctest::Approx(6.285801122571933).epsilon(1e-9));
  CHECK(r.residual <= 1e-10 * op.norm());
  CHECK(std::abs(r.N_bar.frobenius() - 1.0) <= 1e-12);
  CHECK(r.N_bar.min_eigenvalue() > 0.0);
  // second-order perturbation estimate β̄ ≈ s²/(6α)
  CHECK(r.beta_bar == doctest::Approx(s * s / (6 * alpha)).epsilon(1e-2));
}

TEST_CASE("halving the shear quarters the exponent") {
  const double bbar = 2.8683767045753009;
  const double b1 = leading_eigenpair(MomentOperator(bbar, simple_shear(0.05 * bbar))).beta_bar;
  const double b2 = leading_eigenpair(MomentOperator(bbar, simple_shear(0.025 * bbar))).beta_bar;
  CHECK(b1 > 0.0);
  CHECK(std::abs(b1 / b2 - 4.0) <= 0.4);
}

TEST_CASE("eigen data depend continuously on the drift") {
  const double alpha = 2.0;
  std::mt19937_64 g(3);
  const Mat3 dir = random_mat(g) / 9.0;
  std::vector<double> beta;
  std::vector<SymMat3> nbar;
  const int steps = 200;
  for (int i = 0; i <= steps; ++i) {
    const auto r = leading_eigenpair(MomentOperator(alpha, (2.0 * i / steps) * dir));
    beta.push_back(r.beta_bar);
    nbar.push_back(r.N_bar);
    CHECK(r.residual <= 1e-10 * MomentOperator(alpha, (2.0 * i / steps) * dir).norm());
  }
  for (int i = 1; i + 1 < steps; ++i) {
    const double jump = std::abs(beta[i + 1] - beta[i]);
    const double secant = 0.5 * std::abs(beta[i + 1] - beta[i - 1]);
    CHECK(jump <= 10 * secant + 1e-12);
    const double njump = (nbar[i + 1] - nbar[i]).frobenius();
    const double nsec = 0.5 * (nbar[i + 1] - nbar[i - 1]).frobenius();
    CHECK(njump <= 10 * nsec + 1e-12);
  }
}

TEST_CASE("isotropic relaxation has the closed form") {
  const double bbar = pi;
  const SymMat3 m0(2, 1, 1, 0, 0, 0);
  std::vector<double> t;
  for (int i = 0; i <= 40; ++i) t.push_back(0.05 * i);
  const auto traj = integrate_moments(Mat3::Zero(), bbar, m0, t);
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(std::abs(traj[i].trace() - 4.0) <= 1e-12);
    const SymMat3 expect =
        SymMat3::identity(4.0 / 3) + (m0 - SymMat3::identity(4.0 / 3)) * std::exp(-2 * bbar * t[i]);
    CHECK((traj[i] - expect).frobenius() <= 1e-12);
  }
  const auto eq = integrate_moments(Mat3::Zero(), bbar, SymMat3::identity(), t);
  for (const auto& m : eq) CHECK((m - SymMat3::identity()).frobenius() <= 1e-13);
}

TEST_CASE("moment flow aligns with the leading eigendirection") {
  const double bbar = 2.8683767045753009, s = 0.05 * bbar;
  const Mat3 a = simple_shear(s);
  const auto r = leading_eigenpair(MomentOperator(bbar, a));
  const double tend = 20 / r.gap;
  const SymMat3 m0(3, 0.5, 1, 0.2, 0, -0.1);
  const auto traj = integrate_moments(a, bbar, m0, {0.0, tend - 0.1, tend});
  CHECK(angle(traj[2], r.N_bar) < 1e-4);
  const double rate = std::log(traj[2].frobenius() / traj[1].frobenius()) / 0.1;
  CHECK(rate == doctest::Approx(2 * r.beta_bar).epsilon(1e-2));
}

TEST_CASE("perturbed integration reduces to the exact flow") {
  const double bbar = 2.0;
  const Mat3 a = simple_shear(0.3);
  const SymMat3 m0(1.5, 1, 0.5, 0.1, 0, 0.2);
  std::vector<double> t;
  for (int i = 0; i <= 30; ++i) t.push_back(0.1 * i);
  const auto exact = integrate_moments(a, bbar, m0, t);
  const auto ode = integrate_perturbed_moments(
      a, [&](double) { return bbar; }, [](double) { return Mat3::Zero().eval(); }, m0, t);
  REQUIRE(ode.size() == t.size());
  for (std::size_t i = 0; i < t.size(); ++i) CHECK((exact[i] - ode[i]).frobenius() <= 1e-9);
}

TEST_CASE("trace identity under a decaying perturbation") {
  const double bbar = pi;
  auto b = [](double t) {
    Mat3 m = Mat3::Zero();
    m(0, 0) = std::exp(-t);
    return m;
  };
  const SymMat3 m0(2, 1, 0.7, 0.3, 0.1, 0);
  const double h = 1e-3;
  std::vector<double> t;
  for (int i = 0; i <= 3000; ++i) t.push_back(h * i);
  const auto traj = integrate_perturbed_moments(
      Mat3::Zero(), [&](double) { return bbar; }, b, m0, t);
  // Simpson integral of d(tr M)/dt = −2 tr(B M) = −2 e^{−t} M11
  double integral = 0.0;
  for (std::size_t i = 0; i + 2 < t.size(); i += 2) {
    auto f = [&](std::size_t k) { return -2 * std::exp(-t[k]) * traj[k].entries()[0]; };
    integral += h / 3 * (f(i) + 4 * f(i + 1) + f(i + 2));
  }
  CHECK(std::abs(traj.back().trace() - m0.trace() - integral) <= 1e-8);
}

TEST_CASE("decaying perturbation keeps the eigendirection") {
  const double bbar = 2.8683767045753009;
  const Mat3 a = simple_shear(0.05 * bbar);
  std::mt19937_64 g(17);
  Mat3 rmat = random_mat(g);
  rmat /= entry_norm(rmat);
  const auto r = leading_eigenpair(MomentOperator(bbar, a));
  const double tend = 30 / r.gap;
  const auto traj = integrate_perturbed_moments(
      a, [&](double) { return bbar; }, [&](double t) { return (std::exp(-t) * rmat).eval(); },
      SymMat3::identity(), {0.0, tend});
  CHECK(angle(traj.back(), r.N_bar) < 1e-3);
}

TEST_CASE("admissibility probe and guard") {
  const double alpha = 2.0;
  const auto probe = probe_radius(alpha, simple_shear(1.0), alpha);
  CHECK(probe.capped);
  CHECK(probe.radius == alpha);
  CHECK_NOTHROW(require_admissible(alpha, simple_shear(0.5 * alpha), alpha));
  CHECK_THROWS_AS(require_admissible(alpha, simple_shear(2 * probe.radius), alpha), NonAdmissible);
  CHECK_THROWS_AS(probe_radius(alpha, Mat3::Zero(), 1.0), InvalidArgument);
}

TEST_CASE("non-simple and complex leading eigenvalues are reported") {
  // Options tight enough to turn the isotropic case into a failure exercise both paths.
  EigenOptions strict;
  strict.simplicity_tol = 1.0;
  CHECK_THROWS_AS(leading_eigenpair(MomentOperator(0.01, Mat3::Zero()), strict), NonSimpleLeading);
  EigenOptions real_only;
  real_only.realness_tol = -1.0;
  CHECK_THROWS_AS(leading_eigenpair(MomentOperator(1.0, Mat3::Zero()), real_only), ComplexLeading);
}

TEST_CASE("serialization formats") {
  const auto r = leading_eigenpair(MomentOperator(1.0, Mat3::Zero()));
  const auto j = to_json(r);
  CHECK(j["N_bar"].size() == 6);
  CHECK(j.contains("beta_bar"));
  CHECK(j.contains("gap"));
  CHECK(j["simple"].get<bool>());
  std::ostringstream os;
  write_moments_csv(os, {0.0, 1.0}, {SymMat3::identity(), SymMat3(1, 2, 3, 4, 5, 6)});
  CHECK(os.str() == "t,m11,m22,m33,m12,m13,m23\n0,1,1,1,0,0,0\n1,1,2,3,4,5,6\n");
  CHECK(sym_from_json(nlohmann::json::array({1, 0, 0, 0, 2, 0, 0, 0, 3}), "x") ==
        SymMat3(1, 2, 3, 0, 0, 0));
  CHECK_THROWS_AS(sym_from_json(nlohmann::json::array({1, 2, 0, 0, 2, 0, 0, 0, 3}), "x"),
                  ConfigError);
}

TEST_CASE("collisionless operator is admitted only outside assemble_operator") {
  CHECK_NOTHROW(MomentOperator(0.0, simple_shear(1.0)));
  CHECK_THROWS_AS(assemble_operator(0.0, simple_shear(1.0)), InvalidArgument);
  CHECK_THROWS_AS(MomentOperator(-1.0, Mat3::Zero()), InvalidArgument);
}
