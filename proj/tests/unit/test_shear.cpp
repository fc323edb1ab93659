#include <doctest.h>
#include <nlohmann/json.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <filesystem>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"
#include "kinetos/shear.hpp"

using namespace kinetos;

namespace {

ShearScenario planar(double rate, double M, const Mat3& r) {
  ShearScenario s;
  s.kind = ShearKind::Planar;
  s.shear_rate = rate;
  s.M_rescale = M;
  s.R = r;
  return s;
}

CutoffKernel unit_kernel() { return CutoffKernel(Kernel::constant(1.0), 1e-3); }

ShearOptions small_options(std::size_t n) {
  ShearOptions o;
  for (SimulationParams* sim : {&o.profile.sim, &o.stability.sim}) {
    sim->particles = n;
    sim->directions = 16;
    sim->radii = 16;
    sim->k_max = 5.0;
  }
  o.profile.sim.seed = 3;
  o.stability.sim.seed = 4;
  return o;
}

InitialSpec offset_gaussian() {
  InitialSpec f0;
  f0.law = GaussianLaw{Vec3(0.5, -0.3, 0.2), Mat3(Vec3(1.5, 1.0, 0.5).asDiagonal())};
  return f0;
}

std::string slurp(const std::filesystem::path& p) { return read_file(p); }

}  // namespace

TEST_CASE("scenario matrices and mass factor") {
  ShearScenario simple;
  simple.shear_rate = 0.2;
  CHECK(simple.drift()(0, 1) == 0.2);
  CHECK(simple.drift().trace() == 0.0);
  CHECK((simple.drift().array() != 0.0).count() == 1);

  const auto p = planar(0.3, 2.0, 3.0 * Mat3::Identity() / 3.0);
  CHECK(p.drift().trace() == 1.0);
  CHECK(p.drift()(1, 2) == 0.3);
  CHECK(p.drift()(2, 2) == 1.0);
  for (double t : {0.0, 0.5, 2.0, 10.0}) {
    CHECK(p.mass_factor(t) == doctest::Approx(std::exp(-3.0 * (1.0 - std::exp(-t)) / 2.0)).epsilon(1e-15));
  }
  CHECK(p.mass_limit() == doctest::Approx(std::exp(-1.5)).epsilon(1e-15));
}

TEST_CASE("planar transform clock") {
  const auto s = planar(0.1, 3.0, Mat3::Identity());
  const auto zero = planar_transform(s, 0.0);
  CHECK(zero.tau == 0.0);
  CHECK(zero.B_tau.isApprox(Mat3::Identity() / 3.0));
  const auto later = planar_transform(s, 4.0);
  CHECK(later.tau == doctest::Approx(3.0 * std::log(5.0)));
  CHECK(physical_time(s, later.tau) == doctest::Approx(4.0));
  CHECK(later.A_over_M.isApprox(s.drift() / 3.0));
  CHECK(later.B_tau.norm() <= std::exp(-later.tau) * Mat3::Identity().norm() / 3.0 + 1e-15);
  CHECK_THROWS_AS(planar_transform(s, -1.0), InvalidArgument);
}

TEST_CASE("frame evolution") {
  const std::vector<double> grid{0.0, 0.25, 1.0, 3.0, 8.0};
  SUBCASE("mass factor by quadrature matches the closed form") {
    const auto s = planar(0.1, 2.0, Mat3::Identity());
    const auto frames = evolve_frame(s, grid);
    for (const auto& f : frames) {
      CHECK(std::abs(f.m - std::exp(-3.0 * (1.0 - std::exp(-f.tau)) / 2.0)) <= 1e-9);
      CHECK(f.E.determinant() > 0.0);
    }
    CHECK(frames.front().E == Mat3::Identity());
  }
  SUBCASE("nilpotent shear gives a linear frame") {
    ShearScenario s;
    s.shear_rate = 0.7;
    s.M_rescale = 2.0;
    for (const auto& f : evolve_frame(s, grid)) {
      const Mat3 exact = Mat3::Identity() - (f.tau / 2.0) * s.drift();
      CHECK((f.E - exact).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK(f.m == 1.0);
    }
  }
  SUBCASE("unperturbed planar frame is the matrix exponential") {
    const auto s = planar(0.4, 1.5, Mat3::Zero());
    for (const auto& f : evolve_frame(s, grid)) {
      const Mat3 exact = (-f.tau / 1.5 * s.drift()).exp();
      CHECK((f.E - exact).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, exact.norm()));
    }
  }
  CHECK_THROWS_AS(evolve_frame(planar(0.1, 1.0, Mat3::Zero()), {1.0, 0.5}), InvalidArgument);
}

TEST_CASE("scenario JSON") {
  const auto s = planar(0.25, 4.0, Mat3::Identity());
  const auto back = ShearScenario::from_json(s.to_json());
  CHECK(back.kind == ShearKind::Planar);
  CHECK(back.shear_rate == 0.25);
  CHECK(back.M_rescale == 4.0);
  CHECK(back.R == s.R);
  auto j = s.to_json();
  j["B"]["extra"] = 1;
  try {
    ShearScenario::from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.path() == "scenario.B.extra");
  }
  j = s.to_json();
  j["kind"] = "cylindrical";
  CHECK_THROWS_AS(ShearScenario::from_json(j), ConfigError);
  j = s.to_json();
  j["M_rescale"] = -1;
  CHECK_THROWS_AS(ShearScenario::from_json(j), ConfigError);
}

TEST_CASE("unperturbed pipeline is byte-identical to the plain stability run") {
  const CutoffKernel k = unit_kernel();
  auto opts = small_options(5000);
  const double rate = 0.05 * k.bbar();
  const auto f0 = offset_gaussian();
  const auto via_shear = simple_shear_entry(rate, 1.0, k, f0, opts);

  Mat3 a = Mat3::Zero();
  a(0, 1) = rate;
  const auto profile = find_profile(a, k, opts.K, opts.profile);
  const auto plain = stability_run(f0, a, k, profile, opts.stability);

  const auto root = std::filesystem::temp_directory_path() / "kinetos_test_shear";
  std::filesystem::remove_all(root);
  write_stability(root / "plain", plain);
  write_stability(root / "shear", via_shear.stability);
  write_profile(root / "plain", profile);
  write_profile(root / "shear", via_shear.profile);
  for (const char* f : {"stability.csv", "stability_summary.json", "profile.kens", "profile_diagnostics.csv"}) {
    CHECK(slurp(root / "plain" / f) == slurp(root / "shear" / f));
  }
  CHECK(via_shear.frame_z <= 5.0);
  CHECK(via_shear.mass_error == 0.0);
  write_shear(root / "full", via_shear);
  CHECK(slurp(root / "full" / "frames.csv").rfind("t,tau,m_t,E11,", 0) == 0);
  CHECK(nlohmann::json::parse(slurp(root / "full" / "shear_summary.json")).contains("pass_flags"));

  CHECK_THROWS_AS(simple_shear_entry(2.0 * k.bbar(), 1.0, k, f0, opts), NonAdmissible);
}

TEST_CASE("rescale M is a time dilation") {
  const CutoffKernel k = unit_kernel();
  auto opts = small_options(5000);
  const auto f0 = offset_gaussian();
  const double rate = 0.05 * k.bbar();
  const auto one = simple_shear_entry(rate, 1.0, k, f0, opts);
  const auto two = simple_shear_entry(rate, 2.0, k, f0, opts);
  REQUIRE(one.stability.series.size() == two.stability.series.size());
  CHECK(two.stability.nu == doctest::Approx(one.stability.nu / 2.0).epsilon(1e-12));
  for (std::size_t i = 0; i < one.stability.series.size(); ++i) {
    const auto& a = one.stability.series[i];
    const auto& b = two.stability.series[i];
    CHECK(b.t == doctest::Approx(2.0 * a.t).epsilon(1e-12));
    const auto ma = a.moments.entries(), mb = b.moments.entries();
    const auto se = a.moments_se.entries();
    for (int c = 0; c < 6; ++c) CHECK(std::abs(ma[c] - mb[c]) <= 5.0 * se[c] + 1e-12);
  }
}

TEST_CASE("planar pipeline with decaying perturbation") {
  const CutoffKernel k = unit_kernel();
  auto opts = small_options(20000);
  const auto s = planar(0.05, 4.0, Mat3::Identity());
  InitialSpec f0;
  f0.law = GaussianLaw{Vec3(0.2, 0.1, -0.1), Mat3::Identity()};
  const auto r = run_shear(s, k, f0, opts);
  CHECK(r.mass_error <= 1e-9);
  CHECK(r.frame_z <= 5.0);
  const auto& last = r.stability.series.back();
  const SymMat3 normalized = last.moments * (1.0 / last.moments.frobenius());
  const auto n = normalized.entries(), target = r.stability.N_bar.entries();
  const auto se = last.moments_se.entries();
  for (int c = 0; c < 6; ++c) CHECK(std::abs(n[c] - target[c]) <= 5.0 * se[c] / last.moments.frobenius());
  CHECK(r.summary().at("pass_flags").at("mass") == true);
  REQUIRE(r.alpha_windows.size() == 3);
  CHECK(r.alpha_settles());
  CHECK(r.frames.back().m == doctest::Approx(s.mass_factor(r.frames.back().tau)).epsilon(1e-9));
}
