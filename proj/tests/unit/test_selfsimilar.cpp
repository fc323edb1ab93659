#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"
#include "kinetos/selfsimilar.hpp"

using namespace kinetos;
using std::numbers::pi;

namespace {

Mat3 simple_shear(double s) {
  Mat3 a = Mat3::Zero();
  a(0, 1) = s;
  return a;
}

CutoffKernel unit_kernel() { return CutoffKernel(Kernel::constant(1.0), 1e-3); }

SimulationParams small_sim(std::size_t n, std::uint64_t seed = 1) {
  SimulationParams sim;
  sim.particles = n;
  sim.seed = seed;
  sim.directions = 16;
  sim.radii = 16;
  sim.k_min = 0.1;
  sim.k_max = 5.0;
  return sim;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "kinetos_test_selfsimilar" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("K = 0 gives the Dirac profile with zero diagnostics") {
  ProfileOptions opts;
  opts.sim = small_sim(2000);
  const auto r = find_profile(simple_shear(0.05 * pi), unit_kernel(), 0.0, opts);
  for (const auto& v : r.snapshot.v) CHECK(v == Vec3::Zero());
  REQUIRE(r.diagnostics.size() == 2);
  for (const auto& d : r.diagnostics) {
    CHECK(d.d2 == 0.0);
    CHECK(d.noise_floor == 0.0);
    CHECK(d.moment_residual == 0.0);
  }
  CHECK(r.alpha == 0.0);
}

TEST_CASE("isotropic profile matches the Maxwellian") {
  const double c = 1.5;
  ProfileOptions opts;
  opts.sim = small_sim(40000, 3);
  const auto r = find_profile(Mat3::Zero(), unit_kernel(), std::sqrt(3.0) * c, opts);
  CHECK(r.beta_bar == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.nu == doctest::Approx(2 * pi).epsilon(1e-9));
  EcfOptions eo;
  eo.centered = true;
  const auto grid = opts.sim.grid();
  const auto emp = ecf(r.snapshot, grid, eo);
  const auto exact = analytic_cf(grid, gaussian_cf(Vec3::Zero(), c * Mat3::Identity()));
  const auto d = d2(emp, exact);
  CHECK(d.value <= 3.0 * d.noise_floor);
  CHECK(r.terminal_d2 <= 2.0 * r.terminal_floor);
}

TEST_CASE("sheared profile carries K times the eigenmatrix") {
  const CutoffKernel k = unit_kernel();
  const double K = 3.0;
  ProfileOptions opts;
  opts.sim = small_sim(40000, 5);
  const auto r = find_profile(simple_shear(0.05 * k.bbar()), k, K, opts);
  CHECK(r.beta_bar > 0.0);
  const auto m = r.snapshot.second_moment().entries();
  const auto se = r.snapshot.second_moment_stderr().entries();
  const auto target = (r.N_bar * K).entries();
  for (int i = 0; i < 6; ++i) CHECK(std::abs(m[i] - target[i]) <= 5.0 * se[i]);
  CHECK(r.snapshot.mean().norm() <= 1e-12);
  CHECK(r.summary().at("pass_flags").at("converged") == true);

  CHECK_THROWS_AS(find_profile(simple_shear(2.0 * k.bbar()), k, K, opts), NonAdmissible);
  CHECK_THROWS_AS(find_profile(Mat3::Zero(), k, -1.0, opts), InvalidArgument);
}

TEST_CASE("non-convergence reports the plateau") {
  ProfileOptions opts;
  opts.sim = small_sim(4000, 2);
  // One check fits in the budget; convergence needs two.
  opts.max_time = 0.1;
  opts.lag = 0.1;
  CHECK_THROWS_AS(find_profile(Mat3::Zero(), unit_kernel(), 3.0, opts), NoConvergence);
  try {
    find_profile(Mat3::Zero(), unit_kernel(), 3.0, opts);
  } catch (const NoConvergence& e) {
    CHECK(e.plateau() > 0.0);
  }
}

TEST_CASE("starting at the profile is an indeterminate pass") {
  const CutoffKernel k = unit_kernel();
  ProfileOptions popts;
  popts.sim = small_sim(20000, 11);
  const auto profile = find_profile(Mat3::Zero(), k, std::sqrt(3.0), popts);
  const auto dir = scratch("stationary");
  write_snapshot(dir / "profile.kens", profile.snapshot);
  InitialSpec f0;
  f0.law = SnapshotLaw{(dir / "profile.kens").string()};
  StabilityOptions sopts;
  sopts.sim = small_sim(20000, 11);
  sopts.t_end = 0.5;
  const auto res = stability_run(f0, Mat3::Zero(), k, profile, sopts);
  CHECK(res.indeterminate);
  CHECK(res.log_linear());
  CHECK(res.dilation == doctest::Approx(1.0).epsilon(1e-3));
  for (const auto& pt : res.series) CHECK(pt.d2 <= 3.0 * pt.noise_floor);
  CHECK(std::isnan(res.theta));
  CHECK(res.summary().dump().find("\"theta_fit\":null") != std::string::npos);
}

TEST_CASE("anisotropic Gaussian relaxes at the moment rate") {
  const CutoffKernel k = unit_kernel();
  const double nu = 2.0 * k.bbar();
  ProfileOptions popts;
  popts.sim = small_sim(50000, 21);
  const auto profile = find_profile(Mat3::Zero(), k, std::sqrt(3.0), popts);

  InitialSpec f0;
  f0.law = GaussianLaw{Vec3(0.3, -0.2, 0.1), Mat3(Vec3(2.0, 0.7, 0.3).asDiagonal())};
  f0.moment_match = true;
  StabilityOptions sopts;
  sopts.sim = small_sim(50000, 22);
  sopts.t_end = 6.0 / nu;
  sopts.observe_lag = 0.25 / nu;
  const auto res = stability_run(f0, Mat3::Zero(), k, profile, sopts);
  CHECK_FALSE(res.indeterminate);
  CHECK(res.alpha2 == doctest::Approx(3.0 / std::sqrt(3.0)).epsilon(0.01));
  // Gaussian data has every moment, so the λ(p) window extends to p = 4.
  const double prediction = std::min(nu, k.lambda(4.0));
  CHECK(res.theta >= 0.5 * prediction);
  CHECK(res.theta <= 2.0 * prediction);
  CHECK(res.moment_rate == doctest::Approx(nu).epsilon(0.1));
  CHECK(res.guide == doctest::Approx(std::min(k.lambda(3.0), nu) / 4.0));
  CHECK(res.log_linear());

  const auto dir = scratch("aniso");
  write_stability(dir, res);
  const auto summary = nlohmann::json::parse(read_file(dir / "stability_summary.json"));
  for (const char* key : {"beta_bar", "alpha", "theta_fit", "nu", "pass_flags"}) CHECK(summary.contains(key));
  write_profile(dir, profile);
  CHECK(std::filesystem::exists(dir / "profile.kens"));
  CHECK(read_snapshot(dir / "profile.kens").v == profile.snapshot.v);
  CHECK(read_file(dir / "profile_diagnostics.csv").rfind("t,moment_residual,d2,noise_floor\n", 0) == 0);
}

TEST_CASE("too few resolved points is unresolvable") {
  const CutoffKernel k = unit_kernel();
  ProfileOptions popts;
  popts.sim = small_sim(5000, 31);
  const auto profile = find_profile(Mat3::Zero(), k, std::sqrt(3.0), popts);
  InitialSpec f0;
  f0.law = TwoPointLaw{Vec3(1.5, 0, 0), Vec3(-1.5, 0, 0), 0.5};
  StabilityOptions sopts;
  sopts.sim = small_sim(5000, 32);
  sopts.t_end = 0.06;
  sopts.observe_lag = 0.05;
  CHECK_THROWS_AS(stability_run(f0, Mat3::Zero(), k, profile, sopts), RateUnresolvable);
}
