#include <doctest.h>
#include <nlohmann/json.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"
#include "kinetos/particles.hpp"
#include "kinetos/stats.hpp"

using namespace kinetos;
using std::numbers::pi;

namespace {

Mat3 simple_shear(double s) {
  Mat3 a = Mat3::Zero();
  a(0, 1) = s;
  return a;
}

InitialSpec gaussian(const Mat3& cov, bool match = false) {
  InitialSpec spec;
  spec.law = GaussianLaw{Vec3::Zero(), cov};
  spec.moment_match = match;
  return spec;
}

CutoffKernel unit_kernel(double theta_min = 1e-3) {
  return CutoffKernel(Kernel::constant(1.0), theta_min);
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "kinetos_test_particles";
  std::filesystem::create_directories(dir);
  return dir / name;
}

double energy(const Ensemble& e) {
  double s = 0;
  for (const auto& x : e.v) s += x.squaredNorm();
  return s;
}

Vec3 momentum(const Ensemble& e) {
  Vec3 s = Vec3::Zero();
  for (const auto& x : e.v) s += x;
  return s;
}

}  // namespace

TEST_CASE("head-on pair rotates onto sigma") {
  Vec3 v(1, 0, 0), w(-1, 0, 0);
  collide_pair(v, w, Vec3(0, 1, 0));
  CHECK(v == Vec3(0, 1, 0));
  CHECK(w == Vec3(0, -1, 0));
}

TEST_CASE("sigma along the relative direction is the identity") {
  std::mt19937_64 g(7);
  std::normal_distribution<double> n;
  for (int k = 0; k < 100; ++k) {
    const Vec3 v0(n(g), n(g), n(g)), w0(n(g), n(g), n(g));
    Vec3 v = v0, w = w0;
    collide_pair(v, w, (v0 - w0).normalized());
    CHECK((v - v0).norm() <= 1e-14 * (1 + v0.norm() + w0.norm()));
    CHECK((w - w0).norm() <= 1e-14 * (1 + v0.norm() + w0.norm()));
  }
}

TEST_CASE("each collision conserves pair momentum and energy") {
  const auto k = unit_kernel();
  const ScatterTable table(k);
  std::mt19937_64 g(11);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u;
  for (int i = 0; i < 10000; ++i) {
    Vec3 v(n(g), n(g), n(g)), w(3 * n(g), n(g), 0.1 * n(g));
    const Vec3 p0 = v + w;
    const double e0 = v.squaredNorm() + w.squaredNorm();
    collide_pair(v, w, sample_scatter(table, u(g), u(g), (v - w).normalized()));
    CHECK((v + w - p0).norm() <= 1e-12 * (1 + p0.norm() + std::sqrt(e0)));
    CHECK(std::abs(v.squaredNorm() + w.squaredNorm() - e0) <= 1e-12 * e0);
  }
}

TEST_CASE("global momentum and energy drift stays below 1e-9 over 1e4 steps") {
  auto e = init_ensemble(gaussian(Mat3(Vec3(2, 1, 0.5).asDiagonal())), 1000, 3);
  e.v[0] += Vec3(0.3, -0.2, 0.1);  // nonzero total momentum
  Collider c(unit_kernel());
  const double dt = default_dt(c.kernel());
  const Vec3 p0 = momentum(e);
  const double e0 = energy(e);
  std::uint64_t pairs = 0;
  for (int s = 0; s < 10000; ++s) pairs += c.step(e, dt).pairs;
  CHECK(pairs > 400000);
  CHECK((momentum(e) - p0).norm() <= 1e-9 * std::sqrt(e0));
  CHECK(std::abs(energy(e) - e0) <= 1e-9 * e0);
  CHECK(e.steps == 10000);
}

TEST_CASE("collision step guard") {
  auto e = init_ensemble(gaussian(Mat3::Identity()), 100, 1);
  Collider c(unit_kernel());
  const double s = c.kernel().total_rate();
  CHECK_NOTHROW(c.step(e, 0.5 / s));
  CHECK_THROWS_AS(c.step(e, 0.51 / s), StepTooLarge);
  CHECK_THROWS_AS(c.step(e, 0.3 / s, 2.0), StepTooLarge);
  CHECK_THROWS_AS(collision_step(e, c.kernel(), 0.6 / s, c.table()), StepTooLarge);
  CHECK(default_dt(c.kernel()) * s == doctest::Approx(0.1));
}

TEST_CASE("pair count follows the Poisson mean") {
  auto e = init_ensemble(gaussian(Mat3::Identity()), 10000, 5);
  Collider c(unit_kernel());
  const double dt = 0.2 / c.kernel().total_rate();
  std::vector<double> counts;
  for (int s = 0; s < 200; ++s) counts.push_back(static_cast<double>(c.step(e, dt).pairs));
  const double expected = 0.5 * 10000 * 0.2;
  CHECK(std::abs(mean(counts) - expected) < 5 * std::sqrt(expected / 200));
  CHECK(sample_std(counts) == doctest::Approx(std::sqrt(expected)).epsilon(0.2));
}

TEST_CASE("free collision_step agrees with the collider") {
  auto a = init_ensemble(gaussian(Mat3::Identity()), 500, 9);
  auto b = a;
  Collider c(unit_kernel());
  const double dt = default_dt(c.kernel());
  for (int s = 0; s < 20; ++s) {
    c.step(a, dt);
    collision_step(b, c.kernel(), dt, c.table());
  }
  CHECK(a.v == b.v);
}

TEST_CASE("drift maps velocities by the matrix exponential") {
  Ensemble e = init_ensemble(gaussian(Mat3::Identity()), 1000, 2);
  const Ensemble e0 = e;

  SUBCASE("simple shear is the nilpotent exponential") {
    const double s = 0.7, dt = 0.05;
    DriftSpec d(simple_shear(s), dt);
    drift_step(e, d, dt);
    for (std::size_t i = 0; i < e.size(); ++i) {
      const Vec3 want(e0.v[i][0] - s * dt * e0.v[i][1], e0.v[i][1], e0.v[i][2]);
      CHECK((e.v[i] - want).norm() <= 1e-15 * (1 + want.norm()));
    }
    CHECK(e.time == dt);
  }
  SUBCASE("identity rate contracts by e^-1") {
    DriftSpec d(Mat3::Identity(), 1.0);
    drift_step(e, d, 1.0);
    for (std::size_t i = 0; i < e.size(); ++i) {
      CHECK((e.v[i] - std::exp(-1.0) * e0.v[i]).norm() <= 1e-15 * e0.v[i].norm());
    }
  }
  SUBCASE("mean is mapped exactly") {
    Mat3 a;
    a << 0.3, -0.2, 0.5, 0.1, 0.0, 0.4, -0.6, 0.2, 0.1;
    DriftSpec d(a, 0.1);
    drift_step(e, d, 0.1);
    const Vec3 want = d.cached_flow() * e0.mean();
    CHECK((e.mean() - want).norm() <= 1e-14);
  }
}

TEST_CASE("cached flow inverts the forward exponential") {
  std::mt19937_64 g(4);
  std::normal_distribution<double> n;
  for (int k = 0; k < 20; ++k) {
    const Mat3 a = Mat3::NullaryExpr([&] { return n(g); });
    const double dt = 0.05;
    DriftSpec d(a, dt);
    CHECK((d.cached_flow() * (a * dt).exp() - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(d.norm() == doctest::Approx(a.cwiseAbs().sum()));
    // Two steps against the doubled step; equal up to rounding of the product.
    DriftSpec twice(a, 2 * dt);
    CHECK((d.cached_flow() * d.cached_flow() - twice.cached_flow()).cwiseAbs().maxCoeff() <=
          1e-14 * (1 + twice.cached_flow().cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("drift second moments match the collisionless moment ODE") {
  Mat3 a;
  a << 0.2, 0.5, 0.0, -0.1, 0.3, 0.2, 0.4, 0.0, -0.2;
  const double dt = 0.02;
  auto e = init_ensemble(gaussian(Mat3(Vec3(2, 1, 1).asDiagonal())), 2000, 6);
  const SymMat3 m0 = e.second_moment();
  drift_step(e, DriftSpec(a, dt), dt);
  const SymMat3 oracle = integrate_moments(a, 0.0, m0, {0.0, dt}).back();
  for (int i = 0; i < 6; ++i) {
    CHECK(std::abs(e.second_moment().entries()[i] - oracle.entries()[i]) <= 1e-12);
  }
}

TEST_CASE("time dependent drift integrates the propagator") {
  Mat3 a = simple_shear(0.4), c;
  c << 0.1, 0, 0, 0, -0.2, 0.3, 0, 0, 0.05;
  DriftSpec constant(a, 0.1, [&](double) { return c; });
  const Mat3 want = (-(a + c) * 0.1).exp();
  CHECK((constant.flow(2.0, 0.1) - want).cwiseAbs().maxCoeff() <= 1e-11);
  CHECK(constant.time_dependent());
  DriftSpec varying(a, 0.1, [&](double t) { return t * c; });
  const Mat3 f = varying.flow(0.0, 0.1);
  const Mat3 halves = varying.flow(0.05, 0.05) * varying.flow(0.0, 0.05);
  CHECK((f - halves).cwiseAbs().maxCoeff() <= 1e-11);
}

TEST_CASE("initial laws") {
  SUBCASE("Dirac at the origin") {
    InitialSpec spec;
    spec.law = DiracLaw{};
    const auto e = init_ensemble(spec, 10000, 1);
    for (const auto& x : e.v) CHECK(x == Vec3::Zero());
    CHECK(e.second_moment().frobenius() == 0.0);
    CHECK(empirical_pth_moment(e, 3.0) == 0.0);
  }
  SUBCASE("standard Gaussian second moments") {
    const std::size_t n = 100000;
    const auto e = init_ensemble(gaussian(Mat3::Identity()), n, 2);
    const Mat3 m = e.second_moment().matrix();
    CHECK((m - Mat3::Identity()).cwiseAbs().maxCoeff() <= 5 * std::sqrt(2.0 / n));
  }
  SUBCASE("two-point mixture is exact") {
    InitialSpec spec;
    spec.law = TwoPointLaw{Vec3(1, 0, 0), Vec3(-1, 0, 0), 0.5};
    const auto e = init_ensemble(spec, 1000, 3);
    CHECK(e.mean() == Vec3::Zero());
    CHECK(e.second_moment()(0, 0) == 1.0);
    CHECK(empirical_pth_moment(e, 4.0) == 1.0);
  }
  SUBCASE("Gaussian fourth moment") {
    const std::size_t n = 200000;
    const auto e = init_ensemble(gaussian(Mat3::Identity()), n, 4);
    std::vector<double> v4;
    v4.reserve(n);
    for (const auto& x : e.v) v4.push_back(x.squaredNorm() * x.squaredNorm());
    const double se = sample_std(v4) / std::sqrt(double(n));
    CHECK(std::abs(empirical_pth_moment(e, 4.0) - 15.0) <= 5 * se);
    CHECK(empirical_pth_moment(e, 4.0) == doctest::Approx(mean(v4)).epsilon(1e-12));
  }
  SUBCASE("uniform ball and mixture moments within five standard errors") {
    const std::size_t n = 100000;
    InitialSpec ball;
    ball.law = UniformBallLaw{Vec3(1, 0, 0), 2.0};
    const auto eb = init_ensemble(ball, n, 5);
    for (const auto& x : eb.v) CHECK((x - Vec3(1, 0, 0)).norm() <= 2.0);
    CHECK((eb.covariance().matrix() - ball.covariance()).cwiseAbs().maxCoeff() <=
          5 * 0.8 * std::sqrt(2.0 / n));

    InitialSpec mix;
    mix.law = GaussianMixtureLaw{{{1.0, Vec3(1, 0, 0), Mat3::Identity()},
                                  {3.0, Vec3(-1, 1, 0), 0.5 * Mat3::Identity()}}};
    const auto em = init_ensemble(mix, n, 6);
    CHECK((em.mean() - mix.mean()).norm() <= 5 * std::sqrt(3.0 / n));
    CHECK((em.covariance().matrix() - mix.covariance()).cwiseAbs().maxCoeff() <=
          5 * 2.0 * std::sqrt(2.0 / n));
  }
  SUBCASE("moment matching is exact") {
    const Mat3 cov = Mat3(Vec3(3, 1, 0.5).asDiagonal());
    const auto e = init_ensemble(gaussian(cov, true), 1000, 7);
    CHECK(e.mean().norm() <= 1e-14);
    CHECK((e.covariance().matrix() - cov).cwiseAbs().maxCoeff() <= 1e-13);
  }
  SUBCASE("rejections") {
    Mat3 bad = Mat3::Identity();
    bad(2, 2) = -1.0;
    CHECK_THROWS_AS(init_ensemble(gaussian(bad), 100, 1), InvalidArgument);
    CHECK_THROWS_AS(init_ensemble(gaussian(Mat3::Identity()), 1, 1), InvalidArgument);
    InitialSpec spec;
    spec.law = DiracLaw{};
    CHECK_THROWS_AS(empirical_pth_moment(init_ensemble(spec, 4, 1), 0.0), InvalidArgument);
  }
  SUBCASE("independent of thread-free sampling order") {
    const auto a = init_ensemble(gaussian(Mat3::Identity()), 100, 8);
    const auto b = init_ensemble(gaussian(Mat3::Identity()), 200, 8);
    for (std::size_t i = 0; i < 100; ++i) CHECK(a.v[i] == b.v[i]);
    CHECK(init_ensemble(gaussian(Mat3::Identity()), 100, 9).v != a.v);
  }
}

TEST_CASE("initial law configuration round trip") {
  InitialSpec mix;
  mix.law = GaussianMixtureLaw{{{1.0, Vec3(1, 0, 0), Mat3::Identity()}}};
  mix.moment_match = true;
  const auto j = mix.to_json();
  const auto back = InitialSpec::from_json(j);
  CHECK(back.to_json() == j);

  const auto two = InitialSpec::from_json(
      nlohmann::json::parse(R"({"type":"two_point","a":[1,0,0],"b":[-1,0,0],"weight_a":0.25})"));
  CHECK(std::get<TwoPointLaw>(two.law).weight_a == 0.25);

  try {
    InitialSpec::from_json(nlohmann::json::parse(R"({"type":"gaussian","cov":[1,1,-1,0,0,0]})"));
    FAIL("expected a config error");
  } catch (const ConfigError& err) {
    CHECK(err.path() == "initial.cov");
  }
  CHECK_THROWS_AS(InitialSpec::from_json(nlohmann::json::parse(R"({"type":"cauchy"})")), ConfigError);
  CHECK_THROWS_AS(InitialSpec::from_json(nlohmann::json::parse(R"({"type":"dirac","extra":1})")),
                  ConfigError);
}

TEST_CASE("snapshot round trip and format") {
  auto e = init_ensemble(gaussian(Mat3::Identity()), 257, 10);
  e.v[3] = Vec3(-0.0, 1e-310, std::numeric_limits<double>::max());
  const auto path = scratch("round_trip.kens");
  write_snapshot(path, e);
  const std::string bytes = read_file(path);
  REQUIRE(bytes.size() == 16 + 24 * 257);
  CHECK(bytes.substr(0, 4) == "KENS");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);  // 257 = 0x0101
  CHECK(static_cast<unsigned char>(bytes[9]) == 1);
  const auto back = read_snapshot(path);
  CHECK(back.v == e.v);
  CHECK(std::signbit(back.v[3][0]));

  InitialSpec spec;
  spec.law = SnapshotLaw{path.string()};
  CHECK(init_ensemble(spec, 257, 0).v == e.v);
  CHECK_THROWS_AS(init_ensemble(spec, 10, 0), InvalidArgument);

  write_file(path, bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(read_snapshot(path), IoError);
  write_file(path, "KENX" + bytes.substr(4));
  CHECK_THROWS_AS(read_snapshot(path), IoError);
}

TEST_CASE("Dirac at the origin is absorbing under any drift") {
  InitialSpec spec;
  spec.law = DiracLaw{};
  auto e = init_ensemble(spec, 2000, 12);
  Mat3 a;
  a << 0.3, 1.0, 0, 0, -0.4, 0.2, 0.1, 0, 0.2;
  Collider c(unit_kernel());
  RunOptions opts;
  opts.dt = default_dt(c.kernel());
  opts.t_end = 2.0;
  opts.observe_every = 10;
  const auto rec = run(e, DriftSpec(a, opts.dt), c, opts);
  for (const auto& x : e.v) CHECK(x == Vec3::Zero());
  CHECK(rec.collisions.pairs > 0);
  CHECK(rec.collisions.skipped == rec.collisions.pairs);
  CHECK(e.time == doctest::Approx(2.0));
}

TEST_CASE("runs are reproducible and independent of the thread count") {
  auto base = init_ensemble(gaussian(Mat3(Vec3(2, 1, 1).asDiagonal())), 6000, 13);
  Collider c(unit_kernel());
  RunOptions opts;
  opts.dt = default_dt(c.kernel());
  opts.t_end = 30 * opts.dt;
  opts.observe_every = 5;
  opts.p_orders = {3.0, 4.0};
  const DriftSpec d(simple_shear(0.5), opts.dt);

  auto serialize = [&](std::size_t threads) {
    auto e = base;
    auto o = opts;
    o.threads = threads;
    Collider local(unit_kernel());
    const auto rec = run(e, d, local, o);
    std::ostringstream os;
    write_series_csv(os, rec, o.p_orders);
    return std::make_pair(os.str(), e.v);
  };
  const auto one = serialize(1);
  CHECK(serialize(1) == one);
  CHECK(serialize(3) == one);
  CHECK(one.first.rfind("t,u1,u2,u3,m11,m22,m33,m12,m13,m23,p3,p4\n", 0) == 0);

  auto other = base;
  other.seed = 14;
  Collider local(unit_kernel());
  run(other, d, local, opts);
  CHECK(other.v != one.second);
}

TEST_CASE("run observes at the cadence and lands on t_end") {
  auto e = init_ensemble(gaussian(Mat3::Identity()), 200, 15);
  Collider c(unit_kernel());
  RunOptions opts;
  opts.dt = 0.01;
  opts.t_end = 0.105;
  opts.observe_every = 4;
  int calls = 0;
  const auto rec = run(e, DriftSpec(Mat3::Zero(), 0.01), c, opts, [&](const Ensemble&) { ++calls; });
  CHECK(rec.steps == 11);
  REQUIRE(rec.series.size() == 4);  // t = 0, 4, 8 steps and the end
  CHECK(calls == 4);
  CHECK(rec.series.back().t == doctest::Approx(0.105).epsilon(1e-14));
  CHECK(e.steps == 11);
}

TEST_CASE("anisotropy relaxes at twice the mean angular rate") {
  const auto k = unit_kernel(1e-3);
  auto e = init_ensemble(gaussian(Mat3(Vec3(2, 1, 1).asDiagonal())), 100000, 16);
  Collider c(k);
  RunOptions opts;
  opts.dt = default_dt(k);
  opts.t_end = 3.0 / k.bbar();
  opts.observe_every = 5;
  const auto rec = run(e, DriftSpec(Mat3::Zero(), opts.dt), c, opts);
  std::vector<double> t, log_dev;
  for (const auto& o : rec.series) {
    const double dev = o.second(0, 0) - 0.5 * (o.second(1, 1) + o.second(2, 2));
    if (dev <= 0.0) break;
    t.push_back(o.t);
    log_dev.push_back(std::log(dev));
  }
  REQUIRE(t.size() > 10);
  const auto fit = linear_fit(t, log_dev);
  CHECK(-fit.slope == doctest::Approx(2.0 * k.bbar()).epsilon(0.10));
}

TEST_CASE("Maxwellian is stationary without drift") {
  const std::size_t n = 50000;
  auto e = init_ensemble(gaussian(1.5 * Mat3::Identity()), n, 17);
  const SymMat3 m0 = e.second_moment();
  Collider c(unit_kernel());
  RunOptions opts;
  opts.dt = default_dt(c.kernel());
  opts.t_end = 2.0;
  opts.observe_every = 20;
  const auto rec = run(e, DriftSpec(Mat3::Zero(), opts.dt), c, opts);
  const double se = 1.5 * std::sqrt(2.0 / n);
  for (const auto& o : rec.series) {
    CHECK(std::abs(o.second.trace() - m0.trace()) <= 1e-10 * m0.trace());
    for (int i = 0; i < 3; ++i) CHECK(std::abs(o.second(i, i) - 1.5) <= 5 * se);
    CHECK(std::abs(o.second(0, 1)) <= 5 * se);
  }
}

TEST_CASE("empirical moments track the moment ODE under shear") {
  const auto k = unit_kernel(1e-2);
  const std::size_t n = 40000;
  const Mat3 a = simple_shear(0.5 * k.bbar());
  auto e = init_ensemble(gaussian(Mat3::Identity(), true), n, 18);
  Collider c(k);
  RunOptions opts;
  opts.dt = default_dt(k);
  opts.t_end = 2.0 / k.bbar();
  opts.observe_every = 10;
  const auto rec = run(e, DriftSpec(a, opts.dt), c, opts);
  std::vector<double> grid;
  for (const auto& o : rec.series) grid.push_back(o.t);
  const auto oracle = integrate_moments(a, k.bbar(), SymMat3::identity(), grid);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double scale = oracle[i].trace() / 3.0;
    for (int j = 0; j < 6; ++j) {
      CHECK(std::abs(rec.series[i].second.entries()[j] - oracle[i].entries()[j]) <=
            5 * scale * std::sqrt(2.0 / n) + 1e-3 * scale);
    }
  }
}
