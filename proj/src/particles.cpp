#include "kinetos/particles.hpp"

#include <Eigen/Eigenvalues>
#include <boost/numeric/odeint.hpp>
#include <nlohmann/json.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <mutex>
#include <ostream>
#include <random>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"
#include "kinetos/parallel.hpp"
#include "json_util.hpp"

namespace kinetos {

using detail::number_at;
using detail::require_keys;
using detail::vec_from_json;
using detail::vec_to_json;

namespace {

// Symmetric PSD square root; throws on a covariance with a negative eigenvalue.
Mat3 psd_sqrt(const Mat3& cov, const char* what) {
  if (!cov.allFinite() || (cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + cov.cwiseAbs().maxCoeff())) {
    throw InvalidArgument(std::string(what) + ": covariance must be finite and symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (cov + cov.transpose()));
  const Vec3 d = es.eigenvalues();
  const double scale = std::max(1.0, d.cwiseAbs().maxCoeff());
  if (d.minCoeff() < -1e-12 * scale) {
    throw InvalidArgument(std::string(what) + ": covariance is not positive semidefinite");
  }
  return es.eigenvectors() * d.cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}


Mat3 cov_from_json(const nlohmann::json& j, const std::string& path) {
  try {
    return sym_from_json(j, path).matrix();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
}

struct Sampler {
  Stream& rng;

  Vec3 normal3() { return {rng.normal(), rng.normal(), rng.normal()}; }
  Vec3 in_ball() {
    Vec3 dir = normal3();
    while (dir.squaredNorm() == 0.0) dir = normal3();
    return std::cbrt(rng.uniform()) * dir.normalized();
  }
};

}  // namespace

// Ensemble ---------------------------------------------------------------

Vec3 Ensemble::mean() const {
  Vec3 s = Vec3::Zero();
  for (const auto& x : v) s += x;
  return v.empty() ? s : Vec3(s / static_cast<double>(v.size()));
}

SymMat3 Ensemble::second_moment() const {
  Mat3 s = Mat3::Zero();
  for (const auto& x : v) s.noalias() += x * x.transpose();
  if (!v.empty()) s /= static_cast<double>(v.size());
  return SymMat3::from_matrix(s);
}

SymMat3 Ensemble::covariance() const {
  const Vec3 m = mean();
  Mat3 s = Mat3::Zero();
  for (const auto& x : v) {
    const Vec3 d = x - m;
    s.noalias() += d * d.transpose();
  }
  if (!v.empty()) s /= static_cast<double>(v.size());
  return SymMat3::from_matrix(s);
}

SymMat3 Ensemble::second_moment_stderr() const {
  if (v.size() < 2) return {};
  const auto m = second_moment().entries();
  constexpr int kRow[6] = {0, 1, 2, 0, 0, 1}, kCol[6] = {0, 1, 2, 1, 2, 2};
  std::array<double, 6> ss{};
  for (const auto& x : v) {
    for (int c = 0; c < 6; ++c) {
      const double d = x[kRow[c]] * x[kCol[c]] - m[c];
      ss[c] += d * d;
    }
  }
  const double n = static_cast<double>(v.size());
  for (auto& s : ss) s = std::sqrt(s / (n - 1.0) / n);
  return {ss[0], ss[1], ss[2], ss[3], ss[4], ss[5]};
}

double empirical_pth_moment(const Ensemble& e, double p) {
  if (!(p > 0.0)) throw InvalidArgument("empirical_pth_moment: p must be positive");
  if (e.v.empty()) return 0.0;
  double s = 0.0;
  if (p == 2.0) {
    for (const auto& x : e.v) s += x.squaredNorm();
  } else if (p == 4.0) {
    for (const auto& x : e.v) s += x.squaredNorm() * x.squaredNorm();
  } else {
    for (const auto& x : e.v) s += std::pow(x.norm(), p);
  }
  return s / static_cast<double>(e.v.size());
}

// Initial laws ------------------------------------------------------------

Vec3 InitialSpec::mean() const {
  return std::visit(
      [](const auto& law) -> Vec3 {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, DiracLaw>) {
          return law.at;
        } else if constexpr (std::is_same_v<T, GaussianLaw>) {
          return law.mean;
        } else if constexpr (std::is_same_v<T, UniformBallLaw>) {
          return law.center;
        } else if constexpr (std::is_same_v<T, TwoPointLaw>) {
          return law.weight_a * law.a + (1.0 - law.weight_a) * law.b;
        } else if constexpr (std::is_same_v<T, GaussianMixtureLaw>) {
          Vec3 m = Vec3::Zero();
          double w = 0.0;
          for (const auto& c : law.components) {
            m += c.weight * c.mean;
            w += c.weight;
          }
          return m / w;
        } else {
          return read_snapshot(law.path).mean();
        }
      },
      law);
}

Mat3 InitialSpec::covariance() const {
  return std::visit(
      [](const auto& law) -> Mat3 {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, DiracLaw>) {
          return Mat3::Zero();
        } else if constexpr (std::is_same_v<T, GaussianLaw>) {
          return law.cov;
        } else if constexpr (std::is_same_v<T, UniformBallLaw>) {
          return (law.radius * law.radius / 5.0) * Mat3::Identity();
        } else if constexpr (std::is_same_v<T, TwoPointLaw>) {
          const Vec3 d = law.a - law.b;
          return law.weight_a * (1.0 - law.weight_a) * d * d.transpose();
        } else if constexpr (std::is_same_v<T, GaussianMixtureLaw>) {
          Mat3 second = Mat3::Zero();
          Vec3 m = Vec3::Zero();
          double w = 0.0;
          for (const auto& c : law.components) {
            second += c.weight * (c.cov + c.mean * c.mean.transpose());
            m += c.weight * c.mean;
            w += c.weight;
          }
          m /= w;
          return second / w - m * m.transpose();
        } else {
          return read_snapshot(law.path).covariance().matrix();
        }
      },
      law);
}

nlohmann::json InitialSpec::to_json() const {
  nlohmann::json j = std::visit(
      [](const auto& law) -> nlohmann::json {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, DiracLaw>) {
          return {{"type", "dirac"}, {"at", vec_to_json(law.at)}};
        } else if constexpr (std::is_same_v<T, GaussianLaw>) {
          return {{"type", "gaussian"},
                  {"mean", vec_to_json(law.mean)},
                  {"cov", kinetos::to_json(SymMat3::from_matrix(law.cov))}};
        } else if constexpr (std::is_same_v<T, UniformBallLaw>) {
          return {{"type", "uniform_ball"}, {"center", vec_to_json(law.center)}, {"radius", law.radius}};
        } else if constexpr (std::is_same_v<T, TwoPointLaw>) {
          return {{"type", "two_point"},
                  {"a", vec_to_json(law.a)},
                  {"b", vec_to_json(law.b)},
                  {"weight_a", law.weight_a}};
        } else if constexpr (std::is_same_v<T, GaussianMixtureLaw>) {
          nlohmann::json comps = nlohmann::json::array();
          for (const auto& c : law.components) {
            comps.push_back({{"weight", c.weight},
                             {"mean", vec_to_json(c.mean)},
                             {"cov", kinetos::to_json(SymMat3::from_matrix(c.cov))}});
          }
          return {{"type", "gaussian_mixture"}, {"components", comps}};
        } else {
          return {{"type", "snapshot"}, {"path", law.path}};
        }
      },
      law);
  j["moment_match"] = moment_match;
  return j;
}

InitialSpec InitialSpec::from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  if (!j.contains("type") || !j.at("type").is_string()) {
    throw ConfigError(path + ".type", "expected a string");
  }
  InitialSpec spec;
  if (j.contains("moment_match")) {
    if (!j.at("moment_match").is_boolean()) throw ConfigError(path + ".moment_match", "expected a boolean");
    spec.moment_match = j.at("moment_match").get<bool>();
  }
  const std::string type = j.at("type").get<std::string>();
  if (type == "dirac") {
    require_keys(j, {"type", "at", "moment_match"}, path);
    DiracLaw law;
    if (j.contains("at")) law.at = vec_from_json(j.at("at"), path + ".at");
    spec.law = law;
  } else if (type == "gaussian") {
    require_keys(j, {"type", "mean", "cov", "moment_match"}, path);
    GaussianLaw law;
    if (j.contains("mean")) law.mean = vec_from_json(j.at("mean"), path + ".mean");
    if (j.contains("cov")) law.cov = cov_from_json(j.at("cov"), path + ".cov");
    try {
      psd_sqrt(law.cov, "gaussian");
    } catch (const InvalidArgument& e) {
      throw ConfigError(path + ".cov", e.what());
    }
    spec.law = law;
  } else if (type == "uniform_ball") {
    require_keys(j, {"type", "center", "radius", "moment_match"}, path);
    UniformBallLaw law;
    if (j.contains("center")) law.center = vec_from_json(j.at("center"), path + ".center");
    law.radius = number_at(j, "radius", path);
    if (!(law.radius >= 0.0)) throw ConfigError(path + ".radius", "must be non-negative");
    spec.law = law;
  } else if (type == "two_point") {
    require_keys(j, {"type", "a", "b", "weight_a", "moment_match"}, path);
    TwoPointLaw law;
    law.a = vec_from_json(j.at("a"), path + ".a");
    law.b = vec_from_json(j.at("b"), path + ".b");
    if (j.contains("weight_a")) law.weight_a = number_at(j, "weight_a", path);
    if (!(law.weight_a >= 0.0 && law.weight_a <= 1.0)) {
      throw ConfigError(path + ".weight_a", "must lie in [0, 1]");
    }
    spec.law = law;
  } else if (type == "gaussian_mixture") {
    require_keys(j, {"type", "components", "moment_match"}, path);
    if (!j.contains("components") || !j.at("components").is_array() || j.at("components").empty()) {
      throw ConfigError(path + ".components", "expected a non-empty array");
    }
    GaussianMixtureLaw law;
    for (std::size_t i = 0; i < j.at("components").size(); ++i) {
      const auto& cj = j.at("components")[i];
      const std::string cpath = path + ".components[" + std::to_string(i) + "]";
      if (!cj.is_object()) throw ConfigError(cpath, "expected an object");
      require_keys(cj, {"weight", "mean", "cov"}, cpath);
      MixtureComponent c;
      c.weight = number_at(cj, "weight", cpath);
      if (!(c.weight > 0.0)) throw ConfigError(cpath + ".weight", "must be positive");
      if (cj.contains("mean")) c.mean = vec_from_json(cj.at("mean"), cpath + ".mean");
      if (cj.contains("cov")) c.cov = cov_from_json(cj.at("cov"), cpath + ".cov");
      try {
        psd_sqrt(c.cov, "gaussian_mixture");
      } catch (const InvalidArgument& e) {
        throw ConfigError(cpath + ".cov", e.what());
      }
      law.components.push_back(c);
    }
    spec.law = law;
  } else if (type == "snapshot") {
    require_keys(j, {"type", "path", "moment_match"}, path);
    if (!j.contains("path") || !j.at("path").is_string()) {
      throw ConfigError(path + ".path", "expected a string");
    }
    spec.law = SnapshotLaw{j.at("path").get<std::string>()};
  } else {
    throw ConfigError(path + ".type", "unknown initial law '" + type + "'");
  }
  return spec;
}

void match_moments(Ensemble& e, const Vec3& mean, const Mat3& cov) {
  if (e.v.size() < 2) throw InvalidArgument("match_moments: need at least two particles");
  const Vec3 m = e.mean();
  const Mat3 c = e.covariance().matrix();
  const Mat3 target = psd_sqrt(cov, "match_moments");
  Eigen::SelfAdjointEigenSolver<Mat3> es(c);
  const Vec3 d = es.eigenvalues();
  if (d.minCoeff() <= 1e-14 * std::max(1.0, d.maxCoeff())) {
    throw InvalidArgument("match_moments: empirical covariance is singular");
  }
  const Mat3 inv_sqrt =
      es.eigenvectors() * d.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  const Mat3 t = target * inv_sqrt;
  for (auto& x : e.v) x = mean + t * (x - m);
}

Ensemble init_ensemble(const InitialSpec& spec, std::size_t n, std::uint64_t seed,
                       const std::string& label) {
  Ensemble e;
  e.seed = seed;
  if (const auto* snap = std::get_if<SnapshotLaw>(&spec.law)) {
    Ensemble loaded = read_snapshot(snap->path);
    if (n != 0 && n != loaded.size()) {
      throw InvalidArgument("init_ensemble: snapshot holds " + std::to_string(loaded.size()) +
                            " particles, requested " + std::to_string(n));
    }
    e.v = std::move(loaded.v);
    return e;
  }
  if (n < 2) throw InvalidArgument("init_ensemble: N must be at least 2");
  e.v.resize(n);
  const auto key = derive_key(seed, label);

  std::visit(
      [&](const auto& law) {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, DiracLaw>) {
          std::fill(e.v.begin(), e.v.end(), law.at);
        } else if constexpr (std::is_same_v<T, TwoPointLaw>) {
          const auto na = static_cast<std::size_t>(std::llround(law.weight_a * static_cast<double>(n)));
          for (std::size_t i = 0; i < n; ++i) e.v[i] = i < na ? law.a : law.b;
        } else if constexpr (std::is_same_v<T, GaussianLaw>) {
          const Mat3 root = psd_sqrt(law.cov, "init_ensemble");
          for (std::size_t i = 0; i < n; ++i) {
            Stream rng(key, i);
            e.v[i] = law.mean + root * Sampler{rng}.normal3();
          }
        } else if constexpr (std::is_same_v<T, UniformBallLaw>) {
          if (!(law.radius >= 0.0)) throw InvalidArgument("init_ensemble: negative radius");
          for (std::size_t i = 0; i < n; ++i) {
            Stream rng(key, i);
            e.v[i] = law.center + law.radius * Sampler{rng}.in_ball();
          }
        } else if constexpr (std::is_same_v<T, GaussianMixtureLaw>) {
          if (law.components.empty()) throw InvalidArgument("init_ensemble: empty mixture");
          std::vector<double> cumulative;
          std::vector<Mat3> roots;
          double total = 0.0;
          for (const auto& c : law.components) {
            if (!(c.weight > 0.0)) throw InvalidArgument("init_ensemble: mixture weights must be positive");
            total += c.weight;
            cumulative.push_back(total);
            roots.push_back(psd_sqrt(c.cov, "init_ensemble"));
          }
          for (std::size_t i = 0; i < n; ++i) {
            Stream rng(key, i);
            const double u = rng.uniform() * total;
            const auto k = std::min<std::size_t>(
                static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                         cumulative.begin()),
                law.components.size() - 1);
            e.v[i] = law.components[k].mean + roots[k] * Sampler{rng}.normal3();
          }
        }
      },
      spec.law);

  if (spec.moment_match) {
    const Mat3 cov = spec.covariance();
    if (cov.isZero(0.0)) {
      const Vec3 m = spec.mean();
      std::fill(e.v.begin(), e.v.end(), m);
    } else {
      match_moments(e, spec.mean(), cov);
    }
  }
  return e;
}

// Drift --------------------------------------------------------------------

DriftSpec::DriftSpec(const Mat3& a, double dt) : DriftSpec(a, dt, {}) {}

DriftSpec::DriftSpec(const Mat3& a, double dt, std::function<Mat3(double)> perturbation)
    : a_(a), dt_(dt), b_(std::move(perturbation)) {
  if (!a.allFinite()) throw InvalidArgument("DriftSpec: matrix must be finite");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("DriftSpec: dt must be positive");
  flow_ = (-a_ * dt_).exp();
  half_ = (-a_ * (0.5 * dt_)).exp();
}

Mat3 DriftSpec::flow(double t0, double h) const {
  if (!b_) {
    if (h == dt_) return flow_;
    if (h == 0.5 * dt_) return half_;
    return Mat3((-a_ * h).exp());
  }
  namespace ode = boost::numeric::odeint;
  using State = std::array<double, 9>;
  State x{};
  Eigen::Map<Mat3>(x.data()).setIdentity();
  auto rhs = [&](const State& s, State& dsdt, double t) {
    const Eigen::Map<const Mat3> phi(s.data());
    Eigen::Map<Mat3>(dsdt.data()) = -(a_ + b_(t)) * phi;
  };
  auto stepper = ode::make_controlled(1e-13, 1e-12, ode::runge_kutta_dopri5<State>());
  try {
    ode::integrate_adaptive(stepper, rhs, x, t0, t0 + h, h / 4.0);
  } catch (const std::exception& err) {
    throw IntegratorError(std::string("drift flow integration failed: ") + err.what(), t0, 0);
  }
  return Eigen::Map<Mat3>(x.data());
}

std::string DriftSpec::id() const {
  std::string bytes(sizeof(double) * 9, '\0');
  std::memcpy(bytes.data(), a_.data(), bytes.size());
  return "A:" + hex64(fnv1a64(bytes)) + (b_ ? "+B(t)" : "");
}

void apply_flow(Ensemble& e, const Mat3& flow, std::size_t threads) {
  parallel_for(e.v.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) e.v[i] = flow * e.v[i];
  });
}

void drift_step(Ensemble& e, const DriftSpec& d, double dt, std::size_t threads) {
  if (!(dt > 0.0)) throw InvalidArgument("drift_step: dt must be positive");
  apply_flow(e, d.flow(e.time, dt), threads);
  e.time += dt;
}

// Collisions ---------------------------------------------------------------

Collider::Collider(CutoffKernel kernel, std::size_t table_nodes)
    : kernel_(std::move(kernel)), table_(kernel_, table_nodes) {}

CollisionStats Collider::step(Ensemble& e, double dt, double rate, const std::string& label,
                              std::size_t threads) {
  const double rs = dt * kernel_.total_rate() * rate;
  if (!(dt > 0.0) || !(rate >= 0.0)) throw InvalidArgument("collision_step: dt and rate must be positive");
  if (rs > kMaxRateStep) {
    throw StepTooLarge("collision_step: dt*S = " + fmt(rs) + " exceeds " + fmt(kMaxRateStep));
  }
  const std::size_t n = e.v.size();
  CollisionStats stats;
  if (n < 2 || rs == 0.0) {
    ++e.steps;
    return stats;
  }
  if (n > std::numeric_limits<std::uint32_t>::max()) throw InvalidArgument("collision_step: ensemble too large");

  Stream select(derive_key(e.seed, label + ".select"), e.steps);
  std::poisson_distribution<std::uint64_t> count(0.5 * static_cast<double>(n) * rs);
  const std::uint64_t pairs = std::min<std::uint64_t>(count(select), n / 2);

  if (perm_.size() != n) {
    perm_.resize(n);
    for (std::size_t i = 0; i < n; ++i) perm_[i] = static_cast<std::uint32_t>(i);
  }
  const std::size_t picked = 2 * pairs;
  swaps_.resize(picked);
  for (std::size_t i = 0; i < picked; ++i) {
    const auto j = i + static_cast<std::size_t>(select.uniform() * static_cast<double>(n - i));
    swaps_[i] = static_cast<std::uint32_t>(std::min(j, n - 1));
    std::swap(perm_[i], perm_[swaps_[i]]);
  }

  const auto scatter_key = derive_key(e.seed, label + ".scatter");
  const std::uint64_t major = e.steps;
  std::mutex guard;
  std::uint64_t skipped = 0;
  parallel_for(pairs, threads, [&](std::size_t begin, std::size_t end) {
    std::uint64_t local = 0;
    for (std::size_t k = begin; k < end; ++k) {
      Vec3& v = e.v[perm_[2 * k]];
      Vec3& w = e.v[perm_[2 * k + 1]];
      const Vec3 rel = v - w;
      const double r = rel.norm();
      if (r == 0.0) {
        ++local;
        continue;
      }
      const auto u = uniform_pair(scatter_key, major, k);
      collide_pair(v, w, sample_scatter(table_, u[0], u[1], rel / r));
    }
    std::lock_guard lock(guard);
    skipped += local;
  }, 1024);

  for (std::size_t i = picked; i-- > 0;) std::swap(perm_[i], perm_[swaps_[i]]);
  ++e.steps;
  stats.pairs = pairs;
  stats.skipped = skipped;
  return stats;
}

CollisionStats collision_step(Ensemble& e, const CutoffKernel& kernel, double dt,
                              const ScatterTable& table, const std::string& label) {
  const double rs = dt * kernel.total_rate();
  if (!(dt > 0.0)) throw InvalidArgument("collision_step: dt must be positive");
  if (rs > kMaxRateStep) {
    throw StepTooLarge("collision_step: dt*S = " + fmt(rs) + " exceeds " + fmt(kMaxRateStep));
  }
  const std::size_t n = e.v.size();
  CollisionStats stats;
  if (n < 2) {
    ++e.steps;
    return stats;
  }
  Stream select(derive_key(e.seed, label + ".select"), e.steps);
  std::poisson_distribution<std::uint64_t> count(0.5 * static_cast<double>(n) * rs);
  const std::uint64_t pairs = std::min<std::uint64_t>(count(select), n / 2);
  std::vector<std::uint32_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = 0; i < 2 * pairs; ++i) {
    const auto j = i + static_cast<std::size_t>(select.uniform() * static_cast<double>(n - i));
    std::swap(perm[i], perm[std::min(j, n - 1)]);
  }
  const auto scatter_key = derive_key(e.seed, label + ".scatter");
  for (std::size_t k = 0; k < pairs; ++k) {
    Vec3& v = e.v[perm[2 * k]];
    Vec3& w = e.v[perm[2 * k + 1]];
    const Vec3 rel = v - w;
    const double r = rel.norm();
    if (r == 0.0) {
      ++stats.skipped;
      continue;
    }
    const auto u = uniform_pair(scatter_key, e.steps, k);
    collide_pair(v, w, sample_scatter(table, u[0], u[1], rel / r));
  }
  ++e.steps;
  stats.pairs = pairs;
  return stats;
}

// Runs ---------------------------------------------------------------------

Observation observe(const Ensemble& e, const std::vector<double>& p_orders) {
  Observation o;
  o.t = e.time;
  o.mean = e.mean();
  o.second = e.second_moment();
  for (double p : p_orders) o.p_moments.push_back(empirical_pth_moment(e, p));
  return o;
}

RunRecord run(Ensemble& e, const DriftSpec& drift, Collider& collider, const RunOptions& opts,
              const Observer& observer) {
  const double dt = opts.dt > 0.0 ? opts.dt : drift.dt();
  if (!(opts.t_end >= 0.0)) throw InvalidArgument("run: t_end must be non-negative");
  if (opts.observe_every == 0) throw InvalidArgument("run: observe_every must be positive");
  const std::size_t threads = opts.threads ? opts.threads : default_threads();
  const double t0 = e.time;
  const auto steps = static_cast<std::size_t>(std::ceil(opts.t_end / dt - 1e-9));
  if (e.kernel_id.empty()) {
    e.kernel_id = to_string(collider.kernel().base().form()) + ":theta_min=" +
                  fmt(collider.kernel().theta_min());
  }
  if (e.drift_id.empty()) e.drift_id = drift.id();

  RunRecord rec;
  auto record = [&] {
    rec.series.push_back(observe(e, opts.p_orders));
    if (observer) observer(e);
  };
  record();
  const bool cached = !drift.time_dependent() && dt == drift.dt();
  for (std::size_t k = 0; k < steps; ++k) {
    const double start = t0 + static_cast<double>(k) * dt;
    const double h = (k + 1 == steps) ? (t0 + opts.t_end) - start : dt;
    const bool full = cached && h == dt;
    apply_flow(e, full ? drift.half_flow() : drift.flow(start, 0.5 * h), threads);
    const double rate = opts.rate ? opts.rate(start + 0.5 * h) : 1.0;
    const auto cs = collider.step(e, h, rate, opts.label, threads);
    rec.collisions.pairs += cs.pairs;
    rec.collisions.skipped += cs.skipped;
    apply_flow(e, full ? drift.half_flow() : drift.flow(start + 0.5 * h, 0.5 * h), threads);
    e.time = (k + 1 == steps) ? t0 + opts.t_end : t0 + static_cast<double>(k + 1) * dt;
    ++rec.steps;
    if ((k + 1) % opts.observe_every == 0 || k + 1 == steps) record();
  }
  return rec;
}

void write_series_csv(std::ostream& os, const RunRecord& rec, const std::vector<double>& p_orders) {
  os << "t,u1,u2,u3,m11,m22,m33,m12,m13,m23";
  for (double p : p_orders) os << ",p" << fmt(p);
  os << '\n';
  for (const auto& o : rec.series) {
    os << fmt(o.t);
    for (int i = 0; i < 3; ++i) os << ',' << fmt(o.mean[i]);
    for (double m : o.second.entries()) os << ',' << fmt(m);
    for (double m : o.p_moments) os << ',' << fmt(m);
    os << '\n';
  }
}

// Snapshots ----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'K', 'E', 'N', 'S'};
constexpr std::uint32_t kSnapshotVersion = 1;

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

template <class T>
T get_le(const std::string& in, std::size_t at) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return value;
}

}  // namespace

void write_snapshot(const std::filesystem::path& path, const Ensemble& e) {
  std::string out;
  out.reserve(16 + 24 * e.v.size());
  out.append(kMagic, 4);
  put_le<std::uint32_t>(out, kSnapshotVersion);
  put_le<std::uint64_t>(out, e.v.size());
  for (const auto& x : e.v) {
    for (int i = 0; i < 3; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &x[i], sizeof bits);
      put_le<std::uint64_t>(out, bits);
    }
  }
  write_file(path, out);
}

Ensemble read_snapshot(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  if (in.size() < 16 || std::memcmp(in.data(), kMagic, 4) != 0) {
    throw IoError(path.string() + ": not a snapshot file");
  }
  const auto version = get_le<std::uint32_t>(in, 4);
  if (version != kSnapshotVersion) {
    throw IoError(path.string() + ": unsupported snapshot version " + std::to_string(version));
  }
  const auto count = get_le<std::uint64_t>(in, 8);
  if (count > (in.size() - 16) / 24 || in.size() != 16 + 24 * count) {
    throw IoError(path.string() + ": truncated or oversized snapshot");
  }
  Ensemble e;
  e.v.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    for (int i = 0; i < 3; ++i) {
      const auto bits = get_le<std::uint64_t>(in, 16 + 24 * k + 8 * i);
      std::memcpy(&e.v[k][i], &bits, sizeof bits);
    }
  }
  return e;
}

}  // namespace kinetos
