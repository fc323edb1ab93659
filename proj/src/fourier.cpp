#include "kinetos/fourier.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>

#include "kinetos/errors.hpp"
#include "kinetos/io.hpp"
#include "kinetos/parallel.hpp"
#include "kinetos/stats.hpp"

namespace kinetos {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::size_t kBinsZ = 16;
constexpr std::size_t kBinsPhi = 32;

std::size_t resolve_threads(std::size_t t) { return t ? t : default_threads(); }

// Gauss–Legendre nodes and weights on [0, 1].
void gauss_legendre(std::size_t n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(n, 0.0);
  w.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double z = std::cos(kPi * (static_cast<double>(i) + 0.75) / (static_cast<double>(n) + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = z;
      for (std::size_t j = 2; j <= n; ++j) {
        const double p2 = ((2.0 * j - 1.0) * z * p1 - (j - 1.0) * p0) / static_cast<double>(j);
        p0 = p1;
        p1 = p2;
      }
      dp = static_cast<double>(n) * (z * p1 - p0) / (z * z - 1.0);
      const double step = p1 / dp;
      z -= step;
      if (std::abs(step) < 1e-16) break;
    }
    x[i] = 0.5 * (1.0 - z);
    w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
  }
}

std::size_t bin_of(const Vec3& u) {
  const double z = std::clamp(u[2], -1.0, 1.0);
  auto iz = static_cast<std::size_t>((z + 1.0) * 0.5 * kBinsZ);
  double phi = std::atan2(u[1], u[0]);
  if (phi < 0) phi += 2 * kPi;
  auto ip = static_cast<std::size_t>(phi / (2 * kPi) * kBinsPhi);
  return std::min(iz, kBinsZ - 1) * kBinsPhi + std::min(ip, kBinsPhi - 1);
}

}  // namespace

// KGrid ----------------------------------------------------------------------

std::shared_ptr<const KGrid> KGrid::fibonacci(std::size_t directions, std::size_t radii,
                                              double k_min, double k_max, bool paired,
                                              int radial_order) {
  if (paired && (directions % 2 != 0 || directions < 6)) {
    throw InvalidArgument("KGrid: paired layout needs an even count of at least 6");
  }
  // The paired layout takes the upper half of a Fibonacci set and its antipodes; negating
  // a full set instead gives a mirror-symmetric set with cocircular quadruples.
  const std::size_t base = paired ? directions / 2 : directions;
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  std::vector<Vec3> dirs;
  dirs.reserve(directions);
  for (std::size_t i = 0; i < base; ++i) {
    const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(directions);
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    dirs.emplace_back(rho * std::cos(phi), rho * std::sin(phi), z);
  }
  if (paired) {
    for (std::size_t i = 0; i < base; ++i) dirs.push_back(-dirs[i]);
  }
  return std::make_shared<const KGrid>(std::move(dirs), radii, k_min, k_max, radial_order);
}

KGrid::KGrid(std::vector<Vec3> directions, std::size_t radii, double k_min, double k_max,
             int radial_order)
    : dirs_(std::move(directions)), order_(radial_order) {
  if (dirs_.size() < 4) throw InvalidArgument("KGrid: need at least 4 directions");
  if (radii < 2) throw InvalidArgument("KGrid: need at least 2 radii");
  if (!(k_min > 0.0) || !(k_max > k_min)) throw InvalidArgument("KGrid: need 0 < k_min < k_max");
  if (radial_order < 2 || radial_order > 8) throw InvalidArgument("KGrid: radial order must be in [2, 8]");
  for (auto& d : dirs_) {
    const double n = d.norm();
    if (!(n > 0.0) || std::abs(n - 1.0) > 1e-12) throw InvalidArgument("KGrid: directions must be unit vectors");
  }
  log_min_ = std::log(k_min);
  log_step_ = (std::log(k_max) - log_min_) / static_cast<double>(radii - 1);
  radii_.resize(radii);
  for (std::size_t i = 0; i < radii; ++i) radii_[i] = std::exp(log_min_ + log_step_ * static_cast<double>(i));
  radii_.front() = k_min;
  radii_.back() = k_max;
  triangulate();

  antipode_.assign(dirs_.size(), std::numeric_limits<std::size_t>::max());
  for (std::size_t i = 0; i < dirs_.size(); ++i) {
    for (std::size_t j = 0; j < dirs_.size(); ++j) {
      if ((dirs_[i] + dirs_[j]).norm() <= 1e-12) antipode_[i] = j;
    }
  }
}

void KGrid::triangulate() {
  const std::size_t n = dirs_.size();
  const std::size_t expected = 2 * n - 4;
  for (std::size_t k = std::min<std::size_t>(n - 1, 14);; k = std::min(n - 1, 2 * k)) {
    std::set<std::array<std::uint32_t, 3>> seen;
    tris_.clear();
    std::vector<std::pair<double, std::uint32_t>> near(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      for (std::uint32_t j = 0; j < n; ++j) near[j] = {-dirs_[i].dot(dirs_[j]), j};
      std::partial_sort(near.begin(), near.begin() + static_cast<std::ptrdiff_t>(k + 1), near.end());
      for (std::size_t a = 1; a <= k; ++a) {
        for (std::size_t b = a + 1; b <= k; ++b) {
          std::uint32_t j = near[a].second, l = near[b].second;
          if (j == i || l == i) continue;
          std::array<std::uint32_t, 3> key{i, j, l};
          std::sort(key.begin(), key.end());
          if (seen.count(key)) continue;
          Vec3 normal = (dirs_[j] - dirs_[i]).cross(dirs_[l] - dirs_[i]);
          const double len = normal.norm();
          if (!(len > 1e-14)) continue;
          if (normal.dot(dirs_[i]) < 0) {
            std::swap(j, l);
            normal = -normal;
          }
          const double offset = normal.dot(dirs_[i]);
          bool hull = true;
          for (std::size_t m = 0; m < n && hull; ++m) {
            if (normal.dot(dirs_[m]) - offset > 1e-12 * len) hull = false;
          }
          if (!hull) continue;
          seen.insert(key);
          tris_.push_back({i, j, l});
        }
      }
    }
    if (tris_.size() == expected) break;
    if (k == n - 1) {
      throw InvalidArgument("KGrid: direction set has no simplicial hull (" +
                            std::to_string(tris_.size()) + " faces, expected " +
                            std::to_string(expected) + ")");
    }
  }

  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> edge;
  for (std::uint32_t t = 0; t < tris_.size(); ++t) {
    for (int j = 0; j < 3; ++j) edge[{tris_[t][(j + 1) % 3], tris_[t][(j + 2) % 3]}] = t;
  }
  neighbours_.resize(tris_.size());
  inverse_.resize(tris_.size());
  for (std::uint32_t t = 0; t < tris_.size(); ++t) {
    for (int j = 0; j < 3; ++j) {
      const auto it = edge.find({tris_[t][(j + 2) % 3], tris_[t][(j + 1) % 3]});
      if (it == edge.end()) throw InvalidArgument("KGrid: hull is not closed");
      neighbours_[t][j] = it->second;
    }
    Eigen::Matrix3d m;
    m << dirs_[tris_[t][0]], dirs_[tris_[t][1]], dirs_[tris_[t][2]];
    inverse_[t] = m.inverse();
  }

  start_.assign(kBinsZ * kBinsPhi, 0);
  for (std::size_t iz = 0; iz < kBinsZ; ++iz) {
    for (std::size_t ip = 0; ip < kBinsPhi; ++ip) {
      const double z = -1.0 + (static_cast<double>(iz) + 0.5) * 2.0 / kBinsZ;
      const double phi = (static_cast<double>(ip) + 0.5) * 2 * kPi / kBinsPhi;
      const double rho = std::sqrt(1 - z * z);
      const Vec3 u(rho * std::cos(phi), rho * std::sin(phi), z);
      double best = -std::numeric_limits<double>::infinity();
      for (std::uint32_t t = 0; t < tris_.size(); ++t) {
        const double m = (inverse_[t] * u).minCoeff();
        if (m > best) {
          best = m;
          start_[iz * kBinsPhi + ip] = t;
        }
      }
    }
  }
}

KGrid::DirectionWeights KGrid::locate(const Vec3& unit) const {
  std::uint32_t t = start_[bin_of(unit)];
  Vec3 lam = inverse_[t] * unit;
  const std::size_t cap = 4 * tris_.size() + 8;
  std::size_t steps = 0;
  for (;;) {
    int j;
    const double m = lam.minCoeff(&j);
    if (m >= -1e-13) break;
    if (++steps > cap) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::uint32_t s = 0; s < tris_.size(); ++s) {
        const Vec3 l = inverse_[s] * unit;
        if (l.minCoeff() > best) {
          best = l.minCoeff();
          t = s;
          lam = l;
        }
      }
      break;
    }
    t = neighbours_[t][j];
    lam = inverse_[t] * unit;
  }
  lam = lam.cwiseMax(0.0);
  lam /= lam.sum();
  return {tris_[t], {lam[0], lam[1], lam[2]}};
}

KGrid::RadialWeights KGrid::radial(double r) const {
  const auto count = static_cast<int>(std::min<std::size_t>(order_, radii_.size()));
  const double last = static_cast<double>(radii_.size() - 1);
  const double pos = std::clamp((std::log(r) - log_min_) / log_step_, 0.0, last);
  const auto cell = static_cast<long>(std::floor(pos));
  long first = cell - (count / 2 - 1);
  first = std::clamp<long>(first, 0, static_cast<long>(radii_.size()) - count);
  RadialWeights w;
  w.first = static_cast<std::size_t>(first);
  w.count = count;
  const double x = pos - static_cast<double>(first);
  for (int a = 0; a < count; ++a) {
    double v = 1.0;
    for (int b = 0; b < count; ++b) {
      if (b != a) v *= (x - b) / static_cast<double>(a - b);
    }
    w.weight[a] = v;
  }
  return w;
}

std::size_t KGrid::antipode(std::size_t node) const {
  const std::size_t d = antipode_[direction_of(node)];
  if (d == std::numeric_limits<std::size_t>::max()) return d;
  return index(d, radius_of(node));
}

bool KGrid::same_layout(const KGrid& other) const noexcept {
  if (this == &other) return true;
  return dirs_.size() == other.dirs_.size() && radii_ == other.radii_ && order_ == other.order_ &&
         std::equal(dirs_.begin(), dirs_.end(), other.dirs_.begin(),
                    [](const Vec3& a, const Vec3& b) { return a == b; });
}

// CharGrid -------------------------------------------------------------------

CharGrid::CharGrid(std::shared_ptr<const KGrid> grid, std::vector<Complex> values, Complex origin,
                   std::vector<double> std_error, std::size_t samples)
    : grid_(std::move(grid)),
      values_(std::move(values)),
      origin_(origin),
      se_(std::move(std_error)),
      samples_(samples) {
  if (!grid_) throw InvalidArgument("CharGrid: null grid");
  if (values_.size() != grid_->size()) throw GridMismatch("CharGrid: value count does not match the grid");
  if (!se_.empty() && se_.size() != values_.size()) throw GridMismatch("CharGrid: standard error count mismatch");
}

double CharGrid::eps_stat() const noexcept {
  return samples_ ? 3.0 / std::sqrt(static_cast<double>(samples_)) : 0.0;
}

Complex CharGrid::at(const Vec3& k) const {
  const KGrid& g = *grid_;
  const double r = k.norm();
  if (r == 0.0) return origin_;
  if (r > g.k_max() * (1.0 + 1e-12)) {
    throw InterpolationOutOfRange("CharGrid: |k| = " + fmt(r) + " exceeds k_max",
                                  std::numeric_limits<std::size_t>::max());
  }
  const auto dw = g.locate(k / r);
  const std::size_t nr = g.radii();
  Complex out = 0.0;
  if (r < g.k_min()) {
    const double t = r * r;
    const double t0 = g.radius_set()[0] * g.radius_set()[0];
    const double t1 = g.radius_set()[1] * g.radius_set()[1];
    const double det = t0 * t1 * (t1 - t0);
    for (int a = 0; a < 3; ++a) {
      const Complex g0 = values_[dw.vertex[a] * nr] - origin_;
      const Complex g1 = values_[dw.vertex[a] * nr + 1] - origin_;
      const Complex c1 = (g0 * t1 * t1 - g1 * t0 * t0) / det;
      const Complex c2 = (g1 * t0 - g0 * t1) / det;
      out += dw.weight[a] * (c1 * t + c2 * t * t);
    }
    return origin_ + out;
  }
  const auto rw = g.radial(r);
  for (int a = 0; a < 3; ++a) {
    const Complex* row = values_.data() + dw.vertex[a] * nr + rw.first;
    Complex s = 0.0;
    for (int b = 0; b < rw.count; ++b) s += rw.weight[b] * row[b];
    out += dw.weight[a] * s;
  }
  return out;
}

double CharGrid::modulus_excess() const {
  double m = std::abs(origin_) - 1.0;
  for (const auto& v : values_) m = std::max(m, std::abs(v) - 1.0);
  return m;
}

double CharGrid::hermitian_defect() const {
  double m = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const std::size_t j = grid_->antipode(i);
    if (j == std::numeric_limits<std::size_t>::max()) continue;
    m = std::max(m, std::abs(values_[j] - std::conj(values_[i])));
  }
  return m;
}

// Characteristic functions ---------------------------------------------------

CharGrid ecf(const Ensemble& e, std::shared_ptr<const KGrid> grid, const EcfOptions& opts) {
  if (!grid) throw InvalidArgument("ecf: null grid");
  if (e.v.empty()) throw InvalidArgument("ecf: empty ensemble");
  const KGrid& g = *grid;
  const std::size_t n = e.v.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const Vec3 center = opts.centered ? e.mean() : Vec3::Zero();
  std::vector<Complex> values(g.size());
  std::vector<double> se(g.size());

  parallel_for(g.directions(), resolve_threads(opts.threads), [&](std::size_t begin, std::size_t end) {
    std::vector<double> x(n);
    for (std::size_t d = begin; d < end; ++d) {
      const Vec3 dir = opts.scale * g.direction_set()[d];
      double m2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        x[j] = dir.dot(e.v[j] - center);
        m2 += x[j] * x[j];
      }
      m2 *= inv_n;
      for (std::size_t ri = 0; ri < g.radii(); ++ri) {
        const double r = g.radius_set()[ri];
        double sc = 0.0, ss = 0.0, xc = 0.0, xs = 0.0;
        if (opts.centered) {
          for (std::size_t j = 0; j < n; ++j) {
            double s, c;
            ::sincos(r * x[j], &s, &c);
            sc += c;
            ss += s;
            xc += x[j] * c;
            xs += x[j] * s;
          }
        } else {
          for (std::size_t j = 0; j < n; ++j) {
            double s, c;
            ::sincos(r * x[j], &s, &c);
            sc += c;
            ss += s;
          }
        }
        const Complex phi(sc * inv_n, -ss * inv_n);
        double var = 1.0 - std::norm(phi);
        if (opts.centered) {
          // Delta method for the plug-in mean: w = a − φ + i r x φ per sample.
          const Complex xa(xc * inv_n, -xs * inv_n);
          var += r * r * m2 * std::norm(phi) + 2.0 * r * std::imag(std::conj(phi) * xa);
        }
        const std::size_t node = g.index(d, ri);
        values[node] = phi;
        se[node] = std::sqrt(std::max(var, 0.0) * inv_n);
      }
    }
  }, 1);
  return CharGrid(std::move(grid), std::move(values), 1.0, std::move(se), n);
}

CharGrid analytic_cf(std::shared_ptr<const KGrid> grid, const std::function<Complex(const Vec3&)>& cf) {
  if (!grid) throw InvalidArgument("analytic_cf: null grid");
  std::vector<Complex> values(grid->size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = cf(grid->node(i));
  const Complex origin = cf(Vec3::Zero());
  return CharGrid(std::move(grid), std::move(values), origin);
}

std::function<Complex(const Vec3&)> gaussian_cf(const Vec3& mean, const Mat3& cov) {
  return [mean, cov](const Vec3& k) {
    return std::exp(Complex(-0.5 * k.dot(cov * k), -k.dot(mean)));
  };
}

// d₂ -------------------------------------------------------------------------

namespace {

void require_same_grid(const CharGrid& a, const CharGrid& b, const char* what) {
  if (!a.grid().same_layout(b.grid())) throw GridMismatch(std::string(what) + ": grids differ");
}

double node_noise(const CharGrid& a, const CharGrid& b, std::size_t i) {
  const double sa = a.std_error().empty() ? 0.0 : a.std_error()[i];
  const double sb = b.std_error().empty() ? 0.0 : b.std_error()[i];
  return std::sqrt(sa * sa + sb * sb);
}

// 5/√N with N the smaller sample count; 0 when both CFs are analytic.
double envelope_band(const CharGrid& a, const CharGrid& b) {
  std::size_t n = std::min(a.samples(), b.samples());
  if (n == 0) n = std::max(a.samples(), b.samples());
  return n ? 5.0 / std::sqrt(static_cast<double>(n)) : 0.0;
}

}  // namespace

double noise_floor(const CharGrid& phi, const CharGrid& psi) {
  require_same_grid(phi, psi, "noise_floor");
  const KGrid& g = phi.grid();
  double floor = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double r = g.norm(i);
    floor = std::max(floor, node_noise(phi, psi, i) / (r * r));
  }
  return floor;
}

D2Result d2(const CharGrid& phi, const CharGrid& psi) {
  require_same_grid(phi, psi, "d2");
  const KGrid& g = phi.grid();
  D2Result res;
  res.per_radius.assign(g.radii(), 0.0);
  std::vector<double> noise_r(g.radii(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double r = g.norm(i);
    const double v = std::abs(phi[i] - psi[i]) / (r * r);
    const double s = node_noise(phi, psi, i) / (r * r);
    const std::size_t ri = g.radius_of(i);
    res.per_radius[ri] = std::max(res.per_radius[ri], v);
    noise_r[ri] = std::max(noise_r[ri], s);
    if (v > res.value) {
      res.value = v;
      res.argmax_node = i;
    }
  }
  res.noise_floor = *std::max_element(noise_r.begin(), noise_r.end());

  const std::size_t low = std::min<std::size_t>(4, g.radii());
  std::vector<double> lx, ly;
  for (std::size_t ri = 0; ri < low; ++ri) {
    if (res.per_radius[ri] > 0.0) {
      lx.push_back(std::log(g.radius_set()[ri]));
      ly.push_back(std::log(res.per_radius[ri]));
    }
  }
  if (lx.size() >= 3) {
    res.low_k_slope = linear_fit(lx, ly).slope;
    res.low_k_trend = res.low_k_slope < -0.5 && res.per_radius[0] > 3.0 * noise_r[0];
  }
  return res;
}

D2Measurement measure_d2(const Ensemble& a, const Ensemble& b, std::size_t directions,
                         std::size_t radii, double k_min, double k_max, const EcfOptions& opts) {
  const auto coarse = KGrid::fibonacci(directions, radii, k_min, k_max);
  const auto fine = KGrid::fibonacci(2 * directions, 2 * radii - 1, k_min, k_max);
  D2Measurement m;
  m.coarse = d2(ecf(a, coarse, opts), ecf(b, coarse, opts));
  m.refined = d2(ecf(a, fine, opts), ecf(b, fine, opts));
  m.stable = m.coarse.value == 0.0 ? m.refined.value == 0.0
                                   : std::abs(m.refined.value - m.coarse.value) <= 0.02 * m.coarse.value;
  return m;
}

// Bobylev evaluator ------------------------------------------------------------

BobylevQuadrature::BobylevQuadrature(const CutoffKernel& kernel, std::size_t polar,
                                     std::size_t azimuth) {
  if (polar < 2 || azimuth < 1) throw InvalidArgument("BobylevQuadrature: order too small");
  std::vector<double> s, w;
  gauss_legendre(polar, s, w);
  const double tmin = kernel.theta_min();
  const double span = std::log(kPi / tmin);
  const double dphi = 2 * kPi / static_cast<double>(azimuth);
  points_.reserve(polar * azimuth);
  for (std::size_t i = 0; i < polar; ++i) {
    const double theta = tmin * std::exp(span * s[i]);
    const double weight = w[i] * span * theta * kernel.base().sin_weighted(theta) * dphi;
    for (std::size_t m = 0; m < azimuth; ++m) {
      points_.push_back({theta, (static_cast<double>(m) + 0.5) * dphi, weight});
      total_ += weight;
    }
  }
}

std::pair<Vec3, Vec3> BobylevQuadrature::split(const Vec3& k, double theta, double phi) {
  const double r = k.norm();
  if (r == 0.0) return {Vec3::Zero(), Vec3::Zero()};
  const Vec3 n = k / r;
  Vec3 e1, e2;
  complete_basis(n, e1, e2);
  const Vec3 sigma = std::cos(theta) * n + std::sin(theta) * (std::cos(phi) * e1 + std::sin(phi) * e2);
  return {0.5 * (k + r * sigma), 0.5 * (k - r * sigma)};
}

namespace {

template <class Integrand>
BobylevResult bobylev_loop(const CharGrid& phi, const CutoffKernel& kernel, const BobylevOptions& opts,
                           Complex origin_out, Integrand integrand) {
  const BobylevQuadrature quad(kernel, opts.polar, opts.azimuth);
  const KGrid& g = phi.grid();
  const double kmin = g.k_min();
  struct Trig {
    double c, sc, ss, w;
  };
  std::vector<Trig> trig;
  trig.reserve(quad.points().size());
  for (const auto& p : quad.points()) {
    trig.push_back({std::cos(p.theta), std::sin(p.theta) * std::cos(p.phi),
                    std::sin(p.theta) * std::sin(p.phi), p.weight});
  }
  std::vector<Complex> out(g.size());
  std::vector<double> bridged(g.size());
  parallel_for(g.size(), resolve_threads(opts.threads), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Vec3 k = g.node(i);
      const double r = k.norm();
      const Vec3 n = k / r;
      Vec3 e1, e2;
      complete_basis(n, e1, e2);
      Complex sum = 0.0;
      double low = 0.0;
      for (const auto& t : trig) {
        const Vec3 sigma = t.c * n + t.sc * e1 + t.ss * e2;
        const Vec3 kp = 0.5 * (k + r * sigma);
        const Vec3 km = 0.5 * (k - r * sigma);
        if (kp.norm() < kmin || km.norm() < kmin) low += t.w;
        sum += t.w * integrand(phi.at(kp), phi.at(km), phi[i]);
      }
      out[i] = sum;
      bridged[i] = low / quad.total_weight();
    }
  }, 16);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (bridged[i] > opts.max_bridge_fraction) {
      throw InterpolationOutOfRange("bobylev: node " + std::to_string(i) + " needs |k_±| < k_min for " +
                                        fmt(bridged[i]) + " of its kernel weight",
                                    i);
    }
  }
  return {CharGrid(phi.grid_ptr(), std::move(out), origin_out), std::move(bridged)};
}

}  // namespace

BobylevResult bobylev_apply(const CharGrid& phi, const CutoffKernel& kernel, const BobylevOptions& opts) {
  const Complex origin = phi.origin_value();
  return bobylev_loop(phi, kernel, opts, 0.0, [origin](Complex plus, Complex minus, Complex self) {
    return plus * minus - self * origin;
  });
}

BobylevResult linearized_gain(const CharGrid& phi, const CutoffKernel& kernel, const BobylevOptions& opts) {
  return bobylev_loop(phi, kernel, opts, 2.0 * kernel.total_rate() * phi.origin_value(),
                      [](Complex plus, Complex minus, Complex) { return plus + minus; });
}

// Checks ---------------------------------------------------------------------

namespace {

void require_series(const CfSeries& a, const CfSeries& b, const char* what) {
  if (a.snapshots.empty() || a.snapshots.size() != a.times.size()) {
    throw InvalidArgument(std::string(what) + ": series must have one time per snapshot");
  }
  if (a.snapshots.size() != b.snapshots.size() || b.times.size() != b.snapshots.size()) {
    throw GridMismatch(std::string(what) + ": series lengths differ");
  }
  for (std::size_t i = 0; i < a.times.size(); ++i) {
    if (std::abs(a.times[i] - b.times[i]) > 1e-12 * std::max(1.0, std::abs(a.times[i]))) {
      throw GridMismatch(std::string(what) + ": snapshot times differ");
    }
    require_same_grid(a.snapshots[i], b.snapshots[i], what);
  }
  require_same_grid(a.snapshots[0], b.snapshots[0], what);
}

}  // namespace

nlohmann::json CheckReport::to_json() const {
  nlohmann::json j;
  j["pass"] = pass;
  j["degenerate"] = degenerate;
  j["worst_node"] = worst_node;
  j["worst_time"] = worst_time;
  j["margin"] = margin;
  j["tolerance"] = tolerance;
  j["ratios"] = ratios;
  return j;
}

nlohmann::json ComparisonReport::to_json() const {
  nlohmann::json j = check.to_json();
  j["c1"] = envelope.c1;
  j["c2"] = envelope.c2;
  j["lambda_p"] = lambda_p;
  j["band"] = band;
  j["violations"] = violations;
  j["c1_series"] = c1_series;
  j["envelope_rate"] = envelope_rate;
  return j;
}

CheckReport check_contraction(const CfSeries& a, const CfSeries& b, const Mat3& drift) {
  require_series(a, b, "check_contraction");
  const double norm = entry_norm(drift);
  const auto d0 = d2(a.snapshots[0], b.snapshots[0]);
  if (d0.low_k_trend) {
    throw UnequalMeans("check_contraction: d2 diverges as |k| -> k_min at t = 0 (slope " +
                       fmt(d0.low_k_slope) + ")");
  }
  CheckReport rep;
  rep.degenerate = d0.value == 0.0;
  rep.tolerance = rep.degenerate ? 0.0 : 10.0 * d0.noise_floor / d0.value;
  double worst = -std::numeric_limits<double>::infinity();
  bool ok = true;
  for (std::size_t i = 0; i < a.snapshots.size(); ++i) {
    const auto dt = d2(a.snapshots[i], b.snapshots[i]);
    const double bound = std::exp(2.0 * norm * a.times[i]) * d0.value;
    double ratio, allowed;
    if (rep.degenerate) {
      ratio = dt.value;
      allowed = 10.0 * dt.noise_floor;
    } else {
      ratio = dt.value / bound;
      allowed = 1.0 + rep.tolerance;
    }
    rep.ratios.push_back(ratio);
    if (ratio > allowed) ok = false;
    if (ratio - allowed > worst) {
      worst = ratio - allowed;
      rep.worst_node = dt.argmax_node;
      rep.worst_time = a.times[i];
    }
  }
  rep.pass = ok;
  rep.margin = -worst;
  return rep;
}

namespace {

// Per-radius maxima of |φ−ψ| and of its standard error.
struct RadialProfile {
  std::vector<double> delta, noise;
};

RadialProfile radial_profile(const CharGrid& phi, const CharGrid& psi) {
  const KGrid& g = phi.grid();
  RadialProfile prof{std::vector<double>(g.radii(), 0.0), std::vector<double>(g.radii(), 0.0)};
  for (std::size_t i = 0; i < g.size(); ++i) {
    const std::size_t r = g.radius_of(i);
    prof.delta[r] = std::max(prof.delta[r], std::abs(phi[i] - psi[i]));
    prof.noise[r] = std::max(prof.noise[r], node_noise(phi, psi, i));
  }
  return prof;
}

// Radii up to the peak of the profile that stand 3σ above the noise. Past the peak
// the difference decays and any envelope that covers the peak covers the tail.
std::vector<std::size_t> rising_radii(const RadialProfile& prof) {
  const auto peak = static_cast<std::size_t>(
      std::max_element(prof.delta.begin(), prof.delta.end()) - prof.delta.begin());
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r <= peak; ++r) {
    if (prof.delta[r] > 0.0 && prof.delta[r] > 3.0 * prof.noise[r]) out.push_back(r);
  }
  return out;
}

}  // namespace

Envelope fit_envelope(const CharGrid& phi0, const CharGrid& psi0, double p) {
  require_same_grid(phi0, psi0, "fit_envelope");
  if (!(p > 2.0)) throw InvalidArgument("fit_envelope: p must exceed 2");
  const KGrid& g = phi0.grid();
  const auto prof = radial_profile(phi0, psi0);
  const auto used = rising_radii(prof);
  const auto& radii = g.radius_set();
  if (used.empty()) return {};

  // Log-space least squares over E = c·(w (r/r₀)^p + (1−w)(r/r₀)²); for fixed w the
  // optimal log c is a mean, so w is scanned.
  const double r0 = radii[used.back()];
  double best_sse = std::numeric_limits<double>::infinity(), best_w = 1.0, best_logc = 0.0;
  constexpr int kSteps = 400;
  for (int s = 0; s <= kSteps; ++s) {
    const double w = static_cast<double>(s) / kSteps;
    std::vector<double> resid;
    resid.reserve(used.size());
    for (std::size_t r : used) {
      const double x = radii[r] / r0;
      resid.push_back(std::log(prof.delta[r]) - std::log(w * std::pow(x, p) + (1.0 - w) * x * x));
    }
    const double logc = mean(resid);
    double sse = 0.0;
    for (double v : resid) sse += (v - logc) * (v - logc);
    if (sse < best_sse) {
      best_sse = sse;
      best_w = w;
      best_logc = logc;
    }
  }
  const double c = std::exp(best_logc);
  Envelope env{c * best_w / std::pow(r0, p), c * (1.0 - best_w) / (r0 * r0)};

  // Cover every node outside the statistical band, then add 10%.
  const double band = envelope_band(phi0, psi0);
  double lift = 1.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double r = g.norm(i);
    const double excess = std::abs(phi0[i] - psi0[i]) - band;
    if (excess > 0.0) lift = std::max(lift, excess / (env.c1 * std::pow(r, p) + env.c2 * r * r));
  }
  env.c1 *= 1.1 * lift;
  env.c2 *= 1.1 * lift;
  return env;
}

ComparisonReport check_comparison(const CfSeries& a, const CfSeries& b, double p, const Mat3& drift,
                                  double lambda_p, const Envelope& envelope) {
  require_series(a, b, "check_comparison");
  if (!(p > 2.0)) throw InvalidArgument("check_comparison: p must exceed 2");
  const double norm = entry_norm(drift);
  const KGrid& g = a.snapshots[0].grid();
  ComparisonReport rep;
  rep.envelope = envelope;
  rep.lambda_p = lambda_p;
  rep.band = envelope_band(a.snapshots[0], b.snapshots[0]);

  auto bound = [&](std::size_t node, double t) {
    const double r = g.norm(node);
    return envelope.c1 * std::exp(-(lambda_p - p * norm) * t) * std::pow(r, p) +
           envelope.c2 * std::exp(2.0 * norm * t) * r * r;
  };

  std::size_t initial = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (std::abs(a.snapshots[0][i] - b.snapshots[0][i]) > bound(i, a.times[0]) + rep.band) ++initial;
  }
  if (initial) {
    throw HypothesisFails("check_comparison: envelope does not hold at t = 0 on " +
                              std::to_string(initial) + " nodes",
                          initial);
  }

  double worst = -std::numeric_limits<double>::infinity();
  bool resolved = true;
  std::vector<double> fit_t, fit_log;
  for (std::size_t s = 0; s < a.snapshots.size(); ++s) {
    const double t = a.times[s];
    double step_worst = -std::numeric_limits<double>::infinity();
    const double c2t = envelope.c2 * std::exp(2.0 * norm * t);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double delta = std::abs(a.snapshots[s][i] - b.snapshots[s][i]);
      const double excess = delta - bound(i, t);
      if (excess > rep.band) ++rep.violations;
      step_worst = std::max(step_worst, excess);
      if (excess > worst) {
        worst = excess;
        rep.check.worst_node = i;
        rep.check.worst_time = t;
      }
    }
    rep.check.ratios.push_back(step_worst);
    // |k|^p coefficient of the rising part after removing the |k|² term.
    const auto prof = radial_profile(a.snapshots[s], b.snapshots[s]);
    std::vector<double> logs;
    for (std::size_t r : rising_radii(prof)) {
      const double radius = g.radius_set()[r];
      const double y = prof.delta[r] - c2t * radius * radius;
      if (y > 0.0) logs.push_back(std::log(y) - p * std::log(radius));
    }
    const double c1 = logs.empty() ? std::numeric_limits<double>::quiet_NaN() : std::exp(mean(logs));
    rep.c1_series.push_back(c1);
    if (resolved && c1 > 0.0) {
      fit_t.push_back(t);
      fit_log.push_back(std::log(c1));
    } else {
      resolved = false;
    }
  }
  rep.envelope_rate = fit_t.size() >= 2 ? -linear_fit(fit_t, fit_log).slope
                                        : std::numeric_limits<double>::quiet_NaN();
  rep.check.tolerance = rep.band;
  rep.check.margin = rep.band - worst;
  rep.check.pass = rep.violations == 0;
  rep.check.degenerate = envelope.c1 == 0.0 && envelope.c2 == 0.0;
  return rep;
}

InterpolationBound interpolation_bound(const CharGrid& phi, const CharGrid& psi, double p) {
  require_same_grid(phi, psi, "interpolation_bound");
  if (!(p >= 2.0)) throw InvalidArgument("interpolation_bound: p must be at least 2");
  const KGrid& g = phi.grid();
  InterpolationBound b;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double r = g.norm(i);
    const double delta = std::abs(phi[i] - psi[i]);
    b.gamma = std::max(b.gamma, delta / (r * r * (1.0 + std::pow(r, p - 2.0))));
    b.d2 = std::max(b.d2, delta / (r * r));
  }
  b.d2_bound = b.gamma + std::pow(b.gamma, 2.0 / p);
  b.ratio = b.gamma > 0.0 ? b.d2 / b.d2_bound : 0.0;
  return b;
}

void write_chargrid_csv(std::ostream& os, const CharGrid& phi) {
  os << "kx,ky,kz,re,im\n";
  const KGrid& g = phi.grid();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Vec3 k = g.node(i);
    os << fmt(k[0]) << ',' << fmt(k[1]) << ',' << fmt(k[2]) << ',' << fmt(phi[i].real()) << ','
       << fmt(phi[i].imag()) << '\n';
  }
}

}  // namespace kinetos
