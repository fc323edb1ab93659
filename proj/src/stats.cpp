#include "kinetos/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "kinetos/errors.hpp"

namespace kinetos {

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("linear_fit: need two points");
  const double n = static_cast<double>(x.size());
  const double mx = mean(x), my = mean(y);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw InvalidArgument("linear_fit: degenerate abscissae");
  LinearFit f;
  f.n = x.size();
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  const double sse = std::max(0.0, syy - f.slope * sxy);
  f.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  f.slope_se = x.size() > 2 ? std::sqrt(sse / (n - 2.0) / sxx) : 0.0;
  return f;
}

MannKendall mann_kendall(const std::vector<double>& series) {
  const std::size_t n = series.size();
  MannKendall r;
  if (n < 3) return r;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = series[j] - series[i];
      r.s += (d > 0) - (d < 0);
    }
  }
  std::map<double, int> ties;
  for (const double v : series) ++ties[v];
  const double nn = static_cast<double>(n);
  double var = nn * (nn - 1) * (2 * nn + 5);
  for (const auto& [v, c] : ties) {
    if (c > 1) var -= double(c) * (c - 1) * (2.0 * c + 5);
  }
  var /= 18.0;
  if (var <= 0.0) return r;
  const double sd = std::sqrt(var);
  r.z = r.s > 0 ? (r.s - 1) / sd : (r.s < 0 ? (r.s + 1) / sd : 0.0);
  r.p_upward = 0.5 * std::erfc(r.z / std::sqrt(2.0));
  return r;
}

double mean(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double s = 0;
  for (const double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double sample_std(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0;
  for (const double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

}  // namespace kinetos
