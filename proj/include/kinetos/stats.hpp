#pragma once

#include <cstddef>
#include <vector>

namespace kinetos {

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double slope_se = 0.0;
  std::size_t n = 0;
};

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);

struct MannKendall {
  double s = 0.0;
  double z = 0.0;
  double p_upward = 1.0;  // one-sided p-value for an increasing trend
  bool upward(double level = 0.05) const { return p_upward < level; }
};

// Mann–Kendall trend test with the tie-corrected variance.
MannKendall mann_kendall(const std::vector<double>& series);

double mean(const std::vector<double>& x);
double sample_std(const std::vector<double>& x);

}  // namespace kinetos
