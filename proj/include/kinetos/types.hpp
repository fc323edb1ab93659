#pragma once

#include <Eigen/Core>

namespace kinetos {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// ‖A‖ = Σ|A_ij|, the drift norm used in all growth allowances.
inline double entry_norm(const Mat3& a) { return a.cwiseAbs().sum(); }

}  // namespace kinetos
