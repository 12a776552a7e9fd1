#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace diffap {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Diffusion timestep index into a NoiseSchedule, 0 meaning "no noise".
using Step = int;

/// Raised when a caller violates an operation's precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

inline void require_same_dim(const Vec& a, const Vec& b, const char* where) {
  require(a.size() == b.size(), std::string(where) + ": dimension mismatch (" +
                                    std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
}

inline Vec clip_unit_box(const Vec& x) { return x.cwiseMax(0.0).cwiseMin(1.0); }

}  // namespace diffap
