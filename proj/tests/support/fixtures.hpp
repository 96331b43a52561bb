#pragma once

#include "edsolve/choquard.hpp"

#include <map>

namespace edsolve::testing {

/// Ground state at mass m on the default graded grid, cached per (m, n).
inline const ChoquardSolution& ground_state(double m, int n) {
  static std::map<std::pair<double, int>, ChoquardSolution> cache;
  auto it = cache.find({m, n});
  if (it == cache.end())
    it = cache.emplace(std::make_pair(m, n), solve_ground_state(m, RadialGrid::build(n, default_r_max(m)))).first;
  return it->second;
}

inline double sup_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace edsolve::testing
