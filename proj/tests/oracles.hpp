#pragma once

// Independent oracles used by the test suites: central finite differences for
// gradients, and a brute-force O(B^2) average-precision computation. These
// deliberately avoid the library's backward pass and sort-based ranking.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mltr/tensor.hpp"

namespace oracles {

/// Central finite differences of a scalar-valued closure with respect to every
/// entry of `param`. The closure must re-run the full forward on each call.
template <class F>
std::vector<double> fd_grad(F f, mltr::Tensor& param, double h = 1e-5) {
  std::vector<double> grad(param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    double saved = param.data()[i];
    param.data()[i] = saved + h;
    double up = f();
    param.data()[i] = saved - h;
    double down = f();
    param.data()[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Relative error with a floored denominator so entries far below the
/// gradient scale are compared absolutely (central differences at h=1e-5 in
/// f64 carry ~1e-9 absolute noise and cannot certify tighter).
inline double rel_err(double a, double b, double floor = 1e-9) {
  double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

inline double grad_floor(const std::vector<double>& a, const std::vector<double>& b) {
  double linf = 1.0;
  for (double v : a) linf = std::max(linf, std::abs(v));
  for (double v : b) linf = std::max(linf, std::abs(v));
  return 1e-3 * linf;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double floor = grad_floor(a, b);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, rel_err(a[i], b[i], floor));
  return worst;
}

/// Brute-force all-points average precision for one class. Rank of sample i is
/// 1 + #{j : s_j > s_i} + #{j < i : s_j == s_i} (ties broken by index), matching
/// a stable descending sort. O(B^2) by construction.
inline double brute_force_ap(const std::vector<double>& scores,
                             const std::vector<int>& labels) {
  std::size_t b = scores.size();
  std::size_t npos = 0;
  for (int y : labels) npos += y > 0 ? 1 : 0;
  if (npos == 0) return 0.0;
  double ap = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] <= 0) continue;
    std::size_t rank = 1, pos_at_or_above = 1;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      bool above = scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
      if (above) {
        ++rank;
        if (labels[j] > 0) ++pos_at_or_above;
      }
    }
    ap += static_cast<double>(pos_at_or_above) / static_cast<double>(rank);
  }
  return ap / static_cast<double>(npos);
}

}  // namespace oracles
