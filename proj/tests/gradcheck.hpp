#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testsupport {

struct GradReport {
  double max_rel_err = 0;
  int checked = 0;
};

// Central finite differences of `loss` with respect to `values[i]` for each
// i in `indices`, compared against `analytic[i]`. Relative error uses a floor
// on the denominator so near-zero gradients are compared absolutely.
inline GradReport check_gradient(std::vector<double>& values, const std::vector<double>& analytic,
                                 const std::vector<std::size_t>& indices, const std::function<double()>& loss,
                                 double h = 1e-5, double floor = 1e-6) {
  GradReport r;
  for (auto i : indices) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = loss();
    values[i] = keep - h;
    const double down = loss();
    values[i] = keep;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    r.max_rel_err = std::max(r.max_rel_err, std::abs(numeric - analytic[i]) / denom);
    ++r.checked;
  }
  return r;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

}  // namespace testsupport
