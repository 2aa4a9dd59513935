#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "unifork/autograd.hpp"
#include "unifork/rng.hpp"

namespace unifork {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords = 256;
  // Gradient magnitudes below this are compared on an absolute scale; the
  // central difference itself carries ~1e-11 rounding noise.
  double abs_floor = 1e-6;
};

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  bool pass = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares `analytic` (d loss / d input) against central differences of
// `loss` at up to max_coords coordinates of `input`, chosen at random.
inline GradCheckResult check_gradient(const std::string& name, Var input, const Tensor& analytic,
                                      const std::function<double()>& loss, Rng& rng,
                                      const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = name;
  auto& value = input.node().value;
  std::vector<std::size_t> coords(value.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (coords.size() > opt.max_coords) {
    for (std::size_t i = 0; i < opt.max_coords; ++i)
      std::swap(coords[i], coords[i + uniform_index(rng, coords.size() - i)]);
    coords.resize(opt.max_coords);
  }
  for (auto i : coords) {
    const double orig = value[i];
    value[i] = orig + opt.step;
    const double up = loss();
    value[i] = orig - opt.step;
    const double down = loss();
    value[i] = orig;
    const double numeric = (up - down) / (2.0 * opt.step);
    const double err = relative_error(analytic[i], numeric, opt.abs_floor);
    res.max_rel_err = std::max(res.max_rel_err, err);
    ++res.checked;
  }
  res.pass = res.max_rel_err < opt.tolerance;
  return res;
}

}  // namespace unifork
