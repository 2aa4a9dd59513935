#pragma once

// Brute-force mutual-kNN: full pairwise distance sort per sample, then a
// quadratic overlap count.

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline std::vector<std::size_t> neighbours(const Rows& x, std::size_t i, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (j == i) continue;
    double s = 0.0;
    for (std::size_t c = 0; c < x[i].size(); ++c) s += (x[i][c] - x[j][c]) * (x[i][c] - x[j][c]);
    all.push_back({std::sqrt(s), j});
  }
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < k; ++r) out.push_back(all[r].second);
  return out;
}

inline double mutual_knn(const Rows& a, const Rows& b, std::size_t k) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto na = neighbours(a, i, k), nb = neighbours(b, i, k);
    std::size_t hit = 0;
    for (auto p : na)
      for (auto q : nb) hit += p == q;
    total += static_cast<double>(hit) / static_cast<double>(k);
  }
  return total / static_cast<double>(a.size());
}

}  // namespace oracle
