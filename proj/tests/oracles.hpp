#pragma once

// Independent reference implementations used only by tests. These are kept
// deliberately separate from the production code paths they check.

#include <cstddef>
#include <vector>

namespace testing_oracles {

// Exhaustive dominance check, written without the production dominates()
// helper or its early-exit loop structure: row i is a member iff no other
// row is >= in all components and > in at least one (counted directly).
inline std::vector<int> pareto_members_bruteforce(const std::vector<std::vector<double>>& m) {
  std::vector<int> members;
  const std::size_t n = m.size();
  for (std::size_t i = 0; i < n; ++i) {
    bool is_member = true;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      std::size_t n_ge = 0, n_gt = 0;
      for (std::size_t c = 0; c < m[i].size(); ++c) {
        if (m[j][c] >= m[i][c]) ++n_ge;
        if (m[j][c] > m[i][c]) ++n_gt;
      }
      if (n_ge == m[i].size() && n_gt > 0) is_member = false;
    }
    if (is_member) members.push_back(static_cast<int>(i));
  }
  return members;
}

// Monte-Carlo hypervolume estimate for cross-checking exact values.
inline double hypervolume_montecarlo(const std::vector<std::vector<double>>& pts,
                                     const std::vector<double>& ref,
                                     const std::vector<double>& hi, int trials,
                                     unsigned seed) {
  // Tiny LCG; quality is irrelevant for a coarse volume estimate.
  std::uint64_t state = seed * 6364136223846793005ull + 1442695040888963407ull;
  auto next01 = [&]() {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    return static_cast<double>(state >> 11) * 0x1.0p-53;
  };
  const std::size_t k = ref.size();
  int hits = 0;
  std::vector<double> x(k);
  for (int t = 0; t < trials; ++t) {
    for (std::size_t c = 0; c < k; ++c) x[c] = ref[c] + next01() * (hi[c] - ref[c]);
    bool covered = false;
    for (const auto& p : pts) {
      bool inside = true;
      for (std::size_t c = 0; c < k; ++c)
        if (x[c] > p[c]) { inside = false; break; }
      if (inside) { covered = true; break; }
    }
    if (covered) ++hits;
  }
  double box = 1.0;
  for (std::size_t c = 0; c < k; ++c) box *= hi[c] - ref[c];
  return box * hits / trials;
}

}  // namespace testing_oracles
