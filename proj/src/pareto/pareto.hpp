#pragma once

#include <span>
#include <vector>

namespace morl::pareto {

// Row-major N x K matrix of reward vectors.
struct RewardMatrix {
  int n = 0;
  int k = 0;
  std::vector<double> values;

  std::span<const double> row(int i) const {
    return {values.data() + static_cast<std::size_t>(i) * k, static_cast<std::size_t>(k)};
  }
};

// a dominates b: a >= b in every component with strict inequality somewhere.
bool dominates(std::span<const double> a, std::span<const double> b);

struct ParetoSet {
  std::vector<int> members;  // ascending row indices
  int size() const { return static_cast<int>(members.size()); }
  bool contains(int i) const;
};

// Pairwise scan with early exit; identical duplicate rows are all retained
// (neither dominates the other). N >= 1 implies a nonempty result.
ParetoSet non_dominated_set(const RewardMatrix& m);

// Lebesgue measure of the union of boxes [ref, p] over points p, for K in
// {2, 3}. Points not >= ref contribute nothing and are dropped with a
// warning on stderr.
double hypervolume(const RewardMatrix& points, std::span<const double> ref);

// Same value by inclusion-exclusion over the non-dominated subset; cost is
// exponential in the front size, so it serves as a cross-check for small
// inputs rather than the production path.
double hypervolume_inclusion_exclusion(const RewardMatrix& points,
                                       std::span<const double> ref);

}  // namespace morl::pareto
