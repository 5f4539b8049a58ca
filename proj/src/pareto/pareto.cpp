#include "pareto/pareto.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace morl::pareto {

bool dominates(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("dominates: vector lengths differ");
  bool strict = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) return false;
    if (a[i] > b[i]) strict = true;
  }
  return strict;
}

bool ParetoSet::contains(int i) const {
  return std::binary_search(members.begin(), members.end(), i);
}

ParetoSet non_dominated_set(const RewardMatrix& m) {
  if (m.n < 1) throw std::invalid_argument("non_dominated_set: empty matrix");
  ParetoSet out;
  for (int i = 0; i < m.n; ++i) {
    bool dominated = false;
    for (int j = 0; j < m.n; ++j) {
      if (j == i) continue;
      if (dominates(m.row(j), m.row(i))) {
        dominated = true;
        break;
      }
    }
    if (!dominated) out.members.push_back(i);
  }
  return out;
}

namespace {

// Keeps points >= ref, warns about the rest.
std::vector<std::vector<double>> usable_points(const RewardMatrix& points,
                                               std::span<const double> ref) {
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < points.n; ++i) {
    auto r = points.row(i);
    bool ok = true;
    for (int c = 0; c < points.k; ++c)
      if (r[c] < ref[c]) ok = false;
    if (!ok) {
      std::fprintf(stderr,
                   "hypervolume: point %d lies below the reference point; ignored\n", i);
      continue;
    }
    pts.emplace_back(r.begin(), r.end());
  }
  return pts;
}

std::vector<std::vector<double>> front_of(std::vector<std::vector<double>> pts) {
  std::vector<std::vector<double>> front;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < pts.size() && !dominated; ++j)
      if (j != i && dominates(pts[j], pts[i])) dominated = true;
    // Drop exact duplicates too; they add nothing to the union of boxes.
    for (std::size_t j = 0; j < i && !dominated; ++j)
      if (pts[j] == pts[i]) dominated = true;
    if (!dominated) front.push_back(pts[i]);
  }
  return front;
}

double hv2(std::vector<std::vector<double>> front, std::span<const double> ref) {
  // Sweep in descending x; the non-dominated front then has ascending y.
  std::sort(front.begin(), front.end(),
            [](const auto& a, const auto& b) { return a[0] > b[0]; });
  double hv = 0.0;
  double y_prev = ref[1];
  for (const auto& p : front) {
    hv += (p[0] - ref[0]) * (p[1] - y_prev);
    y_prev = p[1];
  }
  return hv;
}

double hv3(const std::vector<std::vector<double>>& front, std::span<const double> ref) {
  // Sweep slabs in descending z; each slab contributes its thickness times
  // the 2-D hypervolume of the xy-projections of the points above it.
  std::vector<std::size_t> order(front.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return front[a][2] > front[b][2]; });

  double hv = 0.0;
  std::vector<std::vector<double>> proj;
  for (std::size_t idx = 0; idx < order.size(); ++idx) {
    const auto& p = front[order[idx]];
    proj.push_back({p[0], p[1]});
    const double z_hi = p[2];
    const double z_lo = (idx + 1 < order.size()) ? front[order[idx + 1]][2] : ref[2];
    if (z_hi > z_lo) hv += (z_hi - z_lo) * hv2(front_of(proj), ref.subspan(0, 2));
  }
  return hv;
}

}  // namespace

double hypervolume(const RewardMatrix& points, std::span<const double> ref) {
  if (points.k != 2 && points.k != 3)
    throw std::invalid_argument("hypervolume: only 2 or 3 objectives supported");
  if (static_cast<int>(ref.size()) != points.k)
    throw std::invalid_argument("hypervolume: reference point length mismatch");
  auto front = front_of(usable_points(points, ref));
  if (front.empty()) return 0.0;
  return points.k == 2 ? hv2(std::move(front), ref) : hv3(front, ref);
}

double hypervolume_inclusion_exclusion(const RewardMatrix& points,
                                       std::span<const double> ref) {
  if (points.k != 2 && points.k != 3)
    throw std::invalid_argument("hypervolume: only 2 or 3 objectives supported");
  auto front = front_of(usable_points(points, ref));
  const std::size_t n = front.size();
  if (n == 0) return 0.0;
  if (n > 25)
    throw std::invalid_argument(
        "hypervolume_inclusion_exclusion: front too large for 2^n expansion");
  double hv = 0.0;
  for (std::uint64_t mask = 1; mask < (1ull << n); ++mask) {
    // Intersection of the subset's boxes: componentwise minimum corner.
    double vol = 1.0;
    for (int c = 0; c < points.k; ++c) {
      double lo = 1e300;
      for (std::size_t i = 0; i < n; ++i)
        if (mask & (1ull << i)) lo = std::min(lo, front[i][c]);
      vol *= (lo - ref[c]);
    }
    const int bits = __builtin_popcountll(mask);
    hv += (bits % 2 == 1 ? vol : -vol);
  }
  return hv;
}

}  // namespace morl::pareto
