#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "pareto/pareto.hpp"
#include "util/rng.hpp"

using namespace morl;
using namespace morl::pareto;

namespace {

RewardMatrix make_matrix(const std::vector<std::vector<double>>& rows) {
  RewardMatrix m;
  m.n = static_cast<int>(rows.size());
  m.k = rows.empty() ? 0 : static_cast<int>(rows[0].size());
  for (const auto& r : rows) m.values.insert(m.values.end(), r.begin(), r.end());
  return m;
}

std::vector<std::vector<double>> random_rows(Rng& rng, int n, int k) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(k));
  for (auto& r : rows)
    for (auto& v : r) v = rng.uniform();
  return rows;
}

}  // namespace

TEST_CASE("dominates definition") {
  std::vector<double> a{1, 1}, b{0, 0}, c{1, 0}, d{0, 1};
  CHECK(dominates(a, b));
  CHECK_FALSE(dominates(c, d));
  CHECK_FALSE(dominates(d, c));
  CHECK_FALSE(dominates(a, a));  // no strict component
  CHECK_THROWS_AS(dominates(a, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST_CASE("dominates is irreflexive, antisymmetric and transitive") {
  Rng rng(21, "dom-props");
  for (int trial = 0; trial < 500; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(3));
    std::vector<double> a(k), b(k), c(k);
    for (int i = 0; i < k; ++i) {
      a[i] = rng.below(4);
      b[i] = rng.below(4);
      c[i] = rng.below(4);
    }
    CHECK_FALSE(dominates(a, a));
    CHECK_FALSE((dominates(a, b) && dominates(b, a)));
    if (dominates(a, b) && dominates(b, c)) CHECK(dominates(a, c));
  }
}

TEST_CASE("non_dominated_set basic cases") {
  CHECK(non_dominated_set(make_matrix({{3.0, -1.0}})).members == std::vector<int>{0});
  auto p = non_dominated_set(make_matrix({{1, 1}, {0, 0}, {1, 0}}));
  CHECK(p.members == std::vector<int>{0});
  CHECK(p.size() == 1);
  CHECK(p.contains(0));
  CHECK_FALSE(p.contains(2));
}

TEST_CASE("duplicate rows are all retained") {
  auto p = non_dominated_set(make_matrix({{1, 1}, {1, 1}, {0, 2}, {0, 2}, {0, 0}}));
  CHECK(p.members == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("matches the exhaustive oracle on random matrices") {
  Rng rng(2024, "pareto-oracle");
  for (int trial = 0; trial < 500; ++trial) {
    auto rows = random_rows(rng, 16, 3);
    auto got = non_dominated_set(make_matrix(rows)).members;
    auto want = testing_oracles::pareto_members_bruteforce(rows);
    REQUIRE(got == want);
  }
}

TEST_CASE("matches the oracle on matrices with engineered ties") {
  Rng rng(2025, "pareto-ties");
  for (int trial = 0; trial < 100; ++trial) {
    // Low-cardinality integer grid forces ties and duplicates.
    auto rows = random_rows(rng, 12, 3);
    for (auto& r : rows)
      for (auto& v : r) v = std::floor(v * 3.0);
    // Plant exact duplicates.
    rows[5] = rows[1];
    rows[9] = rows[3];
    auto got = non_dominated_set(make_matrix(rows)).members;
    auto want = testing_oracles::pareto_members_bruteforce(rows);
    REQUIRE(got == want);
  }
}

TEST_CASE("set membership is permutation invariant") {
  Rng rng(31, "pareto-perm");
  auto rows = random_rows(rng, 10, 3);
  auto base = non_dominated_set(make_matrix(rows)).members;
  std::vector<int> perm(10);
  for (int i = 0; i < 10; ++i) perm[i] = i;
  for (int trial = 0; trial < 20; ++trial) {
    for (int i = 9; i > 0; --i)
      std::swap(perm[i], perm[rng.below(static_cast<std::uint32_t>(i + 1))]);
    std::vector<std::vector<double>> shuffled(10);
    for (int i = 0; i < 10; ++i) shuffled[i] = rows[perm[i]];
    auto got = non_dominated_set(make_matrix(shuffled)).members;
    // Map back to original indices and compare as sets.
    std::vector<int> mapped;
    for (int i : got) mapped.push_back(perm[i]);
    std::sort(mapped.begin(), mapped.end());
    CHECK(mapped == base);
  }
}

TEST_CASE("per-channel strictly increasing transforms preserve the set") {
  Rng rng(33, "pareto-mono");
  for (int trial = 0; trial < 50; ++trial) {
    auto rows = random_rows(rng, 12, 3);
    auto base = non_dominated_set(make_matrix(rows)).members;
    auto transformed = rows;
    for (auto& r : transformed) {
      r[0] = std::exp(2.0 * r[0]);       // strictly increasing
      r[1] = 5.0 * r[1] - 3.0;           // affine, positive slope
      r[2] = std::atan(10.0 * r[2]);     // strictly increasing
    }
    CHECK(non_dominated_set(make_matrix(transformed)).members == base);
  }
}

TEST_CASE("hypervolume in two dimensions") {
  std::vector<double> ref{0.0, 0.0};
  CHECK(hypervolume(make_matrix({{1, 1}}), ref) == doctest::Approx(1.0));
  CHECK(hypervolume(make_matrix({{1.0, 0.5}, {0.5, 1.0}}), ref) == doctest::Approx(0.75));
  // A dominated point changes nothing.
  CHECK(hypervolume(make_matrix({{1.0, 0.5}, {0.5, 1.0}, {0.4, 0.4}}), ref) ==
        doctest::Approx(0.75));
}

TEST_CASE("hypervolume is monotone under adding points") {
  Rng rng(99, "hv-mono");
  std::vector<double> ref{0, 0, 0};
  for (int trial = 0; trial < 30; ++trial) {
    auto rows = random_rows(rng, 8, 3);
    double hv = hypervolume(make_matrix(rows), ref);
    auto more = rows;
    more.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    double hv2 = hypervolume(make_matrix(more), ref);
    CHECK(hv2 >= hv - 1e-12);
  }
}

TEST_CASE("3-D sweep agrees with inclusion-exclusion and Monte Carlo") {
  Rng rng(7, "hv3");
  std::vector<double> ref{0, 0, 0};
  for (int trial = 0; trial < 40; ++trial) {
    auto rows = random_rows(rng, 3 + static_cast<int>(rng.below(8)), 3);
    const double sweep = hypervolume(make_matrix(rows), ref);
    const double ie = hypervolume_inclusion_exclusion(make_matrix(rows), ref);
    CHECK(sweep == doctest::Approx(ie).epsilon(1e-10));
  }
  // One spot check against an independent Monte-Carlo estimate.
  auto rows = random_rows(rng, 6, 3);
  const double exact = hypervolume(make_matrix(rows), ref);
  const double mc = testing_oracles::hypervolume_montecarlo(rows, {0, 0, 0}, {1, 1, 1},
                                                            200000, 12345);
  CHECK(exact == doctest::Approx(mc).epsilon(0.05));
}

TEST_CASE("points below the reference are dropped") {
  std::vector<double> ref{0.0, 0.0};
  CHECK(hypervolume(make_matrix({{1, 1}, {-1, 2}}), ref) == doctest::Approx(1.0));
  CHECK(hypervolume(make_matrix({{-1, -1}}), ref) == doctest::Approx(0.0));
}
