#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "tailseg/rng.hpp"

using tailseg::Rng;
using tailseg::derive_seed;

TEST_CASE("identical seeds replay identical streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
}

TEST_CASE("different tags derive different streams") {
  const std::uint64_t s1 = derive_seed(7, "scene");
  const std::uint64_t s2 = derive_seed(7, "labels");
  const std::uint64_t s3 = derive_seed(8, "scene");
  CHECK(s1 != s2);
  CHECK(s1 != s3);
  CHECK(derive_seed(7, "scene") == s1);
  CHECK(derive_seed(7, "scene", 1) != s1);
}

TEST_CASE("uniform01 stays in the half-open unit interval") {
  Rng r(123);
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("uniform range respects bounds and order check") {
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    const double v = r.uniform(-2.0, 3.0);
    CHECK(v >= -2.0);
    CHECK(v < 3.0);
  }
  CHECK_THROWS_AS(r.uniform(1.0, 1.0), std::invalid_argument);
}

TEST_CASE("below produces every residue without bias toward small moduli") {
  Rng r(99);
  std::map<std::uint64_t, int> hist;
  const std::uint64_t n = 7;
  const int draws = 70000;
  for (int i = 0; i < draws; ++i) hist[r.below(n)]++;
  CHECK(hist.size() == n);
  for (const auto& [k, count] : hist) {
    CHECK(k < n);
    // crude uniformity screen: each bucket within 10% of the mean
    CHECK(std::abs(count - draws / static_cast<int>(n)) < draws / 10 / static_cast<int>(n));
  }
  CHECK_THROWS_AS(r.below(0), std::invalid_argument);
}

TEST_CASE("normal draws have roughly standard moments") {
  Rng r(2024);
  const int n = 50000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("shuffle permutes without loss") {
  Rng r(17);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<int> orig = v;
  r.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == orig);

  // same seed, same permutation
  Rng r2(17);
  std::vector<int> w = orig;
  r2.shuffle(w);
  CHECK(w == v);
}

TEST_CASE("sample_without_replacement returns sorted unique picks") {
  Rng r(31);
  const auto picks = r.sample_without_replacement(100, 10);
  CHECK(picks.size() == 10);
  CHECK(std::is_sorted(picks.begin(), picks.end()));
  std::set<std::size_t> uniq(picks.begin(), picks.end());
  CHECK(uniq.size() == 10);
  for (auto p : picks) CHECK(p < 100);

  const auto all = r.sample_without_replacement(5, 5);
  CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(r.sample_without_replacement(3, 4), std::invalid_argument);
}
