#include <doctest.h>

#include <cmath>
#include <set>

#include "disparity/parallel.hpp"
#include "disparity/rng.hpp"

using namespace disparity;

TEST_CASE("streams are reproducible and keyed") {
  Stream a(derive_key(42, "impute")), b(derive_key(42, "impute")), c(derive_key(42, "bootstrap"));
  for (int i = 0; i < 100; ++i) {
    const auto va = a();
    CHECK(va == b());
    CHECK(va != c());
  }
  CHECK(a.position() == 100);
}

TEST_CASE("uniform and normal moments") {
  Stream s(7);
  double sum = 0, sum2 = 0, nsum = 0, nsum2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
    sum2 += u * u;
    const double z = s.normal();
    nsum += z;
    nsum2 += z * z;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(sum2 / n - (sum / n) * (sum / n) == doctest::Approx(1.0 / 12).epsilon(0.02));
  CHECK(std::abs(nsum / n) < 0.01);
  CHECK(nsum2 / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("below stays in range and hits every value") {
  Stream s(3);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = s.below(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("derived keys differ by index") {
  std::set<std::uint64_t> keys;
  for (std::uint64_t i = 0; i < 1000; ++i) keys.insert(derive_key(1, i));
  CHECK(keys.size() == 1000);
}

TEST_CASE("parallel_for is order independent and propagates errors") {
  std::vector<double> out1(500), out4(500);
  auto fill = [](std::vector<double>& out) {
    return [&out](std::size_t i) {
      Stream s(derive_key(9, i));
      out[i] = s.uniform();
    };
  };
  parallel_for(out1.size(), 1, fill(out1));
  parallel_for(out4.size(), 4, fill(out4));
  CHECK(out1 == out4);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) { if (i == 5) throw std::runtime_error("x"); }),
                  std::runtime_error);
}
