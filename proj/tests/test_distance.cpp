#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cplab/distance.hpp"
#include "support/test_support.hpp"

using namespace cplab;

TEST_CASE("euclidean basics", "[distance]") {
  const std::vector<double> a{1.0, 2.0, 3.0};
  CHECK(euclidean(a, a) == 0.0);

  const std::vector<double> o{0.0, 0.0};
  const std::vector<double> p{3.0, 4.0};
  CHECK(euclidean(o, p) == Catch::Approx(5.0).margin(1e-15));

  const std::vector<double> e0{1.0, 0.0};
  const std::vector<double> e1{0.0, 1.0};
  CHECK(euclidean(e0, e1) == Catch::Approx(std::sqrt(2.0)).margin(1e-15));

  const std::vector<double> shorter{1.0};
  CHECK_THROWS_AS(euclidean(a, shorter), std::invalid_argument);
}

TEST_CASE("euclidean matches a sum-of-squares oracle", "[distance]") {
  Rng rng(11);
  for (int it = 0; it < 500; ++it) {
    const std::size_t n = 1 + rng.below(16);
    const auto u = testsupport::random_vector(rng, n, 3.0);
    const auto v = testsupport::random_vector(rng, n, 3.0);
    long double acc = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
      const long double d = static_cast<long double>(u[i]) - v[i];
      acc += d * d;
    }
    const double expected = static_cast<double>(std::sqrt(acc));
    CHECK(euclidean(u, v) == Catch::Approx(expected).margin(1e-12));
    CHECK(euclidean(u, v) == euclidean(v, u));
  }
}

TEST_CASE("cosine distance basics", "[distance]") {
  const std::vector<double> a{0.3, 0.7};
  CHECK(cosine_distance(a, a) == Catch::Approx(0.0).margin(1e-15));

  const std::vector<double> e0{1.0, 0.0};
  const std::vector<double> e1{0.0, 1.0};
  CHECK(cosine_distance(e0, e1) == Catch::Approx(1.0).margin(1e-15));

  const std::vector<double> na{-0.3, -0.7};
  CHECK(cosine_distance(a, na) == Catch::Approx(2.0).margin(1e-15));

  const std::vector<double> zero{0.0, 0.0};
  CHECK_THROWS_AS(cosine_distance(a, zero), std::invalid_argument);
  CHECK_THROWS_AS(cosine_distance(zero, a), std::invalid_argument);
}

TEST_CASE("cosine distance is scale-invariant", "[distance]") {
  Rng rng(12);
  for (int it = 0; it < 500; ++it) {
    const std::size_t n = 2 + rng.below(8);
    const auto u = testsupport::random_vector(rng, n);
    const auto v = testsupport::random_vector(rng, n);
    const double a = 0.01 + 10.0 * rng.uniform01();
    const double b = 0.01 + 10.0 * rng.uniform01();
    std::vector<double> au(n), bv(n);
    for (std::size_t i = 0; i < n; ++i) {
      au[i] = a * u[i];
      bv[i] = b * v[i];
    }
    CHECK(cosine_distance(au, bv) == Catch::Approx(cosine_distance(u, v)).margin(1e-12));
  }
}
