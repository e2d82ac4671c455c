#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "pca/prng.hpp"

using namespace pca;

static_assert(std::uniform_random_bit_generator<sequence>);

TEST_CASE("keyed draws are reproducible and order-free") {
  stream a(42), b(42);
  CHECK(a.bits(1, 2, 3) == b.bits(1, 2, 3));
  CHECK(a.bits(1, 2, 3) == a.fork(1).fork(2).bits(3));
  CHECK(a.bits(1, 2, 3) != a.bits(1, 3, 2));
  CHECK(a.bits(1, 2) != stream(43).bits(1, 2));
  CHECK(a.bits(domain::init, 7) != a.bits(domain::update, 7));
}

TEST_CASE("u01 lands in [0,1) with uniform moments") {
  stream s(7);
  const int m = 100000;
  double sum = 0, sq = 0;
  for (int i = 0; i < m; ++i) {
    const double u = s.u01(domain::init, std::uint64_t(i));
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    sq += u * u;
  }
  const double mean = sum / m;
  const double var = sq / m - mean * mean;
  CHECK(std::abs(mean - 0.5) < 4.0 * std::sqrt(1.0 / 12 / m));
  CHECK(std::abs(var - 1.0 / 12) < 4.0 * 1.2 / 12 / std::sqrt(double(m)));
}

TEST_CASE("inverse normal CDF inverts the normal CDF") {
  auto cdf = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  CHECK(inv_normal_cdf(0.5) == 0.0);
  for (double p : {1e-12, 1e-8, 1e-4, 0.025, 0.2, 0.5, 0.8, 0.975, 1 - 1e-4,
                   1 - 1e-8}) {
    const double x = inv_normal_cdf(p);
    CHECK(std::abs(cdf(x) - p) <= 1e-12 * std::max(p, 1 - p) + 1e-16);
    CHECK(inv_normal_cdf(1 - p) == Catch::Approx(-x).margin(1e-12));
  }
  CHECK(inv_normal_cdf(0.975) == Catch::Approx(1.959963984540054).epsilon(1e-13));
}

TEST_CASE("gauss draws have standard normal moments") {
  stream s(11);
  const int m = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < m; ++i) {
    const double g = s.gauss(domain::update, std::uint64_t(i));
    sum += g;
    sq += g * g;
  }
  const double mean = sum / m;
  const double var = sq / m - mean * mean;
  CHECK(std::abs(mean) < 4.0 / std::sqrt(double(m)));
  CHECK(std::abs(var - 1.0) < 4.0 * std::sqrt(2.0 / m));
}

TEST_CASE("sequence below(n) is uniform and rejection-exact") {
  sequence seq(5, domain::graph);
  const int m = 90000;
  int cnt[3] = {0, 0, 0};
  for (int i = 0; i < m; ++i) ++cnt[seq.below(3)];
  for (int c : cnt)
    CHECK(std::abs(c - m / 3.0) < 4.0 * std::sqrt(m * (1.0 / 3) * (2.0 / 3)));
  // n = 1 never rejects and always returns 0.
  CHECK(seq.below(1) == 0);
}

TEST_CASE("sequence feeds standard library distributions") {
  sequence seq(9, domain::graph);
  std::uniform_int_distribution<int> d(0, 9);
  int x = d(seq);
  CHECK(x >= 0);
  CHECK(x <= 9);
}
