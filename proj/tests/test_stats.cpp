#include <catch_amalgamated.hpp>

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "exprscore/stats.hpp"
#include "oracles.hpp"

using namespace exprscore::stats;
using Catch::Approx;

namespace {

using namespace oracle;

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, bool with_ties) {
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  std::uniform_int_distribution<int> small(0, 5);
  std::vector<double> v(n);
  for (auto& x : v) x = with_ties ? small(rng) : u(rng);
  return v;
}

}  // namespace

TEST_CASE("pearson examples", "[stats]") {
  std::vector<double> x, y, neg;
  for (int i = 1; i <= 10; ++i) {
    x.push_back(i);
    y.push_back(2.0 * i + 1.0);
    neg.push_back(-i);
  }
  CHECK(pearson(x, y) == Approx(1.0).margin(1e-12));
  CHECK(pearson(x, neg) == Approx(-1.0).margin(1e-12));
  CHECK(pearson(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}) == Approx(0.8).margin(1e-12));
}

TEST_CASE("pearson errors", "[stats]") {
  const std::vector<double> a{1, 2, 3}, b{1, 2};
  try {
    pearson(a, b);
    FAIL("expected LengthMismatch");
  } catch (const StatsError& e) {
    CHECK(e.kind() == StatsError::Kind::LengthMismatch);
  }
  const std::vector<double> c{2, 2, 2};
  try {
    pearson(c, c);
    FAIL("expected ZeroVariance");
  } catch (const StatsError& e) {
    CHECK(e.kind() == StatsError::Kind::ZeroVariance);
  }
  CHECK(pearson(a, c) == 0.0);
}

TEST_CASE("pearson and spearman agree with brute-force oracles", "[stats][property]") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 40);
    const bool ties = trial % 3 == 0;
    auto x = random_vector(rng, n, ties);
    auto y = random_vector(rng, n, ties);
    if (x == std::vector<double>(n, x[0]) || y == std::vector<double>(n, y[0])) continue;
    const double r = pearson(x, y);
    REQUIRE(std::abs(r - static_cast<double>(oracle_pearson(x, y))) <= 1e-12);
    REQUIRE(std::abs(r) <= 1.0);
    REQUIRE(r == pearson(y, x));
    const double rho = spearman(x, y);
    REQUIRE(std::abs(rho - static_cast<double>(oracle_pearson(oracle_ranks(x), oracle_ranks(y)))) <= 1e-12);
  }
}

TEST_CASE("spearman examples", "[stats]") {
  const std::vector<double> inc{1, 2, 5, 9, 20}, inc2{0.1, 0.2, 0.3, 10, 11}, dec{5, 4, 3, 2, 1};
  CHECK(spearman(inc, inc2) == Approx(1.0).margin(1e-12));
  CHECK(spearman(inc, dec) == Approx(-1.0).margin(1e-12));

  const std::vector<double> s_expr{65.4, 45.2, 31.1, 44.9, 29.3, 5.3, 7.0};
  const std::vector<double> human{84.2, 80.8, 66.3, 56.1, 42.9, 41.2, 34.7};
  CHECK(spearman(s_expr, human) == Approx(0.9286).margin(1e-4));
  CHECK(spearman(s_expr, human) == Approx(1.0 - 24.0 / 336.0).margin(1e-12));
}

TEST_CASE("average ranks share ties", "[stats]") {
  const auto r = average_ranks(std::vector<double>{10, 20, 20, 5});
  CHECK(r == std::vector<double>{2.0, 3.5, 3.5, 1.0});
}

TEST_CASE("spearman is invariant under strictly monotone transforms", "[stats][property]") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_vector(rng, 25, trial % 2 == 0);
    const auto y = random_vector(rng, 25, false);
    const double base = spearman(x, y);
    std::vector<double> tx(x.size()), ty(y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      switch (trial % 4) {
        case 0: tx[i] = std::exp(x[i] / 10.0); break;
        case 1: tx[i] = x[i] * x[i] * x[i]; break;
        case 2: tx[i] = std::atan(x[i]) * 3.0 - 1.0; break;
        default: tx[i] = 1.0 / (60.0 - x[i]); break;
      }
      ty[i] = 2.0 * y[i] + 100.0;
    }
    REQUIRE(spearman(tx, ty) == Approx(base).margin(1e-12));
  }
}

TEST_CASE("krippendorff alpha examples", "[stats][alpha]") {
  using Row = std::vector<std::optional<double>>;
  CHECK(krippendorff_alpha(RatingMatrix({Row{1, 3, 5}, Row{1, 3, 5}, Row{1, 3, 5}}, 1, 5)) == 1.0);
  const RatingMatrix swapped({Row{1, 2}, Row{2, 1}}, 1, 5);
  CHECK(static_cast<double>(oracle_alpha({Row{1, 2}, Row{2, 1}})) == Approx(-0.5).margin(1e-15));
  CHECK(krippendorff_alpha(swapped) == Approx(-0.5).margin(1e-12));

  try {
    krippendorff_alpha(RatingMatrix({Row{1, std::nullopt}, Row{std::nullopt, 2}}, 1, 5));
    FAIL("expected InsufficientCoincidences");
  } catch (const StatsError& e) {
    CHECK(e.kind() == StatsError::Kind::InsufficientCoincidences);
  }
}

TEST_CASE("rating matrix validation", "[stats][alpha]") {
  using Row = std::vector<std::optional<double>>;
  CHECK_THROWS_AS(RatingMatrix({Row{1, 2}}, 1, 5), StatsError);
  CHECK_THROWS_AS(RatingMatrix({Row{1}, Row{2}}, 1, 5), StatsError);
  CHECK_THROWS_AS(RatingMatrix({Row{1, 2}, Row{2}}, 1, 5), StatsError);
  CHECK_THROWS_AS(RatingMatrix({Row{1, 2}, Row{2, 6}}, 1, 5), StatsError);
}

TEST_CASE("krippendorff alpha matches the coincidence-matrix oracle", "[stats][alpha][property]") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> rating(1, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t raters = 2 + static_cast<std::size_t>(trial % 4);
    const std::size_t items = 2 + static_cast<std::size_t>(trial % 17);
    std::vector<std::vector<std::optional<double>>> m(raters, std::vector<std::optional<double>>(items));
    for (auto& row : m) {
      for (auto& r : row) {
        if (u(rng) > 0.2) r = rating(rng);
      }
    }
    try {
      const double a = krippendorff_alpha(RatingMatrix(m, 1, 5));
      const long double oracle = oracle_alpha(m);
      if (std::isfinite(static_cast<double>(oracle))) {
        REQUIRE(std::abs(a - static_cast<double>(oracle)) <= 1e-10);
        ++checked;
      }
      // Interval metric: common affine rescaling leaves alpha unchanged.
      auto scaled = m;
      for (auto& row : scaled) {
        for (auto& r : row) {
          if (r) r = 25.0 * *r - 20.0;
        }
      }
      REQUIRE(krippendorff_alpha(RatingMatrix(scaled, 5, 105)) == Approx(a).margin(1e-10));
    } catch (const StatsError& e) {
      REQUIRE(e.kind() == StatsError::Kind::InsufficientCoincidences);
    }
  }
  CHECK(checked > 150);
}

TEST_CASE("paired t-test", "[stats][ttest]") {
  const std::vector<double> a{2, 2, 2, 2, 0.5}, b{1, 1, 1, 1, 1};
  const auto r = paired_t_test(a, b);
  CHECK(r.df == 4.0);
  CHECK(r.t == Approx(7.0 / 3.0).margin(1e-12));
  const boost::math::students_t dist(4.0);
  const double oracle = 2.0 * boost::math::cdf(boost::math::complement(dist, 7.0 / 3.0));
  CHECK(r.p_two_sided == Approx(oracle).epsilon(1e-10));
  CHECK(r.p_two_sided == Approx(0.0800).margin(5e-4));

  try {
    paired_t_test(a, a);
    FAIL("expected ZeroVarianceDifferences");
  } catch (const StatsError& e) {
    CHECK(e.kind() == StatsError::Kind::ZeroVarianceDifferences);
  }

  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::vector<double> x(30), y(30, 0.0);
  for (auto& v : x) v = 10.0 + noise(rng);
  CHECK(paired_t_test(x, y).p_two_sided < 1e-10);
}

TEST_CASE("t-test p-values match an independent implementation", "[stats][ttest][property]") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 60);
    const double shift = static_cast<double>(trial % 7) * 0.3;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = g(rng) + shift;
      b[i] = g(rng);
    }
    const auto r = paired_t_test(a, b);
    const auto s = paired_t_test(b, a);
    REQUIRE(s.t == -r.t);
    REQUIRE(s.p_two_sided == r.p_two_sided);
    const boost::math::students_t dist(r.df);
    const double oracle = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    REQUIRE(r.p_two_sided == Approx(oracle).epsilon(1e-10).margin(1e-300));
  }
}
