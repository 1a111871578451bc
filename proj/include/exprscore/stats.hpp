#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace exprscore::stats {

class StatsError : public std::runtime_error {
 public:
  enum class Kind {
    LengthMismatch,
    ZeroVariance,
    InsufficientData,
    InsufficientCoincidences,
    ZeroVarianceDifferences,
    InvalidRatings,
  };

  StatsError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw StatsError(StatsError::Kind::LengthMismatch, "sequences differ in length");
  if (x.size() < 2) throw StatsError(StatsError::Kind::InsufficientData, "need at least two observations");
}

}  // namespace detail

/// Product-moment correlation. Returns 0 when exactly one input is constant;
/// both constant is an error.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 && syy == 0.0) throw StatsError(StatsError::Kind::ZeroVariance, "both sequences are constant");
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

/// Raters x items grid of optional ratings on a declared scale.
class RatingMatrix {
 public:
  RatingMatrix(std::vector<std::vector<std::optional<double>>> ratings, double scale_lo, double scale_hi)
      : ratings_(std::move(ratings)), lo_(scale_lo), hi_(scale_hi) {
    using Kind = StatsError::Kind;
    if (ratings_.size() < 2) throw StatsError(Kind::InvalidRatings, "need at least two raters");
    const std::size_t items = ratings_.front().size();
    if (items < 2) throw StatsError(Kind::InvalidRatings, "need at least two items");
    for (const auto& row : ratings_) {
      if (row.size() != items) throw StatsError(Kind::InvalidRatings, "ragged rating matrix");
      for (const auto& r : row) {
        if (r && !(*r >= lo_ && *r <= hi_)) throw StatsError(Kind::InvalidRatings, "rating outside scale");
      }
    }
  }

  std::size_t raters() const noexcept { return ratings_.size(); }
  std::size_t items() const noexcept { return ratings_.front().size(); }
  const std::optional<double>& at(std::size_t rater, std::size_t item) const { return ratings_[rater][item]; }
  double scale_lo() const noexcept { return lo_; }
  double scale_hi() const noexcept { return hi_; }

 private:
  std::vector<std::vector<std::optional<double>>> ratings_;
  double lo_;
  double hi_;
};

enum class AlphaMetric { Interval };

/// Krippendorff's alpha with the squared-difference (interval) metric.
///
/// Items with fewer than two ratings are not pairable and drop out. The
/// coincidence-matrix sums reduce to closed forms: each item contributes
/// 2 m SS_item / (m - 1) to the observed disagreement, and the expected
/// disagreement is 2 n SS_all over all n pairable values, where SS is the
/// sum of squared deviations from the respective mean.
inline double krippendorff_alpha(const RatingMatrix& ratings, AlphaMetric = AlphaMetric::Interval) {
  double observed = 0.0;
  std::vector<double> pairable_values;
  std::size_t units = 0;
  for (std::size_t item = 0; item < ratings.items(); ++item) {
    double s1 = 0.0;
    std::size_t m = 0;
    for (std::size_t r = 0; r < ratings.raters(); ++r) {
      if (const auto& v = ratings.at(r, item)) {
        s1 += *v;
        ++m;
      }
    }
    if (m < 2) continue;
    const double md = static_cast<double>(m);
    // Per-item sum of squared differences over ordered pairs, computed around
    // the item mean for accuracy.
    const double mean = s1 / md;
    double centred = 0.0;
    for (std::size_t r = 0; r < ratings.raters(); ++r) {
      if (const auto& v = ratings.at(r, item)) {
        centred += (*v - mean) * (*v - mean);
        pairable_values.push_back(*v);
      }
    }
    observed += 2.0 * md * centred / (md - 1.0);
    ++units;
  }
  if (units == 0) {
    throw StatsError(StatsError::Kind::InsufficientCoincidences, "no item has two or more ratings");
  }
  if (observed == 0.0) return 1.0;
  const double n = static_cast<double>(pairable_values.size());
  const double grand_mean = std::accumulate(pairable_values.begin(), pairable_values.end(), 0.0) / n;
  double spread = 0.0;
  for (double v : pairable_values) spread += (v - grand_mean) * (v - grand_mean);
  const double expected = 2.0 * n * spread;
  if (expected <= 0.0) return 1.0;
  return 1.0 - (n - 1.0) * observed / expected;
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double md = m;
    const double m2 = 2.0 * md;
    double aa = md * (b - md) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + md) * (qab + md) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability of Student's t with df degrees of freedom.
inline double student_t_two_sided(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p_two_sided = 1.0;
  double df = 0.0;
};

inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double nd = static_cast<double>(n);
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / nd;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  if (ss == 0.0) {
    throw StatsError(StatsError::Kind::ZeroVarianceDifferences, "paired differences have zero variance");
  }
  const double sd = std::sqrt(ss / (nd - 1.0));
  TTestResult r;
  r.df = nd - 1.0;
  r.t = mean / (sd / std::sqrt(nd));
  r.p_two_sided = student_t_two_sided(r.t, r.df);
  return r;
}

}  // namespace exprscore::stats
