#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "exprscore/audio.hpp"
#include "exprscore/features.hpp"
#include "exprscore/numeric.hpp"

namespace exprscore {

class QualityError : public std::runtime_error {
 public:
  enum class Kind { MissingColumn, OutOfRange, DuplicateId, Malformed, Io };

  QualityError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

enum class QualitySource { Sidecar, Estimated };

inline const char* to_string(QualitySource s) { return s == QualitySource::Sidecar ? "sidecar" : "estimated"; }

inline constexpr double kQualityMin = 1.0;
inline constexpr double kQualityMax = 5.0;
inline constexpr double kHyperCleanThreshold = 3.5;

/// DNSMOS-style quality scores, each in [1, 5].
struct QualityMetrics {
  double ovrl = kQualityMin;
  double sig = kQualityMin;
  double bak = kQualityMin;
  double p808 = kQualityMin;
  QualitySource source = QualitySource::Estimated;

  std::array<double, 4> values() const { return {ovrl, sig, bak, p808}; }

  bool valid() const {
    const auto v = values();
    return std::all_of(v.begin(), v.end(), [](double x) { return x >= kQualityMin && x <= kQualityMax; });
  }

  friend bool operator==(const QualityMetrics&, const QualityMetrics&) = default;
};

/// Mean of the four metrics.
inline double mean_quality(const QualityMetrics& q) { return (q.ovrl + q.sig + q.bak + q.p808) / 4.0; }

/// True when every metric strictly exceeds the threshold.
inline bool is_hyper_clean(const QualityMetrics& q, double threshold = kHyperCleanThreshold) {
  return q.ovrl > threshold && q.sig > threshold && q.bak > threshold && q.p808 > threshold;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.emplace_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses a quality sidecar (CSV with columns id,ovrl,sig,bak,p808 in any
/// order). Values outside [1, 5] are rejected.
inline std::map<std::string, QualityMetrics> parse_sidecar(std::istream& in) {
  using Kind = QualityError::Kind;
  std::map<std::string, QualityMetrics> out;
  std::string line;
  if (!std::getline(in, line)) throw QualityError(Kind::MissingColumn, "sidecar is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = detail::split_csv_line(line);
  constexpr std::array<const char*, 5> names{"id", "ovrl", "sig", "bak", "p808"};
  std::array<std::size_t, 5> col{};
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto it = std::find(header.begin(), header.end(), names[k]);
    if (it == header.end()) throw QualityError(Kind::MissingColumn, std::string("sidecar missing column ") + names[k]);
    col[k] = static_cast<std::size_t>(it - header.begin());
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw QualityError(Kind::Malformed, "sidecar line " + std::to_string(line_no) + ": wrong field count");
    }
    std::array<double, 4> v{};
    for (std::size_t k = 1; k < 5; ++k) {
      const auto parsed = detail::parse_double(fields[col[k]]);
      if (!parsed) throw QualityError(Kind::Malformed, "sidecar line " + std::to_string(line_no) + ": bad number");
      if (!(*parsed >= kQualityMin && *parsed <= kQualityMax)) {
        throw QualityError(Kind::OutOfRange, "sidecar line " + std::to_string(line_no) + ": " + names[k] +
                                                 " outside [1, 5]");
      }
      v[k - 1] = *parsed;
    }
    const auto& id = fields[col[0]];
    if (!out.emplace(id, QualityMetrics{v[0], v[1], v[2], v[3], QualitySource::Sidecar}).second) {
      throw QualityError(Kind::DuplicateId, "sidecar duplicate id " + id);
    }
  }
  return out;
}

inline std::map<std::string, QualityMetrics> load_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw QualityError(QualityError::Kind::Io, "cannot open sidecar " + path.string());
  return parse_sidecar(in);
}

/// Signal-derived stand-in for an external quality model.
///
/// BAK maps the spread between the 95th and 10th percentile frame energies
/// (a crude SNR) from [0, 40] dB onto [1, 5]. SIG starts from the voiced
/// fraction (full credit at 50% voiced) and is scaled down by clipping.
/// OVRL is the mean of SIG and BAK and P.808 repeats OVRL.
inline QualityMetrics estimate_quality(const AudioClip& clip, const ProsodicFeatures& features) {
  std::vector<double> db(features.frame_power.size());
  std::transform(features.frame_power.begin(), features.frame_power.end(), db.begin(), power_to_db);
  const double snr_proxy = db.empty() ? 0.0 : numeric::percentile(db, 0.95) - numeric::percentile(db, 0.10);
  const double bak = kQualityMin + (kQualityMax - kQualityMin) * std::clamp(snr_proxy / 40.0, 0.0, 1.0);

  const auto samples = clip.samples();
  const auto clipped = std::count_if(samples.begin(), samples.end(), [](float s) { return std::abs(s) >= 0.999f; });
  const double clip_fraction = static_cast<double>(clipped) / static_cast<double>(samples.size());
  const auto& voiced = features.voiced;
  const double voiced_fraction =
      voiced.empty() ? 0.0
                     : static_cast<double>(std::count(voiced.begin(), voiced.end(), true)) /
                           static_cast<double>(voiced.size());
  const double sig = kQualityMin + (kQualityMax - kQualityMin) * std::clamp(voiced_fraction / 0.5, 0.0, 1.0) *
                                       (1.0 - std::min(1.0, 10.0 * clip_fraction));

  QualityMetrics q;
  q.sig = std::clamp(sig, kQualityMin, kQualityMax);
  q.bak = std::clamp(bak, kQualityMin, kQualityMax);
  q.ovrl = std::clamp((q.sig + q.bak) / 2.0, kQualityMin, kQualityMax);
  q.p808 = q.ovrl;
  q.source = QualitySource::Estimated;
  return q;
}

inline QualityMetrics estimate_quality(const AudioClip& clip, const FrameConfig& cfg = {}) {
  return estimate_quality(clip, analyze(clip, 0.4, cfg));
}

}  // namespace exprscore
