#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

#include "exprscore/features.hpp"
#include "exprscore/numeric.hpp"
#include "exprscore/quality.hpp"

namespace exprscore {

class ScorerError : public std::runtime_error {
 public:
  enum class Kind {
    InvalidBaseLevel,
    InvalidCalibration,
    ScorerUnavailable,
    ProtocolViolation,
    ScoreOutOfRange,
    AnnotatorUnavailable,
    UnparseableResponse,
    RatingOutOfScale,
    InvalidConfig,
  };

  ScorerError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

enum class Dimension { Emotion, Prosody, Spontaneity };

inline const char* to_string(Dimension d) {
  switch (d) {
    case Dimension::Emotion: return "emotion";
    case Dimension::Prosody: return "prosody";
    case Dimension::Spontaneity: return "spontaneity";
  }
  return "?";
}

enum class Provenance { NativeProxy, ExternalScorer, LmmAnnotator, Heuristic };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::NativeProxy: return "native_proxy";
    case Provenance::ExternalScorer: return "external_scorer";
    case Provenance::LmmAnnotator: return "lmm_annotator";
    case Provenance::Heuristic: return "heuristic";
  }
  return "?";
}

/// The three sub-dimension scores on the 0-100 scale.
struct SubScores {
  double s_emo = 0.0;
  double s_pros = 0.0;
  double s_spon = 0.0;
  Provenance emo_source = Provenance::NativeProxy;
  Provenance pros_source = Provenance::NativeProxy;
  Provenance spon_source = Provenance::Heuristic;

  std::array<double, 3> values() const { return {s_emo, s_pros, s_spon}; }

  bool valid() const {
    const auto v = values();
    return std::all_of(v.begin(), v.end(), [](double s) { return s >= 0.0 && s <= 100.0; });
  }
};

// ---------------------------------------------------------------------------
// Spontaneity heuristic
// ---------------------------------------------------------------------------

inline bool is_valid_base_level(int level) { return level >= 1 && level <= 9 && level % 2 == 1; }

/// Punitive range for base levels without a published one: width 0.5,
/// starting at 0.25 * (level - 1).
inline std::pair<double, double> default_punitive_range(int level) {
  const double lo = 0.25 * static_cast<double>(level - 1);
  return {lo, lo + 0.5};
}

struct SpontaneityConfig {
  int base_level = 5;
  int max_level = 9;
  double quality_threshold = kHyperCleanThreshold;
  double metric_lo = kQualityMin;
  double metric_hi = kQualityMax;
  // Level -> (lo, hi) on the 0-10 scale.
  std::map<int, std::pair<double, double>> punitive_ranges = {
      {1, {0.0, 0.5}}, {3, default_punitive_range(3)}, {5, default_punitive_range(5)},
      {7, default_punitive_range(7)}, {9, default_punitive_range(9)}};

  static SpontaneityConfig for_level(int level) {
    SpontaneityConfig cfg;
    cfg.base_level = level;
    return cfg;
  }
};

struct SpontaneityResult {
  double score = 0.0;  // 0-100
  bool penalized = false;
};

/// Spontaneity from dataset base level and quality metrics.
///
/// A hyper-clean sample whose base level is below the maximum is mapped in
/// reverse (cleaner is lower) onto the level's punitive range, scaling the
/// mean metric over (threshold, metric_hi]. Every other sample maps the mean
/// metric affinely from [metric_lo, metric_hi] onto [level - 1, level + 1].
/// The 0-10 result is presented x10.
inline SpontaneityResult score_spontaneity_detailed(const QualityMetrics& q, const SpontaneityConfig& cfg) {
  const int level = cfg.base_level;
  if (!is_valid_base_level(level)) {
    throw ScorerError(ScorerError::Kind::InvalidBaseLevel,
                      "spontaneity base level must be one of 1,3,5,7,9 (got " + std::to_string(level) + ")");
  }
  const double m = mean_quality(q);
  SpontaneityResult r;
  double s10 = 0.0;
  if (is_hyper_clean(q, cfg.quality_threshold) && level < cfg.max_level) {
    const auto it = cfg.punitive_ranges.find(level);
    const auto [lo, hi] = it != cfg.punitive_ranges.end() ? it->second : default_punitive_range(level);
    s10 = lo + (cfg.metric_hi - m) / (cfg.metric_hi - cfg.quality_threshold) * (hi - lo);
    s10 = std::clamp(s10, lo, hi);
    r.penalized = true;
  } else {
    const double base = static_cast<double>(level - 1);
    s10 = base + 2.0 * (m - cfg.metric_lo) / (cfg.metric_hi - cfg.metric_lo);
    s10 = std::clamp(s10, base, base + 2.0);
  }
  r.score = std::clamp(10.0 * s10, 0.0, 100.0);
  return r;
}

inline double score_spontaneity(const QualityMetrics& q, const SpontaneityConfig& cfg) {
  return score_spontaneity_detailed(q, cfg).score;
}

// ---------------------------------------------------------------------------
// Acoustic proxies for emotion and prosody
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 7> kProxyFeatures{
    "f0_range_st", "f0_std_st", "f0_turns_per_s", "energy_std_db", "energy_range_db", "pause_cv", "syllable_rate_proxy"};

// z-score assigned to pitch features of clips with no voiced frames.
inline constexpr double kAbsentPitchZ = -2.0;

inline std::optional<double> feature_value(const FeatureSummary& s, const std::string& name) {
  if (name == "f0_range_st") return s.f0_range_st;
  if (name == "f0_std_st") return s.f0_std_st;
  if (name == "f0_turns_per_s") return s.f0_turns_per_s;
  if (name == "energy_std_db") return s.energy_std_db;
  if (name == "energy_range_db") return s.energy_range_db;
  if (name == "pause_cv") return s.pause_cv;
  if (name == "syllable_rate_proxy") return s.syllable_rate_proxy;
  if (name == "voiced_fraction") return s.voiced_fraction;
  throw ScorerError(ScorerError::Kind::InvalidCalibration, "unknown feature " + name);
}

struct FeatureStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Reference statistics and weights for the proxy scorers.
struct ScorerCalibration {
  static constexpr int kFormatVersion = 1;

  std::string reference_set;
  std::map<std::string, FeatureStats> reference;
  std::map<std::string, double> emotion_weights;
  std::map<std::string, double> prosody_weights;
  double slope = 1.0;

  void validate() const {
    using Kind = ScorerError::Kind;
    for (const auto& [name, st] : reference) {
      if (!(st.std > 0.0) || !std::isfinite(st.mean)) {
        throw ScorerError(Kind::InvalidCalibration, "calibration std must be positive for " + name);
      }
    }
    for (const auto* weights : {&emotion_weights, &prosody_weights}) {
      double total = 0.0;
      for (const auto& [name, w] : *weights) {
        if (!reference.count(name)) throw ScorerError(Kind::InvalidCalibration, "no reference stats for " + name);
        (void)feature_value(FeatureSummary{}, name);
        total += w;
      }
      if (std::abs(total - 1.0) > 1e-9) throw ScorerError(Kind::InvalidCalibration, "weights must sum to 1");
    }
    if (!(slope > 0.0)) throw ScorerError(Kind::InvalidCalibration, "slope must be positive");
  }
};

inline nlohmann::json to_json(const ScorerCalibration& cal) {
  nlohmann::json j;
  j["format"] = "exprscore-calibration";
  j["format_version"] = ScorerCalibration::kFormatVersion;
  j["reference_set"] = cal.reference_set;
  j["slope"] = cal.slope;
  for (const auto& [name, st] : cal.reference) j["features"][name] = {{"mean", st.mean}, {"std", st.std}};
  j["weights"]["emotion"] = cal.emotion_weights;
  j["weights"]["prosody"] = cal.prosody_weights;
  return j;
}

inline ScorerCalibration calibration_from_json(const nlohmann::json& j) {
  using Kind = ScorerError::Kind;
  try {
    if (j.at("format_version").get<int>() != ScorerCalibration::kFormatVersion) {
      throw ScorerError(Kind::InvalidCalibration, "unsupported calibration format_version");
    }
    ScorerCalibration cal;
    cal.reference_set = j.value("reference_set", "");
    cal.slope = j.at("slope").get<double>();
    for (const auto& [name, st] : j.at("features").items()) {
      cal.reference[name] = {st.at("mean").get<double>(), st.at("std").get<double>()};
    }
    cal.emotion_weights = j.at("weights").at("emotion").get<std::map<std::string, double>>();
    cal.prosody_weights = j.at("weights").at("prosody").get<std::map<std::string, double>>();
    cal.validate();
    return cal;
  } catch (const nlohmann::json::exception& e) {
    throw ScorerError(Kind::InvalidCalibration, std::string("bad calibration document: ") + e.what());
  }
}

inline ScorerCalibration load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScorerError(ScorerError::Kind::InvalidCalibration, "cannot open calibration " + path.string());
  try {
    return calibration_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ScorerError(ScorerError::Kind::InvalidCalibration, std::string("bad calibration file: ") + e.what());
  }
}

inline const std::map<std::string, double>& default_emotion_weights() {
  static const std::map<std::string, double> w{
      {"f0_range_st", 0.35}, {"energy_std_db", 0.25}, {"f0_std_st", 0.20}, {"syllable_rate_proxy", 0.20}};
  return w;
}

inline const std::map<std::string, double>& default_prosody_weights() {
  static const std::map<std::string, double> w{
      {"f0_turns_per_s", 0.35}, {"f0_range_st", 0.25}, {"pause_cv", 0.20}, {"energy_range_db", 0.20}};
  return w;
}

/// Built-in profile; identical to data/calibration.json, which
/// tools/make_calibration regenerates.
inline ScorerCalibration default_calibration() {
  ScorerCalibration cal;
  cal.reference_set = "synthetic-speechlike-v1";
  cal.reference = {
      {"energy_range_db", {17.556782692114421, 1.7499384521210097}},
      {"energy_std_db", {5.5083180329092203, 0.41635598465759582}},
      {"f0_range_st", {8.0666820316557466, 4.3795471625604909}},
      {"f0_std_st", {2.5301790115944409, 1.3699474395969973}},
      {"f0_turns_per_s", {4.0808629278320039, 1.7092791573021975}},
      {"pause_cv", {0.10339270749524927, 0.094158350563796095}},
      {"syllable_rate_proxy", {3.0375000000000001, 0.93354722251564026}},
  };
  cal.emotion_weights = default_emotion_weights();
  cal.prosody_weights = default_prosody_weights();
  cal.slope = 1.0;
  return cal;
}

/// Weighted sum of calibration z-scores, before the logistic squash.
inline double proxy_raw(const FeatureSummary& summary, const ScorerCalibration& cal,
                        const std::map<std::string, double>& weights) {
  double raw = 0.0;
  for (const auto& [name, w] : weights) {
    const auto& ref = cal.reference.at(name);
    const auto value = feature_value(summary, name);
    const double z = value ? (*value - ref.mean) / ref.std : kAbsentPitchZ;
    raw += w * z;
  }
  return raw;
}

inline double score_emotion_proxy(const FeatureSummary& summary, const ScorerCalibration& cal) {
  return 100.0 * numeric::logistic(cal.slope * proxy_raw(summary, cal, cal.emotion_weights));
}

inline double score_prosody_proxy(const FeatureSummary& summary, const ScorerCalibration& cal) {
  return 100.0 * numeric::logistic(cal.slope * proxy_raw(summary, cal, cal.prosody_weights));
}

/// All three native sub-scores for one clip.
inline SubScores score_native(const FeatureSummary& summary, const QualityMetrics& quality,
                              const SpontaneityConfig& spontaneity, const ScorerCalibration& cal) {
  SubScores s;
  s.s_emo = score_emotion_proxy(summary, cal);
  s.s_pros = score_prosody_proxy(summary, cal);
  s.s_spon = score_spontaneity(quality, spontaneity);
  s.emo_source = Provenance::NativeProxy;
  s.pros_source = Provenance::NativeProxy;
  s.spon_source = Provenance::Heuristic;
  return s;
}

}  // namespace exprscore
