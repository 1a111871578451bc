#include <catch_amalgamated.hpp>

#include <fstream>

#include "exprscore/scorers.hpp"
#include "exprscore/synth.hpp"
#include "test_util.hpp"

using namespace exprscore;
using Catch::Approx;

namespace {

QualityMetrics uniform_q(double v) { return {v, v, v, v, QualitySource::Sidecar}; }

// Normal-branch value for the same metrics, evaluated by hand.
double normal_branch(const QualityMetrics& q, int level) {
  const double s10 = (level - 1) + 2.0 * (mean_quality(q) - 1.0) / 4.0;
  return 10.0 * std::clamp(s10, level - 1.0, level + 1.0);
}

FeatureSummary at_means(const ScorerCalibration& cal) {
  FeatureSummary s;
  s.f0_range_st = cal.reference.at("f0_range_st").mean;
  s.f0_std_st = cal.reference.at("f0_std_st").mean;
  s.f0_turns_per_s = cal.reference.at("f0_turns_per_s").mean;
  s.energy_std_db = cal.reference.at("energy_std_db").mean;
  s.energy_range_db = cal.reference.at("energy_range_db").mean;
  s.pause_cv = cal.reference.at("pause_cv").mean;
  s.syllable_rate_proxy = cal.reference.at("syllable_rate_proxy").mean;
  return s;
}

void set_feature(FeatureSummary& s, const std::string& name, double v) {
  if (name == "f0_range_st") s.f0_range_st = v;
  else if (name == "f0_std_st") s.f0_std_st = v;
  else if (name == "f0_turns_per_s") s.f0_turns_per_s = v;
  else if (name == "energy_std_db") s.energy_std_db = v;
  else if (name == "energy_range_db") s.energy_range_db = v;
  else if (name == "pause_cv") s.pause_cv = v;
  else if (name == "syllable_rate_proxy") s.syllable_rate_proxy = v;
}

FeatureSummary summary_of(const synth::Samples& s) { return summarize(analyze(synth::clip(s))); }

}  // namespace

TEST_CASE("spontaneity fixtures", "[scorers][spontaneity]") {
  CHECK(score_spontaneity(uniform_q(3), SpontaneityConfig::for_level(5)) == Approx(50.0).margin(1e-9));
  const auto penal = score_spontaneity_detailed(uniform_q(4), SpontaneityConfig::for_level(1));
  CHECK(penal.penalized);
  CHECK(penal.score == Approx(10.0 / 3.0).margin(1e-9));
  CHECK(penal.score == Approx(3.33).margin(0.005));
  const auto top = score_spontaneity_detailed(uniform_q(5), SpontaneityConfig::for_level(9));
  CHECK_FALSE(top.penalized);
  CHECK(top.score == Approx(100.0).margin(1e-9));
}

TEST_CASE("spontaneity rejects invalid base levels", "[scorers][spontaneity]") {
  for (int level : {0, 2, 4, 8, 10, 11, -1}) {
    try {
      score_spontaneity(uniform_q(3), SpontaneityConfig::for_level(level));
      FAIL("expected InvalidBaseLevel");
    } catch (const ScorerError& e) {
      CHECK(e.kind() == ScorerError::Kind::InvalidBaseLevel);
    }
  }
}

TEST_CASE("punitive ranges sit below the normal ranges", "[scorers][spontaneity]") {
  const SpontaneityConfig cfg;
  CHECK(cfg.punitive_ranges.at(1) == std::pair<double, double>{0.0, 0.5});
  double prev_lo = -1.0;
  for (int level : {1, 3, 5, 7}) {
    const auto [lo, hi] = cfg.punitive_ranges.at(level);
    CHECK(hi - lo == Approx(0.5));
    CHECK(lo > prev_lo);
    prev_lo = lo;
    // Disjoint from and below [level - 1, level + 1], except that level 1's
    // range starts at the same floor of 0.
    CHECK(hi <= level + 1.0);
    if (level > 1) CHECK(hi < level - 1.0);
  }
}

TEST_CASE("spontaneity is monotone within each branch", "[scorers][spontaneity][property]") {
  for (int level : {1, 3, 5, 7, 9}) {
    const auto cfg = SpontaneityConfig::for_level(level);
    double prev_normal = -1.0;
    for (double m = 1.0; m <= 3.5; m += 0.01) {
      const auto r = score_spontaneity_detailed(uniform_q(m), cfg);
      REQUIRE_FALSE(r.penalized);
      REQUIRE(r.score >= prev_normal);
      prev_normal = r.score;
    }
    double prev_penal = 1e9;
    for (double m = 3.51; m <= 5.0; m += 0.01) {
      const auto r = score_spontaneity_detailed(uniform_q(m), cfg);
      REQUIRE(r.penalized == (level < 9));
      if (r.penalized) {
        REQUIRE(r.score <= prev_penal);
        prev_penal = r.score;
      }
    }
  }
}

TEST_CASE("exactly one branch fires and scores stay in range", "[scorers][spontaneity][property]") {
  synth::Rng rng(21);
  for (int i = 0; i < 20000; ++i) {
    QualityMetrics q{rng.uniform(1, 5), rng.uniform(1, 5), rng.uniform(1, 5), rng.uniform(1, 5), QualitySource::Sidecar};
    if (i % 2 == 0) q = {rng.uniform(3.4, 5), rng.uniform(3.4, 5), rng.uniform(3.4, 5), rng.uniform(3.4, 5)};
    const int level = 1 + 2 * static_cast<int>(rng.uniform(0.0, 5.0));
    const auto r = score_spontaneity_detailed(q, SpontaneityConfig::for_level(level));
    REQUIRE(r.penalized == (is_hyper_clean(q) && level < 9));
    REQUIRE(r.score >= 0.0);
    REQUIRE(r.score <= 100.0);
    if (!r.penalized) {
      REQUIRE(r.score >= 10.0 * (level - 1) - 1e-9);
      REQUIRE(r.score <= 10.0 * (level + 1) + 1e-9);
    }
  }
}

TEST_CASE("hyper-clean scores fall below the normal branch on a grid", "[scorers][spontaneity][property]") {
  std::vector<double> grid;
  for (int k = 0; k <= 7; ++k) grid.push_back(3.6 + 0.2 * k);
  for (int level : {1, 3, 5, 7}) {
    const auto cfg = SpontaneityConfig::for_level(level);
    for (double a : grid) {
      for (double b : grid) {
        for (double c : grid) {
          for (double d : grid) {
            const QualityMetrics q{a, b, c, d, QualitySource::Sidecar};
            const auto r = score_spontaneity_detailed(q, cfg);
            REQUIRE(r.penalized);
            REQUIRE(r.score < normal_branch(q, level));
            REQUIRE(r.score <= 10.0 * cfg.punitive_ranges.at(level).second + 1e-9);
            if (level > 1) REQUIRE(r.score < 10.0 * (level - 1));
          }
        }
      }
    }
  }
}

TEST_CASE("proxy scores at the calibration means are 50", "[scorers][proxy]") {
  const auto cal = default_calibration();
  const auto s = at_means(cal);
  CHECK(score_emotion_proxy(s, cal) == Approx(50.0).margin(1e-9));
  CHECK(score_prosody_proxy(s, cal) == Approx(50.0).margin(1e-9));
}

TEST_CASE("absent pitch pins pitch z-scores", "[scorers][proxy]") {
  const auto cal = default_calibration();
  auto s = at_means(cal);
  s.f0_range_st.reset();
  s.f0_std_st.reset();
  s.f0_turns_per_s.reset();
  CHECK(score_emotion_proxy(s, cal) == Approx(100.0 * numeric::logistic(-2.0 * (0.35 + 0.20))).margin(1e-9));
  CHECK(score_prosody_proxy(s, cal) == Approx(100.0 * numeric::logistic(-2.0 * (0.35 + 0.25))).margin(1e-9));
  CHECK(score_emotion_proxy(s, cal) < 50.0);
}

TEST_CASE("flat tone scores low on both proxies", "[scorers][proxy]") {
  const auto cal = default_calibration();
  const auto flat = summary_of(synth::sine(200, 4.0));
  const double emo = score_emotion_proxy(flat, cal);
  const double pros = score_prosody_proxy(flat, cal);
  CHECK(emo < 25.0);
  CHECK(pros < 25.0);
  // Regression values for the shipped calibration.
  CHECK(emo == Approx(0.687989232698).margin(1e-6));
  CHECK(pros == Approx(2.868529762030).margin(1e-6));
}

TEST_CASE("proxy comparisons on constructed clips", "[scorers][proxy]") {
  const auto cal = default_calibration();
  const auto flat = summary_of(synth::sine(200, 4.0));
  const auto lively = summary_of(synth::amplitude_modulate(synth::linear_sweep(150, 350, 4.0), 4.0, 0.8));
  CHECK(score_emotion_proxy(lively, cal) > score_emotion_proxy(flat, cal));
  const auto alt = summary_of(synth::alternating(180, 280, 0.25, 4.0));
  CHECK(score_prosody_proxy(alt, cal) > score_prosody_proxy(flat, cal));
}

TEST_CASE("proxy scores are bounded and monotone in each weighted feature", "[scorers][proxy][property]") {
  const auto cal = default_calibration();
  synth::Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = at_means(cal);
    for (const char* name : kProxyFeatures) {
      const auto& ref = cal.reference.at(name);
      set_feature(s, name, ref.mean + ref.std * rng.uniform(-3.0, 3.0));
    }
    for (const auto* weights : {&cal.emotion_weights, &cal.prosody_weights}) {
      for (const auto& [name, w] : *weights) {
        const auto& ref = cal.reference.at(name);
        auto lo = s, hi = s;
        const double base = *feature_value(s, name);
        set_feature(hi, name, base + 0.5 * ref.std);
        auto score = [&](const FeatureSummary& f) {
          return 100.0 * numeric::logistic(cal.slope * proxy_raw(f, cal, *weights));
        };
        REQUIRE(score(lo) >= 0.0);
        REQUIRE(score(hi) <= 100.0);
        REQUIRE(score(hi) >= score(lo));
        if (std::abs(proxy_raw(lo, cal, *weights)) < 5.0) REQUIRE(score(hi) > score(lo));
      }
    }
  }
}

TEST_CASE("halving amplitude leaves proxy scores unchanged", "[scorers][proxy][property]") {
  const auto cal = default_calibration();
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    synth::SpeechStyle style;
    style.pause_prob = 0.3;
    const auto samples = synth::speechlike(style, 5.0, seed);
    const auto a = summary_of(samples);
    const auto b = summary_of(synth::scaled(samples, 0.5));
    REQUIRE(a.f0_range_st == b.f0_range_st);
    REQUIRE(a.f0_std_st == b.f0_std_st);
    REQUIRE(a.f0_turns_per_s == b.f0_turns_per_s);
    CHECK(score_emotion_proxy(b, cal) == Approx(score_emotion_proxy(a, cal)).margin(1e-6));
    CHECK(score_prosody_proxy(b, cal) == Approx(score_prosody_proxy(a, cal)).margin(1e-6));
  }
}

TEST_CASE("shipped calibration file matches the built-in profile", "[scorers][calibration]") {
  const auto file = load_calibration(EXPRSCORE_SOURCE_DIR "/data/calibration.json");
  CHECK(to_json(file) == to_json(default_calibration()));
  CHECK(calibration_from_json(to_json(default_calibration())).reference.size() == kProxyFeatures.size());
}

TEST_CASE("calibration validation", "[scorers][calibration]") {
  auto bad_std = default_calibration();
  bad_std.reference["pause_cv"].std = 0.0;
  CHECK_THROWS_AS(bad_std.validate(), ScorerError);

  auto bad_weights = default_calibration();
  bad_weights.emotion_weights["f0_range_st"] = 0.5;
  CHECK_THROWS_AS(bad_weights.validate(), ScorerError);

  auto j = to_json(default_calibration());
  j["format_version"] = 7;
  CHECK_THROWS_AS(calibration_from_json(j), ScorerError);
  CHECK_THROWS_AS(load_calibration("/nonexistent.json"), ScorerError);
}

TEST_CASE("native scoring attaches provenance", "[scorers]") {
  const auto s = score_native(summary_of(synth::sine(200, 2.0)), uniform_q(3), SpontaneityConfig::for_level(5),
                              default_calibration());
  CHECK(s.valid());
  CHECK(s.s_spon == Approx(50.0));
  CHECK(std::string(to_string(s.emo_source)) == "native_proxy");
  CHECK(std::string(to_string(s.spon_source)) == "heuristic");
}
