// Regenerates the default proxy-scorer calibration from a fixed synthetic
// reference set of speech-like utterances.
//
//   make_calibration [output.json]

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <vector>

#include "exprscore/features.hpp"
#include "exprscore/numeric.hpp"
#include "exprscore/scorers.hpp"
#include "exprscore/synth.hpp"

using namespace exprscore;

namespace {

constexpr int kClips = 160;
constexpr double kSeconds = 6.0;

synth::SpeechStyle draw_style(synth::Rng& rng) {
  synth::SpeechStyle s;
  s.base_hz = rng.uniform(90.0, 260.0);
  s.pitch_span_st = rng.uniform(0.5, 9.0);
  s.contour_rate_hz = rng.uniform(0.5, 3.0);
  s.syllable_rate_hz = rng.uniform(2.5, 6.0);
  s.loudness_spread_db = rng.uniform(1.0, 12.0);
  s.pause_prob = rng.uniform(0.0, 0.4);
  s.noise_rms = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0005, 0.005);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  synth::Rng styles(20240917);
  std::map<std::string, std::vector<double>> values;
  for (int i = 0; i < kClips; ++i) {
    const auto style = draw_style(styles);
    const auto clip = synth::clip(synth::speechlike(style, kSeconds, 1000 + static_cast<std::uint64_t>(i)));
    const auto summary = summarize(analyze(clip));
    for (const char* name : kProxyFeatures) {
      if (const auto v = feature_value(summary, name)) values[name].push_back(*v);
    }
  }

  ScorerCalibration cal;
  cal.reference_set = "synthetic-speechlike-v1";
  for (const auto& [name, v] : values) cal.reference[name] = {numeric::mean(v), numeric::stddev(v)};
  cal.emotion_weights = default_emotion_weights();
  cal.prosody_weights = default_prosody_weights();
  cal.slope = 1.0;
  cal.validate();

  const std::string text = to_json(cal).dump(2) + "\n";
  if (argc > 1) {
    std::ofstream out(argv[1], std::ios::binary | std::ios::trunc);
    if (!out) {
      std::cerr << "cannot write " << argv[1] << "\n";
      return 1;
    }
    out << text;
  } else {
    std::cout << text;
  }
  for (const auto& [name, st] : cal.reference) std::fprintf(stderr, "{\"%s\", {%.17g, %.17g}},\n", name.c_str(), st.mean, st.std);
  return 0;
}
