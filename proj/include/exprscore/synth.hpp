#pragma once

// Deterministic synthetic signals: test fixtures and the reference set behind
// the default scorer calibration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "exprscore/audio.hpp"

namespace exprscore::synth {

using Samples = std::vector<float>;

/// Uniform and Gaussian draws from raw mt19937_64 output, so sequences do not
/// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double gaussian() {
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

inline std::size_t count(double seconds, int rate) { return static_cast<std::size_t>(std::llround(seconds * rate)); }

inline Samples sine(double hz, double seconds, double amplitude = 0.5, int rate = kCanonicalRate, double phase = 0.0) {
  Samples out(count(seconds, rate));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / rate + phase));
  }
  return out;
}

inline Samples square(double hz, double seconds, double amplitude = 1.0, int rate = kCanonicalRate) {
  Samples out(count(seconds, rate));
  const double period = rate / hz;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double pos = std::fmod(static_cast<double>(i), period);
    out[i] = static_cast<float>(pos < period / 2.0 ? amplitude : -amplitude);
  }
  return out;
}

inline Samples silence(double seconds, int rate = kCanonicalRate) { return Samples(count(seconds, rate), 0.0f); }

inline Samples white_noise(double seconds, double rms, std::uint64_t seed, int rate = kCanonicalRate) {
  Rng rng(seed);
  Samples out(count(seconds, rate));
  for (auto& s : out) s = static_cast<float>(std::clamp(rms * rng.gaussian(), -1.0, 1.0));
  return out;
}

/// Tone following an arbitrary instantaneous-frequency contour; the phase is
/// integrated sample by sample so the contour stays continuous.
inline Samples contour_tone(const std::function<double(double)>& hz_at, double seconds, double amplitude = 0.5,
                            int rate = kCanonicalRate) {
  Samples out(count(seconds, rate));
  double phase = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(amplitude * std::sin(phase));
    phase += 2.0 * std::numbers::pi * hz_at(static_cast<double>(i) / rate) / rate;
    if (phase > 2.0 * std::numbers::pi) phase -= 2.0 * std::numbers::pi;
  }
  return out;
}

inline Samples linear_sweep(double f_start, double f_end, double seconds, double amplitude = 0.5,
                            int rate = kCanonicalRate) {
  return contour_tone([=](double t) { return f_start + (f_end - f_start) * t / seconds; }, seconds, amplitude, rate);
}

/// Pitch alternating between two frequencies every `step_s` seconds.
inline Samples alternating(double f_a, double f_b, double step_s, double seconds, double amplitude = 0.5,
                           int rate = kCanonicalRate) {
  return contour_tone(
      [=](double t) { return static_cast<long long>(std::floor(t / step_s)) % 2 == 0 ? f_a : f_b; }, seconds,
      amplitude, rate);
}

/// Multiplies a signal by 1 + depth * sin(2 pi rate_hz t), renormalized to
/// keep the peak envelope at 1.
inline Samples amplitude_modulate(Samples s, double rate_hz, double depth, int rate = kCanonicalRate) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double env = (1.0 + depth * std::sin(2.0 * std::numbers::pi * rate_hz * static_cast<double>(i) / rate)) /
                       (1.0 + depth);
    s[i] = static_cast<float>(s[i] * env);
  }
  return s;
}

inline Samples concat(std::initializer_list<Samples> parts) {
  Samples out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline Samples mix(const Samples& a, const Samples& b) {
  Samples out(std::max(a.size(), b.size()), 0.0f);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = (i < a.size() ? a[i] : 0.0f) + (i < b.size() ? b[i] : 0.0f);
    out[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return out;
}

inline Samples scaled(Samples s, double gain) {
  for (auto& v : s) v = static_cast<float>(v * gain);
  return s;
}

inline AudioClip clip(Samples s, std::string id = "synthetic", int rate = kCanonicalRate) {
  return AudioClip(std::move(s), rate, std::move(id));
}

/// Style knobs for a speech-like utterance.
struct SpeechStyle {
  double base_hz = 160.0;
  double pitch_span_st = 4.0;      // peak excursion of the intonation contour
  double contour_rate_hz = 1.5;    // intonation movements per second
  double syllable_rate_hz = 4.0;   // energy bursts per second
  double loudness_spread_db = 6.0; // syllable-to-syllable level variation
  double pause_prob = 0.1;         // chance of a pause after each syllable
  double noise_rms = 0.0;          // additive background noise
};

/// Harmonic, syllable-paced signal with an intonation contour, loudness
/// variation and random pauses.
inline Samples speechlike(const SpeechStyle& style, double seconds, std::uint64_t seed, int rate = kCanonicalRate) {
  Rng rng(seed);
  const std::size_t n = count(seconds, rate);
  Samples out(n, 0.0f);

  // Intonation: sum of two slow sinusoids with random phases.
  const double ph1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ph2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  auto pitch_at = [&](double t) {
    const double st = style.pitch_span_st * (0.7 * std::sin(2.0 * std::numbers::pi * style.contour_rate_hz * t + ph1) +
                                             0.3 * std::sin(2.0 * std::numbers::pi * 2.3 * style.contour_rate_hz * t + ph2));
    return style.base_hz * std::pow(2.0, st / 12.0);
  };

  // Syllable schedule: bursts with jittered length, level and optional pauses.
  std::vector<double> envelope(n, 0.0);
  double t = 0.05;
  while (t < seconds) {
    const double len = std::max(0.08, rng.uniform(0.6, 1.4) / style.syllable_rate_hz);
    const double level_db = -style.loudness_spread_db * rng.uniform();
    const double amp = std::pow(10.0, level_db / 20.0);
    const auto a = count(t, rate);
    const auto b = std::min(n, count(t + len, rate));
    for (std::size_t i = a; i < b; ++i) {
      const double x = static_cast<double>(i - a) / static_cast<double>(std::max<std::size_t>(1, b - a));
      envelope[i] = amp * std::sin(std::numbers::pi * x);
    }
    t += len;
    if (rng.uniform() < style.pause_prob) t += rng.uniform(0.25, 0.8);
  }

  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ti = static_cast<double>(i) / rate;
    const double v = 0.6 * std::sin(phase) + 0.25 * std::sin(2.0 * phase) + 0.1 * std::sin(3.0 * phase);
    double s = 0.5 * envelope[i] * v;
    if (style.noise_rms > 0.0) s += style.noise_rms * rng.gaussian();
    out[i] = static_cast<float>(std::clamp(s, -1.0, 1.0));
    phase += 2.0 * std::numbers::pi * pitch_at(ti) / rate;
    if (phase > 2.0 * std::numbers::pi) phase -= 2.0 * std::numbers::pi;
  }
  return out;
}

}  // namespace exprscore::synth
