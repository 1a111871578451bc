#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "exprscore/audio.hpp"
#include "exprscore/numeric.hpp"

namespace exprscore {

struct FrameConfig {
  double frame_s = 0.040;
  double hop_s = 0.010;
  double f0_min_hz = 50.0;
  double f0_max_hz = 600.0;
  double yin_threshold = 0.15;
  // Pause frames sit this far below the clip's 95th-percentile frame energy.
  double pause_rel_db = 25.0;
};

inline constexpr double kEnergyFloorDb = -80.0;
// Mean-square power of a frame at the -80 dB floor.
inline constexpr double kFloorPower = 1e-8;

struct Pause {
  double start_s = 0.0;
  double duration_s = 0.0;
};

struct F0Track {
  std::vector<double> f0_hz;  // 0 for unvoiced frames
  std::vector<bool> voiced;
};

struct ProsodicFeatures {
  double frame_s = 0.040;
  double frame_hop_s = 0.010;
  double duration_s = 0.0;
  std::vector<double> f0_hz;
  std::vector<double> energy_db;
  std::vector<double> frame_power;  // mean square per frame, linear
  std::vector<bool> voiced;
  std::vector<Pause> pauses;

  std::size_t frames() const noexcept { return f0_hz.size(); }
};

struct FeatureSummary {
  // Absent when the clip has no voiced frames.
  std::optional<double> f0_range_st;
  std::optional<double> f0_std_st;
  std::optional<double> f0_turns_per_s;
  double energy_std_db = 0.0;
  double energy_range_db = 0.0;
  double pause_cv = 0.0;
  double voiced_fraction = 0.0;
  double syllable_rate_proxy = 0.0;
  double duration_s = 0.0;
};

namespace detail {

struct FrameGeometry {
  std::size_t window = 0;
  std::size_t hop = 0;
  std::size_t count = 0;
};

inline FrameGeometry frame_geometry(std::size_t n_samples, int rate, const FrameConfig& cfg) {
  FrameGeometry g;
  g.window = static_cast<std::size_t>(std::lround(cfg.frame_s * rate));
  g.hop = static_cast<std::size_t>(std::lround(cfg.hop_s * rate));
  if (g.window == 0 || g.hop == 0) throw std::invalid_argument("frame config too short for sample rate");
  g.count = n_samples < g.window ? 0 : 1 + (n_samples - g.window) / g.hop;
  return g;
}

struct FftwDeleter {
  void operator()(void* p) const noexcept { fftw_free(p); }
};

template <class T>
using FftwBuffer = std::unique_ptr<T[], FftwDeleter>;

template <class T>
FftwBuffer<T> fftw_buffer(std::size_t n) {
  return FftwBuffer<T>(static_cast<T*>(fftw_malloc(sizeof(T) * n)));
}

// FFTW planning is not thread-safe; executing an existing plan on fresh
// buffers is. Plans are created once per size and kept for the process.
struct RealFftPlans {
  fftw_plan forward;
  fftw_plan inverse;
};

inline const RealFftPlans& real_fft_plans(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, RealFftPlans> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(n); it != cache.end()) return it->second;
  auto real = fftw_buffer<double>(n);
  auto spec = fftw_buffer<fftw_complex>(n / 2 + 1);
  const int size = static_cast<int>(n);
  RealFftPlans plans{fftw_plan_dft_r2c_1d(size, real.get(), spec.get(), FFTW_ESTIMATE),
                     fftw_plan_dft_c2r_1d(size, spec.get(), real.get(), FFTW_ESTIMATE)};
  return cache.emplace(n, plans).first->second;
}

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace detail

/// Per-frame mean-square power over the analysis window.
inline std::vector<double> frame_power(const AudioClip& clip, const FrameConfig& cfg = {}) {
  const auto g = detail::frame_geometry(clip.size(), clip.sample_rate(), cfg);
  const auto x = clip.samples();
  std::vector<double> power(g.count);
  for (std::size_t f = 0; f < g.count; ++f) {
    double acc = 0.0;
    for (std::size_t j = 0; j < g.window; ++j) {
      const double s = x[f * g.hop + j];
      acc += s * s;
    }
    power[f] = acc / static_cast<double>(g.window);
  }
  return power;
}

inline double power_to_db(double power) {
  if (power <= kFloorPower) return kEnergyFloorDb;
  return std::max(kEnergyFloorDb, 10.0 * std::log10(power));
}

/// Frame RMS in dB relative to full scale, floored at -80 dB.
inline std::vector<double> extract_energy(const AudioClip& clip, const FrameConfig& cfg = {}) {
  auto power = frame_power(clip, cfg);
  std::vector<double> db(power.size());
  std::transform(power.begin(), power.end(), db.begin(), power_to_db);
  return db;
}

/// YIN pitch tracking: cumulative-mean-normalized difference function with an
/// absolute threshold, local-minimum descent and parabolic refinement. The
/// difference function is assembled from an FFT cross-correlation and running
/// window energies.
inline F0Track extract_f0(const AudioClip& clip, const FrameConfig& cfg = {}) {
  const int rate = clip.sample_rate();
  const auto g = detail::frame_geometry(clip.size(), rate, cfg);
  const auto tau_max = static_cast<std::size_t>(std::floor(rate / cfg.f0_min_hz));
  const auto tau_min = std::max<std::size_t>(2, static_cast<std::size_t>(std::floor(rate / cfg.f0_max_hz)));
  if (tau_max + 2 >= g.window) throw std::invalid_argument("frame too short for the lowest F0");
  const std::size_t width = g.window - tau_max;

  F0Track track;
  track.f0_hz.assign(g.count, 0.0);
  track.voiced.assign(g.count, false);
  if (g.count == 0) return track;

  const std::size_t n_fft = detail::next_pow2(g.window + width);
  const std::size_t n_bins = n_fft / 2 + 1;
  const auto& plans = detail::real_fft_plans(n_fft);
  auto head = detail::fftw_buffer<double>(n_fft);
  auto frame = detail::fftw_buffer<double>(n_fft);
  auto head_spec = detail::fftw_buffer<fftw_complex>(n_bins);
  auto frame_spec = detail::fftw_buffer<fftw_complex>(n_bins);
  auto corr = detail::fftw_buffer<double>(n_fft);

  const auto x = clip.samples();
  std::vector<double> prefix(g.window + 1);
  std::vector<double> cmnd(tau_max + 1);

  for (std::size_t f = 0; f < g.count; ++f) {
    const float* src = x.data() + f * g.hop;
    prefix[0] = 0.0;
    for (std::size_t j = 0; j < g.window; ++j) prefix[j + 1] = prefix[j] + double(src[j]) * double(src[j]);
    if (prefix[g.window] / static_cast<double>(g.window) <= 1e-10) continue;

    std::fill(head.get(), head.get() + n_fft, 0.0);
    std::fill(frame.get(), frame.get() + n_fft, 0.0);
    for (std::size_t j = 0; j < width; ++j) head[j] = src[j];
    for (std::size_t j = 0; j < g.window; ++j) frame[j] = src[j];
    fftw_execute_dft_r2c(plans.forward, head.get(), head_spec.get());
    fftw_execute_dft_r2c(plans.forward, frame.get(), frame_spec.get());
    for (std::size_t k = 0; k < n_bins; ++k) {
      // conj(A) * B
      const double ar = head_spec[k][0], ai = -head_spec[k][1];
      const double br = frame_spec[k][0], bi = frame_spec[k][1];
      frame_spec[k][0] = ar * br - ai * bi;
      frame_spec[k][1] = ar * bi + ai * br;
    }
    fftw_execute_dft_c2r(plans.inverse, frame_spec.get(), corr.get());

    const double e0 = prefix[width];
    const double inv_n = 1.0 / static_cast<double>(n_fft);
    double running = 0.0;
    cmnd[0] = 1.0;
    for (std::size_t tau = 1; tau <= tau_max; ++tau) {
      const double e_tau = prefix[tau + width] - prefix[tau];
      const double d = std::max(0.0, e0 + e_tau - 2.0 * corr[tau] * inv_n);
      running += d;
      cmnd[tau] = running > 0.0 ? d * static_cast<double>(tau) / running : 1.0;
    }

    std::size_t best = 0;
    for (std::size_t tau = tau_min; tau <= tau_max; ++tau) {
      if (cmnd[tau] < cfg.yin_threshold) {
        while (tau + 1 <= tau_max && cmnd[tau + 1] < cmnd[tau]) ++tau;
        best = tau;
        break;
      }
    }
    if (best == 0) continue;

    double period = static_cast<double>(best);
    if (best > 1 && best < tau_max) {
      const double a = cmnd[best - 1], b = cmnd[best], c = cmnd[best + 1];
      const double denom = a - 2.0 * b + c;
      if (denom > 0.0) period += 0.5 * (a - c) / denom;
    }
    const double f0 = static_cast<double>(rate) / period;
    if (f0 >= cfg.f0_min_hz && f0 <= cfg.f0_max_hz) {
      track.f0_hz[f] = f0;
      track.voiced[f] = true;
    }
  }
  return track;
}

/// Maximal runs of frames that are unvoiced and quiet, lasting at least
/// min_pause_s. Quiet means below the clip's 95th-percentile frame power by
/// pause_rel_db, or at the digital-silence floor. A run spans the union of its
/// frame windows.
inline std::vector<Pause> detect_pauses(const ProsodicFeatures& features, double min_pause_s,
                                        double pause_rel_db = FrameConfig{}.pause_rel_db) {
  std::vector<Pause> pauses;
  const std::size_t n = features.frame_power.size();
  if (n == 0) return pauses;
  const double threshold = numeric::percentile(features.frame_power, 0.95) * std::pow(10.0, -pause_rel_db / 10.0);

  auto silent = [&](std::size_t i) {
    const double p = features.frame_power[i];
    return !features.voiced[i] && (p < threshold || p <= kFloorPower);
  };

  std::size_t i = 0;
  while (i < n) {
    if (!silent(i)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < n && silent(j + 1)) ++j;
    const double start = static_cast<double>(i) * features.frame_hop_s;
    double end = static_cast<double>(j) * features.frame_hop_s + features.frame_s;
    if (j + 1 == n) end = std::max(end, features.duration_s);
    end = std::min(end, features.duration_s);
    if (end - start >= min_pause_s - 1e-9) pauses.push_back({start, end - start});
    i = j + 1;
  }
  return pauses;
}

inline ProsodicFeatures analyze(const AudioClip& clip, double min_pause_s = 0.4, const FrameConfig& cfg = {}) {
  ProsodicFeatures feats;
  feats.frame_s = cfg.frame_s;
  feats.frame_hop_s = cfg.hop_s;
  feats.duration_s = clip.duration_seconds();
  auto track = extract_f0(clip, cfg);
  feats.f0_hz = std::move(track.f0_hz);
  feats.voiced = std::move(track.voiced);
  feats.frame_power = frame_power(clip, cfg);
  feats.energy_db.resize(feats.frame_power.size());
  std::transform(feats.frame_power.begin(), feats.frame_power.end(), feats.energy_db.begin(), power_to_db);
  feats.pauses = detect_pauses(feats, min_pause_s, cfg.pause_rel_db);
  return feats;
}

namespace detail {

enum class Extremum { Max, Min };

// Turning points of a sequence with hysteresis: a reversal is confirmed once
// the signal retreats at least `hysteresis` from the running extreme.
inline std::vector<std::pair<std::size_t, Extremum>> turning_points(std::span<const double> s, double hysteresis) {
  std::vector<std::pair<std::size_t, Extremum>> out;
  if (s.empty()) return out;
  int dir = 0;
  std::size_t lo = 0, hi = 0, ext = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    const double v = s[i];
    if (dir == 0) {
      if (v < s[lo]) lo = i;
      if (v > s[hi]) hi = i;
      if (v - s[lo] >= hysteresis) {
        dir = 1;
        ext = i;
      } else if (s[hi] - v >= hysteresis) {
        dir = -1;
        ext = i;
      }
    } else if (dir > 0) {
      if (v > s[ext]) {
        ext = i;
      } else if (s[ext] - v >= hysteresis) {
        out.emplace_back(ext, Extremum::Max);
        dir = -1;
        ext = i;
      }
    } else {
      if (v < s[ext]) {
        ext = i;
      } else if (v - s[ext] >= hysteresis) {
        out.emplace_back(ext, Extremum::Min);
        dir = 1;
        ext = i;
      }
    }
  }
  return out;
}

inline std::vector<double> median_filter(std::span<const double> s, std::size_t width) {
  std::vector<double> out(s.size());
  const std::size_t half = width / 2;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t a = i >= half ? i - half : 0;
    const std::size_t b = std::min(s.size(), i + half + 1);
    out[i] = numeric::median(s.subspan(a, b - a));
  }
  return out;
}

}  // namespace detail

inline constexpr double kTurnHysteresisSt = 1.0;
inline constexpr double kSyllableHysteresisDb = 3.0;

inline FeatureSummary summarize(const ProsodicFeatures& f, double pause_rel_db = FrameConfig{}.pause_rel_db) {
  FeatureSummary s;
  s.duration_s = f.duration_s;
  const std::size_t n = f.frames();
  if (n == 0) return s;

  std::vector<double> voiced_f0;
  for (std::size_t i = 0; i < n; ++i) {
    if (f.voiced[i]) voiced_f0.push_back(f.f0_hz[i]);
  }
  s.voiced_fraction = static_cast<double>(voiced_f0.size()) / static_cast<double>(n);

  if (!voiced_f0.empty()) {
    const double p5 = numeric::percentile(voiced_f0, 0.05);
    const double p95 = numeric::percentile(voiced_f0, 0.95);
    s.f0_range_st = 12.0 * std::log2(p95 / p5);
    const double med = numeric::median(voiced_f0);
    std::vector<double> st(voiced_f0.size());
    std::transform(voiced_f0.begin(), voiced_f0.end(), st.begin(),
                   [med](double hz) { return 12.0 * std::log2(hz / med); });
    s.f0_std_st = numeric::stddev(st);

    // Direction changes of the median-smoothed voiced contour.
    const auto smooth = detail::median_filter(st, 5);
    const std::size_t turns = detail::turning_points(smooth, kTurnHysteresisSt).size();
    const double voiced_s = static_cast<double>(voiced_f0.size()) * f.frame_hop_s;
    s.f0_turns_per_s = static_cast<double>(turns) / voiced_s;
  }

  const double threshold = numeric::percentile(f.frame_power, 0.95) * std::pow(10.0, -pause_rel_db / 10.0);
  std::vector<double> active_db;
  for (std::size_t i = 0; i < n; ++i) {
    if (f.frame_power[i] >= threshold && f.frame_power[i] > kFloorPower) active_db.push_back(f.energy_db[i]);
  }
  s.energy_std_db = numeric::stddev(active_db);
  s.energy_range_db = numeric::percentile(active_db, 0.95) - numeric::percentile(active_db, 0.05);

  if (f.pauses.size() >= 2) {
    std::vector<double> durations;
    for (const auto& p : f.pauses) durations.push_back(p.duration_s);
    const double m = numeric::mean(durations);
    s.pause_cv = m > 0.0 ? numeric::stddev(durations) / m : 0.0;
  }

  const double threshold_db = power_to_db(threshold);
  std::size_t peaks = 0;
  for (const auto& [idx, kind] : detail::turning_points(f.energy_db, kSyllableHysteresisDb)) {
    if (kind == detail::Extremum::Max && f.energy_db[idx] >= threshold_db && f.energy_db[idx] > kEnergyFloorDb) ++peaks;
  }
  s.syllable_rate_proxy = f.duration_s > 0.0 ? static_cast<double>(peaks) / f.duration_s : 0.0;
  return s;
}

}  // namespace exprscore
