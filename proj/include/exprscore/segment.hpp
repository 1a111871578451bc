#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "exprscore/audio.hpp"
#include "exprscore/features.hpp"

namespace exprscore {

struct Segment {
  double start_s = 0.0;
  double end_s = 0.0;
  AudioClip clip;
};

inline std::string segment_id(const std::string& parent, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_seg%03zu", index);
  return parent + buf;
}

/// Splits a canonical-rate clip at pauses of at least min_pause_s and keeps
/// the stretches between them that last at least min_utterance_s. Boundaries
/// are snapped to whole samples.
inline std::vector<Segment> segment_by_silence(const AudioClip& clip, double min_utterance_s = 1.0,
                                               double min_pause_s = 0.4, const FrameConfig& cfg = {}) {
  if (clip.sample_rate() != kCanonicalRate) throw std::invalid_argument("segment_by_silence: clip not at 16 kHz");
  const auto features = analyze(clip, min_pause_s, cfg);
  const double rate = clip.sample_rate();
  const auto samples = clip.samples();

  std::vector<std::pair<double, double>> regions;
  double cursor = 0.0;
  for (const auto& p : features.pauses) {
    if (p.start_s > cursor) regions.emplace_back(cursor, p.start_s);
    cursor = p.start_s + p.duration_s;
  }
  if (cursor < clip.duration_seconds()) regions.emplace_back(cursor, clip.duration_seconds());

  std::vector<Segment> segments;
  for (const auto& [a, b] : regions) {
    const auto first = static_cast<std::size_t>(std::llround(a * rate));
    const auto last = std::min(samples.size(), static_cast<std::size_t>(std::llround(b * rate)));
    if (last <= first) continue;
    const double start_s = static_cast<double>(first) / rate;
    const double end_s = static_cast<double>(last) / rate;
    if (end_s - start_s < min_utterance_s) continue;
    std::vector<float> part(samples.begin() + static_cast<std::ptrdiff_t>(first),
                            samples.begin() + static_cast<std::ptrdiff_t>(last));
    segments.push_back(
        {start_s, end_s, AudioClip(std::move(part), clip.sample_rate(), segment_id(clip.source_id(), segments.size()))});
  }
  return segments;
}

}  // namespace exprscore
