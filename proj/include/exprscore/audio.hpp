#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace exprscore {

inline constexpr int kCanonicalRate = 16000;

class AudioError : public std::runtime_error {
 public:
  enum class Kind { MalformedHeader, UnsupportedEncoding, TruncatedData, Io };

  AudioError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Mono PCM audio held in memory. Samples lie in [-1, 1]; the clip is never
/// empty and is immutable once built.
class AudioClip {
 public:
  AudioClip(std::vector<float> samples, int sample_rate, std::string source_id = {})
      : samples_(std::move(samples)), sample_rate_(sample_rate), source_id_(std::move(source_id)) {
    if (sample_rate_ <= 0) throw std::invalid_argument("AudioClip: sample rate must be positive");
    if (samples_.empty()) throw std::invalid_argument("AudioClip: clip must contain samples");
    for (float s : samples_) {
      if (!(s >= -1.0f && s <= 1.0f)) throw std::invalid_argument("AudioClip: sample outside [-1, 1]");
    }
  }

  std::span<const float> samples() const noexcept { return samples_; }
  int sample_rate() const noexcept { return sample_rate_; }
  const std::string& source_id() const noexcept { return source_id_; }
  std::size_t size() const noexcept { return samples_.size(); }
  double duration_seconds() const noexcept {
    return static_cast<double>(samples_.size()) / static_cast<double>(sample_rate_);
  }

  AudioClip with_id(std::string id) const { return AudioClip(samples_, sample_rate_, std::move(id)); }

 private:
  std::vector<float> samples_;
  int sample_rate_;
  std::string source_id_;
};

namespace detail {

inline std::uint16_t read_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

inline std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

inline bool tag_is(std::span<const std::uint8_t> b, std::size_t at, const char* tag) {
  return std::memcmp(b.data() + at, tag, 4) == 0;
}

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

inline float clamp_unit(float v) {
  if (!std::isfinite(v)) return 0.0f;
  return std::clamp(v, -1.0f, 1.0f);
}

}  // namespace detail

/// Decodes a RIFF/WAVE byte stream (PCM16 or IEEE float32, one or two
/// channels) into a mono clip at the file's own rate. PCM16 is scaled by
/// 1/32768; stereo channels are averaged.
inline AudioClip decode_wav(std::span<const std::uint8_t> bytes, std::string source_id = {}) {
  using Kind = AudioError::Kind;
  if (bytes.size() < 12 || !detail::tag_is(bytes, 0, "RIFF") || !detail::tag_is(bytes, 8, "WAVE")) {
    throw AudioError(Kind::MalformedHeader, "not a RIFF/WAVE stream");
  }

  std::uint16_t format = 0, channels = 0, block_align = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::span<const std::uint8_t> data;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t chunk_size = detail::read_u32(bytes, pos + 4);
    const std::size_t body = pos + 8;
    const std::size_t remaining = bytes.size() - body;
    if (detail::tag_is(bytes, pos, "fmt ")) {
      if (chunk_size < 16 || chunk_size > remaining) throw AudioError(Kind::MalformedHeader, "bad fmt chunk size");
      format = detail::read_u16(bytes, body);
      channels = detail::read_u16(bytes, body + 2);
      rate = detail::read_u32(bytes, body + 4);
      block_align = detail::read_u16(bytes, body + 12);
      bits = detail::read_u16(bytes, body + 14);
      if (format == 0xFFFE) {
        // WAVE_FORMAT_EXTENSIBLE: the sub-format GUID starts with the plain format tag.
        if (chunk_size < 40) throw AudioError(Kind::MalformedHeader, "short extensible fmt chunk");
        format = detail::read_u16(bytes, body + 24);
      }
      have_fmt = true;
    } else if (detail::tag_is(bytes, pos, "data")) {
      if (chunk_size > remaining) {
        throw AudioError(Kind::TruncatedData, "data chunk declares " + std::to_string(chunk_size) +
                                                  " bytes but only " + std::to_string(remaining) + " remain");
      }
      data = bytes.subspan(body, chunk_size);
      have_data = true;
      break;
    } else if (chunk_size > remaining) {
      throw AudioError(Kind::MalformedHeader, "chunk size exceeds stream");
    }
    pos = body + chunk_size + (chunk_size & 1u);
  }

  if (!have_fmt) throw AudioError(Kind::MalformedHeader, "missing fmt chunk");
  if (!have_data) throw AudioError(Kind::MalformedHeader, "missing data chunk");
  if (format != 1 && format != 3) {
    throw AudioError(Kind::UnsupportedEncoding, "unsupported audio format tag " + std::to_string(format));
  }
  if ((format == 1 && bits != 16) || (format == 3 && bits != 32)) {
    throw AudioError(Kind::UnsupportedEncoding, "unsupported bit depth " + std::to_string(bits));
  }
  if (channels == 0 || rate == 0) throw AudioError(Kind::MalformedHeader, "zero channels or sample rate");
  if (channels > 2) throw AudioError(Kind::UnsupportedEncoding, "more than two channels");
  const std::size_t bytes_per_sample = bits / 8u;
  if (block_align != channels * bytes_per_sample) throw AudioError(Kind::MalformedHeader, "inconsistent block align");
  if (rate > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
    throw AudioError(Kind::MalformedHeader, "sample rate out of range");
  }

  const std::size_t frames = data.size() / block_align;
  if (frames == 0) throw AudioError(Kind::MalformedHeader, "no audio frames");

  auto sample_at = [&](std::size_t frame, std::size_t ch) -> float {
    const std::size_t at = frame * block_align + ch * bytes_per_sample;
    if (format == 1) {
      const auto raw = static_cast<std::int16_t>(detail::read_u16(data, at));
      return static_cast<float>(raw) / 32768.0f;
    }
    return detail::clamp_unit(std::bit_cast<float>(detail::read_u32(data, at)));
  };

  std::vector<float> mono(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    mono[f] = channels == 1 ? sample_at(f, 0) : detail::clamp_unit((sample_at(f, 0) + sample_at(f, 1)) * 0.5f);
  }
  return AudioClip(std::move(mono), static_cast<int>(rate), std::move(source_id));
}

inline std::int16_t to_pcm16(float v) {
  const long q = std::lround(static_cast<double>(v) * 32768.0);
  return static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L));
}

/// Mono PCM16 WAV with the standard 44-byte header.
inline std::vector<std::uint8_t> encode_wav_pcm16(const AudioClip& clip) {
  const auto n = static_cast<std::uint32_t>(clip.size());
  const auto rate = static_cast<std::uint32_t>(clip.sample_rate());
  std::vector<std::uint8_t> out;
  out.reserve(44 + 2 * static_cast<std::size_t>(n));
  detail::put_tag(out, "RIFF");
  detail::put_u32(out, 36 + 2 * n);
  detail::put_tag(out, "WAVE");
  detail::put_tag(out, "fmt ");
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, rate);
  detail::put_u32(out, rate * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  detail::put_tag(out, "data");
  detail::put_u32(out, 2 * n);
  for (float s : clip.samples()) detail::put_u16(out, static_cast<std::uint16_t>(to_pcm16(s)));
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError(AudioError::Kind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline AudioClip read_wav(const std::filesystem::path& path, std::string source_id = {}) {
  const auto bytes = read_file_bytes(path);
  return decode_wav(bytes, source_id.empty() ? path.stem().string() : std::move(source_id));
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  const auto bytes = encode_wav_pcm16(clip);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw AudioError(AudioError::Kind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

// 64-tap Kaiser-windowed sinc evaluated on every phase of a rational
// resampling ratio up/down (both reduced by their gcd).
class PolyphaseKernel {
 public:
  static constexpr int kTaps = 64;
  static constexpr int kHalf = kTaps / 2;
  static constexpr double kBeta = 8.0;

  PolyphaseKernel(long up, long down) : phases_(up), table_(static_cast<std::size_t>(up) * kTaps) {
    const double cutoff = std::min(1.0, static_cast<double>(up) / static_cast<double>(down));
    const double norm = std::cyl_bessel_i(0.0, kBeta);
    for (long p = 0; p < up; ++p) {
      const double frac = static_cast<double>(p) / static_cast<double>(up);
      double* row = &table_[static_cast<std::size_t>(p) * kTaps];
      double sum = 0.0;
      for (int m = 0; m < kTaps; ++m) {
        // Tap m reads input sample floor(t) + m - (kHalf - 1).
        const double d = frac - static_cast<double>(m - (kHalf - 1));
        const double u = d / static_cast<double>(kHalf);
        double w = 0.0;
        if (std::abs(u) < 1.0) w = std::cyl_bessel_i(0.0, kBeta * std::sqrt(1.0 - u * u)) / norm;
        const double x = cutoff * d;
        const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
        row[m] = cutoff * sinc * w;
        sum += row[m];
      }
      for (int m = 0; m < kTaps; ++m) row[m] /= sum;
    }
  }

  const double* row(long phase) const { return &table_[static_cast<std::size_t>(phase) * kTaps]; }

 private:
  long phases_;
  std::vector<double> table_;
};

}  // namespace detail

/// Band-limited sample-rate conversion. The output holds
/// round(n * target / source) samples, so duration is preserved to within one
/// output sample period.
inline AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) throw std::invalid_argument("resample: target rate must be positive");
  if (target_rate == clip.sample_rate()) return clip;

  const long g = std::gcd(static_cast<long>(clip.sample_rate()), static_cast<long>(target_rate));
  const long up = target_rate / g;
  const long down = clip.sample_rate() / g;
  const detail::PolyphaseKernel kernel(up, down);

  const auto in = clip.samples();
  const auto n_in = static_cast<long long>(in.size());
  const long long n_out = std::max<long long>(1, (n_in * up + down / 2) / down);
  std::vector<float> out(static_cast<std::size_t>(n_out));
  for (long long i = 0; i < n_out; ++i) {
    const long long num = i * down;
    const long long base = num / up - (detail::PolyphaseKernel::kHalf - 1);
    const double* h = kernel.row(static_cast<long>(num % up));
    double acc = 0.0;
    for (int m = 0; m < detail::PolyphaseKernel::kTaps; ++m) {
      const long long j = base + m;
      if (j >= 0 && j < n_in) acc += h[m] * static_cast<double>(in[static_cast<std::size_t>(j)]);
    }
    out[static_cast<std::size_t>(i)] = detail::clamp_unit(static_cast<float>(acc));
  }
  return AudioClip(std::move(out), target_rate, clip.source_id());
}

}  // namespace exprscore
