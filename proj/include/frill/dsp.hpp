/* Copyright 2026 The frill Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Log-Mel frontend: framed STFT magnitudes, a triangular HTK Mel filterbank
// and the 0.96 s context splitter that produces 96x64 model inputs.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <ostream>
#include <string>
#include <vector>

#include "frill/error.hpp"
#include "frill/tensor.hpp"

namespace frill {

struct Waveform {
  std::vector<float> samples;
  int sample_rate_hz = 16000;
};

struct LogMelSpectrogram {
  Tensor<float> frames;  // [num_frames, num_mel_bins]
  double frame_hop_s = 0.010;
  double frame_len_s = 0.025;

  std::size_t num_frames() const { return frames.dim(0); }
  std::size_t num_mel_bins() const { return frames.dim(1); }
};

struct FrontendConfig {
  static constexpr int kSampleRateHz = 16000;
  static constexpr double kWindowSeconds = 0.025;
  static constexpr double kHopSeconds = 0.010;
  static constexpr double kContextSeconds = 0.96;
  static constexpr std::size_t kContextFrames = 96;
  static constexpr std::size_t kContextSamples = 15360;
  static constexpr int kNumMelBins = 64;
  static constexpr double kMelMinHz = 125.0;
  static constexpr double kMelMaxHz = 7500.0;
  static constexpr double kLogOffset = 0.01;
};

enum class WindowType { kHann, kRectangular };

struct StftOptions {
  WindowType window = WindowType::kHann;
  // Reflect-pad so that frame t is centred on sample t*hop; this yields
  // ceil(num_samples / hop) frames.
  bool center = true;
};

inline std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// In-place iterative radix-2 FFT. data.size() must be a power of two.
inline void fft_in_place(std::vector<std::complex<double>>& data) {
  const std::size_t n = data.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i], data[j]);
  }
  constexpr double kPi = 3.141592653589793238462643383279502884;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = -2.0 * kPi / static_cast<double>(len);
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        // Twiddles evaluated directly; recurrence drift would break the
        // 1e-6 agreement with a direct DFT on long frames.
        const std::complex<double> w(std::cos(angle * static_cast<double>(k)),
                                     std::sin(angle * static_cast<double>(k)));
        const auto u = data[start + k];
        const auto v = data[start + k + len / 2] * w;
        data[start + k] = u + v;
        data[start + k + len / 2] = u - v;
      }
    }
  }
}

inline std::vector<double> make_window(WindowType type, std::size_t length) {
  std::vector<double> w(length, 1.0);
  if (type == WindowType::kHann) {
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < length; ++i) {
      // Periodic Hann.
      w[i] = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) /
                                  static_cast<double>(length));
    }
  }
  return w;
}

namespace detail {

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t r = i % period;
  if (r < 0) r += period;
  if (r >= static_cast<std::ptrdiff_t>(n)) r = period - r;
  return static_cast<std::size_t>(r);
}

inline std::size_t seconds_to_samples(double seconds, int sample_rate_hz) {
  return static_cast<std::size_t>(
      std::llround(seconds * static_cast<double>(sample_rate_hz)));
}

}  // namespace detail

inline std::size_t stft_num_frames(std::size_t num_samples,
                                   std::size_t window, std::size_t hop,
                                   bool center) {
  if (center) return (num_samples + hop - 1) / hop;
  if (num_samples < window) return 0;
  return 1 + (num_samples - window) / hop;
}

// Magnitude STFT, [num_frames, fft_len/2 + 1], where fft_len is the next
// power of two at or above the window length.
inline Tensor<double> stft_magnitude(const Waveform& w, double window_s,
                                     double hop_s,
                                     const StftOptions& options = {}) {
  if (w.sample_rate_hz <= 0) {
    fail(ErrorCode::kConfig, "sample rate must be positive, got ",
         w.sample_rate_hz);
  }
  if (w.samples.empty()) fail(ErrorCode::kInputTooShort, "empty waveform");
  const std::size_t window = detail::seconds_to_samples(window_s, w.sample_rate_hz);
  const std::size_t hop = detail::seconds_to_samples(hop_s, w.sample_rate_hz);
  if (window < 2) {
    fail(ErrorCode::kConfig, "window of ", window_s, " s spans ", window,
         " samples; need at least 2");
  }
  if (hop_s <= 0.0 || hop == 0) {
    fail(ErrorCode::kConfig, "hop must be positive, got ", hop_s, " s");
  }
  const std::size_t n = w.samples.size();
  if (!options.center && n < window) {
    fail(ErrorCode::kInputTooShort, "waveform of ", n,
         " samples is shorter than one window (", window, " samples)");
  }
  const std::size_t frames = stft_num_frames(n, window, hop, options.center);
  const std::size_t fft_len = next_power_of_two(window);
  const std::size_t bins = fft_len / 2 + 1;
  const auto taper = make_window(options.window, window);
  const std::ptrdiff_t offset =
      options.center ? -static_cast<std::ptrdiff_t>(window / 2) : 0;

  Tensor<double> out({frames, bins});
  std::vector<std::complex<double>> buf(fft_len);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * hop) + offset;
    for (std::size_t i = 0; i < window; ++i) {
      const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(i);
      const std::size_t src = detail::reflect_index(pos, n);
      buf[i] = static_cast<double>(w.samples[src]) * taper[i];
    }
    fft_in_place(buf);
    for (std::size_t k = 0; k < bins; ++k) out(t, k) = std::abs(buf[k]);
  }
  return out;
}

inline double hz_to_mel(double hz) {
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// [num_fft_bins, num_mel] triangular weights. Triangles are laid out
// uniformly on the HTK Mel scale between fmin and fmax; a bin's weight is
// read off the triangle at the bin's Mel position.
inline Tensor<double> mel_filterbank(std::size_t num_fft_bins,
                                     int sample_rate_hz, int num_mel,
                                     double fmin_hz, double fmax_hz) {
  if (num_mel <= 0) fail(ErrorCode::kConfig, "num_mel must be positive");
  if (num_fft_bins < 2) fail(ErrorCode::kConfig, "need at least 2 FFT bins");
  if (static_cast<std::size_t>(num_mel) > num_fft_bins) {
    fail(ErrorCode::kConfig, "num_mel ", num_mel, " exceeds the ",
         num_fft_bins, " available FFT bins");
  }
  const double nyquist = sample_rate_hz / 2.0;
  if (!(fmin_hz >= 0.0 && fmin_hz < fmax_hz && fmax_hz <= nyquist)) {
    fail(ErrorCode::kConfig, "need 0 <= fmin < fmax <= ", nyquist,
         " Hz, got fmin=", fmin_hz, " fmax=", fmax_hz);
  }
  const double mel_lo = hz_to_mel(fmin_hz);
  const double mel_hi = hz_to_mel(fmax_hz);
  std::vector<double> edges(static_cast<std::size_t>(num_mel) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                            static_cast<double>(num_mel + 1);
  }
  Tensor<double> fb({num_fft_bins, static_cast<std::size_t>(num_mel)});
  for (std::size_t k = 0; k < num_fft_bins; ++k) {
    const double hz = nyquist * static_cast<double>(k) /
                      static_cast<double>(num_fft_bins - 1);
    const double mel = hz_to_mel(hz);
    for (int j = 0; j < num_mel; ++j) {
      const double left = edges[j], center = edges[j + 1],
                   right = edges[j + 2];
      const double rise = (mel - left) / (center - left);
      const double fall = (right - mel) / (right - center);
      fb(k, static_cast<std::size_t>(j)) = std::max(0.0, std::min(rise, fall));
    }
  }
  return fb;
}

// log(magnitude . filterbank + offset), one row per frame.
inline LogMelSpectrogram log_mel(
    const Tensor<double>& spec, int sample_rate_hz,
    int num_mel = FrontendConfig::kNumMelBins,
    double fmin_hz = FrontendConfig::kMelMinHz,
    double fmax_hz = FrontendConfig::kMelMaxHz,
    double log_offset = FrontendConfig::kLogOffset) {
  if (spec.rank() != 2) {
    fail(ErrorCode::kShape, "log_mel expects a [frames, bins] matrix, got ",
         shape_string(spec.shape()));
  }
  const std::size_t frames = spec.dim(0), bins = spec.dim(1);
  const auto fb = mel_filterbank(bins, sample_rate_hz, num_mel, fmin_hz, fmax_hz);
  const auto mel_count = static_cast<std::size_t>(num_mel);
  LogMelSpectrogram out;
  out.frames = Tensor<float>({frames, mel_count});
  std::vector<double> acc(mel_count);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < bins; ++k) {
      const double m = spec(t, k);
      for (std::size_t j = 0; j < mel_count; ++j) acc[j] += m * fb(k, j);
    }
    for (std::size_t j = 0; j < mel_count; ++j) {
      out.frames(t, j) = static_cast<float>(std::log(acc[j] + log_offset));
    }
  }
  return out;
}

// Splits audio into consecutive 0.96 s contexts (trailing remainder dropped)
// and returns one 96x64 spectrogram per context.
inline std::vector<LogMelSpectrogram> frontend(const Waveform& w) {
  if (w.sample_rate_hz != FrontendConfig::kSampleRateHz) {
    fail(ErrorCode::kResampleRequired, "frontend requires ",
         FrontendConfig::kSampleRateHz, " Hz audio, got ", w.sample_rate_hz,
         " Hz; resample before calling");
  }
  constexpr std::size_t kContext = FrontendConfig::kContextSamples;
  if (w.samples.size() < kContext) {
    fail(ErrorCode::kInputTooShort, "need at least ", kContext,
         " samples (0.96 s), got ", w.samples.size());
  }
  std::vector<LogMelSpectrogram> out;
  const std::size_t contexts = w.samples.size() / kContext;
  out.reserve(contexts);
  for (std::size_t c = 0; c < contexts; ++c) {
    Waveform piece;
    piece.sample_rate_hz = w.sample_rate_hz;
    piece.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(c * kContext),
                         w.samples.begin() + static_cast<std::ptrdiff_t>((c + 1) * kContext));
    const auto mag = stft_magnitude(piece, FrontendConfig::kWindowSeconds,
                                    FrontendConfig::kHopSeconds);
    auto spec = log_mel(mag, w.sample_rate_hz);
    spec.frame_hop_s = FrontendConfig::kHopSeconds;
    spec.frame_len_s = FrontendConfig::kWindowSeconds;
    out.push_back(std::move(spec));
  }
  return out;
}

namespace detail {

inline std::uint32_t read_le_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_le_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

// Mono 16-bit PCM RIFF/WAVE. Samples are scaled to [-1, 1).
inline Waveform parse_wav(const std::vector<std::uint8_t>& bytes) {
  const std::uint8_t* p = bytes.data();
  if (bytes.size() < 12 || std::memcmp(p, "RIFF", 4) != 0 ||
      std::memcmp(p + 8, "WAVE", 4) != 0) {
    fail(ErrorCode::kFormat, "not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t chunk_size = detail::read_le_u32(p + pos + 4);
    const std::size_t body = pos + 8;
    if (body + chunk_size > bytes.size()) {
      fail(ErrorCode::kFormat, "WAV chunk overruns file");
    }
    if (std::memcmp(p + pos, "fmt ", 4) == 0) {
      if (chunk_size < 16) fail(ErrorCode::kFormat, "WAV fmt chunk too short");
      format = detail::read_le_u16(p + body);
      channels = detail::read_le_u16(p + body + 2);
      rate = detail::read_le_u32(p + body + 4);
      bits = detail::read_le_u16(p + body + 14);
      have_fmt = true;
    } else if (std::memcmp(p + pos, "data", 4) == 0) {
      if (!have_fmt) fail(ErrorCode::kFormat, "WAV data chunk before fmt chunk");
      if (format != 1) {
        fail(ErrorCode::kFormat, "only PCM WAV is supported, format tag ", format);
      }
      if (channels != 1) {
        fail(ErrorCode::kFormat, "expected a single-channel WAV, got ",
             channels, " channels");
      }
      if (bits != 16) {
        fail(ErrorCode::kFormat, "expected 16-bit samples, got ", bits, "-bit");
      }
      Waveform w;
      w.sample_rate_hz = static_cast<int>(rate);
      w.samples.resize(chunk_size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto raw = static_cast<std::int16_t>(
            detail::read_le_u16(p + body + 2 * i));
        w.samples[i] = static_cast<float>(raw) / 32768.0f;
      }
      return w;
    }
    pos = body + chunk_size + (chunk_size & 1u);
  }
  fail(ErrorCode::kFormat, "WAV file has no data chunk");
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open ", path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

inline std::vector<std::uint8_t> encode_wav(const Waveform& w) {
  std::vector<std::uint8_t> out;
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto put16 = [&](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put32(36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put32(16);
  put16(1);
  put16(1);
  put32(static_cast<std::uint32_t>(w.sample_rate_hz));
  put32(static_cast<std::uint32_t>(w.sample_rate_hz) * 2);
  put16(2);
  put16(16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put32(data_bytes);
  for (float s : w.samples) {
    const double scaled =
        std::clamp(std::round(static_cast<double>(s) * 32768.0), -32768.0, 32767.0);
    put16(static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
  }
  return out;
}

// Debug dump: one CSV row per frame.
inline void write_spectrogram_csv(const LogMelSpectrogram& spec,
                                  std::ostream& out) {
  out.precision(9);
  for (std::size_t t = 0; t < spec.num_frames(); ++t) {
    for (std::size_t j = 0; j < spec.num_mel_bins(); ++j) {
      if (j) out << ',';
      out << spec.frames(t, j);
    }
    out << '\n';
  }
}

}  // namespace frill
