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

#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "frill/dsp.hpp"
#include "oracles.hpp"

namespace frill {
namespace {

Waveform noise(std::size_t n, std::uint64_t seed, double amp = 0.3) {
  Rng rng(seed);
  Waveform w;
  w.samples.resize(n);
  for (auto& s : w.samples) s = static_cast<float>(rng.uniform(-amp, amp));
  return w;
}

TEST(StftTest, BinCentredSineConcentratesInOneBin) {
  Waveform w;
  const int k = 20;
  const double f = k * 16000.0 / 512.0;
  w.samples.resize(512);
  for (std::size_t i = 0; i < 512; ++i) {
    w.samples[i] = static_cast<float>(0.5 * std::sin(2.0 * std::numbers::pi * f * i / 16000.0));
  }
  const auto mag = stft_magnitude(w, 0.032, 0.010, {WindowType::kRectangular, false});
  ASSERT_EQ(mag.shape(), (Shape{1, 257}));
  const double peak = mag(0, k);
  EXPECT_NEAR(peak, 0.5 * 256, 1e-3);
  for (std::size_t b = 0; b < 257; ++b) {
    if (b != k) {
      EXPECT_LT(mag(0, b), 1e-6 * peak) << "bin " << b;
    }
  }
}

TEST(StftTest, SilenceGivesZeroMatrix) {
  Waveform w;
  w.samples.assign(15360, 0.0f);
  const auto mag = stft_magnitude(w, 0.025, 0.010);
  ASSERT_EQ(mag.shape(), (Shape{96, 257}));
  for (double v : mag.data()) EXPECT_EQ(v, 0.0);
}

TEST(StftTest, NoiseMatchesDirectDft) {
  const auto w = noise(4000, 21);
  const auto mag = stft_magnitude(w, 0.025, 0.010);
  const auto ref = oracle::stft(w.samples, 400, 160, 512);
  ASSERT_EQ(mag.shape(), ref.shape());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < mag.size(); ++i) {
    num += (mag[i] - ref[i]) * (mag[i] - ref[i]);
    den += ref[i] * ref[i];
  }
  EXPECT_LT(std::sqrt(num / den), 1e-6);
}

TEST(StftTest, FrameCountLaw) {
  Rng rng(22);
  for (int i = 0; i < 20; ++i) {
    const std::size_t n = 400 + rng.index(20000);
    Waveform w;
    w.samples.assign(n, 0.1f);
    const auto mag = stft_magnitude(w, 0.025, 0.010);
    EXPECT_EQ(mag.dim(0), (n + 159) / 160) << n;
  }
}

TEST(StftTest, ShortInputWithoutPaddingFails) {
  Waveform w;
  w.samples.assign(300, 0.1f);
  try {
    stft_magnitude(w, 0.025, 0.010, {WindowType::kHann, false});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInputTooShort);
  }
  EXPECT_EQ(stft_magnitude(w, 0.025, 0.010).dim(0), 2u);
}

TEST(StftTest, RejectsDegenerateWindowAndHop) {
  Waveform w;
  w.samples.assign(1000, 0.1f);
  EXPECT_THROW(stft_magnitude(w, 0.00005, 0.01), Error);
  EXPECT_THROW(stft_magnitude(w, 0.025, 0.0), Error);
}

TEST(FftTest, MatchesDirectDftOnAllSizes) {
  Rng rng(23);
  for (std::size_t n = 1; n <= 1024; n *= 2) {
    std::vector<std::complex<double>> x(n);
    std::vector<double> re(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = re[i] = rng.normal();
    fft_in_place(x);
    const auto ref = oracle::dft_magnitude(re, n);
    for (std::size_t k = 0; k <= n / 2; ++k) EXPECT_NEAR(std::abs(x[k]), ref[k], 1e-9 * n);
  }
}

// Triangles on the HTK Mel axis, read at each FFT bin's Mel position.
double oracle_filter(std::size_t k, std::size_t bins, int j, int num_mel) {
  const double lo = 2595.0 * std::log10(1.0 + 125.0 / 700.0);
  const double hi = 2595.0 * std::log10(1.0 + 7500.0 / 700.0);
  const double step = (hi - lo) / (num_mel + 1);
  const double l = lo + j * step, c = l + step, r = c + step;
  const double hz = 8000.0 * static_cast<double>(k) / static_cast<double>(bins - 1);
  const double m = 2595.0 * std::log10(1.0 + hz / 700.0);
  if (m <= l || m >= r) return 0.0;
  return m <= c ? (m - l) / (c - l) : (r - m) / (r - c);
}

TEST(MelTest, FilterbankMatchesExplicitTriangles) {
  const auto fb = mel_filterbank(257, 16000, 64, 125.0, 7500.0);
  ASSERT_EQ(fb.shape(), (Shape{257, 64}));
  for (std::size_t k = 0; k < 257; ++k)
    for (int j = 0; j < 64; ++j)
      EXPECT_NEAR(fb(k, static_cast<std::size_t>(j)), oracle_filter(k, 257, j, 64), 1e-12);
  // Each column rises then falls.
  for (std::size_t j = 0; j < 64; ++j) {
    bool falling = false;
    for (std::size_t k = 1; k < 257; ++k) {
      EXPECT_GE(fb(k, j), 0.0);
      if (fb(k, j) < fb(k - 1, j)) falling = true;
      if (falling) {
        EXPECT_LE(fb(k, j), fb(k - 1, j));
      }
    }
  }
}

TEST(MelTest, ZeroSpectrogramGivesLogEpsilon) {
  const Tensor<double> spec({5, 257});
  const auto out = log_mel(spec, 16000);
  for (float v : out.frames.data()) EXPECT_FLOAT_EQ(v, static_cast<float>(std::log(0.01)));
}

TEST(MelTest, DoublingMagnitudesAddsLogTwo) {
  Rng rng(24);
  auto spec = random_uniform<double>({4, 257}, rng, 1e5, 2e5);
  const auto a = log_mel(spec, 16000);
  for (auto& v : spec.data()) v *= 2.0;
  const auto b = log_mel(spec, 16000);
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    EXPECT_NEAR(b.frames[i] - a.frames[i], std::log(2.0), 2e-5);
  }
}

TEST(MelTest, SingleBinImpulseOnlyReachesOverlappingFilters) {
  for (std::size_t k : {10, 40, 120, 230}) {
    Tensor<double> spec({1, 257});
    spec(0, k) = 3.0;
    const auto out = log_mel(spec, 16000);
    for (int j = 0; j < 64; ++j) {
      const double ref = std::log(3.0 * oracle_filter(k, 257, j, 64) + 0.01);
      EXPECT_NEAR(out.frames(0, static_cast<std::size_t>(j)), ref, 1e-6);
    }
  }
}

TEST(MelTest, TooManyMelBinsIsConfigError) {
  try {
    mel_filterbank(33, 16000, 64, 125.0, 7500.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
  EXPECT_THROW(mel_filterbank(257, 16000, 64, 7500.0, 125.0), Error);
}

TEST(FrontendTest, SilenceGivesOneConstantBlock) {
  Waveform w;
  w.samples.assign(15360, 0.0f);
  const auto out = frontend(w);
  ASSERT_EQ(out.size(), 1u);
  ASSERT_EQ(out[0].frames.shape(), (Shape{96, 64}));
  for (float v : out[0].frames.data()) EXPECT_FLOAT_EQ(v, static_cast<float>(std::log(0.01)));
}

TEST(FrontendTest, ContextCountFollowsDuration) {
  EXPECT_EQ(frontend(noise(30720, 1)).size(), 2u);
  EXPECT_EQ(frontend(noise(30719, 1)).size(), 1u);
  EXPECT_EQ(frontend(noise(15360 * 3 + 5, 1)).size(), 3u);
}

TEST(FrontendTest, RequiresSixteenKilohertz) {
  auto w = noise(44100, 2);
  w.sample_rate_hz = 44100;
  try {
    frontend(w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kResampleRequired);
  }
  try {
    frontend(noise(15359, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInputTooShort);
  }
}

TEST(FrontendTest, LouderNeverLowersAnyCell) {
  const auto w = noise(15360, 3);
  auto loud = w;
  for (auto& s : loud.samples) s *= 1.7f;
  const auto a = frontend(w)[0], b = frontend(loud)[0];
  for (std::size_t i = 0; i < a.frames.size(); ++i) EXPECT_GE(b.frames[i], a.frames[i]);
}

TEST(FrontendTest, Deterministic) {
  const auto w = noise(20000, 4);
  EXPECT_EQ(frontend(w)[0].frames, frontend(w)[0].frames);
  for (float v : frontend(w)[0].frames.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(WavTest, RoundTripsSixteenBitMono) {
  auto w = noise(1000, 5, 0.9);
  for (auto& s : w.samples) s = std::round(s * 32768.0f) / 32768.0f;
  const auto back = parse_wav(encode_wav(w));
  EXPECT_EQ(back.sample_rate_hz, 16000);
  EXPECT_EQ(back.samples, w.samples);
}

TEST(WavTest, RejectsStereoAndEightBit) {
  auto bytes = encode_wav(noise(100, 6));
  auto stereo = bytes;
  stereo[22] = 2;
  try {
    parse_wav(stereo);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos);
  }
  auto eight = bytes;
  eight[34] = 8;
  EXPECT_THROW(parse_wav(eight), Error);
  EXPECT_THROW(parse_wav({'n', 'o', 'p', 'e'}), Error);
}

}  // namespace
}  // namespace frill
