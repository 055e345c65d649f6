// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// RIFF/WAVE PCM, 16-bit signed little-endian, mono.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dssdrv/error.hpp"

namespace dssdrv {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  std::size_t size() const { return samples.size(); }
};

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  DSSDRV_CHECK(in, FormatError, "cannot open WAV file ", path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  DSSDRV_CHECK(bytes.size() >= 12 && std::memcmp(bytes.data(), "RIFF", 4) == 0 &&
                   std::memcmp(bytes.data() + 8, "WAVE", 4) == 0,
               FormatError, path.string(), ": not a RIFF/WAVE file");
  std::size_t pos = 12;
  bool have_fmt = false;
  int channels = 0, bits = 0, rate = 0;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t size = detail::read_u32(bytes.data() + pos + 4);
    const unsigned char* body = bytes.data() + pos + 8;
    const std::size_t avail = bytes.size() - pos - 8;
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      DSSDRV_CHECK(size >= 16 && avail >= 16, FormatError, path.string(), ": truncated fmt chunk");
      const int format = detail::read_u16(body);
      channels = detail::read_u16(body + 2);
      rate = static_cast<int>(detail::read_u32(body + 4));
      bits = detail::read_u16(body + 14);
      DSSDRV_CHECK(format == 1 || format == 0xFFFE, FormatError, path.string(), ": only PCM WAV is supported");
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      DSSDRV_CHECK(have_fmt, FormatError, path.string(), ": data chunk before fmt chunk");
      DSSDRV_CHECK(channels == 1 && bits == 16, FormatError, path.string(), ": expected 16-bit mono, got ",
                   channels, " channel(s) at ", bits, " bits");
      const std::size_t n = std::min<std::size_t>(size, avail) / 2;
      Waveform w;
      w.sample_rate = rate;
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        w.samples[i] = static_cast<std::int16_t>(detail::read_u16(body + 2 * i)) / 32768.0;
      return w;
    }
    pos += 8 + size + (size & 1u);
  }
  throw FormatError(path.string() + ": no data chunk");
}

// Samples are clipped to [-1, 1) and rounded to the nearest 16-bit level.
inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  DSSDRV_CHECK(w.sample_rate > 0, FormatError, "invalid sample rate ", w.sample_rate);
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (double x : w.samples) {
    DSSDRV_CHECK(std::isfinite(x), NumericError, "non-finite sample written to ", path.string());
    const double q = std::clamp(std::round(x * 32768.0), -32768.0, 32767.0);
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  DSSDRV_CHECK(f, FormatError, "cannot write WAV file ", path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  DSSDRV_CHECK(f, FormatError, "short write to ", path.string());
}

}  // namespace dssdrv
