// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Checkpoint file layout:
//   "DSSDRV1\0" | u64 LE metadata length | JSON metadata |
//   float32 LE tensors in metadata order | u32 LE CRC32 of all prior bytes
// The metadata carries the architecture, normalization range, the tensor
// table and (for training checkpoints) optimizer and sampler state.

#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dssdrv/error.hpp"
#include "dssdrv/nn.hpp"
#include "dssdrv/optim.hpp"
#include "dssdrv/signal.hpp"
#include "json.hpp"

namespace dssdrv {

inline constexpr std::array<char, 8> kCheckpointMagic = {'D', 'S', 'S', 'D', 'R', 'V', '1', '\0'};
inline constexpr int kCheckpointFormat = 1;

// Everything needed to continue a run exactly where it stopped.
struct TrainingState {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::string rng;  // textual std::mt19937_64 state
  AdamConfig adam;
  std::uint64_t adam_steps = 0;
  std::vector<std::vector<float>> adam_m, adam_v;
  std::optional<double> best_val;
};

template <typename T>
struct LoadedCheckpoint {
  DssUNet<T> net;
  NormStats stats;
  std::uint64_t seed = 0;
  std::optional<TrainingState> train;
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename T>
void put_floats(std::vector<unsigned char>& out, std::span<const T> values) {
  for (T x : values) {
    const float f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

template <typename T>
void get_floats(const unsigned char* p, std::span<T> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t bits = get_u32(p + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    values[i] = static_cast<T>(f);
  }
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline nlohmann::json model_json(const UNetConfig& c) {
  return {{"depth", c.depth},
          {"base_width", c.base_width},
          {"t_slice", c.t_slice},
          {"freq_bins", c.freq_bins},
          {"aggregation", to_string(c.aggregation)}};
}

inline UNetConfig model_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.depth = j.at("depth").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.t_slice = j.at("t_slice").get<int>();
  c.freq_bins = j.at("freq_bins").get<int>();
  c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  return c;
}

inline nlohmann::json shape_json(std::span<const std::int64_t> s) { return nlohmann::json(std::vector<std::int64_t>(s.begin(), s.end())); }

}  // namespace detail

// Serializes to bytes; `save_checkpoint` writes them to disk.
template <typename T>
std::vector<unsigned char> checkpoint_bytes(DssUNet<T>& net, const NormStats& stats, std::uint64_t seed,
                                            const TrainingState* train = nullptr) {
  stats.validate();
  auto set = net.parameters();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : set.params)
    tensors.push_back({{"name", p.name}, {"kind", "param"}, {"shape", detail::shape_json(p.tensor->shape())}});
  for (const auto& b : set.buffers)
    tensors.push_back({{"name", b.name}, {"kind", "buffer"}, {"shape", {b.values->size()}}});
  if (train) {
    DSSDRV_CHECK(train->adam_m.size() == set.params.size() && train->adam_v.size() == set.params.size(), ShapeError,
                 "optimizer state does not match the network's parameter list");
    for (std::size_t i = 0; i < set.params.size(); ++i) {
      DSSDRV_CHECK(train->adam_m[i].size() == set.params[i].tensor->numel() &&
                       train->adam_v[i].size() == set.params[i].tensor->numel(),
                   ShapeError, "optimizer moments for ", set.params[i].name, " have the wrong size");
      tensors.push_back({{"name", set.params[i].name}, {"kind", "adam_m"}, {"shape", {train->adam_m[i].size()}}});
    }
    for (std::size_t i = 0; i < set.params.size(); ++i)
      tensors.push_back({{"name", set.params[i].name}, {"kind", "adam_v"}, {"shape", {train->adam_v[i].size()}}});
  }
  nlohmann::json meta = {{"format", kCheckpointFormat},
                         {"model", detail::model_json(net.config())},
                         {"norm", {{"min", stats.min}, {"max", stats.max}}},
                         {"seed", seed},
                         {"tensors", tensors}};
  if (train) {
    nlohmann::json t = {{"step", train->step},
                        {"seed", train->seed},
                        {"rng", train->rng},
                        {"adam",
                         {{"lr", train->adam.lr},
                          {"beta1", train->adam.beta1},
                          {"beta2", train->adam.beta2},
                          {"eps", train->adam.eps},
                          {"t", train->adam_steps}}}};
    t["best_val"] = train->best_val ? nlohmann::json(*train->best_val) : nlohmann::json(nullptr);
    meta["train"] = t;
  }
  const std::string text = meta.dump();
  std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& p : set.params) detail::put_floats<T>(out, p.tensor->data());
  for (const auto& b : set.buffers) detail::put_floats<T>(out, std::span<const T>(*b.values));
  if (train) {
    for (const auto& m : train->adam_m) detail::put_floats<float>(out, m);
    for (const auto& v : train->adam_v) detail::put_floats<float>(out, v);
  }
  detail::put_u32(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, DssUNet<T>& net, const NormStats& stats, std::uint64_t seed,
                     const TrainingState* train = nullptr) {
  const auto bytes = checkpoint_bytes(net, stats, seed, train);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    DSSDRV_CHECK(f.good(), FormatError, "cannot write checkpoint ", tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    DSSDRV_CHECK(f.good(), FormatError, "short write on checkpoint ", tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
LoadedCheckpoint<T> parse_checkpoint(std::span<const unsigned char> bytes, const std::string& origin = "checkpoint") {
  constexpr std::size_t kHeader = 16;
  DSSDRV_CHECK(bytes.size() >= kCheckpointMagic.size(), FormatError, origin, ": truncated file (", bytes.size(),
               " bytes)");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    DSSDRV_CHECK(std::memcmp(bytes.data(), "DSSDRV", 6) != 0, FormatError, origin,
                 ": unsupported checkpoint version '", std::string(reinterpret_cast<const char*>(bytes.data()) + 6, 1),
                 "' (this build reads version 1)");
    throw FormatError(origin + ": not a checkpoint (bad magic, expected DSSDRV1)");
  }
  DSSDRV_CHECK(bytes.size() >= kHeader + 4, FormatError, origin, ": truncated file (", bytes.size(), " bytes)");
  const std::uint64_t meta_len = detail::get_u64(bytes.data() + 8);
  DSSDRV_CHECK(meta_len <= bytes.size() - kHeader - 4, FormatError, origin, ": truncated file (metadata of ",
               meta_len, " bytes does not fit)");
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = detail::get_u32(bytes.data() + body);
  const std::uint32_t actual = detail::crc32_of(bytes.data(), body);

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.begin() + kHeader, bytes.begin() + static_cast<std::ptrdiff_t>(kHeader + meta_len));
  } catch (const nlohmann::json::exception& e) {
    DSSDRV_CHECK(stored == actual, FormatError, origin, ": checksum mismatch");
    throw FormatError(origin + ": unreadable metadata: " + e.what());
  }

  LoadedCheckpoint<T> out;
  std::size_t payload = 0;
  try {
    DSSDRV_CHECK(meta.at("format").get<int>() == kCheckpointFormat, FormatError, origin,
                 ": unsupported checkpoint format ", meta.at("format").dump());
    for (const auto& t : meta.at("tensors")) {
      std::size_t n = 1;
      for (const auto& d : t.at("shape")) n *= d.get<std::size_t>();
      payload += 4 * n;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed metadata: " + e.what());
  }
  DSSDRV_CHECK(kHeader + meta_len + payload <= body, FormatError, origin, ": truncated file (tensor data needs ",
               payload, " bytes, ", body - kHeader - meta_len, " present)");
  DSSDRV_CHECK(stored == actual, FormatError, origin, ": checksum mismatch");
  DSSDRV_CHECK(kHeader + meta_len + payload == body, FormatError, origin, ": ", body - kHeader - meta_len - payload,
               " unexpected trailing bytes");

  try {
    const auto cfg = detail::model_from_json(meta.at("model"));
    out.net = DssUNet<T>(cfg, 0);
    out.stats = {meta.at("norm").at("min").get<double>(), meta.at("norm").at("max").get<double>()};
    out.stats.validate();
    out.seed = meta.at("seed").get<std::uint64_t>();
    auto set = out.net.parameters();
    const unsigned char* p = bytes.data() + kHeader + meta_len;
    const auto& table = meta.at("tensors");
    std::size_t idx = 0;
    auto expect = [&](const std::string& kind, const std::string& name, std::size_t n) {
      DSSDRV_CHECK(idx < table.size(), FormatError, origin, ": tensor table ends before ", name);
      const auto& t = table[idx++];
      std::size_t count = 1;
      for (const auto& d : t.at("shape")) count *= d.get<std::size_t>();
      DSSDRV_CHECK(t.at("kind").get<std::string>() == kind && t.at("name").get<std::string>() == name && count == n,
                   FormatError, origin, ": tensor table entry ", t.dump(), " does not match ", kind, " ", name,
                   " of ", n, " values");
    };
    for (auto& prm : set.params) {
      expect("param", prm.name, prm.tensor->numel());
      detail::get_floats<T>(p, prm.tensor->data());
      p += 4 * prm.tensor->numel();
    }
    for (auto& b : set.buffers) {
      expect("buffer", b.name, b.values->size());
      detail::get_floats<T>(p, std::span<T>(*b.values));
      p += 4 * b.values->size();
    }
    if (meta.contains("train")) {
      const auto& t = meta.at("train");
      TrainingState ts;
      ts.step = t.at("step").get<std::uint64_t>();
      ts.seed = t.at("seed").get<std::uint64_t>();
      ts.rng = t.at("rng").get<std::string>();
      ts.adam.lr = t.at("adam").at("lr").get<double>();
      ts.adam.beta1 = t.at("adam").at("beta1").get<double>();
      ts.adam.beta2 = t.at("adam").at("beta2").get<double>();
      ts.adam.eps = t.at("adam").at("eps").get<double>();
      ts.adam_steps = t.at("adam").at("t").get<std::uint64_t>();
      if (!t.at("best_val").is_null()) ts.best_val = t.at("best_val").get<double>();
      for (auto* moments : {&ts.adam_m, &ts.adam_v}) {
        const std::string kind = moments == &ts.adam_m ? "adam_m" : "adam_v";
        for (auto& prm : set.params) {
          expect(kind, prm.name, prm.tensor->numel());
          std::vector<float> v(prm.tensor->numel());
          detail::get_floats<float>(p, std::span<float>(v));
          p += 4 * v.size();
          moments->push_back(std::move(v));
        }
      }
      out.train = std::move(ts);
    }
    DSSDRV_CHECK(idx == table.size(), FormatError, origin, ": tensor table has ", table.size() - idx,
                 " unused entries");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": invalid model description: " + e.what());
  }
  return out;
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  DSSDRV_CHECK(f.good(), FormatError, "cannot open checkpoint ", path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint<T>(bytes, path.string());
}

}  // namespace dssdrv
