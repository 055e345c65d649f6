// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// INI configuration with sections [data], [train], [model], [wpe], [eval].
// Unknown sections or keys are errors; relative paths resolve against the
// directory holding the config file.

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dssdrv/dataset.hpp"
#include "dssdrv/nn.hpp"
#include "dssdrv/train.hpp"
#include "dssdrv/wpe.hpp"

namespace dssdrv {

struct EvalConfig {
  int jobs = 1;
  std::optional<fs::path> manifest, outputs;
};

struct AppConfig {
  DataConfig data;
  std::optional<fs::path> corpus, data_out;
  TrainConfig train;
  std::optional<fs::path> train_data, train_out;
  UNetConfig model;
  bool tiny = false;
  WpeConfig wpe;
  EvalConfig eval;
};

namespace detail {

template <typename V>
V parse_value(const std::string& key, const std::string& text);

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& text) {
  return text;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + text + "'");
}

template <typename V>
V parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  is >> v;
  DSSDRV_CHECK(!is.fail() && (is >> std::ws).eof(), ConfigError, "key '", key, "': cannot parse '", text, "'");
  if constexpr (std::is_unsigned_v<V>)
    DSSDRV_CHECK(text.find('-') == std::string::npos, ConfigError, "key '", key, "': must not be negative");
  return v;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    DSSDRV_CHECK(b != std::string::npos, ConfigError, "key '", key, "': empty list entry in '", text, "'");
    out.push_back(parse_value<int>(key, item.substr(b, e - b + 1)));
  }
  DSSDRV_CHECK(!out.empty(), ConfigError, "key '", key, "': empty list");
  return out;
}

}  // namespace detail

// Parses config text. `base` anchors relative paths.
inline AppConfig parse_config(std::istream& in, const fs::path& base, const std::string& origin = "config") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  AppConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto path = [&](std::optional<fs::path>& dst) {
    return [&dst, &base](const std::string&, const std::string& v) { dst = base / fs::path(v); };
  };
  auto num = [](auto& dst) {
    return [&dst](const std::string& k, const std::string& v) {
      dst = detail::parse_value<std::remove_reference_t<decltype(dst)>>(k, v);
    };
  };
  // The tiny preset is applied before any explicit [model] key.
  std::optional<bool> tiny;
  std::map<std::string, std::map<std::string, Setter>> keys{
      {"data",
       {{"scenario", [&](const std::string&, const std::string& v) { c.data.scenario = parse_scenario(v); }},
        {"mics", num(c.data.mics)},
        {"count", num(c.data.count)},
        {"noisy", num(c.data.noisy)},
        {"seed", num(c.data.seed)},
        {"snr_db", num(c.data.noise.snr_db)},
        {"ar_coefficient", num(c.data.noise.ar_coefficient)},
        {"synth_seconds", num(c.data.synth_seconds)},
        {"peak", num(c.data.peak)},
        {"jobs", num(c.data.jobs)},
        {"corpus", path(c.corpus)},
        {"out", path(c.data_out)}}},
      {"train",
       {{"set_sizes", [&](const std::string& k, const std::string& v) { c.train.set_sizes = detail::parse_int_list(k, v); }},
        {"batch", num(c.train.batch)},
        {"lr", num(c.train.adam.lr)},
        {"beta1", num(c.train.adam.beta1)},
        {"beta2", num(c.train.adam.beta2)},
        {"eps", num(c.train.adam.eps)},
        {"steps", num(c.train.steps)},
        {"seed", num(c.train.seed)},
        {"checkpoint_every", num(c.train.checkpoint_every)},
        {"val_fraction", num(c.train.val_fraction)},
        {"data", path(c.train_data)},
        {"out", path(c.train_out)}}},
      {"model",
       {{"tiny", [&](const std::string& k, const std::string& v) { tiny = detail::parse_value<bool>(k, v); }},
        {"depth", num(c.model.depth)},
        {"base_width", num(c.model.base_width)},
        {"t_slice", num(c.model.t_slice)},
        {"aggregation", [&](const std::string&, const std::string& v) { c.model.aggregation = parse_aggregation(v); }}}},
      {"wpe",
       {{"taps", num(c.wpe.taps)},
        {"delay", num(c.wpe.delay)},
        {"iterations", num(c.wpe.iterations)},
        {"psd_floor", num(c.wpe.psd_floor)},
        {"loading", num(c.wpe.loading)},
        {"jobs", num(c.wpe.jobs)}}},
      {"eval", {{"jobs", num(c.eval.jobs)}, {"manifest", path(c.eval.manifest)}, {"outputs", path(c.eval.outputs)}}},
  };
  for (const auto& [section, body] : tree) {
    DSSDRV_CHECK(body.data().empty(), ConfigError, origin, ": key '", section, "' outside any section");
    DSSDRV_CHECK(keys.count(section), ConfigError, origin, ": unknown section [", section, "]");
  }
  if (auto m = tree.get_child_optional("model"); m && m->count("tiny")) {
    keys["model"]["tiny"]("model.tiny", m->get<std::string>("tiny"));
    if (*tiny) {
      c.model = UNetConfig::tiny();
      c.tiny = true;
    }
  }
  for (const auto& [section, body] : tree) {
    auto& table = keys[section];
    for (const auto& [key, value] : body) {
      auto k = table.find(key);
      DSSDRV_CHECK(k != table.end(), ConfigError, origin, ": unknown key '", key, "' in [", section, "]");
      if (section == "model" && key == "tiny") continue;
      k->second(section + "." + key, value.data());
    }
  }
  c.data.validate();
  c.train.validate();
  c.model.validate();
  c.wpe.validate();
  DSSDRV_CHECK(c.eval.jobs >= 1, ConfigError, origin, ": eval.jobs must be at least 1");
  return c;
}

inline AppConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  DSSDRV_CHECK(f.good(), ConfigError, "cannot read config ", path.string());
  return parse_config(f, fs::absolute(path).parent_path(), path.string());
}

}  // namespace dssdrv
