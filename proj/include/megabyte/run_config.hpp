#pragma once

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "megabyte/config.hpp"

namespace megabyte {

// Everything a training run needs, as read from a key=value file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for '" + key + "': '" + text + "'");
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad value for '" + key + "': '" + text + "' (expected true or false)");
}

struct ConfigField {
  std::string key;
  bool required;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class S, class T>
ConfigField field(const std::string& key, bool required, S RunConfig::*section, T S::*member) {
  ConfigField f{key, required, {}, {}};
  f.set = [key, section, member](RunConfig& rc, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
      rc.*section.*member = parse_bool(key, text);
    } else {
      rc.*section.*member = parse_number<T>(key, text);
    }
  };
  f.get = [section, member](const RunConfig& rc) -> std::string {
    const T v = rc.*section.*member;
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(v);
    } else {
      return std::to_string(v);
    }
  };
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  using M = ModelConfig;
  using R = TrainConfig;
  auto m = &RunConfig::model;
  auto t = &RunConfig::train;
  static const std::vector<ConfigField> fields = {
      field("vocab_size", false, m, &M::vocab_size),
      field("context_length", true, m, &M::context_length),
      field("patch_size", true, m, &M::patch_size),
      field("global_dim", true, m, &M::global_dim),
      field("local_dim", true, m, &M::local_dim),
      field("global_layers", true, m, &M::global_layers),
      field("local_layers", true, m, &M::local_layers),
      field("global_heads", false, m, &M::global_heads),
      field("local_heads", false, m, &M::local_heads),
      field("ff_multiplier", false, m, &M::ff_multiplier),
      field("cross_patch_window", false, m, &M::cross_patch_window),
      field("conv_encoder", false, m, &M::conv_encoder),
      field("no_local", false, m, &M::no_local),
      field("no_global", false, m, &M::no_global),
      field("dropout", false, m, &M::dropout),
      field("peak_lr", true, t, &R::peak_lr),
      field("warmup_updates", false, t, &R::warmup_updates),
      field("total_updates", true, t, &R::total_updates),
      field("end_lr", false, t, &R::end_lr),
      field("clip_norm", false, t, &R::clip_norm),
      field("weight_decay", false, t, &R::weight_decay),
      field("adam_beta1", false, t, &R::adam_beta1),
      field("adam_beta2", false, t, &R::adam_beta2),
      field("adam_eps", false, t, &R::adam_eps),
      field("init_std", false, t, &R::init_std),
      field("batch_size", false, t, &R::batch_size),
      field("window_stride", false, t, &R::window_stride),
      field("seed", false, t, &R::seed),
  };
  return fields;
}

}  // namespace detail

// Parses `key = value` lines; '#' starts a comment. Unknown or repeated keys
// and missing required keys are errors; other keys keep their defaults.
inline RunConfig parse_run_config(const std::string& text) {
  std::map<std::string, const detail::ConfigField*> by_key;
  for (const auto& f : detail::config_fields()) by_key[f.key] = &f;
  RunConfig rc;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(line_no));
    if (!seen.insert(key).second) throw ConfigError("duplicate config key '" + key + "'");
    it->second->set(rc, value);
  }
  for (const auto& f : detail::config_fields()) {
    if (f.required && !seen.contains(f.key)) throw ConfigError("missing required config key '" + f.key + "'");
  }
  rc.validate();
  return rc;
}

// Every key, one per line, in a fixed order; parses back to the same values.
inline std::string serialize_run_config(const RunConfig& rc) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + "=" + f.get(rc) + "\n";
  return out;
}

}  // namespace megabyte
