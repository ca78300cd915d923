// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "isalux/losses.hpp"
#include "isalux/model.hpp"

namespace isalux {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Optimization and data settings.
struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t patch = 64;
  std::size_t batch = 2;
  std::vector<double> schedule_iters{0, 92000, 208000, 300000};  // rescaled so the last anchor lands on `iterations`
  std::vector<double> schedule_lrs{2e-4, 3e-4, 2e-4, 1e-6};
  double grad_clip = 1.0;  // global-norm threshold, 0 disables
  std::size_t checkpoint_every = 500;
  bool augment = true;
};

/// Everything a run needs; serialized into every checkpoint.
struct RunConfig {
  ModelConfig model;
  HybridLossConfig loss;
  std::string perceptual_weights;  // optional ISAT1 file for the feature extractor
  TrainConfig train;

  /// Small-footprint defaults for CPU training.
  static RunConfig desk() {
    RunConfig c;
    c.loss.msssim_scales = 3;
    c.loss.msssim_weights = default_msssim_weights(3);
    return c;
  }

  /// Full-size training settings.
  static RunConfig paper() {
    RunConfig c;
    c.train.iterations = 300000;
    c.train.patch = 256;
    c.train.batch = 8;
    c.train.grad_clip = 0.0;
    c.train.checkpoint_every = 10000;
    return c;
  }

  void validate() const {
    model.validate();
    loss.validate();
    if (train.iterations == 0 || train.batch == 0 || train.checkpoint_every == 0) {
      throw ConfigError("config: iterations, batch and checkpoint_every must be >= 1");
    }
    if (train.patch == 0 || train.patch % 4 != 0) {
      throw ConfigError("config: patch must be a positive multiple of 4, got " + std::to_string(train.patch));
    }
    if (loss.lambda_ssim > 0) {
      const std::size_t needed = (std::size_t{1} << (loss.msssim_scales - 1)) * kSsimWindow;
      if (train.patch < needed) {
        throw ConfigError(
            "config: patch " + std::to_string(train.patch) + " is too small for " + std::to_string(loss.msssim_scales) +
            " MS-SSIM scales (needs " + std::to_string(needed) +
            "); max scales for this patch = " + std::to_string(max_msssim_scales(train.patch, train.patch)));
      }
    }
    if (train.schedule_iters.size() != train.schedule_lrs.size() || train.schedule_iters.size() < 2) {
      throw ConfigError("config: schedule_iters and schedule_lrs need the same length (>= 2)");
    }
    if (train.grad_clip < 0) throw ConfigError("config: grad_clip must be >= 0");
  }
};

namespace detail {

using ConfigValue = std::variant<bool, std::int64_t, std::uint64_t, double, std::string, std::vector<double>>;

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& text, const std::string& where) {
  double v = 0;
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && *first == '+') ++first;
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) throw ConfigError(where + ": invalid number '" + text + "'");
  return v;
}

inline ConfigValue parse_value(const std::string& text, const std::string& where) {
  if (text.empty()) throw ConfigError(where + ": missing value");
  if (text == "true") return true;
  if (text == "false") return false;
  if (text.front() == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < text.size() && text[i] != '"'; ++i) {
      if (text[i] == '\\' && i + 1 < text.size()) ++i;
      out += text[i];
    }
    if (i != text.size() - 1) throw ConfigError(where + ": malformed string " + text);
    return out;
  }
  if (text.front() == '[') {
    if (text.back() != ']') throw ConfigError(where + ": unterminated array");
    std::vector<double> out;
    std::stringstream ss(text.substr(1, text.size() - 2));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(parse_number(item, where));
    }
    return out;
  }
  if (text.find_first_of(".eEn") == std::string::npos) {
    const char* first = text.data() + (text.front() == '+' ? 1 : 0);
    const char* last = text.data() + text.size();
    std::int64_t i = 0;
    auto res = std::from_chars(first, last, i);
    if (res.ec == std::errc() && res.ptr == last) return i;
    std::uint64_t u = 0;
    res = std::from_chars(first, last, u);
    if (res.ec == std::errc() && res.ptr == last) return u;
    throw ConfigError(where + ": invalid integer '" + text + "'");
  }
  return parse_number(text, where);
}

/// Strips a trailing comment that is not inside a string.
inline std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const ConfigValue&, const std::string&)> set;
};

inline std::size_t as_count(const ConfigValue& v, const std::string& where) {
  if (const auto* i = std::get_if<std::int64_t>(&v); i && *i >= 0) return static_cast<std::size_t>(*i);
  if (const auto* u = std::get_if<std::uint64_t>(&v)) return static_cast<std::size_t>(*u);
  throw ConfigError(where + ": expected a nonnegative integer");
}

inline double as_float(const ConfigValue& v, const std::string& where) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  if (const auto* u = std::get_if<std::uint64_t>(&v)) return static_cast<double>(*u);
  throw ConfigError(where + ": expected a number");
}

inline bool as_bool(const ConfigValue& v, const std::string& where) {
  if (const auto* b = std::get_if<bool>(&v)) return *b;
  throw ConfigError(where + ": expected true or false");
}

inline std::string as_string(const ConfigValue& v, const std::string& where) {
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  throw ConfigError(where + ": expected a quoted string");
}

inline std::vector<double> as_array(const ConfigValue& v, const std::string& where) {
  if (const auto* a = std::get_if<std::vector<double>>(&v)) return *a;
  throw ConfigError(where + ": expected an array of numbers");
}

inline std::string format_array(const std::vector<double>& a) {
  std::string s = "[";
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool integral = a[i] == std::trunc(a[i]) && std::abs(a[i]) < 1e15;
    s += (i ? ", " : "") + (integral ? std::to_string(static_cast<long long>(a[i])) : format_double(a[i]));
  }
  return s + "]";
}

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

template <class M>
Field count_field(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member](RunConfig& c, const ConfigValue& v, const std::string& w) { member(c) = as_count(v, w); }};
}

template <class M>
Field float_field(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); },
          [member](RunConfig& c, const ConfigValue& v, const std::string& w) { member(c) = as_float(v, w); }};
}

template <class M>
Field bool_field(std::string key, M member) {
  return {key,
          [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [member](RunConfig& c, const ConfigValue& v, const std::string& w) { member(c) = as_bool(v, w); }};
}

template <class M>
Field array_field(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return format_array(member(const_cast<RunConfig&>(c))); },
          [member](RunConfig& c, const ConfigValue& v, const std::string& w) { member(c) = as_array(v, w); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(count_field("seed", [](RunConfig& c) -> std::uint64_t& { return c.model.seed; }));
    f.push_back(count_field("channels", [](RunConfig& c) -> std::size_t& { return c.model.channels; }));
    f.push_back({"blocks",
                 [](const RunConfig& c) {
                   return format_array({static_cast<double>(c.model.blocks[0]), static_cast<double>(c.model.blocks[1]),
                                        static_cast<double>(c.model.blocks[2])});
                 },
                 [](RunConfig& c, const ConfigValue& v, const std::string& w) {
                   const auto a = as_array(v, w);
                   if (a.size() != 3) throw ConfigError(w + ": blocks needs 3 entries (enc0, enc1, bottleneck)");
                   for (std::size_t i = 0; i < 3; ++i) {
                     if (a[i] < 0 || a[i] != std::floor(a[i])) throw ConfigError(w + ": blocks must be integers");
                     c.model.blocks[i] = static_cast<std::size_t>(a[i]);
                   }
                 }});
    f.push_back(count_field("lora_rank", [](RunConfig& c) -> std::size_t& { return c.model.lora_rank; }));
    f.push_back(count_field("experts", [](RunConfig& c) -> std::size_t& { return c.model.experts; }));
    f.push_back(count_field("top_k", [](RunConfig& c) -> std::size_t& { return c.model.top_k; }));
    f.push_back(count_field("expansion", [](RunConfig& c) -> std::size_t& { return c.model.expansion; }));
    f.push_back(count_field("heads_base", [](RunConfig& c) -> std::size_t& { return c.model.heads_base; }));
    f.push_back(float_field("upsilon_init", [](RunConfig& c) -> double& { return c.model.upsilon_init; }));
    f.push_back(float_field("omega_init", [](RunConfig& c) -> double& { return c.model.omega_init; }));
    f.push_back(bool_field("moe_renormalize", [](RunConfig& c) -> bool& { return c.model.moe_renormalize; }));
    f.push_back(bool_field("use_illumination", [](RunConfig& c) -> bool& { return c.model.use_illumination; }));
    f.push_back(bool_field("use_semantic", [](RunConfig& c) -> bool& { return c.model.use_semantic; }));
    f.push_back(bool_field("use_lora", [](RunConfig& c) -> bool& { return c.model.use_lora; }));
    f.push_back(count_field("semantic_classes", [](RunConfig& c) -> std::size_t& { return c.model.semantic_classes; }));
    f.push_back(float_field("lambda_l2", [](RunConfig& c) -> double& { return c.loss.lambda_l2; }));
    f.push_back(float_field("lambda_perc", [](RunConfig& c) -> double& { return c.loss.lambda_perc; }));
    f.push_back(float_field("lambda_ssim", [](RunConfig& c) -> double& { return c.loss.lambda_ssim; }));
    f.push_back(count_field("msssim_scales", [](RunConfig& c) -> std::size_t& { return c.loss.msssim_scales; }));
    f.push_back(
        array_field("msssim_weights", [](RunConfig& c) -> std::vector<double>& { return c.loss.msssim_weights; }));
    f.push_back(
        {"perceptual_weights", [](const RunConfig& c) { return quote(c.perceptual_weights); },
         [](RunConfig& c, const ConfigValue& v, const std::string& w) { c.perceptual_weights = as_string(v, w); }});
    f.push_back(count_field("iterations", [](RunConfig& c) -> std::size_t& { return c.train.iterations; }));
    f.push_back(count_field("patch", [](RunConfig& c) -> std::size_t& { return c.train.patch; }));
    f.push_back(count_field("batch", [](RunConfig& c) -> std::size_t& { return c.train.batch; }));
    f.push_back(
        array_field("schedule_iters", [](RunConfig& c) -> std::vector<double>& { return c.train.schedule_iters; }));
    f.push_back(array_field("schedule_lrs", [](RunConfig& c) -> std::vector<double>& { return c.train.schedule_lrs; }));
    f.push_back(float_field("grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; }));
    f.push_back(count_field("checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; }));
    f.push_back(bool_field("augment", [](RunConfig& c) -> bool& { return c.train.augment; }));
    return f;
  }();
  return table;
}

}  // namespace detail

/// Names of all recognized configuration keys, in serialization order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.push_back(f.key);
  return keys;
}

/// Sets one key from its textual value (same syntax as a config file line).
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value,
                             const std::string& where = "config") {
  for (const auto& f : detail::fields()) {
    if (f.key == key) {
      f.set(cfg, detail::parse_value(detail::trim(value), where + ": " + key), where + ": " + key);
      return;
    }
  }
  throw ConfigError(where + ": unknown key '" + key + "'");
}

/// Applies `key = value` lines on top of `base`. Unknown or repeated keys are errors.
inline RunConfig parse_config(const std::string& text, RunConfig base = RunConfig::desk(),
                              const std::string& source = "config") {
  std::istringstream in(text);
  std::string line;
  std::map<std::string, std::size_t> seen;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    line = detail::trim(detail::strip_comment(line));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    if (auto [it, fresh] = seen.emplace(key, lineno); !fresh) {
      throw ConfigError(where + ": key '" + key + "' already set on line " + std::to_string(it->second));
    }
    set_config_value(base, key, line.substr(eq + 1), where);
  }
  return base;
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

inline RunConfig load_config(const std::string& path, RunConfig base = RunConfig::desk()) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base), path);
}

}  // namespace isalux
