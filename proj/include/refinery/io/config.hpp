#pragma once

// Run configuration: an INI document with [pipeline], [generator], [scorer]
// and [judge] sections. Credentials never live in the file; they come from
// AVR_GENERATOR_API_KEY, AVR_SCORER_API_KEY and AVR_JUDGE_API_KEY.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "refinery/backends.hpp"
#include "refinery/core.hpp"

namespace refinery::io {

enum class BackendKind { mock, http };

struct BackendSpec {
  BackendKind kind = BackendKind::mock;
  // http
  std::string base_url;
  std::string path;
  std::string model;
  std::string api_key;  // from the environment only
  int timeout_seconds = 120;
  // mock
  std::optional<std::filesystem::path> script;
  std::optional<std::uint64_t> seed;  // defaults to the pipeline seed
  double default_reward = 0.0;
  bool hashed = false;
  double length_bias = 0.0;
};

struct RunConfig {
  PipelineConfig pipeline;
  BackendSpec generator;
  BackendSpec scorer;
  BackendSpec judge;
  RetryPolicy retry;
};

namespace detail {

inline const std::set<std::string> pipeline_keys = {
    "num_criticisms", "num_improvements", "max_rounds",     "length_control_samples",
    "gamma",          "temperature",      "top_p",          "max_tokens",
    "cot_max_tokens", "max_concurrency",  "seed",           "max_attempts",
    "initial_backoff_ms"};

inline const std::set<std::string> backend_keys = {
    "kind",   "base_url", "path",           "model",  "timeout_seconds",
    "script", "seed",     "default_reward", "hashed", "length_bias"};

template <class T>
T get(const boost::property_tree::ptree& section, const std::string& name, const std::string& key,
      T fallback) {
  auto v = section.get_optional<std::string>(key);
  if (!v) return fallback;
  std::istringstream in(*v);
  T out{};
  if constexpr (std::is_same_v<T, bool>) {
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw ConfigError("[" + name + "] " + key + ": expected true/false, got '" + *v + "'");
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v->empty() && (*v)[0] == '-')
      throw ConfigError("[" + name + "] " + key + ": must be non-negative");
  }
  if constexpr (!std::is_same_v<T, bool>) {
    in >> out;
    if (!in || !(in >> std::ws).eof())
      throw ConfigError("[" + name + "] " + key + ": cannot parse '" + *v + "'");
  }
  return out;
}

inline void check_keys(const boost::property_tree::ptree& section, const std::string& name,
                       const std::set<std::string>& allowed) {
  for (const auto& [k, _] : section)
    if (!allowed.count(k)) throw ConfigError("[" + name + "] unknown key '" + k + "'");
}

inline BackendSpec parse_backend(const boost::property_tree::ptree& root, const std::string& name,
                                 const std::string& default_path, const char* env_var,
                                 const std::filesystem::path& base_dir) {
  BackendSpec spec;
  spec.path = default_path;
  auto sec = root.get_child_optional(name);
  if (sec) {
    check_keys(*sec, name, backend_keys);
    auto kind = sec->get<std::string>("kind", "mock");
    if (kind == "mock")
      spec.kind = BackendKind::mock;
    else if (kind == "http")
      spec.kind = BackendKind::http;
    else
      throw ConfigError("[" + name + "] kind must be 'mock' or 'http'");
    spec.base_url = sec->get<std::string>("base_url", "");
    spec.path = sec->get<std::string>("path", default_path);
    spec.model = sec->get<std::string>("model", "");
    spec.timeout_seconds = get<int>(*sec, name, "timeout_seconds", 120);
    if (auto s = sec->get_optional<std::string>("script")) {
      std::filesystem::path p(*s);
      spec.script = p.is_absolute() ? p : base_dir / p;
    }
    if (sec->get_optional<std::string>("seed"))
      spec.seed = get<std::uint64_t>(*sec, name, "seed", 0);
    spec.default_reward = get<double>(*sec, name, "default_reward", 0.0);
    spec.hashed = get<bool>(*sec, name, "hashed", false);
    spec.length_bias = get<double>(*sec, name, "length_bias", 0.0);
    if (spec.kind == BackendKind::http && spec.base_url.empty())
      throw ConfigError("[" + name + "] http backends need base_url");
    if (spec.timeout_seconds <= 0) throw ConfigError("[" + name + "] timeout_seconds must be positive");
  }
  if (const char* key = std::getenv(env_var)) spec.api_key = key;
  return spec;
}

}  // namespace detail

inline RunConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = ".") {
  boost::property_tree::ptree root;
  try {
    boost::property_tree::read_ini(in, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [name, _] : root)
    if (name != "pipeline" && name != "generator" && name != "scorer" && name != "judge")
      throw ConfigError("unknown config section [" + name + "]");

  RunConfig cfg;
  if (auto p = root.get_child_optional("pipeline")) {
    detail::check_keys(*p, "pipeline", detail::pipeline_keys);
    auto& pc = cfg.pipeline;
    const std::string s = "pipeline";
    pc.num_criticisms_x = detail::get<std::size_t>(*p, s, "num_criticisms", pc.num_criticisms_x);
    pc.num_improvements_y = detail::get<std::size_t>(*p, s, "num_improvements", pc.num_improvements_y);
    pc.max_rounds = detail::get<std::size_t>(*p, s, "max_rounds", pc.max_rounds);
    pc.length_control_samples_k =
        detail::get<std::size_t>(*p, s, "length_control_samples", pc.length_control_samples_k);
    pc.gamma = detail::get<double>(*p, s, "gamma", pc.gamma);
    pc.temperature = detail::get<double>(*p, s, "temperature", pc.temperature);
    pc.top_p = detail::get<double>(*p, s, "top_p", pc.top_p);
    pc.max_tokens = detail::get<std::size_t>(*p, s, "max_tokens", pc.max_tokens);
    pc.cot_max_tokens = detail::get<std::size_t>(*p, s, "cot_max_tokens", pc.cot_max_tokens);
    pc.max_concurrency = detail::get<std::size_t>(*p, s, "max_concurrency", pc.max_concurrency);
    pc.seed = detail::get<std::uint64_t>(*p, s, "seed", pc.seed);
    cfg.retry.max_attempts = detail::get<int>(*p, s, "max_attempts", cfg.retry.max_attempts);
    cfg.retry.initial_backoff = std::chrono::milliseconds(
        detail::get<long>(*p, s, "initial_backoff_ms", cfg.retry.initial_backoff.count()));
    if (cfg.retry.max_attempts < 1) throw ConfigError("[pipeline] max_attempts must be >= 1");
    if (cfg.retry.initial_backoff.count() < 0)
      throw ConfigError("[pipeline] initial_backoff_ms must be >= 0");
  }
  cfg.pipeline.validate();
  cfg.generator =
      detail::parse_backend(root, "generator", "/v1/chat/completions", "AVR_GENERATOR_API_KEY", base_dir);
  cfg.scorer = detail::parse_backend(root, "scorer", "/score", "AVR_SCORER_API_KEY", base_dir);
  cfg.judge =
      detail::parse_backend(root, "judge", "/v1/chat/completions", "AVR_JUDGE_API_KEY", base_dir);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  return parse_config(in, path.parent_path());
}

}  // namespace refinery::io
