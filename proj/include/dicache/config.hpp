#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>

#include "json.hpp"

#include "dicache/cachepolicy.hpp"
#include "dicache/error.hpp"
#include "dicache/sampler.hpp"
#include "dicache/toydit.hpp"

namespace dicache {

using json = nlohmann::ordered_json;

enum class PolicyKind { Vanilla, StepReduction, Uniform, DiCache };

inline std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::Vanilla: return "vanilla";
    case PolicyKind::StepReduction: return "step_reduction";
    case PolicyKind::Uniform: return "uniform";
    case PolicyKind::DiCache: return "dicache";
  }
  return "unknown";
}

struct PolicyConfig {
  PolicyKind kind = PolicyKind::DiCache;
  double fraction = 0.5;      // step_reduction
  std::size_t interval = 2;   // uniform
  DiCacheConfig dicache;      // dicache

  bool operator==(const PolicyConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  SamplerConfig sampler;  // n_tokens / d_model mirror the model
  std::uint64_t condition_seed = 7;
  PolicyConfig policy;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t ssim_window = 3;
  std::string latent_file = "latent.dlat";
  std::string report_file = "report.json";

  void validate() const {
    model.validate();
    sampler.validate();
    if (sampler.n_tokens != model.n_tokens || sampler.d_model != model.d_model) {
      throw Error(ErrorKind::InvalidConfig, "sampler latent shape does not match the model");
    }
    switch (policy.kind) {
      case PolicyKind::Vanilla:
        break;
      case PolicyKind::StepReduction:
        reduced_step_count(sampler.num_steps, policy.fraction);
        break;
      case PolicyKind::Uniform:
        if (policy.interval < 1) throw Error(ErrorKind::InvalidInterval, "interval must be >= 1");
        break;
      case PolicyKind::DiCache:
        policy.dicache.validate(model.num_blocks);
        break;
    }
    if (grid_h * grid_w != model.n_tokens) {
      throw Error(ErrorKind::BadGrid, "grid does not cover n_tokens");
    }
  }

  bool operator==(const RunConfig&) const = default;
};

// Thresholds may be written as a number or as the string "inf".
inline json threshold_to_json(double v) {
  if (std::isinf(v)) return "inf";
  return v;
}

inline double threshold_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    throw Error(ErrorKind::InvalidConfig, "unrecognised threshold '" + s + "'");
  }
  return j.get<double>();
}

inline json to_json(const PolicyConfig& p) {
  json j;
  j["kind"] = to_string(p.kind);
  switch (p.kind) {
    case PolicyKind::Vanilla:
      break;
    case PolicyKind::StepReduction:
      j["fraction"] = p.fraction;
      break;
    case PolicyKind::Uniform:
      j["interval"] = p.interval;
      break;
    case PolicyKind::DiCache:
      j["reuse_threshold"] = threshold_to_json(p.dicache.reuse_threshold);
      j["probe_depth"] = p.dicache.probe_depth;
      j["dcta_enabled"] = p.dicache.dcta_enabled;
      j["gamma_clamp"] = p.dicache.gamma_clamp ? json(*p.dicache.gamma_clamp) : json(nullptr);
      break;
  }
  return j;
}

inline json to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"num_blocks", c.model.num_blocks},   {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},         {"n_tokens", c.model.n_tokens},
                {"mlp_ratio", c.model.mlp_ratio},     {"ln_epsilon", c.model.ln_epsilon},
                {"weight_seed", c.model.weight_seed}};
  j["sampler"] = {{"num_steps", c.sampler.num_steps}, {"noise_seed", c.sampler.noise_seed}};
  j["condition_seed"] = c.condition_seed;
  j["policy"] = to_json(c.policy);
  j["quality"] = {{"grid_h", c.grid_h}, {"grid_w", c.grid_w}, {"ssim_window", c.ssim_window}};
  j["outputs"] = {{"latent", c.latent_file}, {"report", c.report_file}};
  return j;
}

namespace detail {

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
  if (auto it = obj.find(key); it != obj.end()) out = it->template get<T>();
}

}  // namespace detail

inline PolicyConfig policy_from_json(const json& j) {
  PolicyConfig p;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "vanilla") {
    p.kind = PolicyKind::Vanilla;
  } else if (kind == "step_reduction") {
    p.kind = PolicyKind::StepReduction;
    p.fraction = j.at("fraction").get<double>();
  } else if (kind == "uniform") {
    p.kind = PolicyKind::Uniform;
    p.interval = j.at("interval").get<std::size_t>();
  } else if (kind == "dicache") {
    p.kind = PolicyKind::DiCache;
    if (auto it = j.find("reuse_threshold"); it != j.end()) {
      p.dicache.reuse_threshold = threshold_from_json(*it);
    }
    detail::read_opt(j, "probe_depth", p.dicache.probe_depth);
    detail::read_opt(j, "dcta_enabled", p.dicache.dcta_enabled);
    if (auto it = j.find("gamma_clamp"); it != j.end() && !it->is_null()) {
      p.dicache.gamma_clamp = it->get<double>();
    }
  } else {
    throw Error(ErrorKind::InvalidConfig, "unknown policy kind '" + kind + "'");
  }
  return p;
}

// Missing fields keep their defaults; malformed values are config errors.
inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    if (auto it = j.find("model"); it != j.end()) {
      const json& m = *it;
      detail::read_opt(m, "num_blocks", c.model.num_blocks);
      detail::read_opt(m, "d_model", c.model.d_model);
      detail::read_opt(m, "n_heads", c.model.n_heads);
      detail::read_opt(m, "n_tokens", c.model.n_tokens);
      detail::read_opt(m, "mlp_ratio", c.model.mlp_ratio);
      detail::read_opt(m, "ln_epsilon", c.model.ln_epsilon);
      detail::read_opt(m, "weight_seed", c.model.weight_seed);
    }
    if (auto it = j.find("sampler"); it != j.end()) {
      detail::read_opt(*it, "num_steps", c.sampler.num_steps);
      detail::read_opt(*it, "noise_seed", c.sampler.noise_seed);
    }
    detail::read_opt(j, "condition_seed", c.condition_seed);
    if (auto it = j.find("policy"); it != j.end()) c.policy = policy_from_json(*it);
    if (auto it = j.find("quality"); it != j.end()) {
      detail::read_opt(*it, "grid_h", c.grid_h);
      detail::read_opt(*it, "grid_w", c.grid_w);
      detail::read_opt(*it, "ssim_window", c.ssim_window);
    }
    if (auto it = j.find("outputs"); it != j.end()) {
      detail::read_opt(*it, "latent", c.latent_file);
      detail::read_opt(*it, "report", c.report_file);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, e.what());
  }
  c.sampler.n_tokens = c.model.n_tokens;
  c.sampler.d_model = c.model.d_model;
  c.validate();
  return c;
}

// Defaults: M=12, d=64, 4 heads, 64 tokens on an 8x8 grid, T=50, DiCache
// with m=1, threshold 0.1 and trajectory alignment on.
inline RunConfig default_run_config() {
  RunConfig c;
  c.sampler.n_tokens = c.model.n_tokens;
  c.sampler.d_model = c.model.d_model;
  return c;
}

}  // namespace dicache
