#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dicache/cachepolicy.hpp"
#include "dicache/config.hpp"
#include "dicache/report.hpp"
#include "dicache/sampler.hpp"
#include "dicache/toydit.hpp"
#include "dicache/trace.hpp"

namespace dicache {

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::IoFailure, "write failed: " + path);
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::InvalidConfig, path + ": " + e.what());
  }
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
}

inline RunConfig load_run_config(const std::string& path,
                                 std::optional<std::uint64_t> seed_override = std::nullopt) {
  RunConfig cfg = run_config_from_json(read_json(path));
  if (seed_override) cfg.sampler.noise_seed = *seed_override;
  return cfg;
}

// Runs the configured policy and cross-checks the block-eval accounting
// against the decision log.
inline std::pair<Tensor2D, RunReport> run_policy(const RunConfig& cfg, const ModelWeights& weights) {
  cfg.validate();
  const Conditioning c = make_conditioning(cfg.condition_seed, cfg.model.d_model);
  const std::size_t blocks = cfg.model.num_blocks;
  RunReport report;
  report.config = cfg;
  SampleResult result;
  std::uint64_t expected = 0;

  switch (cfg.policy.kind) {
    case PolicyKind::Vanilla: {
      VanillaProvider p(weights);
      result = run(cfg.sampler, p, c);
      expected = result.log.steps.size() * blocks;
      break;
    }
    case PolicyKind::StepReduction: {
      VanillaProvider p(weights);
      result = run(step_reduction_config(cfg.sampler, cfg.policy.fraction), p, c);
      expected = result.log.steps.size() * blocks;
      break;
    }
    case PolicyKind::Uniform: {
      UniformCacheProvider p(weights, cfg.policy.interval);
      result = run(cfg.sampler, p, c);
      expected = result.log.meter.recompute_steps * blocks;
      break;
    }
    case PolicyKind::DiCache: {
      DiCacheProvider p(weights, cfg.policy.dicache);
      result = run(cfg.sampler, p, c);
      const std::size_t m = cfg.policy.dicache.probe_depth;
      if (auto msg = check_cost_identity(result.log, blocks, m); !msg.empty()) {
        throw Error(ErrorKind::InvariantViolation, msg);
      }
      if (auto msg = check_threshold_semantics(result.log, cfg.policy.dicache.reuse_threshold);
          !msg.empty()) {
        throw Error(ErrorKind::InvariantViolation, msg);
      }
      expected = dicache_expected_block_evals(blocks, result.log.steps.size(), m,
                                              count_later_recomputes(result.log));
      break;
    }
  }
  if (expected != result.log.meter.block_evals) {
    throw Error(ErrorKind::InvariantViolation,
                "block evals " + std::to_string(result.log.meter.block_evals) +
                    " disagree with decision log (" + std::to_string(expected) + ")");
  }
  report.log = std::move(result.log);
  report.effective_steps = report.log.steps.size();
  report.reference_block_evals = cfg.sampler.num_steps * blocks;
  report.expected_block_evals = expected;
  report.speedup_blockevals =
      static_cast<double>(report.reference_block_evals) / static_cast<double>(expected);
  return {std::move(result.final_latent), std::move(report)};
}

inline SsimOptions ssim_options(const RunConfig& cfg) {
  return {cfg.grid_h, cfg.grid_w, cfg.ssim_window};
}

inline RunConfig with_policy(RunConfig cfg, PolicyConfig policy) {
  cfg.policy = policy;
  return cfg;
}

inline void cmd_gen_config(const std::string& out_path) {
  write_json(out_path, to_json(default_run_config()));
}

struct SampleOutputs {
  std::filesystem::path latent_path;
  std::filesystem::path report_path;
  RunReport report;
};

inline SampleOutputs cmd_sample(const std::string& config_path, const std::string& out_dir,
                                const std::optional<std::string>& reference_path = std::nullopt,
                                std::optional<std::uint64_t> seed_override = std::nullopt) {
  const RunConfig cfg = load_run_config(config_path, seed_override);
  const ModelWeights weights = init_weights(cfg.model);
  auto [latent, report] = run_policy(cfg, weights);
  if (reference_path) {
    report.quality = measure_quality(latent, read_dlat(*reference_path), ssim_options(cfg));
  }
  ensure_directory(out_dir);
  SampleOutputs out;
  out.latent_path = std::filesystem::path(out_dir) / cfg.latent_file;
  out.report_path = std::filesystem::path(out_dir) / cfg.report_file;
  write_dlat(out.latent_path.string(), latent);
  write_json(out.report_path.string(), to_json(report));
  out.report = std::move(report);
  return out;
}

// l1_rel, PSNR and SSIM of a against reference b. SSIM depends on the
// reference's dynamic range, so the swapped value is reported as well.
inline json cmd_compare(const std::string& a_path, const std::string& b_path, SsimOptions opt) {
  const Tensor2D a = read_dlat(a_path);
  const Tensor2D b = read_dlat(b_path);
  require_same_shape(a, b, "compare");
  const QualityMetrics q = measure_quality(a, b, opt);
  json j = to_json(q);
  j["ssim_swapped"] = metric_to_json(ssim(b, a, opt));
  j["grid"] = {{"h", opt.grid_h}, {"w", opt.grid_w}, {"window", opt.window}};
  return j;
}

inline std::vector<std::uint32_t> all_layers(std::size_t num_blocks) {
  std::vector<std::uint32_t> out(num_blocks);
  for (std::size_t i = 0; i < num_blocks; ++i) out[i] = static_cast<std::uint32_t>(i + 1);
  return out;
}

inline TraceHeader cmd_trace(const std::string& config_path,
                             std::optional<std::vector<std::uint32_t>> layers,
                             const std::string& out_path,
                             std::optional<std::uint64_t> seed_override = std::nullopt) {
  const RunConfig cfg = load_run_config(config_path, seed_override);
  const ModelWeights weights = init_weights(cfg.model);
  const Conditioning c = make_conditioning(cfg.condition_seed, cfg.model.d_model);
  json echo = {{"model", to_json(cfg)["model"]},
               {"sampler", to_json(cfg)["sampler"]},
               {"condition_seed", cfg.condition_seed}};
  return record_trace(weights, cfg.sampler, c, layers.value_or(all_layers(cfg.model.num_blocks)),
                      out_path, echo.dump());
}

// Open-loop replay over every (layer, threshold) pair. Each layer block
// reports whether recompute counts are non-increasing in the threshold.
inline json cmd_replay(const std::string& trace_path, std::vector<double> thresholds,
                       const std::vector<std::uint32_t>& layers) {
  const Trace trace = read_trace(trace_path);
  std::sort(thresholds.begin(), thresholds.end());
  json out = json::array();
  for (auto layer : layers) {
    json rows = json::array();
    bool monotone = true;
    std::optional<std::size_t> last;
    for (double delta : thresholds) {
      const ReplayReport r = replay_schedule(trace, delta, layer);
      if (auto msg = check_threshold_semantics(r.log, delta); !msg.empty()) {
        throw Error(ErrorKind::InvariantViolation, msg);
      }
      if (last && r.recompute_steps.size() > *last) monotone = false;
      last = r.recompute_steps.size();
      rows.push_back(to_json(r, trace.header.num_blocks));
    }
    out.push_back({{"probe_layer", layer}, {"monotone", monotone}, {"rows", rows}});
  }
  return {{"num_steps", trace.header.num_steps},
          {"num_blocks", trace.header.num_blocks},
          {"replays", out}};
}

// Every interval-th step starting at T, ascending.
inline std::vector<std::uint32_t> uniform_schedule(std::uint32_t num_steps, std::uint32_t interval) {
  std::vector<std::uint32_t> out;
  for (std::int64_t k = num_steps; k >= 1; k -= interval) out.push_back(static_cast<std::uint32_t>(k));
  std::reverse(out.begin(), out.end());
  return out;
}

inline json cmd_analyze(const std::string& trace_path,
                        std::optional<std::vector<std::uint32_t>> schedule) {
  const Trace trace = read_trace(trace_path);
  const auto sched = schedule.value_or(uniform_schedule(trace.header.num_steps, 4));
  return {{"correlation", to_json(layer_correlation(trace))},
          {"gamma_consistency", to_json(gamma_consistency(trace, sched))}};
}

enum class SweepAxis { Delta, ProbeDepth, Dcta };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "delta") return SweepAxis::Delta;
  if (s == "m") return SweepAxis::ProbeDepth;
  if (s == "dcta") return SweepAxis::Dcta;
  throw Error(ErrorKind::InvalidConfig, "unknown sweep axis '" + s + "' (delta|m|dcta)");
}

inline bool parse_switch(const std::string& s) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw Error(ErrorKind::InvalidConfig, "expected on/off, got '" + s + "'");
}

inline double parse_threshold(const std::string& s) {
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::InvalidConfig, "bad threshold '" + s + "'");
}

inline std::size_t parse_count(const std::string& s) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(s, &used);
    if (used == s.size() && v >= 0) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::InvalidConfig, "bad integer '" + s + "'");
}

// Closed-loop DiCache runs over one axis, each measured against a shared
// same-seed vanilla reference. Points run on up to `workers` threads; rows
// keep the order of `values`.
inline json cmd_sweep(const std::string& config_path, const std::string& axis_name,
                      const std::vector<std::string>& values, const std::string& out_dir,
                      std::size_t workers = 1,
                      std::optional<std::uint64_t> seed_override = std::nullopt) {
  const RunConfig base = load_run_config(config_path, seed_override);
  const SweepAxis axis = parse_axis(axis_name);
  if (values.empty()) throw Error(ErrorKind::InvalidConfig, "sweep needs at least one value");
  DiCacheConfig dc = base.policy.kind == PolicyKind::DiCache ? base.policy.dicache : DiCacheConfig{};

  std::vector<RunConfig> points;
  json labels = json::array();
  for (const auto& v : values) {
    DiCacheConfig pc = dc;
    switch (axis) {
      case SweepAxis::Delta:
        pc.reuse_threshold = parse_threshold(v);
        labels.push_back(threshold_to_json(pc.reuse_threshold));
        break;
      case SweepAxis::ProbeDepth:
        pc.probe_depth = parse_count(v);
        labels.push_back(pc.probe_depth);
        break;
      case SweepAxis::Dcta:
        pc.dcta_enabled = parse_switch(v);
        labels.push_back(pc.dcta_enabled ? "on" : "off");
        break;
    }
    PolicyConfig policy;
    policy.kind = PolicyKind::DiCache;
    policy.dicache = pc;
    RunConfig rc = with_policy(base, policy);
    rc.validate();
    points.push_back(rc);
  }

  const ModelWeights weights = init_weights(base.model);
  PolicyConfig vanilla;
  vanilla.kind = PolicyKind::Vanilla;
  const Tensor2D reference = run_policy(with_policy(base, vanilla), weights).first;

  std::vector<json> rows(points.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        auto [latent, report] = run_policy(points[i], weights);
        json row = {{"value", labels[i]},
                    {"block_evals", report.log.meter.block_evals},
                    {"recompute_steps", report.log.meter.recompute_steps},
                    {"reuse_steps", report.log.meter.reuse_steps},
                    {"speedup_blockevals", report.speedup_blockevals}};
        row["quality"] = to_json(measure_quality(latent, reference, ssim_options(points[i])));
        rows[i] = std::move(row);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(workers, 1, points.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);

  json table = {{"config", to_json(base)}, {"axis", axis_name}, {"rows", rows}};
  ensure_directory(out_dir);
  write_dlat((std::filesystem::path(out_dir) / "reference.dlat").string(), reference);
  write_json((std::filesystem::path(out_dir) / "sweep.json").string(), table);
  return table;
}

}  // namespace dicache
