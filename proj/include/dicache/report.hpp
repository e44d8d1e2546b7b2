#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "dicache/config.hpp"
#include "dicache/metrics.hpp"
#include "dicache/sampler.hpp"
#include "dicache/trace.hpp"

namespace dicache {

// JSON has no infinity; PSNR of identical tensors is written as "inf".
inline json metric_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return nullptr;
  return v;
}

inline json optional_to_json(const std::optional<double>& v) {
  return v ? metric_to_json(*v) : json(nullptr);
}

struct QualityMetrics {
  double l1_rel = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

inline QualityMetrics measure_quality(const Tensor2D& latent, const Tensor2D& reference,
                                      const SsimOptions& opt) {
  return {l1_rel(latent, reference), psnr(latent, reference), ssim(latent, reference, opt)};
}

inline json to_json(const QualityMetrics& q) {
  return {{"l1_rel", metric_to_json(q.l1_rel)},
          {"psnr_db", metric_to_json(q.psnr_db)},
          {"ssim", metric_to_json(q.ssim)}};
}

inline json step_to_json(const StepRecord& r) {
  return {{"step", r.step_index},
          {"t", r.t},
          {"action", std::string(to_string(r.decision.action))},
          {"estimated_error", r.decision.estimated_error},
          {"accumulated_error", r.decision.accumulated_error},
          {"accumulated_after", r.decision.accumulated_after},
          {"gamma_hat", optional_to_json(r.decision.gamma_hat)},
          {"block_evals", r.block_evals_total}};
}

inline json steps_to_json(const RunLog& log) {
  json arr = json::array();
  for (const auto& r : log.steps) arr.push_back(step_to_json(r));
  return arr;
}

struct RunReport {
  RunConfig config;
  RunLog log;
  std::size_t effective_steps = 0;
  std::uint64_t reference_block_evals = 0;  // T * M
  std::uint64_t expected_block_evals = 0;   // recomputed from the decision log
  double speedup_blockevals = 1.0;
  std::optional<QualityMetrics> quality;
};

inline json to_json(const RunReport& r) {
  json j;
  j["config"] = to_json(r.config);
  j["steps"] = steps_to_json(r.log);
  j["totals"] = {{"effective_steps", r.effective_steps},
                 {"block_evals", r.log.meter.block_evals},
                 {"recompute_steps", r.log.meter.recompute_steps},
                 {"reuse_steps", r.log.meter.reuse_steps},
                 {"reference_block_evals", r.reference_block_evals},
                 {"expected_block_evals", r.expected_block_evals},
                 {"speedup_blockevals", r.speedup_blockevals}};
  if (r.quality) j["quality"] = to_json(*r.quality);
  return j;
}

inline json to_json(const CorrelationReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back(
        {{"layer", l.layer}, {"spearman", l.spearman}, {"differences", l.differences}});
  }
  return {{"final_layer", r.final_layer},
          {"input_differences", r.input_differences},
          {"layers", layers}};
}

inline json to_json(const GammaConsistencyReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"step", row.step_index},
                    {"newer_step", row.newer_step},
                    {"older_step", row.older_step},
                    {"gamma", row.gamma},
                    {"gamma_hat", row.gamma_hat}});
  }
  json summary = json::array();
  for (const auto& s : r.summary) {
    summary.push_back({{"layer", s.layer},
                       {"spearman", optional_to_json(s.spearman)},
                       {"pearson", optional_to_json(s.pearson)},
                       {"mean_abs_error", s.mean_abs_error}});
  }
  return {{"schedule", r.schedule}, {"layers", r.layers}, {"rows", rows}, {"summary", summary}};
}

inline json to_json(const ReplayReport& r, std::uint32_t num_blocks) {
  const double reference = static_cast<double>(r.log.steps.size()) * num_blocks;
  return {{"delta", threshold_to_json(r.threshold)},
          {"probe_layer", r.probe_layer},
          {"recompute_count", r.recompute_steps.size()},
          {"recompute_steps", r.recompute_steps},
          {"block_evals", r.log.meter.block_evals},
          {"speedup_blockevals", reference / static_cast<double>(r.log.meter.block_evals)},
          {"steps", steps_to_json(r.log)}};
}

}  // namespace dicache
