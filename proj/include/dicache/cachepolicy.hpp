#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dicache/cost.hpp"
#include "dicache/error.hpp"
#include "dicache/metrics.hpp"
#include "dicache/sampler.hpp"
#include "dicache/tensor.hpp"
#include "dicache/toydit.hpp"

namespace dicache {

struct DiCacheConfig {
  double reuse_threshold = 0.1;
  std::size_t probe_depth = 1;
  bool dcta_enabled = true;
  // Upper bound for the trajectory parameter; unclamped when empty.
  std::optional<double> gamma_clamp;

  void validate(std::size_t num_blocks) const {
    if (std::isnan(reuse_threshold) || reuse_threshold < 0.0) {
      throw Error(ErrorKind::InvalidConfig, "reuse_threshold must be >= 0");
    }
    if (probe_depth < 1 || probe_depth + 1 > num_blocks) {
      throw Error(ErrorKind::BadProbeDepth, "probe_depth " + std::to_string(probe_depth) +
                                                " outside [1, " + std::to_string(num_blocks - 1) +
                                                "]");
    }
    if (gamma_clamp && !(*gamma_clamp > 0.0)) {
      throw Error(ErrorKind::InvalidConfig, "gamma_clamp must be > 0");
    }
  }

  bool operator==(const DiCacheConfig&) const = default;
};

// Residuals cached at one recompute step.
struct CacheEntry {
  std::size_t step_index = 0;
  Tensor2D full_residual;   // y^M - x
  Tensor2D probe_residual;  // y^m - x
};

struct CacheState {
  double accumulated_error = 0.0;
  std::optional<Tensor2D> prev_probe_feature;
  // newest is the most recent recompute (smaller step index), previous the
  // one before it.
  std::optional<CacheEntry> newest;
  std::optional<CacheEntry> previous;
  std::vector<Decision> log;

  void refresh(CacheEntry entry) {
    previous = std::move(newest);
    newest = std::move(entry);
    accumulated_error = 0.0;
  }
};

inline double estimate_error(const Tensor2D& probe_now, const Tensor2D& probe_prev) {
  return l1_rel(probe_now, probe_prev);
}

// Reuse test on the accumulator after adding the current estimate.
inline bool should_reuse(double accumulated, double estimate, double threshold) {
  return accumulated + estimate <= threshold;
}

// Position of `now` along the older -> newer residual trajectory:
// l1_rel(now, older) / l1_rel(newer, older), 1 when newer and older coincide.
inline double trajectory_ratio(const Tensor2D& now, const Tensor2D& newer, const Tensor2D& older) {
  const double num = l1_rel(now, older);
  const double den = l1_rel(newer, older);
  return den == 0.0 ? 1.0 : num / den;
}

inline double gamma_hat(const Tensor2D& probe_residual_now, const CacheEntry& newest,
                        const CacheEntry& previous, std::optional<double> clamp = std::nullopt) {
  double g = trajectory_ratio(probe_residual_now, newest.probe_residual, previous.probe_residual);
  if (clamp) g = std::clamp(g, 0.0, *clamp);
  return g;
}

// r_prev + gamma (r_newest - r_prev). The endpoints return the cached tensors
// unchanged.
inline Tensor2D combine_residuals(const CacheEntry& newest, const CacheEntry& previous,
                                  double gamma) {
  require_same_shape(newest.full_residual, previous.full_residual, "combine_residuals");
  if (!std::isfinite(gamma)) throw Error(ErrorKind::NonFinite, "combine_residuals: gamma");
  if (gamma == 1.0) return newest.full_residual;
  if (gamma == 0.0) return previous.full_residual;
  Tensor2D out(newest.full_residual.rows(), newest.full_residual.cols());
  auto o = out.flat();
  auto a = newest.full_residual.flat();
  auto b = previous.full_residual.flat();
  const float g = static_cast<float>(gamma);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = b[i] + g * (a[i] - b[i]);
  return out;
}

// One step of the probe-driven scheduler. The first step runs the full model
// and captures y^m on the way; later steps probe m blocks, accumulate the
// estimated error, then either reuse cached residuals or resume from the
// probe.
inline StepOutput dicache_step(CacheState& state, const LatentState& latent, const Conditioning& c,
                               const DiCacheConfig& cfg, const ModelWeights& model,
                               CostMeter& meter) {
  const std::size_t m = cfg.probe_depth;
  StepOutput out;
  Decision& d = out.decision;

  if (latent.step_index == latent.num_steps) {
    BlockOutputs full = forward_full(model, latent.x, latent.t, c, {m}, &meter);
    Tensor2D& probe = full.layers.at(m);
    Tensor2D& y = *full.final_output;
    state.accumulated_error = 0.0;
    state.newest.reset();
    state.previous.reset();
    state.refresh({latent.step_index, residual(y, latent.x), residual(probe, latent.x)});
    state.prev_probe_feature = std::move(probe);
    d.action = StepAction::ComputeFirst;
    out.velocity = std::move(y);
    state.log.push_back(d);
    return out;
  }

  if (!state.prev_probe_feature || !state.newest) {
    throw Error(ErrorKind::InvariantViolation, "dicache_step called before the first step");
  }
  Tensor2D probe = forward_probe(model, latent.x, latent.t, c, m, &meter);
  d.estimated_error = estimate_error(probe, *state.prev_probe_feature);
  state.accumulated_error += d.estimated_error;
  d.accumulated_error = state.accumulated_error;

  if (state.accumulated_error <= cfg.reuse_threshold) {
    d.action = StepAction::Reuse;
    Tensor2D r;
    if (cfg.dcta_enabled && state.previous) {
      const double g =
          gamma_hat(residual(probe, latent.x), *state.newest, *state.previous, cfg.gamma_clamp);
      d.gamma_hat = g;
      r = combine_residuals(*state.newest, *state.previous, g);
    } else {
      r = state.newest->full_residual;
    }
    out.velocity = latent.x + r;
  } else {
    d.action = StepAction::Recompute;
    Tensor2D y = forward_resume(model, probe, m, &meter);
    state.refresh({latent.step_index, residual(y, latent.x), residual(probe, latent.x)});
    out.velocity = std::move(y);
  }
  d.accumulated_after = state.accumulated_error;
  state.prev_probe_feature = std::move(probe);
  state.log.push_back(d);
  return out;
}

class DiCacheProvider : public VelocityProvider {
 public:
  DiCacheProvider(const ModelWeights& model, DiCacheConfig cfg) : model_(model), cfg_(cfg) {
    cfg_.validate(model.config.num_blocks);
  }

  StepOutput step(const LatentState& s, const Conditioning& c, CostMeter& meter) override {
    return dicache_step(state_, s, c, cfg_, model_, meter);
  }

  const CacheState& state() const noexcept { return state_; }

 private:
  const ModelWeights& model_;
  DiCacheConfig cfg_;
  CacheState state_;
};

class VanillaProvider : public VelocityProvider {
 public:
  explicit VanillaProvider(const ModelWeights& model) : model_(model) {}

  StepOutput step(const LatentState& s, const Conditioning& c, CostMeter& meter) override {
    StepOutput out;
    out.velocity = *forward_full(model_, s.x, s.t, c, {}, &meter).final_output;
    out.decision.action =
        s.step_index == s.num_steps ? StepAction::ComputeFirst : StepAction::Recompute;
    return out;
  }

 private:
  const ModelWeights& model_;
};

// Step count of the reduced-step baseline: round(fraction * T), at least 1.
inline std::size_t reduced_step_count(std::size_t num_steps, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorKind::InvalidFraction, "fraction must lie in (0, 1]");
  }
  const double scaled = std::round(fraction * static_cast<double>(num_steps));
  if (scaled < 1.0) {
    throw Error(ErrorKind::InvalidFraction, "fraction * T rounds to zero steps");
  }
  return static_cast<std::size_t>(scaled);
}

// The reduced-step baseline is a plain vanilla run on a shorter grid.
inline SamplerConfig step_reduction_config(SamplerConfig cfg, double fraction) {
  cfg.num_steps = reduced_step_count(cfg.num_steps, fraction);
  return cfg;
}

// Fixed-interval caching: full pass when (T - k) mod I == 0, otherwise
// velocity = x + R with R the last full residual.
class UniformCacheProvider : public VelocityProvider {
 public:
  UniformCacheProvider(const ModelWeights& model, std::size_t interval)
      : model_(model), interval_(interval) {
    if (interval < 1) throw Error(ErrorKind::InvalidInterval, "interval must be >= 1");
  }

  StepOutput step(const LatentState& s, const Conditioning& c, CostMeter& meter) override {
    StepOutput out;
    const std::size_t elapsed = s.num_steps - s.step_index;
    if (elapsed % interval_ == 0 || !cached_) {
      Tensor2D y = *forward_full(model_, s.x, s.t, c, {}, &meter).final_output;
      cached_ = residual(y, s.x);
      out.velocity = std::move(y);
      out.decision.action = elapsed == 0 ? StepAction::ComputeFirst : StepAction::Recompute;
    } else {
      out.velocity = s.x + *cached_;
      out.decision.action = StepAction::Reuse;
    }
    return out;
  }

 private:
  const ModelWeights& model_;
  std::size_t interval_;
  std::optional<Tensor2D> cached_;
};

// Number of recompute steps after the first one.
inline std::size_t count_later_recomputes(const RunLog& log) {
  return static_cast<std::size_t>(
      std::count_if(log.steps.begin(), log.steps.end(), [](const StepRecord& r) {
        return r.decision.action == StepAction::Recompute;
      }));
}

// M + (T - 1) m + n_recompute (M - m).
inline std::uint64_t dicache_expected_block_evals(std::size_t num_blocks, std::size_t num_steps,
                                                  std::size_t probe_depth,
                                                  std::size_t later_recomputes) {
  return num_blocks + (num_steps - 1) * probe_depth + later_recomputes * (num_blocks - probe_depth);
}

// Checks per-step block charges against the probe/resume accounting: the
// first step costs M, a reuse m, a recompute m + (M - m) = M, and the total
// equals M + (T - 1) m + n_recompute (M - m). Empty string when consistent.
inline std::string check_cost_identity(const RunLog& log, std::size_t num_blocks,
                                       std::size_t probe_depth) {
  for (const auto& rec : log.steps) {
    const std::uint64_t expected =
        rec.decision.action == StepAction::Reuse ? probe_depth : num_blocks;
    if (rec.block_evals_delta != expected) {
      return "step " + std::to_string(rec.step_index) + ": charged " +
             std::to_string(rec.block_evals_delta) + " block evals, expected " +
             std::to_string(expected);
    }
  }
  const std::uint64_t total = dicache_expected_block_evals(
      num_blocks, log.steps.size(), probe_depth, count_later_recomputes(log));
  if (log.meter.block_evals != total) {
    return "total block evals " + std::to_string(log.meter.block_evals) + " != " +
           std::to_string(total);
  }
  return {};
}

// Checks the accumulator semantics recorded in a DiCache log: every reuse
// keeps the accumulator within the threshold, every recompute exceeds it
// before the reset, and the carried value is zero after a recompute.
// Returns an empty string when all steps conform, else a description.
inline std::string check_threshold_semantics(const RunLog& log, double threshold) {
  for (const auto& rec : log.steps) {
    const Decision& d = rec.decision;
    const std::string where = "step " + std::to_string(rec.step_index) + ": ";
    switch (d.action) {
      case StepAction::ComputeFirst:
        if (d.accumulated_after != 0.0) return where + "accumulator not zero after first compute";
        break;
      case StepAction::Reuse:
        if (!(d.accumulated_error <= threshold)) return where + "reuse above threshold";
        if (d.accumulated_after != d.accumulated_error) return where + "reuse changed accumulator";
        break;
      case StepAction::Recompute:
        if (!(d.accumulated_error > threshold)) return where + "recompute within threshold";
        if (d.accumulated_after != 0.0) return where + "accumulator not reset";
        break;
    }
  }
  return {};
}

}  // namespace dicache
