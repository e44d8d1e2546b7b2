#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dicache/binio.hpp"
#include "dicache/cost.hpp"
#include "dicache/error.hpp"
#include "dicache/prng.hpp"
#include "dicache/tensor.hpp"
#include "dicache/toydit.hpp"

namespace dicache {

struct SamplerConfig {
  std::size_t num_steps = 50;
  std::uint64_t noise_seed = 0;
  std::size_t n_tokens = 64;
  std::size_t d_model = 64;

  void validate() const {
    if (num_steps < 1) throw Error(ErrorKind::InvalidConfig, "num_steps must be >= 1");
    if (n_tokens < 1 || d_model < 1) {
      throw Error(ErrorKind::InvalidConfig, "latent dimensions must be >= 1");
    }
  }

  bool operator==(const SamplerConfig&) const = default;
};

// Latent at grid point k: t = k / T.
struct LatentState {
  Tensor2D x;
  double t = 1.0;
  std::size_t step_index = 0;
  std::size_t num_steps = 1;
};

enum class StepAction { ComputeFirst, Reuse, Recompute };

inline std::string_view to_string(StepAction a) {
  switch (a) {
    case StepAction::ComputeFirst: return "compute_first";
    case StepAction::Reuse: return "reuse";
    case StepAction::Recompute: return "recompute";
  }
  return "unknown";
}

// Per-step decision reported by a velocity provider.
struct Decision {
  StepAction action = StepAction::Recompute;
  // Probe-estimated error for this step; 0 when no probe ran.
  double estimated_error = 0.0;
  // Accumulator after adding estimated_error and before any reset.
  double accumulated_error = 0.0;
  // Accumulator value carried into the next step.
  double accumulated_after = 0.0;
  // Present only on reuse steps where trajectory alignment was applied.
  std::optional<double> gamma_hat;
};

struct StepOutput {
  Tensor2D velocity;
  Decision decision;
};

class VelocityProvider {
 public:
  virtual ~VelocityProvider() = default;
  virtual StepOutput step(const LatentState& state, const Conditioning& c, CostMeter& meter) = 0;
};

struct StepRecord {
  std::size_t step_index = 0;
  double t = 0.0;
  Decision decision;
  std::uint64_t block_evals_delta = 0;
  std::uint64_t block_evals_total = 0;
};

struct RunLog {
  std::vector<StepRecord> steps;
  CostMeter meter;
};

struct SampleResult {
  Tensor2D final_latent;
  RunLog log;
};

inline LatentState init_noise(const SamplerConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.noise_seed);
  LatentState s;
  s.x = Tensor2D(cfg.n_tokens, cfg.d_model);
  for (float& v : s.x.flat()) v = static_cast<float>(rng.gaussian());
  s.t = 1.0;
  s.step_index = cfg.num_steps;
  s.num_steps = cfg.num_steps;
  return s;
}

// x' = x - v / T; the model output is treated as dx/dt and integrated from
// t = 1 toward t = 0.
inline LatentState euler_step(const LatentState& s, const Tensor2D& v) {
  require_same_shape(s.x, v, "euler_step");
  if (s.step_index < 1) throw Error(ErrorKind::InvalidConfig, "euler_step past t = 0");
  const float dt = -1.0f / static_cast<float>(s.num_steps);
  LatentState next;
  next.x = Tensor2D(s.x.rows(), s.x.cols());
  auto out = next.x.flat();
  auto x = s.x.flat();
  auto vel = v.flat();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + dt * vel[i];
  next.step_index = s.step_index - 1;
  next.num_steps = s.num_steps;
  next.t = static_cast<double>(next.step_index) / static_cast<double>(s.num_steps);
  return next;
}

// Integrates from x_T down to x_0, querying the provider once per step.
// Provider errors are rethrown with the step index attached.
inline SampleResult run(const SamplerConfig& cfg, VelocityProvider& provider,
                        const Conditioning& c) {
  LatentState state = init_noise(cfg);
  SampleResult result;
  result.log.steps.reserve(cfg.num_steps);
  CostMeter& meter = result.log.meter;
  while (state.step_index >= 1) {
    const std::uint64_t before = meter.block_evals;
    StepOutput out;
    try {
      out = provider.step(state, c, meter);
      require_same_shape(state.x, out.velocity, "velocity");
      require_finite(out.velocity, "velocity");
    } catch (const Error& e) {
      throw Error(e.kind(), "step " + std::to_string(state.step_index) + ": " + e.detail());
    }
    if (out.decision.action == StepAction::Reuse) {
      ++meter.reuse_steps;
    } else {
      ++meter.recompute_steps;
    }
    StepRecord rec;
    rec.step_index = state.step_index;
    rec.t = state.t;
    rec.decision = out.decision;
    rec.block_evals_delta = meter.block_evals - before;
    rec.block_evals_total = meter.block_evals;
    result.log.steps.push_back(rec);
    state = euler_step(state, out.velocity);
  }
  result.final_latent = std::move(state.x);
  return result;
}

// DLAT: "DLAT", u32 version = 1, u32 N, u32 d, N*d little-endian float32.
inline std::vector<char> encode_dlat(const Tensor2D& latent) {
  binio::Writer w;
  w.bytes("DLAT");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(latent.rows()));
  w.u32(static_cast<std::uint32_t>(latent.cols()));
  w.f32s(latent.flat());
  return w.buffer();
}

inline Tensor2D decode_dlat(std::span<const char> bytes, const std::string& source = "DLAT") {
  binio::Reader r(bytes, source);
  if (r.bytes(4) != "DLAT") throw Error(ErrorKind::IoFailure, source + ": bad magic");
  if (auto v = r.u32(); v != 1) {
    throw Error(ErrorKind::IoFailure, source + ": unsupported version " + std::to_string(v));
  }
  const std::size_t n = r.u32();
  const std::size_t d = r.u32();
  auto data = r.f32s(n * d);
  if (!r.at_end()) throw Error(ErrorKind::IoFailure, source + ": trailing bytes");
  return Tensor2D(n, d, std::move(data));
}

inline void write_dlat(const std::string& path, const Tensor2D& latent) {
  binio::write_file(path, encode_dlat(latent));
}

inline Tensor2D read_dlat(const std::string& path) {
  auto bytes = binio::read_file(path);
  return decode_dlat(bytes, path);
}

}  // namespace dicache
