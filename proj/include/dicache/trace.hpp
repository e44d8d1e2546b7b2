#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dicache/binio.hpp"
#include "dicache/cachepolicy.hpp"
#include "dicache/error.hpp"
#include "dicache/metrics.hpp"
#include "dicache/sampler.hpp"
#include "dicache/toydit.hpp"

namespace dicache {

// DTRC layout (all integers u32 little-endian, tensors float32 LE row-major):
//   "DTRC" version T M N d L layer_ids[L] json_len json_bytes
//   then T records: k t(f32) x_t y^{layer_0} ... y^{layer_{L-1}}
struct TraceHeader {
  std::uint32_t num_steps = 0;
  std::uint32_t num_blocks = 0;
  std::uint32_t n_tokens = 0;
  std::uint32_t d_model = 0;
  std::vector<std::uint32_t> layers;
  std::string config_json;

  std::size_t header_bytes() const { return 4 + 4 * 7 + 4 * layers.size() + config_json.size(); }
  std::size_t record_bytes() const {
    return 4 + 4 + 4 * std::size_t{n_tokens} * d_model * (1 + layers.size());
  }
};

struct TraceStep {
  std::uint32_t step_index = 0;
  float t = 0.0f;
  Tensor2D input;
  std::vector<Tensor2D> layers;  // parallel to TraceHeader::layers
};

struct Trace {
  TraceHeader header;
  std::vector<TraceStep> steps;  // steps[0] is k = T

  std::size_t layer_slot(std::size_t layer) const {
    auto it = std::find(header.layers.begin(), header.layers.end(), layer);
    if (it == header.layers.end()) {
      throw Error(ErrorKind::LayerNotRecorded, "layer " + std::to_string(layer) + " not in trace");
    }
    return static_cast<std::size_t>(it - header.layers.begin());
  }

  // Position of step k in `steps`.
  std::size_t position_of(std::size_t step_index) const {
    return header.num_steps - step_index;
  }
};

inline void validate_layers(const std::vector<std::uint32_t>& layers, std::size_t num_blocks) {
  if (layers.empty()) throw Error(ErrorKind::InvalidLayers, "no layers requested");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 1 || layers[i] > num_blocks) {
      throw Error(ErrorKind::InvalidLayers, "layer " + std::to_string(layers[i]) +
                                                " outside [1, " + std::to_string(num_blocks) + "]");
    }
    if (i > 0 && layers[i] <= layers[i - 1]) {
      throw Error(ErrorKind::InvalidLayers, "layer ids must be strictly ascending");
    }
  }
  if (layers.back() != num_blocks) {
    throw Error(ErrorKind::InvalidLayers, "recorded layers must include the final layer " +
                                              std::to_string(num_blocks));
  }
}

inline std::vector<char> encode_trace(const Trace& trace) {
  const TraceHeader& h = trace.header;
  binio::Writer w;
  w.bytes("DTRC");
  w.u32(1);
  w.u32(h.num_steps);
  w.u32(h.num_blocks);
  w.u32(h.n_tokens);
  w.u32(h.d_model);
  w.u32(static_cast<std::uint32_t>(h.layers.size()));
  for (auto l : h.layers) w.u32(l);
  w.u32(static_cast<std::uint32_t>(h.config_json.size()));
  w.bytes(h.config_json);
  for (const auto& s : trace.steps) {
    w.u32(s.step_index);
    w.f32(s.t);
    w.f32s(s.input.flat());
    for (const auto& y : s.layers) w.f32s(y.flat());
  }
  return w.buffer();
}

inline Trace decode_trace(std::span<const char> bytes, const std::string& source = "DTRC") {
  binio::Reader r(bytes, source);
  if (r.bytes(4) != "DTRC") throw Error(ErrorKind::IoFailure, source + ": bad magic");
  if (auto v = r.u32(); v != 1) {
    throw Error(ErrorKind::IoFailure, source + ": unsupported version " + std::to_string(v));
  }
  Trace trace;
  TraceHeader& h = trace.header;
  h.num_steps = r.u32();
  h.num_blocks = r.u32();
  h.n_tokens = r.u32();
  h.d_model = r.u32();
  const std::uint32_t count = r.u32();
  if (count > h.num_blocks) throw Error(ErrorKind::IoFailure, source + ": bad layer count");
  h.layers.resize(count);
  for (auto& l : h.layers) l = r.u32();
  try {
    validate_layers(h.layers, h.num_blocks);
  } catch (const Error& e) {
    throw Error(ErrorKind::IoFailure, source + ": " + e.detail());
  }
  const std::uint32_t json_len = r.u32();
  h.config_json = std::string(r.bytes(json_len));
  const std::size_t n = h.n_tokens;
  const std::size_t d = h.d_model;
  trace.steps.reserve(h.num_steps);
  for (std::uint32_t i = 0; i < h.num_steps; ++i) {
    TraceStep s;
    s.step_index = r.u32();
    if (s.step_index != h.num_steps - i) {
      throw Error(ErrorKind::IoFailure, source + ": step records out of order at record " +
                                            std::to_string(i));
    }
    s.t = r.f32();
    s.input = Tensor2D(n, d, r.f32s(n * d));
    s.layers.reserve(count);
    for (std::uint32_t l = 0; l < count; ++l) s.layers.emplace_back(n, d, r.f32s(n * d));
    trace.steps.push_back(std::move(s));
  }
  if (!r.at_end()) throw Error(ErrorKind::IoFailure, source + ": trailing bytes");
  return trace;
}

inline Trace read_trace(const std::string& path) {
  auto bytes = binio::read_file(path);
  return decode_trace(bytes, path);
}

inline void write_trace(const std::string& path, const Trace& trace) {
  binio::write_file(path, encode_trace(trace));
}

namespace detail {

// Vanilla provider that keeps the requested block outputs of every step.
class RecordingProvider : public VelocityProvider {
 public:
  RecordingProvider(const ModelWeights& model, std::vector<std::uint32_t> layers)
      : model_(model), layers_(std::move(layers)), wanted_(layers_.begin(), layers_.end()) {}

  StepOutput step(const LatentState& s, const Conditioning& c, CostMeter& meter) override {
    BlockOutputs full = forward_full(model_, s.x, s.t, c, wanted_, &meter);
    TraceStep rec;
    rec.step_index = static_cast<std::uint32_t>(s.step_index);
    rec.t = static_cast<float>(s.t);
    rec.input = s.x;
    for (auto l : layers_) rec.layers.push_back(std::move(full.layers.at(l)));
    steps.push_back(std::move(rec));
    StepOutput out;
    out.velocity = std::move(*full.final_output);
    out.decision.action =
        s.step_index == s.num_steps ? StepAction::ComputeFirst : StepAction::Recompute;
    return out;
  }

  std::vector<TraceStep> steps;

 private:
  const ModelWeights& model_;
  std::vector<std::uint32_t> layers_;
  std::set<std::size_t> wanted_;
};

}  // namespace detail

// Runs the vanilla sampler and captures x_t and the requested block outputs
// at every step.
inline Trace build_trace(const ModelWeights& model, const SamplerConfig& sampler,
                         const Conditioning& c, std::vector<std::uint32_t> layers,
                         std::string config_json = "{}") {
  validate_layers(layers, model.config.num_blocks);
  if (sampler.n_tokens != model.config.n_tokens || sampler.d_model != model.config.d_model) {
    throw Error(ErrorKind::InvalidConfig, "sampler latent shape does not match the model");
  }
  detail::RecordingProvider rec(model, layers);
  run(sampler, rec, c);
  Trace trace;
  trace.header.num_steps = static_cast<std::uint32_t>(sampler.num_steps);
  trace.header.num_blocks = static_cast<std::uint32_t>(model.config.num_blocks);
  trace.header.n_tokens = static_cast<std::uint32_t>(model.config.n_tokens);
  trace.header.d_model = static_cast<std::uint32_t>(model.config.d_model);
  trace.header.layers = std::move(layers);
  trace.header.config_json = std::move(config_json);
  trace.steps = std::move(rec.steps);
  return trace;
}

inline TraceHeader record_trace(const ModelWeights& model, const SamplerConfig& sampler,
                                const Conditioning& c, std::vector<std::uint32_t> layers,
                                const std::string& out_path, std::string config_json = "{}") {
  Trace trace = build_trace(model, sampler, c, std::move(layers), std::move(config_json));
  write_trace(out_path, trace);
  return trace.header;
}

struct LayerCorrelation {
  std::uint32_t layer = 0;
  double spearman = 0.0;
  // l1_rel(y_k, y_{k+1}) for k = T-1 down to 1.
  std::vector<double> differences;
};

struct CorrelationReport {
  std::uint32_t final_layer = 0;
  std::vector<double> input_differences;
  std::vector<LayerCorrelation> layers;
};

// Consecutive-step relative L1 changes of one recorded layer, k = T-1 .. 1.
inline std::vector<double> difference_series(const Trace& trace, std::size_t layer) {
  const std::size_t slot = trace.layer_slot(layer);
  std::vector<double> out;
  for (std::size_t p = 1; p < trace.steps.size(); ++p) {
    out.push_back(l1_rel(trace.steps[p].layers[slot], trace.steps[p - 1].layers[slot]));
  }
  return out;
}

inline CorrelationReport layer_correlation(const Trace& trace) {
  if (trace.steps.size() < 3) {
    throw Error(ErrorKind::InvalidConfig, "layer_correlation needs at least 3 steps");
  }
  CorrelationReport report;
  report.final_layer = trace.header.num_blocks;
  for (std::size_t p = 1; p < trace.steps.size(); ++p) {
    report.input_differences.push_back(
        l1_rel(trace.steps[p].input, trace.steps[p - 1].input));
  }
  const auto final_series = difference_series(trace, trace.header.num_blocks);
  for (auto layer : trace.header.layers) {
    LayerCorrelation lc;
    lc.layer = layer;
    lc.differences = difference_series(trace, layer);
    lc.spearman = spearman(lc.differences, final_series);
    report.layers.push_back(std::move(lc));
  }
  return report;
}

struct GammaRow {
  std::uint32_t step_index = 0;
  std::uint32_t newer_step = 0;  // t_alpha, more recent recompute
  std::uint32_t older_step = 0;  // t_beta
  double gamma = 0.0;            // from full residuals
  std::vector<double> gamma_hat;  // per recorded layer
};

struct GammaLayerSummary {
  std::uint32_t layer = 0;
  std::optional<double> spearman;
  std::optional<double> pearson;
  double mean_abs_error = 0.0;
};

struct GammaConsistencyReport {
  std::vector<std::uint32_t> schedule;
  std::vector<std::uint32_t> layers;
  std::vector<GammaRow> rows;
  std::vector<GammaLayerSummary> summary;
};

// Trajectory parameters along a fixed recompute schedule. For each pair of
// consecutive scheduled steps (older, newer) in sampling order, rows cover
// every step from the older one down to just before the next scheduled step
// after the newer one (down to k = 1 for the last pair).
inline GammaConsistencyReport gamma_consistency(const Trace& trace,
                                                std::vector<std::uint32_t> schedule) {
  if (schedule.size() < 2) throw Error(ErrorKind::BadSchedule, "schedule needs >= 2 steps");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (schedule[i] < 1 || schedule[i] > trace.header.num_steps) {
      throw Error(ErrorKind::BadSchedule, "step " + std::to_string(schedule[i]) + " not in trace");
    }
    if (i > 0 && schedule[i] <= schedule[i - 1]) {
      throw Error(ErrorKind::BadSchedule, "schedule must be strictly ascending");
    }
  }
  GammaConsistencyReport report;
  report.schedule = schedule;
  report.layers = trace.header.layers;
  const std::size_t final_slot = trace.layer_slot(trace.header.num_blocks);

  auto layer_residual = [&](std::uint32_t k, std::size_t slot) {
    const TraceStep& s = trace.steps[trace.position_of(k)];
    return residual(s.layers[slot], s.input);
  };

  // Sampling order visits schedule entries from largest to smallest.
  std::vector<std::uint32_t> order(schedule.rbegin(), schedule.rend());
  for (std::size_t i = 0; i + 1 < order.size(); ++i) {
    const std::uint32_t older = order[i];
    const std::uint32_t newer = order[i + 1];
    const std::uint32_t stop = i + 2 < order.size() ? order[i + 2] : 0;
    const Tensor2D full_older = layer_residual(older, final_slot);
    const Tensor2D full_newer = layer_residual(newer, final_slot);
    std::vector<Tensor2D> probe_older, probe_newer;
    for (std::size_t slot = 0; slot < report.layers.size(); ++slot) {
      probe_older.push_back(layer_residual(older, slot));
      probe_newer.push_back(layer_residual(newer, slot));
    }
    for (std::uint32_t k = older; k > stop; --k) {
      GammaRow row;
      row.step_index = k;
      row.newer_step = newer;
      row.older_step = older;
      row.gamma = trajectory_ratio(layer_residual(k, final_slot), full_newer, full_older);
      for (std::size_t slot = 0; slot < report.layers.size(); ++slot) {
        row.gamma_hat.push_back(
            trajectory_ratio(layer_residual(k, slot), probe_newer[slot], probe_older[slot]));
      }
      report.rows.push_back(std::move(row));
    }
  }

  std::vector<double> gamma;
  for (const auto& row : report.rows) gamma.push_back(row.gamma);
  for (std::size_t slot = 0; slot < report.layers.size(); ++slot) {
    GammaLayerSummary s;
    s.layer = report.layers[slot];
    std::vector<double> est;
    double err = 0.0;
    for (const auto& row : report.rows) {
      est.push_back(row.gamma_hat[slot]);
      err += std::fabs(row.gamma_hat[slot] - row.gamma);
    }
    s.mean_abs_error = report.rows.empty() ? 0.0 : err / static_cast<double>(report.rows.size());
    try {
      s.spearman = spearman(est, gamma);
      s.pearson = pearson(est, gamma);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateSequence && e.kind() != ErrorKind::LengthMismatch) {
        throw;
      }
    }
    report.summary.push_back(s);
  }
  return report;
}

struct ReplayReport {
  double threshold = 0.0;
  std::uint32_t probe_layer = 0;
  std::vector<std::uint32_t> recompute_steps;  // sampling order, first step included
  RunLog log;  // decisions with block charges as a closed-loop run would book them
};

// Open-loop replay of the accumulate-and-threshold rule over the recorded
// vanilla features. No feedback: the trace's features are used as-is.
inline ReplayReport replay_schedule(const Trace& trace, double threshold, std::uint32_t layer) {
  if (std::isnan(threshold) || threshold < 0.0) {
    throw Error(ErrorKind::InvalidConfig, "threshold must be >= 0");
  }
  const std::size_t slot = trace.layer_slot(layer);
  ReplayReport report;
  report.threshold = threshold;
  report.probe_layer = layer;
  const std::uint64_t full = trace.header.num_blocks;
  double acc = 0.0;
  for (std::size_t p = 0; p < trace.steps.size(); ++p) {
    const TraceStep& s = trace.steps[p];
    StepRecord rec;
    rec.step_index = s.step_index;
    rec.t = s.t;
    Decision& d = rec.decision;
    if (p == 0) {
      d.action = StepAction::ComputeFirst;
      rec.block_evals_delta = full;
    } else {
      d.estimated_error = l1_rel(s.layers[slot], trace.steps[p - 1].layers[slot]);
      acc += d.estimated_error;
      d.accumulated_error = acc;
      if (acc <= threshold) {
        d.action = StepAction::Reuse;
        rec.block_evals_delta = layer;
      } else {
        d.action = StepAction::Recompute;
        rec.block_evals_delta = full;
        acc = 0.0;
      }
      d.accumulated_after = acc;
    }
    if (d.action == StepAction::Reuse) {
      ++report.log.meter.reuse_steps;
    } else {
      ++report.log.meter.recompute_steps;
      report.recompute_steps.push_back(s.step_index);
    }
    report.log.meter.block_evals += rec.block_evals_delta;
    rec.block_evals_total = report.log.meter.block_evals;
    report.log.steps.push_back(rec);
  }
  return report;
}

}  // namespace dicache
