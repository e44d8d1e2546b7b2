#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "dicache/trace.hpp"
#include "oracles/oracles.hpp"

using namespace dicache;

namespace {

ModelConfig model_config() {
  ModelConfig cfg;
  cfg.num_blocks = 4;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_tokens = 4;
  cfg.weight_seed = 21;
  return cfg;
}

SamplerConfig sampler_config(std::size_t steps = 12) {
  SamplerConfig s;
  s.num_steps = steps;
  s.noise_seed = 8;
  s.n_tokens = 4;
  s.d_model = 8;
  return s;
}

Trace recorded(std::vector<std::uint32_t> layers = {1, 2, 3, 4}, std::size_t steps = 12) {
  auto w = init_weights(model_config());
  return build_trace(w, sampler_config(steps), make_conditioning(2, 8), std::move(layers));
}

// Two-layer trace with 1x2 tensors; feature values are given per step in
// sampling order (k = T first).
Trace handmade(const std::vector<std::array<float, 2>>& layer1,
               const std::vector<std::array<float, 2>>& layer2) {
  Trace t;
  t.header.num_steps = static_cast<std::uint32_t>(layer1.size());
  t.header.num_blocks = 2;
  t.header.n_tokens = 1;
  t.header.d_model = 2;
  t.header.layers = {1, 2};
  for (std::size_t p = 0; p < layer1.size(); ++p) {
    TraceStep s;
    s.step_index = static_cast<std::uint32_t>(layer1.size() - p);
    s.t = static_cast<float>(s.step_index) / static_cast<float>(layer1.size());
    s.input = Tensor2D(1, 2, std::vector<float>{1.0f, 1.0f + static_cast<float>(p)});
    s.layers.emplace_back(1, 2, std::vector<float>{layer1[p][0], layer1[p][1]});
    s.layers.emplace_back(1, 2, std::vector<float>{layer2[p][0], layer2[p][1]});
    t.steps.push_back(std::move(s));
  }
  return t;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dicache_trace_test_" + name);
}

}  // namespace

TEST(TraceFile, SizeMatchesLayout) {
  auto w = init_weights(model_config());
  const auto path = temp_path("size.dtrc");
  auto header = record_trace(w, sampler_config(), make_conditioning(2, 8), {2, 4}, path.string(),
                             R"({"seed":8})");
  const std::size_t expected = header.header_bytes() + 12 * (4 + 4 + 4 * 4 * 8 * (1 + 2));
  EXPECT_EQ(std::filesystem::file_size(path), expected);
  EXPECT_EQ(header.header_bytes(), 4u + 28u + 8u + 10u);
}

TEST(TraceFile, ReRecordIsByteIdentical) {
  auto a = encode_trace(recorded());
  auto b = encode_trace(recorded());
  EXPECT_EQ(a, b);
}

TEST(TraceFile, RoundTripIsBitExact) {
  const Trace t = recorded({1, 3, 4});
  const Trace back = decode_trace(encode_trace(t));
  ASSERT_EQ(back.steps.size(), t.steps.size());
  EXPECT_EQ(back.header.layers, t.header.layers);
  for (std::size_t p = 0; p < t.steps.size(); ++p) {
    EXPECT_EQ(back.steps[p].step_index, t.steps[p].step_index);
    EXPECT_TRUE(bit_equal(back.steps[p].input, t.steps[p].input));
    for (std::size_t l = 0; l < t.steps[p].layers.size(); ++l) {
      EXPECT_TRUE(bit_equal(back.steps[p].layers[l], t.steps[p].layers[l]));
    }
  }
}

TEST(TraceFile, FinalLayerMatchesVanillaVelocity) {
  auto w = init_weights(model_config());
  const Trace t = recorded({4});
  const auto& first = t.steps.front();
  auto y = forward_full(w, first.input, 1.0, make_conditioning(2, 8));
  EXPECT_TRUE(bit_equal(first.layers[0], *y.final_output));
}

TEST(TraceFile, InvalidLayers) {
  auto w = init_weights(model_config());
  for (std::vector<std::uint32_t> bad :
       {std::vector<std::uint32_t>{1, 2}, {2, 1, 4}, {0, 4}, {4, 5}, {}}) {
    try {
      build_trace(w, sampler_config(), make_conditioning(2, 8), bad);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidLayers);
    }
  }
}

TEST(TraceFile, RejectsCorruption) {
  auto bytes = encode_trace(recorded({4}, 4));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_trace(truncated), Error);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_trace(bad), Error);
}

TEST(LayerCorrelation, FinalLayerSelfCorrelationIsOne) {
  const auto report = layer_correlation(recorded());
  ASSERT_EQ(report.layers.size(), 4u);
  EXPECT_EQ(report.layers.back().layer, 4u);
  EXPECT_EQ(report.layers.back().spearman, 1.0);
  for (const auto& l : report.layers) {
    EXPECT_EQ(l.differences.size(), 11u);
    EXPECT_GE(l.spearman, -1.0);
    EXPECT_LE(l.spearman, 1.0);
  }
}

TEST(LayerCorrelation, HandmadeTraceMatchesBruteForce) {
  const std::vector<std::array<float, 2>> l1{{1, 1}, {2, 1}, {2, 3}, {1, 3}, {5, 4}, {5, 5}};
  const std::vector<std::array<float, 2>> l2{{1, 2}, {1, 3}, {4, 3}, {4, 1}, {2, 2}, {3, 2}};
  const auto report = layer_correlation(handmade(l1, l2));
  auto series = [](const std::vector<std::array<float, 2>>& v) {
    std::vector<double> out;
    for (std::size_t p = 1; p < v.size(); ++p) {
      out.push_back(oracle::rel_l1({v[p][0], v[p][1]}, {v[p - 1][0], v[p - 1][1]}));
    }
    return out;
  };
  const auto s1 = series(l1);
  const auto s2 = series(l2);
  for (std::size_t i = 0; i < s1.size(); ++i) {
    EXPECT_NEAR(report.layers[0].differences[i], s1[i], 1e-15);
  }
  EXPECT_NEAR(report.layers[0].spearman, oracle::spearman(s1, s2), 1e-12);
  EXPECT_EQ(report.layers[1].spearman, 1.0);
}

TEST(LayerCorrelation, MonotoneRelatedSeriesCorrelatePerfectly) {
  // Layer-1 features move by the square of the layer-2 relative change, a
  // strictly monotone transform of the same ordering.
  const std::vector<float> steps2{1.0f, 1.5f, 1.6f, 2.6f, 2.7f, 3.5f};
  std::vector<std::array<float, 2>> l1, l2;
  float v1 = 1.0f;
  for (std::size_t p = 0; p < steps2.size(); ++p) {
    l2.push_back({steps2[p], steps2[p]});
    if (p > 0) v1 *= 1.0f + std::pow((steps2[p] - steps2[p - 1]) / steps2[p - 1], 2.0f);
    l1.push_back({v1, v1});
  }
  EXPECT_EQ(layer_correlation(handmade(l1, l2)).layers[0].spearman, 1.0);
}

TEST(LayerCorrelation, NeedsThreeSteps) {
  EXPECT_THROW(layer_correlation(handmade({{1, 1}, {2, 2}}, {{1, 2}, {2, 3}})), Error);
}

TEST(GammaConsistency, FinalLayerReproducesGammaAndEndpoints) {
  const Trace t = recorded();
  const auto report = gamma_consistency(t, {2, 5, 9, 12});
  const std::size_t final_slot = 3;
  ASSERT_FALSE(report.rows.empty());
  for (const auto& row : report.rows) {
    EXPECT_EQ(row.gamma_hat[final_slot], row.gamma);
    if (row.step_index == row.newer_step) { EXPECT_EQ(row.gamma, 1.0); }
    if (row.step_index == row.older_step) { EXPECT_EQ(row.gamma, 0.0); }
    for (double g : row.gamma_hat) {
      if (row.step_index == row.newer_step) { EXPECT_EQ(g, 1.0); }
      if (row.step_index == row.older_step) { EXPECT_EQ(g, 0.0); }
    }
  }
  // Pairs (12,9), (9,5), (5,2): rows 12..6, 9..3, 5..1.
  EXPECT_EQ(report.rows.size(), 7u + 7u + 5u);
  EXPECT_EQ(report.summary[final_slot].spearman, 1.0);
}

TEST(GammaConsistency, BadSchedule) {
  const Trace t = recorded({4}, 6);
  for (std::vector<std::uint32_t> bad :
       {std::vector<std::uint32_t>{3}, {4, 2}, {0, 3}, {3, 7}, {2, 2}}) {
    try {
      gamma_consistency(t, bad);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::BadSchedule);
    }
  }
}

TEST(Replay, ZeroThresholdRecomputesEverything) {
  const auto r = replay_schedule(recorded(), 0.0, 1);
  EXPECT_EQ(r.recompute_steps.size(), 12u);
  EXPECT_EQ(check_threshold_semantics(r.log, 0.0), "");
}

TEST(Replay, LargeThresholdComputesOnce) {
  const Trace t = recorded();
  double total = 0.0;
  for (double e : difference_series(t, 2)) total += e;
  const auto r = replay_schedule(t, total, 2);
  EXPECT_EQ(r.recompute_steps, std::vector<std::uint32_t>{12});
  EXPECT_EQ(r.log.meter.block_evals, 4u + 11u * 2u);
  EXPECT_EQ(replay_schedule(t, std::numeric_limits<double>::infinity(), 1).recompute_steps.size(),
            1u);
}

TEST(Replay, RecomputeCountNonIncreasingInThreshold) {
  const Trace t = recorded({1, 2, 3, 4}, 30);
  for (std::uint32_t layer : {1u, 2u, 4u}) {
    std::size_t last = std::numeric_limits<std::size_t>::max();
    std::vector<std::uint32_t> last_steps;
    for (int i = 0; i <= 40; ++i) {
      const double delta = 0.05 * i;
      const auto r = replay_schedule(t, delta, layer);
      EXPECT_LE(r.recompute_steps.size(), last) << "layer " << layer << " delta " << delta;
      EXPECT_EQ(check_threshold_semantics(r.log, delta), "");
      EXPECT_EQ(check_cost_identity(r.log, 4, layer), "");
      if (!last_steps.empty()) {
        // First divergence: the larger threshold never recomputes earlier in
        // sampling order (larger k).
        // recompute_steps is in sampling order (descending k).
        std::size_t j = 0;
        while (j < last_steps.size() && j < r.recompute_steps.size() &&
               last_steps[j] == r.recompute_steps[j]) {
          ++j;
        }
        if (j < last_steps.size() && j < r.recompute_steps.size()) {
          EXPECT_LT(r.recompute_steps[j], last_steps[j]);
        }
      }
      last = r.recompute_steps.size();
      last_steps = r.recompute_steps;
    }
  }
}

TEST(Replay, LayerNotRecorded) {
  try {
    replay_schedule(recorded({2, 4}), 0.1, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LayerNotRecorded);
  }
}
