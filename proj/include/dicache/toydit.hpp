#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dicache/cost.hpp"
#include "dicache/error.hpp"
#include "dicache/prng.hpp"
#include "dicache/tensor.hpp"

namespace dicache {

struct ModelConfig {
  std::size_t num_blocks = 12;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_tokens = 64;
  std::size_t mlp_ratio = 4;
  double ln_epsilon = 1e-5;
  std::uint64_t weight_seed = 1234;

  void validate() const {
    if (num_blocks < 2) throw Error(ErrorKind::InvalidConfig, "num_blocks must be >= 2");
    if (d_model == 0 || d_model % 2 != 0) {
      throw Error(ErrorKind::InvalidConfig, "d_model must be a positive even integer");
    }
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw Error(ErrorKind::InvalidConfig, "n_heads must divide d_model");
    }
    if (n_tokens == 0) throw Error(ErrorKind::InvalidConfig, "n_tokens must be >= 1");
    if (mlp_ratio == 0) throw Error(ErrorKind::InvalidConfig, "mlp_ratio must be >= 1");
    if (!(ln_epsilon > 0.0) || !std::isfinite(ln_epsilon)) {
      throw Error(ErrorKind::InvalidConfig, "ln_epsilon must be positive");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
  std::vector<float> gain;
  std::vector<float> bias;
};

struct BlockWeights {
  Tensor2D qkv;       // d x 3d
  Tensor2D attn_out;  // d x d
  Tensor2D mlp_in;    // d x (ratio*d)
  Tensor2D mlp_out;   // (ratio*d) x d
  LayerNormParams ln_attn;
  LayerNormParams ln_mlp;
};

struct ModelWeights {
  ModelConfig config;
  std::vector<BlockWeights> blocks;
  Tensor2D time_proj;  // d x d
  Tensor2D cond_proj;  // d x d
  LayerNormParams ln_final;
  Tensor2D head;  // d x d
};

struct Conditioning {
  std::vector<float> values;
};

// Output of a full pass: y^M plus any requested intermediate block outputs,
// keyed by 1-based layer id. Layer M maps to the head output.
struct BlockOutputs {
  std::optional<Tensor2D> final_output;
  std::map<std::size_t, Tensor2D> layers;
};

namespace detail {

inline Tensor2D xavier(SplitMix64& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor2D w(fan_in, fan_out);
  for (float& v : w.flat()) v = static_cast<float>(rng.uniform(-bound, bound));
  return w;
}

inline LayerNormParams unit_layer_norm(std::size_t d) {
  return {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};
}

// out = x * w, accumulated in float in i-k-j order.
inline Tensor2D matmul(const Tensor2D& x, const Tensor2D& w) {
  Tensor2D out(x.rows(), w.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto dst = out.row(i);
    auto src = x.row(i);
    for (std::size_t k = 0; k < w.rows(); ++k) {
      const float a = src[k];
      auto wr = w.row(k);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += a * wr[j];
    }
  }
  return out;
}

inline Tensor2D layer_norm(const Tensor2D& x, const LayerNormParams& p, double eps) {
  Tensor2D out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row(i);
    double mean = 0.0;
    for (float v : src) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : src) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = static_cast<float>((src[j] - mean) * inv) * p.gain[j] + p.bias[j];
    }
  }
  return out;
}

inline float gelu(float x) {
  const float inner = 0.7978845608f * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(inner));
}

inline Tensor2D self_attention(const Tensor2D& normed, const BlockWeights& bw,
                               std::size_t n_heads) {
  const std::size_t n = normed.rows();
  const std::size_t d = normed.cols();
  const std::size_t dh = d / n_heads;
  const Tensor2D qkv = matmul(normed, bw.qkv);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor2D mixed(n, d);
  std::vector<float> scores(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t q_off = h * dh;
    const std::size_t k_off = d + h * dh;
    const std::size_t v_off = 2 * d + h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      float peak = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        float s = 0.0f;
        for (std::size_t c = 0; c < dh; ++c) s += qkv(i, q_off + c) * qkv(j, k_off + c);
        scores[j] = s * scale;
        peak = std::max(peak, scores[j]);
      }
      float denom = 0.0f;
      for (std::size_t j = 0; j < n; ++j) {
        scores[j] = std::exp(scores[j] - peak);
        denom += scores[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const float p = scores[j] / denom;
        for (std::size_t c = 0; c < dh; ++c) mixed(i, q_off + c) += p * qkv(j, v_off + c);
      }
    }
  }
  return matmul(mixed, bw.attn_out);
}

inline void add_in_place(Tensor2D& acc, const Tensor2D& delta) {
  auto a = acc.flat();
  auto b = delta.flat();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline void apply_block(Tensor2D& h, const BlockWeights& bw, const ModelConfig& cfg) {
  add_in_place(h, self_attention(layer_norm(h, bw.ln_attn, cfg.ln_epsilon), bw, cfg.n_heads));
  Tensor2D hidden = matmul(layer_norm(h, bw.ln_mlp, cfg.ln_epsilon), bw.mlp_in);
  for (float& v : hidden.flat()) v = gelu(v);
  add_in_place(h, matmul(hidden, bw.mlp_out));
}

inline Tensor2D apply_head(const Tensor2D& h, const ModelWeights& w) {
  return matmul(layer_norm(h, w.ln_final, w.config.ln_epsilon), w.head);
}

inline void check_latent(const ModelWeights& w, const Tensor2D& x, const char* where) {
  if (x.rows() != w.config.n_tokens || x.cols() != w.config.d_model) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(where) + ": expected " + std::to_string(w.config.n_tokens) + "x" +
                    std::to_string(w.config.d_model) + ", got " + x.shape_string());
  }
}

inline void check_probe_depth(const ModelWeights& w, std::size_t m) {
  if (m < 1 || m + 1 > w.config.num_blocks) {
    throw Error(ErrorKind::BadProbeDepth, "probe depth " + std::to_string(m) +
                                              " outside [1, " +
                                              std::to_string(w.config.num_blocks - 1) + "]");
  }
}

}  // namespace detail

// Xavier-uniform parameters from one splitmix64 stream. Traversal order:
// blocks ascending (qkv, attn_out, mlp_in, mlp_out), then time_proj,
// cond_proj, then head. Layer-norm gains are 1 and biases 0.
inline ModelWeights init_weights(const ModelConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.weight_seed);
  const std::size_t d = cfg.d_model;
  const std::size_t hidden = cfg.mlp_ratio * d;
  ModelWeights w;
  w.config = cfg;
  w.blocks.reserve(cfg.num_blocks);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    BlockWeights bw;
    bw.qkv = detail::xavier(rng, d, 3 * d);
    bw.attn_out = detail::xavier(rng, d, d);
    bw.mlp_in = detail::xavier(rng, d, hidden);
    bw.mlp_out = detail::xavier(rng, hidden, d);
    bw.ln_attn = detail::unit_layer_norm(d);
    bw.ln_mlp = detail::unit_layer_norm(d);
    w.blocks.push_back(std::move(bw));
  }
  w.time_proj = detail::xavier(rng, d, d);
  w.cond_proj = detail::xavier(rng, d, d);
  w.ln_final = detail::unit_layer_norm(d);
  w.head = detail::xavier(rng, d, d);
  return w;
}

// Sinusoidal embedding: emb[2j] = sin(1000 t w_j), emb[2j+1] = cos(1000 t w_j),
// w_j = 10000^(-2j/d).
inline std::vector<float> time_embedding(double t, std::size_t d) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw Error(ErrorKind::OutOfRangeTime, "time " + std::to_string(t) + " outside [0, 1]");
  }
  std::vector<float> emb(d);
  for (std::size_t j = 0; j < d / 2; ++j) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    const double phase = 1000.0 * t * omega;
    emb[2 * j] = static_cast<float>(std::sin(phase));
    emb[2 * j + 1] = static_cast<float>(std::cos(phase));
  }
  return emb;
}

inline Conditioning make_conditioning(std::uint64_t seed, std::size_t d) {
  SplitMix64 rng(seed);
  Conditioning c;
  c.values.resize(d);
  for (float& v : c.values) v = static_cast<float>(rng.gaussian());
  return c;
}

// h0 = x + broadcast(emb(t) W_t + c W_c). Time and condition enter only here.
inline Tensor2D embed_input(const ModelWeights& w, const Tensor2D& x, double t,
                            const Conditioning& c) {
  detail::check_latent(w, x, "embed_input");
  const std::size_t d = w.config.d_model;
  if (c.values.size() != d) {
    throw Error(ErrorKind::ShapeMismatch, "conditioning length " +
                                              std::to_string(c.values.size()) + " != " +
                                              std::to_string(d));
  }
  Tensor2D emb(1, d, time_embedding(t, d));
  Tensor2D cond(1, d, c.values);
  Tensor2D shift = detail::matmul(emb, w.time_proj);
  detail::add_in_place(shift, detail::matmul(cond, w.cond_proj));
  Tensor2D h = x;
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto r = h.row(i);
    for (std::size_t j = 0; j < d; ++j) r[j] += shift(0, j);
  }
  return h;
}

// y^m: blocks 1..m applied to the embedded input.
inline Tensor2D forward_probe(const ModelWeights& w, const Tensor2D& x, double t,
                              const Conditioning& c, std::size_t m, CostMeter* meter = nullptr) {
  detail::check_probe_depth(w, m);
  Tensor2D h = embed_input(w, x, t, c);
  for (std::size_t b = 0; b < m; ++b) detail::apply_block(h, w.blocks[b], w.config);
  if (meter) meter->charge_blocks(m);
  return h;
}

// y^M from a block-m output: blocks m+1..M followed by the head.
inline Tensor2D forward_resume(const ModelWeights& w, const Tensor2D& probe, std::size_t m,
                               CostMeter* meter = nullptr) {
  detail::check_probe_depth(w, m);
  detail::check_latent(w, probe, "forward_resume");
  Tensor2D h = probe;
  for (std::size_t b = m; b < w.config.num_blocks; ++b) {
    detail::apply_block(h, w.blocks[b], w.config);
  }
  if (meter) meter->charge_blocks(w.config.num_blocks - m);
  return detail::apply_head(h, w);
}

// Full pass. Uses the same embed/block/head routines as forward_probe and
// forward_resume, so probe(m) followed by resume(m) is bit-identical to it.
inline BlockOutputs forward_full(const ModelWeights& w, const Tensor2D& x, double t,
                                 const Conditioning& c,
                                 const std::set<std::size_t>& record_layers = {},
                                 CostMeter* meter = nullptr) {
  const std::size_t depth = w.config.num_blocks;
  for (std::size_t layer : record_layers) {
    if (layer < 1 || layer > depth) {
      throw Error(ErrorKind::InvalidLayers, "layer " + std::to_string(layer) +
                                                " outside [1, " + std::to_string(depth) + "]");
    }
  }
  BlockOutputs out;
  Tensor2D h = embed_input(w, x, t, c);
  for (std::size_t b = 0; b < depth; ++b) {
    detail::apply_block(h, w.blocks[b], w.config);
    if (b + 1 < depth && record_layers.contains(b + 1)) out.layers.emplace(b + 1, h);
  }
  if (meter) meter->charge_blocks(depth);
  Tensor2D y = detail::apply_head(h, w);
  if (record_layers.contains(depth)) out.layers.emplace(depth, y);
  out.final_output = std::move(y);
  return out;
}

// r = y - x.
inline Tensor2D residual(const Tensor2D& y, const Tensor2D& x) {
  require_same_shape(y, x, "residual");
  return y - x;
}

}  // namespace dicache
