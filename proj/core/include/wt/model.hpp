#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wt/mup.hpp"
#include "wt/ops.hpp"
#include "wt/rng.hpp"
#include "wt/tensor.hpp"

namespace wt {

// Decoder-only transformer: RMS-norm, rotary positions, grouped-query
// attention, gated MLP, no biases, input/output embeddings tied by default.
struct ModelConfig {
  int64_t hidden_size = 256;
  int64_t intermediate_size = 640;
  int64_t num_layers = 8;
  int64_t num_heads = 8;
  int64_t num_kv_heads = 2;
  int64_t context_len = 128;
  int64_t vocab_size = 4096;
  bool tie_embeddings = true;

  int64_t head_dim() const { return hidden_size / num_heads; }
  int64_t kv_dim() const { return head_dim() * num_kv_heads; }

  void validate() const {
    if (hidden_size <= 0 || intermediate_size <= 0 || num_layers <= 0 || context_len <= 0 ||
        vocab_size <= 0) {
      throw std::invalid_argument("model: all dimensions must be positive");
    }
    if (num_heads <= 0 || hidden_size % num_heads != 0) {
      throw std::invalid_argument("model: hidden_size must be divisible by num_heads");
    }
    if (num_kv_heads <= 0 || num_heads % num_kv_heads != 0) {
      throw std::invalid_argument("model: num_heads must be divisible by num_kv_heads");
    }
    if (head_dim() % 2 != 0) {
      throw std::invalid_argument("model: head_dim must be even for rotary encoding");
    }
  }

  // 1.2B-class configuration: hidden 1536, intermediate 3840, 48 layers,
  // 24 heads, 8 kv heads, context 4096, vocab 65280.
  static ModelConfig paper_preset() {
    return {1536, 3840, 48, 24, 8, 4096, 65280, true};
  }

  // ~6.3M-parameter desk model.
  static ModelConfig nano_preset() {
    return {256, 640, 8, 8, 2, 128, 4096, true};
  }
};

// Exact trainable-parameter total; the tied output head is counted once.
inline int64_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.hidden_size, inter = cfg.intermediate_size;
  const int64_t per_layer = d * d            // wq
                            + d * cfg.kv_dim() * 2  // wk, wv
                            + d * d          // wo
                            + d * inter * 2  // w_gate, w_up
                            + inter * d      // w_down
                            + 2 * d;         // two norm weights
  int64_t total = cfg.vocab_size * d + cfg.num_layers * per_layer + d;
  if (!cfg.tie_embeddings) total += cfg.vocab_size * d;
  return total;
}

template <class T>
struct ModelParams {
  ModelConfig config;

  struct Layer {
    Tensor<T> attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
  };

  Tensor<T> token_embedding;  // [vocab x d]; doubles as the output head when tied
  std::vector<Layer> layers;
  Tensor<T> final_norm;
  Tensor<T> lm_head;  // only allocated when untied

  struct NamedParam {
    std::string name;
    ParamKind kind;
    Tensor<T> tensor;  // shares storage with the model
  };

  // Fixed enumeration order; the trainer, checkpoints and the gradient-check
  // flattening all rely on it.
  std::vector<NamedParam> named_params() const {
    std::vector<NamedParam> out;
    out.push_back({"token_embedding", ParamKind::kEmbedding, token_embedding});
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      out.push_back({p + "attn_norm", ParamKind::kVector, layers[l].attn_norm});
      out.push_back({p + "wq", ParamKind::kMatrix, layers[l].wq});
      out.push_back({p + "wk", ParamKind::kMatrix, layers[l].wk});
      out.push_back({p + "wv", ParamKind::kMatrix, layers[l].wv});
      out.push_back({p + "wo", ParamKind::kMatrix, layers[l].wo});
      out.push_back({p + "mlp_norm", ParamKind::kVector, layers[l].mlp_norm});
      out.push_back({p + "w_gate", ParamKind::kMatrix, layers[l].w_gate});
      out.push_back({p + "w_up", ParamKind::kMatrix, layers[l].w_up});
      out.push_back({p + "w_down", ParamKind::kMatrix, layers[l].w_down});
    }
    out.push_back({"final_norm", ParamKind::kVector, final_norm});
    if (!config.tie_embeddings) out.push_back({"lm_head", ParamKind::kEmbedding, lm_head});
    return out;
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& p : named_params()) n += p.tensor.numel();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& p : named_params()) {
      auto t = p.tensor;
      t.requires_grad = on;
      if (on) t.ensure_grad();
      assign_by_name(p.name, t);
    }
  }

  // Re-binds the tensor registered under `name`.
  void assign_by_name(const std::string& name, Tensor<T> t) {
    if (name == "token_embedding") {
      token_embedding = std::move(t);
      return;
    }
    if (name == "final_norm") {
      final_norm = std::move(t);
      return;
    }
    if (name == "lm_head") {
      lm_head = std::move(t);
      return;
    }
    if (name.rfind("layers.", 0) == 0) {
      const size_t dot = name.find('.', 7);
      const size_t l = static_cast<size_t>(std::stoll(name.substr(7, dot - 7)));
      const std::string field = name.substr(dot + 1);
      Layer& lay = layers.at(l);
      if (field == "attn_norm") lay.attn_norm = std::move(t);
      else if (field == "wq") lay.wq = std::move(t);
      else if (field == "wk") lay.wk = std::move(t);
      else if (field == "wv") lay.wv = std::move(t);
      else if (field == "wo") lay.wo = std::move(t);
      else if (field == "mlp_norm") lay.mlp_norm = std::move(t);
      else if (field == "w_gate") lay.w_gate = std::move(t);
      else if (field == "w_up") lay.w_up = std::move(t);
      else if (field == "w_down") lay.w_down = std::move(t);
      else throw std::invalid_argument("model: unknown parameter " + name);
      return;
    }
    throw std::invalid_argument("model: unknown parameter " + name);
  }
};

namespace detail {

template <class T>
Tensor<T> init_normal(Shape shape, double std, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
  T* v = t.values();
  for (int64_t i = 0; i < t.numel(); ++i) v[i] = static_cast<T>(std * rng.normal());
  return t;
}

template <class T>
Tensor<T> init_ones(int64_t n) {
  Tensor<T> t = Tensor<T>::zeros({n}, true);
  std::fill(t.values(), t.values() + n, T(1));
  return t;
}

}  // namespace detail

// Matrix-like tensors ~ N(0, (init_std/sqrt(d_m/d_base))^2); the embedding
// table (and untied head) ~ N(0, 0.1^2); norm weights start at 1.
// Deterministic per (seed, tensor name).
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, const MupConfig& mup, uint64_t seed) {
  cfg.validate();
  mup.validate();
  const int64_t d = cfg.hidden_size;
  ModelParams<T> p;
  p.config = cfg;
  const double mstd = init_std_for(mup, ParamKind::kMatrix, d);
  const double estd = init_std_for(mup, ParamKind::kEmbedding, d);

  auto normal = [&](const std::string& name, Shape shape, double std) {
    Rng rng(derive_seed(seed, "init." + name));
    return detail::init_normal<T>(std::move(shape), std, rng);
  };

  p.token_embedding = normal("token_embedding", {cfg.vocab_size, d}, estd);
  p.layers.resize(static_cast<size_t>(cfg.num_layers));
  for (int64_t l = 0; l < cfg.num_layers; ++l) {
    auto& lay = p.layers[static_cast<size_t>(l)];
    const std::string pre = "layers." + std::to_string(l) + ".";
    lay.attn_norm = detail::init_ones<T>(d);
    lay.wq = normal(pre + "wq", {d, d}, mstd);
    lay.wk = normal(pre + "wk", {d, cfg.kv_dim()}, mstd);
    lay.wv = normal(pre + "wv", {d, cfg.kv_dim()}, mstd);
    lay.wo = normal(pre + "wo", {d, d}, mstd);
    lay.mlp_norm = detail::init_ones<T>(d);
    lay.w_gate = normal(pre + "w_gate", {d, cfg.intermediate_size}, mstd);
    lay.w_up = normal(pre + "w_up", {d, cfg.intermediate_size}, mstd);
    lay.w_down = normal(pre + "w_down", {cfg.intermediate_size, d}, mstd);
  }
  p.final_norm = detail::init_ones<T>(d);
  if (!cfg.tie_embeddings) p.lm_head = normal("lm_head", {cfg.vocab_size, d}, estd);
  return p;
}

// Activation-RMS probe record for width-stability checks.
struct CoordProbe {
  std::vector<std::pair<std::string, double>> rms;
};

template <class T>
double tensor_rms(const Tensor<T>& t) {
  double s = 0.0;
  const T* v = t.values();
  for (int64_t i = 0; i < t.numel(); ++i) s += static_cast<double>(v[i]) * v[i];
  return std::sqrt(s / static_cast<double>(t.numel()));
}

// Runs the decoder on packed sequences. tokens is row-major [batch x seq].
// Returns logits shaped {batch, seq, vocab}.
template <class T>
Tensor<T> forward(const ModelParams<T>& params, const MupConfig& mup,
                  std::span<const int32_t> tokens, int64_t batch, int64_t seq,
                  CoordProbe* probe = nullptr) {
  const ModelConfig& cfg = params.config;
  if (seq > cfg.context_len) {
    throw std::invalid_argument("forward: seq " + std::to_string(seq) + " exceeds context_len " +
                                std::to_string(cfg.context_len));
  }
  if (static_cast<int64_t>(tokens.size()) != batch * seq || batch <= 0 || seq <= 0) {
    throw std::invalid_argument("forward: tokens must be batch*seq ids");
  }
  const int64_t hd = cfg.head_dim();
  const T emb_mult = static_cast<T>(embedding_multiplier(mup));
  const T res_mult = static_cast<T>(residual_multiplier(mup, cfg.num_layers));
  const T logit_mult = static_cast<T>(logit_multiplier(mup, cfg.hidden_size));

  Tensor<T> x = embedding_rows(params.token_embedding, tokens);
  if (emb_mult != T(1)) x = scale(x, emb_mult);
  if (probe) probe->rms.emplace_back("embedding_output", tensor_rms(x));

  for (size_t l = 0; l < params.layers.size(); ++l) {
    const auto& lay = params.layers[l];
    Tensor<T> h = rmsnorm(x, lay.attn_norm);
    Tensor<T> q = rope(matmul(h, lay.wq), cfg.num_heads, seq, hd);
    Tensor<T> k = rope(matmul(h, lay.wk), cfg.num_kv_heads, seq, hd);
    Tensor<T> v = matmul(h, lay.wv);
    Tensor<T> att = attention_gqa(q, k, v, batch, seq, cfg.num_heads, cfg.num_kv_heads, hd);
    Tensor<T> o = matmul(att, lay.wo);
    x = res_mult == T(1) ? add(x, o) : add_scaled(x, o, res_mult);

    Tensor<T> h2 = rmsnorm(x, lay.mlp_norm);
    Tensor<T> gated = mul(silu(matmul(h2, lay.w_gate)), matmul(h2, lay.w_up));
    Tensor<T> mo = matmul(gated, lay.w_down);
    x = res_mult == T(1) ? add(x, mo) : add_scaled(x, mo, res_mult);
    if (probe) probe->rms.emplace_back("block_" + std::to_string(l), tensor_rms(x));
  }

  x = rmsnorm(x, params.final_norm);
  if (probe) probe->rms.emplace_back("pre_logits", tensor_rms(x));

  const Tensor<T>& head = cfg.tie_embeddings ? params.token_embedding : params.lm_head;
  Tensor<T> logits = matmul_nt(x, head);
  if (logit_mult != T(1)) logits = scale(logits, logit_mult);
  logits.shape = {batch, seq, cfg.vocab_size};
  return logits;
}

}  // namespace wt
