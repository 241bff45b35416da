#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "wt/gradcheck.hpp"
#include "wt/model.hpp"
#include "wt/mup.hpp"
#include "wt/ops.hpp"
#include "wt/rng.hpp"

using namespace wt;

namespace {

MupConfig neutral_mup(const ModelConfig& cfg) {
  MupConfig m;
  m.scale_emb = 1.0;
  m.dim_model_base = cfg.hidden_size;
  m.scale_depth = std::sqrt(static_cast<double>(cfg.num_layers));
  m.init_std = 0.1;
  return m;
}

Tensor<double> rand_tensor(Shape shape, Rng& rng, double s = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) (*t.data)[i] = s * rng.normal();
  return t;
}

// Plain multi-head attention with one kv head per query head, written with
// the same per-element arithmetic order as the production kernel.
Tensor<double> naive_mha(const Tensor<double>& q, const Tensor<double>& k,
                         const Tensor<double>& v, int64_t batch, int64_t seq, int64_t heads,
                         int64_t hd) {
  const int64_t w = heads * hd;
  Tensor<double> out = Tensor<double>::zeros({batch * seq, w});
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> row(static_cast<size_t>(seq));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t i = 0; i < seq; ++i) {
        const double* qi = q.values() + (b * seq + i) * w + h * hd;
        double mx = -1e300;
        for (int64_t j = 0; j <= i; ++j) {
          const double* kj = k.values() + (b * seq + j) * w + h * hd;
          double s = 0;
          for (int64_t t = 0; t < hd; ++t) s += qi[t] * kj[t];
          s *= inv_sqrt;
          row[static_cast<size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double denom = 0;
        for (int64_t j = 0; j <= i; ++j) {
          row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
          denom += row[static_cast<size_t>(j)];
        }
        const double inv = 1.0 / denom;
        double* orow = out.values() + (b * seq + i) * w + h * hd;
        for (int64_t j = 0; j <= i; ++j) {
          const double p = row[static_cast<size_t>(j)] * inv;
          const double* vj = v.values() + (b * seq + j) * w + h * hd;
          for (int64_t t = 0; t < hd; ++t) orow[t] += p * vj[t];
        }
      }
    }
  }
  return out;
}

// Repeats each kv head's block group-many times along the feature dim.
Tensor<double> tile_kv(const Tensor<double>& x, int64_t kv_heads, int64_t group, int64_t hd) {
  const int64_t n = x.shape[0];
  Tensor<double> out = Tensor<double>::zeros({n, kv_heads * group * hd});
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t g = 0; g < kv_heads; ++g) {
      const double* src = x.values() + r * kv_heads * hd + g * hd;
      for (int64_t rep = 0; rep < group; ++rep) {
        double* dst = out.values() + r * kv_heads * group * hd + (g * group + rep) * hd;
        std::copy(src, src + hd, dst);
      }
    }
  }
  return out;
}

std::vector<int32_t> random_tokens(int64_t n, int64_t vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (auto& t : out) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("param_count: hand-enumerated tiny case is exactly 188") {
  ModelConfig cfg{4, 8, 1, 2, 1, 16, 8, true};
  // emb 8*4=32; wq 16, wk 8, wv 8, wo 16 -> 48; gate 32 + up 32 + down 32 -> 96;
  // two layer norms 8 + final norm 4 -> 12. Total 188.
  CHECK(param_count(cfg) == 188);
}

TEST_CASE("param_count: 1.2B-class preset and the tied-embedding saving") {
  ModelConfig cfg = ModelConfig::paper_preset();
  const int64_t tied = param_count(cfg);
  CHECK(tied >= 1'200'000'000);
  CHECK(tied <= 1'300'000'000);

  ModelConfig untied = cfg;
  untied.tie_embeddings = false;
  CHECK(param_count(untied) - tied == 100'270'080);  // 65280 * 1536
}

TEST_CASE("init std follows the width rule") {
  MupConfig mup;
  mup.init_std = 0.1;
  mup.dim_model_base = 128;
  CHECK(init_std_for(mup, ParamKind::kMatrix, 128) == doctest::Approx(0.1));
  CHECK(init_std_for(mup, ParamKind::kMatrix, 512) == doctest::Approx(0.05));  // sqrt(4)=2
  CHECK(init_std_for(mup, ParamKind::kVector, 512) == doctest::Approx(0.1));

  MupConfig bad = mup;
  bad.dim_model_base = 0;
  CHECK_THROWS_AS(init_std_for(bad, ParamKind::kMatrix, 512), std::invalid_argument);
}

TEST_CASE("empirical init std within 3% of target over 5 seeds") {
  ModelConfig cfg{512, 512, 1, 8, 8, 16, 32, true};
  MupConfig mup;
  mup.dim_model_base = 128;
  mup.init_std = 0.1;
  const double target = 0.05;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto params = init_params<double>(cfg, mup, seed);
    const auto& w = params.layers[0].wq;  // 512x512
    double ss = 0;
    for (int64_t i = 0; i < w.numel(); ++i) ss += (*w.data)[i] * (*w.data)[i];
    const double std = std::sqrt(ss / static_cast<double>(w.numel()));
    CHECK(std == doctest::Approx(target).epsilon(0.03));
  }
}

TEST_CASE("forward logits shape and determinism") {
  ModelConfig cfg{16, 32, 2, 4, 2, 16, 32, true};
  auto mup = neutral_mup(cfg);
  auto params = init_params<float>(cfg, mup, 3);
  auto tokens = random_tokens(2 * 8, cfg.vocab_size, 5);
  auto logits = forward(params, mup, tokens, 2, 8);
  CHECK(logits.shape == Shape{2, 8, 32});
  auto logits2 = forward(params, mup, tokens, 2, 8);
  CHECK(std::memcmp(logits.values(), logits2.values(), sizeof(float) * logits.numel()) == 0);
}

TEST_CASE("forward rejects overlong sequences and bad ids") {
  ModelConfig cfg{16, 32, 1, 4, 2, 8, 32, true};
  auto mup = neutral_mup(cfg);
  auto params = init_params<float>(cfg, mup, 3);
  auto tokens = random_tokens(16, cfg.vocab_size, 5);
  CHECK_THROWS_AS(forward(params, mup, tokens, 1, 16), std::invalid_argument);
  std::vector<int32_t> bad(8, 0);
  bad[3] = 99;  // >= vocab
  CHECK_THROWS_AS(forward(params, mup, bad, 1, 8), std::invalid_argument);
}

TEST_CASE("causality: perturbing token j changes logits only at positions >= j") {
  ModelConfig cfg{16, 32, 2, 4, 2, 16, 32, true};
  auto mup = neutral_mup(cfg);
  auto params = init_params<float>(cfg, mup, 7);
  const int64_t seq = 12;
  auto tokens = random_tokens(seq, cfg.vocab_size, 9);
  auto base = forward(params, mup, tokens, 1, seq);
  for (int64_t j : {3, 7}) {
    auto mutated = tokens;
    mutated[static_cast<size_t>(j)] = (mutated[static_cast<size_t>(j)] + 1) % cfg.vocab_size;
    auto out = forward(params, mup, mutated, 1, seq);
    for (int64_t p = 0; p < seq; ++p) {
      bool changed = false;
      for (int64_t c = 0; c < cfg.vocab_size; ++c) {
        if ((*out.data)[p * cfg.vocab_size + c] != (*base.data)[p * cfg.vocab_size + c]) {
          changed = true;
          break;
        }
      }
      if (p < j) CHECK_FALSE(changed);
      if (p == j) CHECK(changed);
    }
  }
}

TEST_CASE("GQA with n_kv == n_heads bit-matches a plain MHA reference") {
  Rng rng(21);
  const int64_t batch = 2, seq = 6, heads = 4, hd = 8;
  auto q = rand_tensor({batch * seq, heads * hd}, rng);
  auto k = rand_tensor({batch * seq, heads * hd}, rng);
  auto v = rand_tensor({batch * seq, heads * hd}, rng);
  auto ours = attention_gqa(q, k, v, batch, seq, heads, heads, hd);
  auto ref = naive_mha(q, k, v, batch, seq, heads, hd);
  CHECK(std::memcmp(ours.values(), ref.values(), sizeof(double) * ours.numel()) == 0);
}

TEST_CASE("GQA matches the reference with kv tensors explicitly repeated") {
  Rng rng(22);
  const int64_t batch = 2, seq = 6, heads = 6, kv_heads = 2, hd = 4;
  const int64_t group = heads / kv_heads;
  auto q = rand_tensor({batch * seq, heads * hd}, rng);
  auto k = rand_tensor({batch * seq, kv_heads * hd}, rng);
  auto v = rand_tensor({batch * seq, kv_heads * hd}, rng);
  auto grouped = attention_gqa(q, k, v, batch, seq, heads, kv_heads, hd);
  auto repeated =
      attention_gqa(q, tile_kv(k, kv_heads, group, hd), tile_kv(v, kv_heads, group, hd), batch,
                    seq, heads, heads, hd);
  for (int64_t i = 0; i < grouped.numel(); ++i) {
    const double a = (*grouped.data)[i], b = (*repeated.data)[i];
    CHECK(std::fabs(a - b) <= 1e-6 * std::max(1.0, std::fabs(b)));
  }
}

TEST_CASE("head-group map: with 24 query heads and 8 kv heads, head h reads kv head h/3") {
  const int64_t heads = 24, kv_heads = 8, hd = 2, seq = 2, batch = 1;
  auto q = Tensor<double>::zeros({seq, heads * hd});
  auto k = Tensor<double>::zeros({seq, kv_heads * hd});
  // v carries its kv-head index as a constant, so each query head's output
  // reveals which kv head it attended to.
  auto v = Tensor<double>::zeros({seq, kv_heads * hd});
  for (int64_t r = 0; r < seq; ++r) {
    for (int64_t g = 0; g < kv_heads; ++g) {
      for (int64_t t = 0; t < hd; ++t) (*v.data)[r * kv_heads * hd + g * hd + t] = g;
    }
  }
  auto out = attention_gqa(q, k, v, batch, seq, heads, kv_heads, hd);
  for (int64_t h = 0; h < heads; ++h) {
    CHECK((*out.data)[h * hd] == doctest::Approx(static_cast<double>(h / 3)));
  }
}

TEST_CASE("tied embedding gradient equals the sum of both paths") {
  ModelConfig tied_cfg{16, 32, 1, 4, 2, 16, 24, true};
  auto mup = neutral_mup(tied_cfg);
  auto params = init_params<double>(tied_cfg, mup, 13);
  const int64_t seq = 6;
  auto tokens = random_tokens(seq, tied_cfg.vocab_size, 17);
  std::vector<int32_t> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(kIgnoreToken);

  auto run_backward = [&](ModelParams<double>& p) {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto logits = forward(p, mup, tokens, 1, seq);
    logits.shape = {seq, p.config.vocab_size};
    auto loss = cross_entropy_nexttoken(logits, targets);
    tape.backward(loss);
  };
  run_backward(params);

  // Same values, untied: the shared-tensor gradient must split into the
  // embedding-path and head-path parts.
  ModelConfig untied_cfg = tied_cfg;
  untied_cfg.tie_embeddings = false;
  auto untied = init_params<double>(untied_cfg, mup, 13);
  untied.token_embedding = params.token_embedding.clone();
  untied.lm_head = params.token_embedding.clone();
  for (size_t l = 0; l < untied.layers.size(); ++l) {
    untied.layers[l] = params.layers[l];  // share the same storage
  }
  untied.final_norm = params.final_norm;
  run_backward(untied);

  for (int64_t i = 0; i < params.token_embedding.numel(); ++i) {
    const double tied_g = (*params.token_embedding.grad)[i];
    const double split = (*untied.token_embedding.grad)[i] + (*untied.lm_head.grad)[i];
    CHECK(tied_g == doctest::Approx(split).epsilon(1e-9));
  }
}

TEST_CASE("neutral width knobs reduce forward to a plain transformer") {
  ModelConfig cfg{16, 32, 2, 4, 2, 16, 32, true};
  auto mup = neutral_mup(cfg);  // scale_emb=1, scale_depth=sqrt(L), d_base=d_m
  CHECK(embedding_multiplier(mup) == 1.0);
  CHECK(residual_multiplier(mup, cfg.num_layers) == doctest::Approx(1.0));
  CHECK(logit_multiplier(mup, cfg.hidden_size) == 1.0);

  auto params = init_params<float>(cfg, mup, 3);
  auto tokens = random_tokens(8, cfg.vocab_size, 5);
  auto with_hooks = forward(params, mup, tokens, 1, 8);
  MupConfig off = mup;
  off.enabled = false;
  auto plain = forward(params, off, tokens, 1, 8);
  CHECK(std::memcmp(with_hooks.values(), plain.values(), sizeof(float) * plain.numel()) == 0);
}

TEST_CASE("initial loss is close to ln(vocab) under width scaling") {
  ModelConfig cfg{128, 256, 4, 4, 2, 32, 2048, true};
  MupConfig mup;  // defaults: scale_emb 12, d_base 64, scale_depth 1.4
  auto params = init_params<float>(cfg, mup, 29);
  const int64_t batch = 4, seq = 24;
  auto tokens = random_tokens(batch * seq, cfg.vocab_size, 31);
  auto logits = forward(params, mup, tokens, batch, seq);
  logits.shape = {batch * seq, cfg.vocab_size};
  std::vector<int32_t> targets = random_tokens(batch * seq, cfg.vocab_size, 37);
  auto loss = cross_entropy_nexttoken<float>(logits, targets);
  const double expected = std::log(static_cast<double>(cfg.vocab_size));
  CHECK(std::fabs((*loss.data)[0] - expected) / expected < 0.05);
}

TEST_CASE("full-model gradient check in 64-bit (nano-class, >= 10k params)") {
  ModelConfig cfg{32, 64, 2, 4, 2, 16, 64, true};
  MupConfig mup;
  mup.dim_model_base = 32;
  auto params = init_params<double>(cfg, mup, 41);
  CHECK(params.total_params() >= 10'000);

  const int64_t batch = 1, seq = 8;
  auto tokens = random_tokens(batch * seq, cfg.vocab_size, 43);
  std::vector<int32_t> targets = random_tokens(batch * seq, cfg.vocab_size, 47);

  auto named = params.named_params();
  std::vector<Tensor<double>> flat;
  for (const auto& np : named) flat.push_back(np.tensor);

  auto f = [&](const std::vector<Tensor<double>>& ps) {
    ModelParams<double> rebuilt;
    rebuilt.config = cfg;
    rebuilt.layers.resize(static_cast<size_t>(cfg.num_layers));
    for (size_t i = 0; i < named.size(); ++i) rebuilt.assign_by_name(named[i].name, ps[i]);
    auto logits = forward(rebuilt, mup, tokens, batch, seq);
    logits.shape = {batch * seq, cfg.vocab_size};
    return cross_entropy_nexttoken(logits, targets);
  };
  CHECK(grad_check(f, flat, 1e-5) < 1e-5);
}

TEST_SUITE_END();
