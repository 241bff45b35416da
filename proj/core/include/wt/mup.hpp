#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wt {

// How a parameter tensor scales with width. Matrix-like weights get width-
// scaled learning rates and init; the embedding table and 1-d weights do not.
enum class ParamKind { kMatrix, kEmbedding, kVector };

inline const char* param_kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::kMatrix: return "matrix";
    case ParamKind::kEmbedding: return "embedding";
    case ParamKind::kVector: return "vector";
  }
  return "?";
}

// Width-scaling knobs. `enabled = false` forces every multiplier to 1 and
// drops the width scaling of init, i.e. standard parametrization, used as the
// contrast arm in transfer experiments.
struct MupConfig {
  double scale_emb = 12.0;
  int64_t dim_model_base = 64;
  double scale_depth = 1.4;
  double init_std = 0.1;
  double base_lr = 0.01;
  bool embedding_as_matrix = false;  // alternate reading of the 2-d tensor rule
  bool enabled = true;

  void validate() const {
    if (dim_model_base <= 0) throw std::invalid_argument("mup: dim_model_base must be positive");
    if (init_std <= 0) throw std::invalid_argument("mup: init_std must be positive");
  }
};

// Init std for 1-d ("other") parameters that are not norm weights, and for
// the embedding table.
inline constexpr double kOtherInitStd = 0.1;

inline double width_ratio(int64_t d_m, int64_t d_base) {
  if (d_m <= 0 || d_base <= 0) throw std::invalid_argument("mup: widths must be positive");
  return static_cast<double>(d_m) / static_cast<double>(d_base);
}

// Per-tensor learning-rate multiplier: 1/(d_m/d_base) for matrix-like
// tensors, 1 for everything else.
inline double lr_multiplier(const MupConfig& mup, ParamKind kind, int64_t d_m) {
  if (!mup.enabled) return 1.0;
  if (kind != ParamKind::kMatrix) return 1.0;
  return 1.0 / width_ratio(d_m, mup.dim_model_base);
}

// Output-logit multiplier: 1/(d_m/d_base).
inline double logit_multiplier(const MupConfig& mup, int64_t d_m) {
  if (!mup.enabled) return 1.0;
  return 1.0 / width_ratio(d_m, mup.dim_model_base);
}

// Embedding-output multiplier.
inline double embedding_multiplier(const MupConfig& mup) {
  return mup.enabled ? mup.scale_emb : 1.0;
}

// Residual-branch multiplier: scale_depth / sqrt(num_layers).
inline double residual_multiplier(const MupConfig& mup, int64_t num_layers) {
  if (num_layers <= 0) throw std::invalid_argument("mup: num_layers must be positive");
  if (!mup.enabled) return 1.0;
  return mup.scale_depth / std::sqrt(static_cast<double>(num_layers));
}

// Init standard deviation per tensor kind. Norm weights are constant-1 and
// handled by init_params directly.
inline double init_std_for(const MupConfig& mup, ParamKind kind, int64_t d_m) {
  if (kind == ParamKind::kMatrix) {
    return mup.enabled ? mup.init_std / std::sqrt(width_ratio(d_m, mup.dim_model_base))
                       : mup.init_std;
  }
  return kOtherInitStd;
}

// The five width-scaling operations applied by this parametrization,
// enumerable so tests can pin the set.
inline std::vector<std::string> mup_operation_names() {
  return {"embedding_output_scaling", "residual_branch_scaling", "init_std_scaling",
          "per_tensor_lr_scaling", "logit_scaling"};
}

}  // namespace wt
