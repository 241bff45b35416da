#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "wt/parallel.hpp"
#include "wt/tape.hpp"
#include "wt/tensor.hpp"

namespace wt {

// ---------------------------------------------------------------------------
// Raw kernels. All loops have a fixed per-element accumulation order, so
// results never depend on the worker count.
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t row_grain(int64_t k, int64_t n) {
  // Aim for roughly 512k flops per chunk.
  const int64_t per_row = std::max<int64_t>(1, k * n);
  return std::max<int64_t>(1, 262144 / per_row + 1);
}

// out[m x n] (+)= a[m x k] * b[k x n]; saxpy order, j innermost. Rows are
// processed four at a time so each streamed row of b feeds four outputs.
// Per-element accumulation order is l-sequential regardless of blocking or
// worker count.
template <class T>
void mm_nn(const T* a, const T* b, T* out, int64_t m, int64_t k, int64_t n, bool accumulate) {
  const int64_t grain = std::max<int64_t>(4, row_grain(k, n));
  parallel_for(m, grain, [&](int64_t i0, int64_t i1) {
    int64_t i = i0;
    for (; i + 4 <= i1; i += 4) {
      T* o0 = out + i * n;
      T* o1 = o0 + n;
      T* o2 = o1 + n;
      T* o3 = o2 + n;
      if (!accumulate) std::fill(o0, o0 + 4 * n, T(0));
      const T* arow = a + i * k;
      for (int64_t l = 0; l < k; ++l) {
        const T a0 = arow[l];
        const T a1 = arow[k + l];
        const T a2 = arow[2 * k + l];
        const T a3 = arow[3 * k + l];
        const T* brow = b + l * n;
        for (int64_t j = 0; j < n; ++j) {
          const T bv = brow[j];
          o0[j] += a0 * bv;
          o1[j] += a1 * bv;
          o2[j] += a2 * bv;
          o3[j] += a3 * bv;
        }
      }
    }
    for (; i < i1; ++i) {
      T* orow = out + i * n;
      if (!accumulate) std::fill(orow, orow + n, T(0));
      const T* arow = a + i * k;
      for (int64_t l = 0; l < k; ++l) {
        const T av = arow[l];
        const T* brow = b + l * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  });
}

template <class T>
void transpose(const T* src, T* dst, int64_t rows, int64_t cols) {
  constexpr int64_t kTile = 32;
  parallel_for((rows + kTile - 1) / kTile, 4, [&](int64_t t0, int64_t t1) {
    for (int64_t t = t0; t < t1; ++t) {
      const int64_t r0 = t * kTile;
      const int64_t r1 = std::min(rows, r0 + kTile);
      for (int64_t c0 = 0; c0 < cols; c0 += kTile) {
        const int64_t c1 = std::min(cols, c0 + kTile);
        for (int64_t r = r0; r < r1; ++r)
          for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  });
}

template <class T>
bool tracing(const Tensor<T>& t) {
  return current_tape<T>() != nullptr && t.requires_grad;
}

template <class T>
Tensor<T> make_output(Shape shape, bool traced) {
  return Tensor<T>::zeros(std::move(shape), traced);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  const bool traced = detail::tracing(a) || detail::tracing(b);
  Tensor<T> out = detail::make_output<T>({m, n}, traced);
  detail::mm_nn(a.values(), b.values(), out.values(), m, k, n, false);
  if (traced) {
    current_tape<T>()->record([a, b, out, m, k, n]() {
      if (a.requires_grad) {
        std::vector<T> bt(static_cast<size_t>(k * n));
        detail::transpose(b.values(), bt.data(), k, n);
        detail::mm_nn(out.grads(), bt.data(), const_cast<T*>(a.grads()), m, n, k, true);
      }
      if (b.requires_grad) {
        std::vector<T> at(static_cast<size_t>(m * k));
        detail::transpose(a.values(), at.data(), m, k);
        detail::mm_nn(at.data(), out.grads(), const_cast<T*>(b.grads()), k, m, n, true);
      }
    });
  }
  return out;
}

// out[i,j] = dot(a[i,:], b[j,:]). Used for the tied output head, where the
// embedding table [V x d] doubles as the projection.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1]) {
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  const bool traced = detail::tracing(a) || detail::tracing(b);
  Tensor<T> out = detail::make_output<T>({m, n}, traced);
  {
    std::vector<T> bt(static_cast<size_t>(k * n));
    detail::transpose(b.values(), bt.data(), n, k);
    detail::mm_nn(a.values(), bt.data(), out.values(), m, k, n, false);
  }
  if (traced) {
    current_tape<T>()->record([a, b, out, m, k, n]() {
      if (a.requires_grad) {
        detail::mm_nn(out.grads(), b.values(), const_cast<T*>(a.grads()), m, n, k, true);
      }
      if (b.requires_grad) {
        std::vector<T> gt(static_cast<size_t>(m * n));
        detail::transpose(out.grads(), gt.data(), m, n);
        detail::mm_nn(gt.data(), a.values(), const_cast<T*>(b.grads()), n, m, k, true);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const bool traced = detail::tracing(a) || detail::tracing(b);
  Tensor<T> out = detail::make_output<T>(a.shape, traced);
  const int64_t n = out.numel();
  const T* av = a.values();
  const T* bv = b.values();
  T* ov = out.values();
  parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) ov[i] = av[i] + bv[i];
  });
  if (traced) {
    current_tape<T>()->record([a, b, out, n]() {
      const T* g = out.grads();
      if (a.requires_grad) {
        T* ga = const_cast<T*>(a.grads());
        parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) ga[i] += g[i];
        });
      }
      if (b.requires_grad) {
        T* gb = const_cast<T*>(b.grads());
        parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) gb[i] += g[i];
        });
      }
    });
  }
  return out;
}

// out = a + c * b, the residual update with a branch multiplier.
template <class T>
Tensor<T> add_scaled(const Tensor<T>& a, const Tensor<T>& b, T c) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("add_scaled: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const bool traced = detail::tracing(a) || detail::tracing(b);
  Tensor<T> out = detail::make_output<T>(a.shape, traced);
  const int64_t n = out.numel();
  const T* av = a.values();
  const T* bv = b.values();
  T* ov = out.values();
  parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) ov[i] = av[i] + c * bv[i];
  });
  if (traced) {
    current_tape<T>()->record([a, b, out, c, n]() {
      const T* g = out.grads();
      if (a.requires_grad) {
        T* ga = const_cast<T*>(a.grads());
        parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) ga[i] += g[i];
        });
      }
      if (b.requires_grad) {
        T* gb = const_cast<T*>(b.grads());
        parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) gb[i] += c * g[i];
        });
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const bool traced = detail::tracing(a) || detail::tracing(b);
  Tensor<T> out = detail::make_output<T>(a.shape, traced);
  const int64_t n = out.numel();
  const T* av = a.values();
  const T* bv = b.values();
  T* ov = out.values();
  parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) ov[i] = av[i] * bv[i];
  });
  if (traced) {
    current_tape<T>()->record([a, b, out, n]() {
      const T* g = out.grads();
      if (a.requires_grad) {
        T* ga = const_cast<T*>(a.grads());
        const T* bv2 = b.values();
        parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) ga[i] += g[i] * bv2[i];
        });
      }
      if (b.requires_grad) {
        T* gb = const_cast<T*>(b.grads());
        const T* av2 = a.values();
        parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) gb[i] += g[i] * av2[i];
        });
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  const bool traced = detail::tracing(a);
  Tensor<T> out = detail::make_output<T>(a.shape, traced);
  const int64_t n = out.numel();
  const T* av = a.values();
  T* ov = out.values();
  parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) ov[i] = av[i] * s;
  });
  if (traced) {
    current_tape<T>()->record([a, out, s, n]() {
      const T* g = out.grads();
      T* ga = const_cast<T*>(a.grads());
      parallel_for(n, 65536, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) ga[i] += g[i] * s;
      });
    });
  }
  return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  const bool traced = detail::tracing(x);
  Tensor<T> out = detail::make_output<T>(x.shape, traced);
  const int64_t n = out.numel();
  const T* xv = x.values();
  T* ov = out.values();
  parallel_for(n, 16384, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T s = T(1) / (T(1) + std::exp(-xv[i]));
      ov[i] = xv[i] * s;
    }
  });
  if (traced) {
    current_tape<T>()->record([x, out, n]() {
      const T* g = out.grads();
      const T* xv2 = x.values();
      T* gx = const_cast<T*>(x.grads());
      parallel_for(n, 16384, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          const T s = T(1) / (T(1) + std::exp(-xv2[i]));
          gx[i] += g[i] * s * (T(1) + xv2[i] * (T(1) - s));
        }
      });
    });
  }
  return out;
}

// Row gather: out[r,:] = table[ids[r],:].
template <class T>
Tensor<T> embedding_rows(const Tensor<T>& table, std::span<const int32_t> ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_rows: table must be 2-d");
  const int64_t v = table.shape[0], d = table.shape[1];
  const int64_t n = static_cast<int64_t>(ids.size());
  for (int64_t r = 0; r < n; ++r) {
    if (ids[r] < 0 || ids[r] >= v) {
      throw std::invalid_argument("embedding_rows: token id " + std::to_string(ids[r]) +
                                  " outside vocab of " + std::to_string(v));
    }
  }
  const bool traced = detail::tracing(table);
  Tensor<T> out = detail::make_output<T>({n, d}, traced);
  const T* tv = table.values();
  T* ov = out.values();
  parallel_for(n, 256, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      std::copy(tv + ids[r] * d, tv + (ids[r] + 1) * d, ov + r * d);
    }
  });
  if (traced) {
    std::vector<int32_t> ids_copy(ids.begin(), ids.end());
    current_tape<T>()->record([table, out, ids_copy = std::move(ids_copy), n, d]() {
      // Scatter-add stays sequential: rows may repeat a token id.
      T* gt = const_cast<T*>(table.grads());
      const T* g = out.grads();
      for (int64_t r = 0; r < n; ++r) {
        const T* grow = g + r * d;
        T* trow = gt + ids_copy[r] * d;
        for (int64_t c = 0; c < d; ++c) trow[c] += grow[c];
      }
    });
  }
  return out;
}

// y = x / rms(x) * weight, rowwise over the last dimension.
template <class T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-5)) {
  if (x.ndim() != 2 || weight.ndim() != 1 || weight.shape[0] != x.shape[1]) {
    throw std::invalid_argument("rmsnorm: shapes " + shape_str(x.shape) + " vs " +
                                shape_str(weight.shape));
  }
  const int64_t n = x.shape[0], d = x.shape[1];
  const bool traced = detail::tracing(x) || detail::tracing(weight);
  Tensor<T> out = detail::make_output<T>(x.shape, traced);
  auto inv_rms = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T* xv = x.values();
  const T* wv = weight.values();
  T* ov = out.values();
  T* ir = inv_rms->data();
  parallel_for(n, 64, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const T* row = xv + r * d;
      T ms = T(0);
      for (int64_t c = 0; c < d; ++c) ms += row[c] * row[c];
      const T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
      ir[r] = inv;
      T* orow = ov + r * d;
      for (int64_t c = 0; c < d; ++c) orow[c] = row[c] * inv * wv[c];
    }
  });
  if (traced) {
    current_tape<T>()->record([x, weight, out, inv_rms, n, d]() {
      const T* g = out.grads();
      const T* xv2 = x.values();
      const T* wv2 = weight.values();
      const T* ir2 = inv_rms->data();
      if (x.requires_grad) {
        T* gx = const_cast<T*>(x.grads());
        parallel_for(n, 64, [&](int64_t r0, int64_t r1) {
          for (int64_t r = r0; r < r1; ++r) {
            const T* grow = g + r * d;
            const T* row = xv2 + r * d;
            const T inv = ir2[r];
            T dot = T(0);
            for (int64_t c = 0; c < d; ++c) dot += grow[c] * wv2[c] * row[c];
            const T k = dot * inv * inv * inv / static_cast<T>(d);
            T* gxrow = gx + r * d;
            for (int64_t c = 0; c < d; ++c) gxrow[c] += grow[c] * wv2[c] * inv - row[c] * k;
          }
        });
      }
      if (weight.requires_grad) {
        // Fixed row order per weight coordinate.
        T* gw = const_cast<T*>(weight.grads());
        for (int64_t r = 0; r < n; ++r) {
          const T* grow = g + r * d;
          const T* row = xv2 + r * d;
          const T inv = ir2[r];
          for (int64_t c = 0; c < d; ++c) gw[c] += grow[c] * row[c] * inv;
        }
      }
    });
  }
  return out;
}

// Rotary position encoding applied per head over rows of packed sequences.
// x is [n x (heads*head_dim)] with row r at position r % seq_len.
template <class T>
Tensor<T> rope(const Tensor<T>& x, int64_t heads, int64_t seq_len, int64_t head_dim,
               T base = T(10000)) {
  if (x.ndim() != 2 || x.shape[1] != heads * head_dim || head_dim % 2 != 0) {
    throw std::invalid_argument("rope: bad shape " + shape_str(x.shape));
  }
  const int64_t n = x.shape[0];
  if (n % seq_len != 0) throw std::invalid_argument("rope: rows not a multiple of seq_len");
  const int64_t half = head_dim / 2;
  // Angle table for (position, pair) reused by forward and backward.
  auto cs = std::make_shared<std::vector<T>>(static_cast<size_t>(seq_len * half * 2));
  for (int64_t p = 0; p < seq_len; ++p) {
    for (int64_t i = 0; i < half; ++i) {
      const T theta = std::pow(base, -static_cast<T>(2 * i) / static_cast<T>(head_dim));
      const T ang = static_cast<T>(p) * theta;
      (*cs)[(p * half + i) * 2] = std::cos(ang);
      (*cs)[(p * half + i) * 2 + 1] = std::sin(ang);
    }
  }
  const bool traced = detail::tracing(x);
  Tensor<T> out = detail::make_output<T>(x.shape, traced);
  const T* xv = x.values();
  T* ov = out.values();
  const T* cst = cs->data();
  parallel_for(n, 128, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const int64_t p = r % seq_len;
      for (int64_t h = 0; h < heads; ++h) {
        const T* xr = xv + r * heads * head_dim + h * head_dim;
        T* orow = ov + r * heads * head_dim + h * head_dim;
        for (int64_t i = 0; i < half; ++i) {
          const T c = cst[(p * half + i) * 2];
          const T s = cst[(p * half + i) * 2 + 1];
          const T x0 = xr[2 * i], x1 = xr[2 * i + 1];
          orow[2 * i] = x0 * c - x1 * s;
          orow[2 * i + 1] = x0 * s + x1 * c;
        }
      }
    }
  });
  if (traced) {
    current_tape<T>()->record([x, out, cs, heads, seq_len, head_dim, half, n]() {
      const T* g = out.grads();
      T* gx = const_cast<T*>(x.grads());
      const T* cst2 = cs->data();
      parallel_for(n, 128, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          const int64_t p = r % seq_len;
          for (int64_t h = 0; h < heads; ++h) {
            const T* grow = g + r * heads * head_dim + h * head_dim;
            T* gxr = gx + r * heads * head_dim + h * head_dim;
            for (int64_t i = 0; i < half; ++i) {
              const T c = cst2[(p * half + i) * 2];
              const T s = cst2[(p * half + i) * 2 + 1];
              const T g0 = grow[2 * i], g1 = grow[2 * i + 1];
              gxr[2 * i] += g0 * c + g1 * s;
              gxr[2 * i + 1] += -g0 * s + g1 * c;
            }
          }
        }
      });
    });
  }
  return out;
}

// Causal grouped-query attention over packed sequences.
// q: [n x (h*hd)], k/v: [n x (h_kv*hd)], n = batch*seq_len; each group of
// h/h_kv query heads shares one kv head. Softmax scores use max-subtraction.
template <class T>
Tensor<T> attention_gqa(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        int64_t batch, int64_t seq_len, int64_t n_heads, int64_t n_kv_heads,
                        int64_t head_dim) {
  const int64_t n = batch * seq_len;
  if (q.shape != Shape{n, n_heads * head_dim} || k.shape != Shape{n, n_kv_heads * head_dim} ||
      v.shape != k.shape) {
    throw std::invalid_argument("attention_gqa: bad shapes q=" + shape_str(q.shape) +
                                " k=" + shape_str(k.shape) + " v=" + shape_str(v.shape));
  }
  if (n_heads % n_kv_heads != 0) {
    throw std::invalid_argument("attention_gqa: n_heads not divisible by n_kv_heads");
  }
  const int64_t group = n_heads / n_kv_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim));
  const bool traced = detail::tracing(q) || detail::tracing(k) || detail::tracing(v);
  Tensor<T> out = detail::make_output<T>({n, n_heads * head_dim}, traced);
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<size_t>(batch * n_heads * seq_len * seq_len), T(0));

  const T* qv = q.values();
  const T* kv = k.values();
  const T* vv = v.values();
  T* ov = out.values();
  T* pv = probs->data();
  const int64_t qw = n_heads * head_dim;
  const int64_t kw = n_kv_heads * head_dim;

  parallel_for(batch, 1, [&](int64_t b0, int64_t b1) {
    std::vector<T> row(static_cast<size_t>(seq_len));
    for (int64_t b = b0; b < b1; ++b) {
      for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t kvh = h / group;
        T* ph = pv + ((b * n_heads + h) * seq_len) * seq_len;
        for (int64_t i = 0; i < seq_len; ++i) {
          const T* qi = qv + (b * seq_len + i) * qw + h * head_dim;
          T mx = -std::numeric_limits<T>::infinity();
          for (int64_t j = 0; j <= i; ++j) {
            const T* kj = kv + (b * seq_len + j) * kw + kvh * head_dim;
            T s = T(0);
            for (int64_t t = 0; t < head_dim; ++t) s += qi[t] * kj[t];
            s *= inv_sqrt;
            row[static_cast<size_t>(j)] = s;
            mx = std::max(mx, s);
          }
          T denom = T(0);
          for (int64_t j = 0; j <= i; ++j) {
            const T e = std::exp(row[static_cast<size_t>(j)] - mx);
            row[static_cast<size_t>(j)] = e;
            denom += e;
          }
          const T inv = T(1) / denom;
          T* prow = ph + i * seq_len;
          for (int64_t j = 0; j <= i; ++j) prow[j] = row[static_cast<size_t>(j)] * inv;
          T* orow = ov + (b * seq_len + i) * qw + h * head_dim;
          for (int64_t j = 0; j <= i; ++j) {
            const T p = prow[j];
            const T* vj = vv + (b * seq_len + j) * kw + kvh * head_dim;
            for (int64_t t = 0; t < head_dim; ++t) orow[t] += p * vj[t];
          }
        }
      }
    }
  });

  if (traced) {
    current_tape<T>()->record([q, k, v, out, probs, batch, seq_len, n_heads, n_kv_heads,
                               head_dim, group, inv_sqrt, qw, kw]() {
      const T* g = out.grads();
      const T* qv2 = q.values();
      const T* kv2 = k.values();
      const T* vv2 = v.values();
      const T* pv2 = probs->data();
      T* gq = q.requires_grad ? const_cast<T*>(q.grads()) : nullptr;
      T* gk = k.requires_grad ? const_cast<T*>(k.grads()) : nullptr;
      T* gv = v.requires_grad ? const_cast<T*>(v.grads()) : nullptr;
      // Parallel over batch only: kv-head gradients are shared within a batch
      // row across the query heads of a group.
      parallel_for(batch, 1, [&](int64_t b0, int64_t b1) {
        std::vector<T> dp(static_cast<size_t>(seq_len));
        for (int64_t b = b0; b < b1; ++b) {
          for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t kvh = h / group;
            const T* ph = pv2 + ((b * n_heads + h) * seq_len) * seq_len;
            for (int64_t i = 0; i < seq_len; ++i) {
              const T* grow = g + (b * seq_len + i) * qw + h * head_dim;
              const T* prow = ph + i * seq_len;
              T dot = T(0);
              for (int64_t j = 0; j <= i; ++j) {
                const T* vj = vv2 + (b * seq_len + j) * kw + kvh * head_dim;
                T s = T(0);
                for (int64_t t = 0; t < head_dim; ++t) s += grow[t] * vj[t];
                dp[static_cast<size_t>(j)] = s;
                dot += s * prow[j];
              }
              const T* qi = qv2 + (b * seq_len + i) * qw + h * head_dim;
              T* gqi = gq ? gq + (b * seq_len + i) * qw + h * head_dim : nullptr;
              for (int64_t j = 0; j <= i; ++j) {
                const T ds = prow[j] * (dp[static_cast<size_t>(j)] - dot) * inv_sqrt;
                const T* kj = kv2 + (b * seq_len + j) * kw + kvh * head_dim;
                if (gqi) {
                  for (int64_t t = 0; t < head_dim; ++t) gqi[t] += ds * kj[t];
                }
                if (gk) {
                  T* gkj = gk + (b * seq_len + j) * kw + kvh * head_dim;
                  for (int64_t t = 0; t < head_dim; ++t) gkj[t] += ds * qi[t];
                }
                if (gv) {
                  T* gvj = gv + (b * seq_len + j) * kw + kvh * head_dim;
                  const T p = prow[j];
                  for (int64_t t = 0; t < head_dim; ++t) gvj[t] += p * grow[t];
                }
              }
            }
          }
        }
      });
    });
  }
  return out;
}

// Softmax over the last dimension, max-subtracted.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.ndim() < 1 || x.shape.back() < 1) {
    throw std::invalid_argument("softmax_lastdim: needs a non-empty last dim");
  }
  const int64_t d = x.shape.back();
  const int64_t rows = x.numel() / d;
  const bool traced = detail::tracing(x);
  Tensor<T> out = detail::make_output<T>(x.shape, traced);
  const T* xv = x.values();
  T* ov = out.values();
  parallel_for(rows, 64, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const T* row = xv + r * d;
      T mx = row[0];
      for (int64_t c = 1; c < d; ++c) mx = std::max(mx, row[c]);
      T denom = T(0);
      T* orow = ov + r * d;
      for (int64_t c = 0; c < d; ++c) {
        orow[c] = std::exp(row[c] - mx);
        denom += orow[c];
      }
      const T inv = T(1) / denom;
      for (int64_t c = 0; c < d; ++c) orow[c] *= inv;
    }
  });
  if (traced) {
    current_tape<T>()->record([x, out, rows, d]() {
      const T* g = out.grads();
      const T* y = out.values();
      T* gx = const_cast<T*>(x.grads());
      parallel_for(rows, 64, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          const T* grow = g + r * d;
          const T* yrow = y + r * d;
          T dot = T(0);
          for (int64_t c = 0; c < d; ++c) dot += grow[c] * yrow[c];
          T* gxrow = gx + r * d;
          for (int64_t c = 0; c < d; ++c) gxrow[c] += yrow[c] * (grow[c] - dot);
        }
      });
    });
  }
  return out;
}

inline constexpr int32_t kIgnoreToken = -100;

// Mean negative log-likelihood over rows whose target is not kIgnoreToken.
// logits: [n x vocab], targets: [n].
template <class T>
Tensor<T> cross_entropy_nexttoken(const Tensor<T>& logits, std::span<const int32_t> targets) {
  if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: logits must be [n x vocab]");
  const int64_t n = logits.shape[0], vocab = logits.shape[1];
  if (static_cast<int64_t>(targets.size()) != n) {
    throw std::invalid_argument("cross_entropy: targets size mismatch");
  }
  int64_t n_valid = 0;
  for (int64_t r = 0; r < n; ++r) {
    if (targets[r] == kIgnoreToken) continue;
    if (targets[r] < 0 || targets[r] >= vocab) {
      throw std::invalid_argument("cross_entropy: target id " + std::to_string(targets[r]) +
                                  " outside vocab of " + std::to_string(vocab));
    }
    ++n_valid;
  }
  if (n_valid == 0) throw std::invalid_argument("cross_entropy: no non-ignored targets");

  const bool traced = detail::tracing(logits);
  Tensor<T> out = detail::make_output<T>({1}, traced);
  auto probs = std::make_shared<std::vector<T>>(logits.data->size());
  std::vector<double> row_loss(static_cast<size_t>(n), 0.0);
  const T* lv = logits.values();
  T* pb = probs->data();
  parallel_for(n, 32, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const T* row = lv + r * vocab;
      T mx = row[0];
      for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
      T denom = T(0);
      T* prow = pb + r * vocab;
      for (int64_t c = 0; c < vocab; ++c) {
        prow[c] = std::exp(row[c] - mx);
        denom += prow[c];
      }
      const T inv = T(1) / denom;
      for (int64_t c = 0; c < vocab; ++c) prow[c] *= inv;
      if (targets[r] != kIgnoreToken) {
        row_loss[static_cast<size_t>(r)] =
            std::log(static_cast<double>(denom)) + static_cast<double>(mx) -
            static_cast<double>(row[targets[r]]);
      }
    }
  });
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) total += row_loss[static_cast<size_t>(r)];
  (*out.data)[0] = static_cast<T>(total / static_cast<double>(n_valid));

  if (traced) {
    std::vector<int32_t> tcopy(targets.begin(), targets.end());
    current_tape<T>()->record(
        [logits, out, probs, tcopy = std::move(tcopy), n, vocab, n_valid]() {
          const T g0 = (*out.grad)[0];
          const T scale = g0 / static_cast<T>(n_valid);
          T* gl = const_cast<T*>(logits.grads());
          const T* pv = probs->data();
          parallel_for(n, 32, [&](int64_t r0, int64_t r1) {
            for (int64_t r = r0; r < r1; ++r) {
              if (tcopy[static_cast<size_t>(r)] == kIgnoreToken) continue;
              const T* prow = pv + r * vocab;
              T* grow = gl + r * vocab;
              for (int64_t c = 0; c < vocab; ++c) grow[c] += scale * prow[c];
              grow[tcopy[static_cast<size_t>(r)]] -= scale;
            }
          });
        });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  const bool traced = detail::tracing(x);
  Tensor<T> out = detail::make_output<T>({1}, traced);
  const T* xv = x.values();
  double total = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) total += static_cast<double>(xv[i]);
  (*out.data)[0] = static_cast<T>(total);
  if (traced) {
    const int64_t n = x.numel();
    current_tape<T>()->record([x, out, n]() {
      const T g0 = (*out.grad)[0];
      T* gx = const_cast<T*>(x.grads());
      for (int64_t i = 0; i < n; ++i) gx[i] += g0;
    });
  }
  return out;
}

}  // namespace wt
