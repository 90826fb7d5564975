// Causal multihead attention with grouped K/V heads: the differentiable
// full-sequence path used in training, the incremental KV-cached step path
// used in decoding, and the softmax-free linearized reference that anchors
// the attention-to-SSM conversion.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "hybridlm/model_spec.hpp"
#include "hybridlm/tensor.hpp"

namespace hybridlm {

template <class T>
struct AttnLayerT {
  int64_t heads = 0;
  int64_t kv_heads = 0;
  int64_t head_dim = 0;  // N
  bool rotary = false;
  std::vector<TensorT<T>> wq;  // per query head, N×D
  std::vector<TensorT<T>> wk;  // per kv head, N×D
  std::vector<TensorT<T>> wv;  // per kv head, N×D
  std::vector<TensorT<T>> wo;  // per query head, N×D (output slice)

  int64_t kv_group(int64_t head) const { return head / (heads / kv_heads); }
  T scale() const { return T(1) / static_cast<T>(std::sqrt(static_cast<double>(head_dim))); }
};

// Per-head parameter view, materialized on demand (shares tensor storage).
template <class T>
struct AttentionHeadParamsT {
  TensorT<T> w_q, w_k, w_v, w_o;
  int64_t head_index = 0;
  int64_t kv_group_index = 0;
};

template <class T>
AttentionHeadParamsT<T> head_params(const AttnLayerT<T>& layer, int64_t head) {
  int64_t g = layer.kv_group(head);
  return {layer.wq[static_cast<size_t>(head)], layer.wk[static_cast<size_t>(g)],
          layer.wv[static_cast<size_t>(g)], layer.wo[static_cast<size_t>(head)], head, g};
}

// Full-sequence causal attention over x (T×D). Differentiable; this is the
// training route, built from matmul/softmax ops.
template <class T>
TensorT<T> mha_forward(const AttnLayerT<T>& layer, const TensorT<T>& x) {
  require_matrix(x, "mha_forward");
  const T s = layer.scale();
  TensorT<T> out;
  std::vector<TensorT<T>> k(static_cast<size_t>(layer.kv_heads)),
      v(static_cast<size_t>(layer.kv_heads));
  for (int64_t g = 0; g < layer.kv_heads; ++g) {
    k[static_cast<size_t>(g)] = linear(x, layer.wk[static_cast<size_t>(g)]);
    if (layer.rotary) k[static_cast<size_t>(g)] = rope_rows(k[static_cast<size_t>(g)], 0);
    v[static_cast<size_t>(g)] = linear(x, layer.wv[static_cast<size_t>(g)]);
  }
  for (int64_t h = 0; h < layer.heads; ++h) {
    TensorT<T> q = linear(x, layer.wq[static_cast<size_t>(h)]);
    if (layer.rotary) q = rope_rows(q, 0);
    int64_t g = layer.kv_group(h);
    TensorT<T> scores = scale(matmul_nt(q, k[static_cast<size_t>(g)]), s);
    TensorT<T> probs = softmax_rows(causal_mask(scores));
    TensorT<T> mixed = matmul(probs, v[static_cast<size_t>(g)]);
    TensorT<T> proj = matmul(mixed, layer.wo[static_cast<size_t>(h)]);
    out = out.defined() ? add(out, proj) : proj;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Incremental decoding

// Growable position-major K/V buffers for one attention layer.
template <class T>
struct LayerKvT {
  int64_t head_dim = 0;
  int64_t len = 0;
  std::vector<std::vector<T>> k;  // per kv head, size len*head_dim
  std::vector<std::vector<T>> v;

  LayerKvT() = default;
  LayerKvT(int64_t kv_heads, int64_t n)
      : head_dim(n), k(static_cast<size_t>(kv_heads)), v(static_cast<size_t>(kv_heads)) {}

  void append(int64_t g, const T* kvec, const T* vvec) {
    auto& kg = k[static_cast<size_t>(g)];
    auto& vg = v[static_cast<size_t>(g)];
    kg.insert(kg.end(), kvec, kvec + head_dim);
    vg.insert(vg.end(), vvec, vvec + head_dim);
  }
  void bump() { ++len; }  // after appending all kv heads for one position

  void truncate(int64_t new_len) {
    if (new_len > len)
      throw std::out_of_range("kv truncate to " + std::to_string(new_len) + " > length " +
                              std::to_string(len));
    for (auto& kg : k) kg.resize(static_cast<size_t>(new_len * head_dim));
    for (auto& vg : v) vg.resize(static_cast<size_t>(new_len * head_dim));
    len = new_len;
  }
};

namespace kernels {

template <class T>
inline T dot(const T* a, const T* b, int64_t n) {
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// y[r,:] += x[r,k] * wt[k,:], k ascending. The accumulation order for each
// output element does not depend on the number of rows in the block, so
// blocked and one-row-at-a-time calls produce bit-identical results.
template <class T>
inline void gemm_rows(const T* x, int64_t rows, int64_t in, const T* wt, int64_t out, T* y) {
  std::fill(y, y + rows * out, T(0));
  for (int64_t k = 0; k < in; ++k) {
    const T* wrow = wt + k * out;
    for (int64_t r = 0; r < rows; ++r) {
      T xv = x[r * in + k];
      T* yr = y + r * out;
      for (int64_t o = 0; o < out; ++o) yr[o] += xv * wrow[o];
    }
  }
}

// In-place rotary rotation of one head vector at a given position.
template <class T>
inline void rope_inplace(T* x, int64_t n, int64_t pos, T base = T(10000)) {
  for (int64_t p = 0; p < n / 2; ++p) {
    double theta = static_cast<double>(pos) *
                   std::pow(static_cast<double>(base),
                            -2.0 * static_cast<double>(p) / static_cast<double>(n));
    T c = static_cast<T>(std::cos(theta)), s = static_cast<T>(std::sin(theta));
    T x0 = x[2 * p], x1 = x[2 * p + 1];
    x[2 * p] = x0 * c - x1 * s;
    x[2 * p + 1] = x0 * s + x1 * c;
  }
}

// Softmax attention of one query against a cached prefix.
template <class T>
inline void attend_one(const T* q, const std::vector<T>& kbuf, const std::vector<T>& vbuf,
                       int64_t len, int64_t n, T scale, T* y, std::vector<T>& scratch) {
  scratch.resize(static_cast<size_t>(len));
  T mx = std::numeric_limits<T>::lowest();
  for (int64_t s = 0; s < len; ++s) {
    scratch[static_cast<size_t>(s)] = dot(q, kbuf.data() + s * n, n) * scale;
    mx = std::max(mx, scratch[static_cast<size_t>(s)]);
  }
  double sum = 0;
  for (int64_t s = 0; s < len; ++s) {
    T e = std::exp(scratch[static_cast<size_t>(s)] - mx);
    scratch[static_cast<size_t>(s)] = e;
    sum += static_cast<double>(e);
  }
  T inv = static_cast<T>(1.0 / sum);
  std::fill(y, y + n, T(0));
  for (int64_t s = 0; s < len; ++s) {
    T w = scratch[static_cast<size_t>(s)] * inv;
    const T* vrow = vbuf.data() + s * n;
    for (int64_t i = 0; i < n; ++i) y[i] += w * vrow[i];
  }
}

}  // namespace kernels

// One incremental attention step: consumes the layer input o_t for the next
// position, appends K/V, and returns the mixed output (length D). Matches
// column t of mha_forward on the full prefix to ~1e-5.
template <class T>
std::vector<T> mha_step(const AttnLayerT<T>& layer, const T* o_t, int64_t dim,
                        LayerKvT<T>& cache) {
  const int64_t n = layer.head_dim;
  const int64_t pos = cache.len;
  std::vector<T> kv(static_cast<size_t>(n)), vv(static_cast<size_t>(n));
  for (int64_t g = 0; g < layer.kv_heads; ++g) {
    for (int64_t r = 0; r < n; ++r)
      kv[static_cast<size_t>(r)] =
          kernels::dot(layer.wk[static_cast<size_t>(g)].data() + r * dim, o_t, dim);
    if (layer.rotary) kernels::rope_inplace(kv.data(), n, pos);
    for (int64_t r = 0; r < n; ++r)
      vv[static_cast<size_t>(r)] =
          kernels::dot(layer.wv[static_cast<size_t>(g)].data() + r * dim, o_t, dim);
    cache.append(g, kv.data(), vv.data());
  }
  cache.bump();

  std::vector<T> out(static_cast<size_t>(dim), T(0));
  std::vector<T> q(static_cast<size_t>(n)), y(static_cast<size_t>(n)), scratch;
  for (int64_t h = 0; h < layer.heads; ++h) {
    for (int64_t r = 0; r < n; ++r)
      q[static_cast<size_t>(r)] =
          kernels::dot(layer.wq[static_cast<size_t>(h)].data() + r * dim, o_t, dim);
    if (layer.rotary) kernels::rope_inplace(q.data(), n, pos);
    int64_t g = layer.kv_group(h);
    kernels::attend_one(q.data(), cache.k[static_cast<size_t>(g)], cache.v[static_cast<size_t>(g)],
                        cache.len, n, layer.scale(), y.data(), scratch);
    const TensorT<T>& wo = layer.wo[static_cast<size_t>(h)];
    for (int64_t r = 0; r < n; ++r) {
      T yr = y[static_cast<size_t>(r)];
      const T* worow = wo.data() + r * dim;
      for (int64_t d = 0; d < dim; ++d) out[static_cast<size_t>(d)] += yr * worow[d];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linearized attention (softmax removed). Two algebraic routes that must
// agree: a cumulative outer-product recurrence and a masked quadratic form.

enum class LinAttnForm { kRecurrent, kQuadratic };

// Head-level, rows are T×N. y_t = scale · Σ_{s≤t} (q_t·k_s) v_s.
template <class T>
TensorT<T> linear_attention_head(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                 T scale, LinAttnForm form) {
  int64_t rows = q.extent(0), n = q.extent(1);
  TensorT<T> out = TensorT<T>::zeros({rows, n});
  if (form == LinAttnForm::kRecurrent) {
    // state h[a,b] accumulates k_s[a] * v_s[b]
    std::vector<T> h(static_cast<size_t>(n * n), T(0));
    for (int64_t t = 0; t < rows; ++t) {
      const T* kt = k.data() + t * n;
      const T* vt = v.data() + t * n;
      for (int64_t a = 0; a < n; ++a)
        for (int64_t b = 0; b < n; ++b) h[static_cast<size_t>(a * n + b)] += kt[a] * vt[b];
      const T* qt = q.data() + t * n;
      T* yt = out.data() + t * n;
      for (int64_t b = 0; b < n; ++b) {
        T acc = T(0);
        for (int64_t a = 0; a < n; ++a) acc += qt[a] * h[static_cast<size_t>(a * n + b)];
        yt[b] = scale * acc;
      }
    }
  } else {
    for (int64_t t = 0; t < rows; ++t) {
      const T* qt = q.data() + t * n;
      T* yt = out.data() + t * n;
      for (int64_t s = 0; s <= t; ++s) {
        T w = scale * kernels::dot(qt, k.data() + s * n, n);
        const T* vs = v.data() + s * n;
        for (int64_t b = 0; b < n; ++b) yt[b] += w * vs[b];
      }
    }
  }
  return out;
}

// Layer-level linearized attention over x (T×D), heads summed through W_O.
// Not differentiable; this is a reference path.
template <class T>
TensorT<T> linear_attention_forward(const AttnLayerT<T>& layer, const TensorT<T>& x,
                                    LinAttnForm form = LinAttnForm::kRecurrent) {
  require_matrix(x, "linear_attention_forward");
  int64_t rows = x.extent(0), dim = x.extent(1);
  int64_t n = layer.head_dim;
  auto project = [&](const TensorT<T>& w) {
    TensorT<T> p = TensorT<T>::zeros({rows, n});
    for (int64_t t = 0; t < rows; ++t)
      for (int64_t r = 0; r < n; ++r)
        p.at(t, r) = kernels::dot(w.data() + r * dim, x.data() + t * dim, dim);
    return p;
  };
  TensorT<T> out = TensorT<T>::zeros({rows, dim});
  std::vector<TensorT<T>> k(static_cast<size_t>(layer.kv_heads)),
      v(static_cast<size_t>(layer.kv_heads));
  for (int64_t g = 0; g < layer.kv_heads; ++g) {
    k[static_cast<size_t>(g)] = project(layer.wk[static_cast<size_t>(g)]);
    v[static_cast<size_t>(g)] = project(layer.wv[static_cast<size_t>(g)]);
  }
  for (int64_t h = 0; h < layer.heads; ++h) {
    TensorT<T> q = project(layer.wq[static_cast<size_t>(h)]);
    int64_t g = layer.kv_group(h);
    TensorT<T> y = linear_attention_head(q, k[static_cast<size_t>(g)], v[static_cast<size_t>(g)],
                                         layer.scale(), form);
    const TensorT<T>& wo = layer.wo[static_cast<size_t>(h)];
    for (int64_t t = 0; t < rows; ++t)
      for (int64_t r = 0; r < n; ++r) {
        T yr = y(t, r);
        for (int64_t d = 0; d < dim; ++d) out.at(t, d) += yr * wo(r, d);
      }
  }
  return out;
}

}  // namespace hybridlm
