// Incremental decoding for hybrid stacks. A DecodeSession owns the per-layer
// inference state: KV buffers for attention layers and exactly two recurrent
// snapshots per SSM head (the committed base and the running state). Ranges
// of positions are processed in one pass; the per-output accumulation order
// of every kernel is independent of the block size, so batched verification
// and one-token-at-a-time decoding produce bit-identical logits.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "hybridlm/model.hpp"

namespace hybridlm {

namespace kernels {

template <class T>
inline void rmsnorm_row(const T* x, const T* w, int64_t n, T eps, T* y) {
  double ms = 0;
  for (int64_t i = 0; i < n; ++i) ms += static_cast<double>(x[i]) * x[i];
  ms = ms / static_cast<double>(n) + static_cast<double>(eps);
  T inv = static_cast<T>(1.0 / std::sqrt(ms));
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] * inv * w[i];
}

// Lowest index wins ties, so decoding is reproducible across builds.
template <class T>
inline int32_t argmax(const T* v, int64_t n) {
  int64_t best = 0;
  for (int64_t i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int32_t>(best);
}

}  // namespace kernels

// Transposed / concatenated weight copies for the row-blocked kernels, plus
// the materialized per-head A matrices. Built once per model and shared by
// any number of sessions.
template <class T>
struct InferWeightsT {
  struct Block {
    LayerKind kind = LayerKind::kAttention;
    // attention: one fused projection [q heads | k groups | v groups]
    std::vector<T> qkv_t;    // D × (H·N + 2·G·N)
    std::vector<T> wo_cat;   // (H·N) × D
    // ssm: fused [x | b | c] per head
    std::vector<T> xbc_t;    // D × (H·3N)
    std::vector<T> ssm_wo_cat;  // (H·N) × D
    std::vector<std::vector<T>> a;  // per head, N×N'
    // mlp
    std::vector<T> gateup_t;  // D × 2H
    std::vector<T> down_t;    // H × D
  };

  const ModelT<T>* model = nullptr;
  std::vector<Block> blocks;
  std::vector<T> head_t;  // D × V

  explicit InferWeightsT(const ModelT<T>& m) : model(&m) {
    const auto& spec = m.spec;
    int64_t dim = spec.dim;
    auto transpose_into = [dim](const TensorT<T>& w, std::vector<T>& dst, int64_t col0,
                                int64_t cols_total) {
      int64_t rows = w.extent(0);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t d = 0; d < dim; ++d) dst[static_cast<size_t>(d * cols_total + col0 + r)] = w(r, d);
    };
    for (const auto& blk : m.blocks) {
      Block b;
      b.kind = blk.kind;
      if (blk.kind == LayerKind::kAttention) {
        const auto& a = blk.attn;
        int64_t n = a.head_dim;
        int64_t cols = (a.heads + 2 * a.kv_heads) * n;
        b.qkv_t.assign(static_cast<size_t>(dim * cols), T(0));
        for (int64_t h = 0; h < a.heads; ++h)
          transpose_into(a.wq[static_cast<size_t>(h)], b.qkv_t, h * n, cols);
        for (int64_t g = 0; g < a.kv_heads; ++g) {
          transpose_into(a.wk[static_cast<size_t>(g)], b.qkv_t, (a.heads + g) * n, cols);
          transpose_into(a.wv[static_cast<size_t>(g)], b.qkv_t, (a.heads + a.kv_heads + g) * n,
                         cols);
        }
        b.wo_cat.assign(static_cast<size_t>(a.heads * n * dim), T(0));
        for (int64_t h = 0; h < a.heads; ++h)
          std::copy_n(a.wo[static_cast<size_t>(h)].data(), n * dim,
                      b.wo_cat.data() + h * n * dim);
      } else if (blk.kind == LayerKind::kSsm) {
        const auto& s = blk.ssm;
        int64_t n = s.head[0].channels;
        int64_t cols = s.heads * 3 * n;
        b.xbc_t.assign(static_cast<size_t>(dim * cols), T(0));
        b.ssm_wo_cat.assign(static_cast<size_t>(s.heads * n * dim), T(0));
        for (int64_t h = 0; h < s.heads; ++h) {
          const auto& p = s.head[static_cast<size_t>(h)];
          transpose_into(p.w_x, b.xbc_t, h * 3 * n, cols);
          transpose_into(p.w_b, b.xbc_t, h * 3 * n + n, cols);
          transpose_into(p.w_c, b.xbc_t, h * 3 * n + 2 * n, cols);
          std::copy_n(p.w_o.data(), n * dim, b.ssm_wo_cat.data() + h * n * dim);
          b.a.push_back(kernels::ssm_a_values(p, s.override_));
        }
      }
      int64_t hid = blk.mlp_gate.extent(0);
      b.gateup_t.assign(static_cast<size_t>(dim * 2 * hid), T(0));
      transpose_into(blk.mlp_gate, b.gateup_t, 0, 2 * hid);
      transpose_into(blk.mlp_up, b.gateup_t, hid, 2 * hid);
      b.down_t.assign(static_cast<size_t>(hid * dim), T(0));
      for (int64_t d = 0; d < dim; ++d)
        for (int64_t k = 0; k < hid; ++k)
          b.down_t[static_cast<size_t>(k * dim + d)] = blk.mlp_down(d, k);
      blocks.push_back(std::move(b));
    }
    const TensorT<T>& lm = m.lm_head();
    head_t.assign(static_cast<size_t>(dim * spec.vocab), T(0));
    for (int64_t v = 0; v < spec.vocab; ++v)
      for (int64_t d = 0; d < dim; ++d) head_t[static_cast<size_t>(d * spec.vocab + v)] = lm(v, d);
  }
};

// Positions are 1-based token counts: after consuming p tokens the model's
// output row at position p scores token p+1.
template <class T>
class DecodeSessionT {
 public:
  DecodeSessionT(const ModelT<T>& model, const InferWeightsT<T>& weights)
      : model_(&model), w_(&weights) {
    const auto& spec = model.spec;
    for (const auto& blk : model.blocks) {
      if (blk.kind == LayerKind::kAttention) {
        kv_.emplace_back(spec.num_kv_heads, spec.head_dim());
      } else {
        kv_.emplace_back();
      }
      std::vector<SsmHeadStateT<T>> base, run;
      if (blk.kind == LayerKind::kSsm) {
        for (int64_t h = 0; h < blk.ssm.heads; ++h) {
          base.emplace_back(blk.ssm.head[static_cast<size_t>(h)].channels,
                            blk.ssm.head[static_cast<size_t>(h)].state_dim,
                            blk.ssm.head[static_cast<size_t>(h)].conv_len);
          run.emplace_back(base.back());
        }
      }
      base_.push_back(std::move(base));
      run_.push_back(std::move(run));
    }
  }

  int64_t base_pos() const { return base_pos_; }
  int64_t run_pos() const { return run_pos_; }

  // Advances the running state through tokens[run_pos .. len), optionally
  // rebasing the committed snapshot as position `snapshot_at` is passed, and
  // returns logits rows for positions out_from..len. Pass snapshot_at = -1 to
  // leave the base untouched and out_from = len+1 when no logits are needed.
  std::vector<std::vector<T>> advance(std::span<const int32_t> tokens, int64_t out_from,
                                      int64_t snapshot_at) {
    const auto& spec = model_->spec;
    const int64_t dim = spec.dim;
    const int64_t len = static_cast<int64_t>(tokens.size());
    if (len < run_pos_)
      throw std::invalid_argument("advance: token count " + std::to_string(len) +
                                  " behind running position " + std::to_string(run_pos_));
    const int64_t count = len - run_pos_;
    if (snapshot_at > len)
      throw std::invalid_argument("advance: snapshot position beyond token count");
    if (snapshot_at >= 0 && snapshot_at <= run_pos_)
      throw std::invalid_argument("advance: snapshot position already consumed; use commit()");
    if (out_from <= run_pos_)
      throw std::invalid_argument("advance: logits before the running position are unavailable");

    std::vector<T> x(static_cast<size_t>(count * dim));
    for (int64_t r = 0; r < count; ++r) {
      int32_t id = tokens[static_cast<size_t>(run_pos_ + r)];
      if (id < 0 || id >= spec.vocab) throw std::out_of_range("advance: token id out of range");
      std::copy_n(model_->embed.data() + static_cast<int64_t>(id) * dim, dim,
                  x.data() + r * dim);
    }

    std::vector<T> z(static_cast<size_t>(count * dim));
    for (size_t bi = 0; bi < model_->blocks.size(); ++bi) {
      const auto& blk = model_->blocks[bi];
      const auto& bw = w_->blocks[bi];
      if (blk.kind != LayerKind::kMlpOnly) {
        for (int64_t r = 0; r < count; ++r)
          kernels::rmsnorm_row(x.data() + r * dim, blk.mixer_norm_w.data(), dim, T(1e-5),
                               z.data() + r * dim);
        if (blk.kind == LayerKind::kAttention) {
          attention_rows(blk, bw, z.data(), count, x.data());
        } else {
          ssm_rows(bi, blk, bw, z.data(), count, snapshot_at, x.data());
        }
      }
      mlp_rows(blk, bw, x.data(), count, z.data());
    }

    if (snapshot_at >= 0) base_pos_ = snapshot_at;
    run_pos_ = len;

    std::vector<std::vector<T>> logits;
    std::vector<T> normed(static_cast<size_t>(dim));
    for (int64_t pos = std::max(out_from, len - count + 1); pos <= len; ++pos) {
      int64_t r = pos - (len - count) - 1;
      kernels::rmsnorm_row(x.data() + r * dim, model_->final_norm_w.data(), dim, T(1e-5),
                           normed.data());
      std::vector<T> row(static_cast<size_t>(spec.vocab));
      kernels::gemm_rows(normed.data(), 1, dim, w_->head_t.data(), spec.vocab, row.data());
      logits.push_back(std::move(row));
    }
    return logits;
  }

  // base <- running. KV buffers are already at the running position.
  void commit() {
    for (size_t bi = 0; bi < run_.size(); ++bi)
      for (size_t h = 0; h < run_[bi].size(); ++h) base_[bi][h] = run_[bi][h];
    base_pos_ = run_pos_;
  }

  // running <- base; attention buffers truncate to the base position.
  void rollback() {
    for (size_t bi = 0; bi < run_.size(); ++bi) {
      for (size_t h = 0; h < run_[bi].size(); ++h) run_[bi][h] = base_[bi][h];
      if (model_->blocks[bi].kind == LayerKind::kAttention)
        kv_[bi].truncate(base_pos_);
    }
    run_pos_ = base_pos_;
  }

  // Retained recurrent snapshots for one head (the cache-discipline hook).
  static constexpr int64_t kSnapshotsPerHead = 2;

 private:
  void attention_rows(const BlockT<T>& blk, const typename InferWeightsT<T>::Block& bw,
                      const T* z, int64_t count, T* x_inout) {
    const auto& a = blk.attn;
    const int64_t dim = model_->spec.dim;
    const int64_t n = a.head_dim;
    const int64_t cols = (a.heads + 2 * a.kv_heads) * n;
    std::vector<T> proj(static_cast<size_t>(count * cols));
    kernels::gemm_rows(z, count, dim, bw.qkv_t.data(), cols, proj.data());
    std::vector<T> y(static_cast<size_t>(count * a.heads * n));
    std::vector<T> scratch;
    auto& cache = kv_[block_index(blk)];
    for (int64_t r = 0; r < count; ++r) {
      T* rowp = proj.data() + r * cols;
      int64_t pos0 = cache.len;  // 0-based position of this row
      for (int64_t g = 0; g < a.kv_heads; ++g) {
        T* kvec = rowp + (a.heads + g) * n;
        T* vvec = rowp + (a.heads + a.kv_heads + g) * n;
        if (a.rotary) kernels::rope_inplace(kvec, n, pos0);
        cache.append(g, kvec, vvec);
      }
      cache.bump();
      for (int64_t h = 0; h < a.heads; ++h) {
        T* q = rowp + h * n;
        if (a.rotary) kernels::rope_inplace(q, n, pos0);
        kernels::attend_one(q, cache.k[static_cast<size_t>(a.kv_group(h))],
                            cache.v[static_cast<size_t>(a.kv_group(h))], cache.len, n, a.scale(),
                            y.data() + (r * a.heads + h) * n, scratch);
      }
    }
    accumulate_rows(y.data(), count, a.heads * n, bw.wo_cat.data(), x_inout);
  }

  void ssm_rows(size_t bi, const BlockT<T>& blk, const typename InferWeightsT<T>::Block& bw,
                const T* z, int64_t count, int64_t snapshot_at, T* x_inout) {
    const auto& s = blk.ssm;
    const int64_t dim = model_->spec.dim;
    const int64_t n = s.head[0].channels;
    const int64_t cols = s.heads * 3 * n;
    std::vector<T> proj(static_cast<size_t>(count * cols));
    kernels::gemm_rows(z, count, dim, bw.xbc_t.data(), cols, proj.data());
    std::vector<T> y(static_cast<size_t>(count * s.heads * n));
    int64_t np = s.head[0].state_dim;
    std::vector<T> xf(static_cast<size_t>(n)), b(static_cast<size_t>(np)),
        c(static_cast<size_t>(np)), delta(static_cast<size_t>(np));
    for (int64_t r = 0; r < count; ++r) {
      int64_t pos = run_pos_ + 1 + r;
      for (int64_t h = 0; h < s.heads; ++h) {
        const auto& p = s.head[static_cast<size_t>(h)];
        auto& state = run_[bi][static_cast<size_t>(h)];
        const T* xr = proj.data() + r * cols + h * 3 * n;
        kernels::causal_conv_step(p.conv_w.data(), p.conv_b.data(), xr, n, p.conv_len,
                                  state.ring, state.ring_pos, xf.data(),
                                  s.override_.identity_conv);
        kernels::delta_from_x(p, s.override_, xf.data(), delta.data());
        kernels::resample_vec(p, xr + n, b.data());
        kernels::resample_vec(p, xr + 2 * n, c.data());
        kernels::ssm_recurrence_step(bw.a[static_cast<size_t>(h)].data(), b.data(), c.data(),
                                     delta.data(), xf.data(), n, np, state.h.data(),
                                     y.data() + (r * s.heads + h) * n);
        ++state.position;
        if (pos == snapshot_at) base_[bi][static_cast<size_t>(h)] = state;
      }
    }
    accumulate_rows(y.data(), count, s.heads * n, bw.ssm_wo_cat.data(), x_inout);
  }

  void mlp_rows(const BlockT<T>& blk, const typename InferWeightsT<T>::Block& bw, T* x_inout,
                int64_t count, T* z_scratch) {
    const int64_t dim = model_->spec.dim;
    const int64_t hid = blk.mlp_gate.extent(0);
    for (int64_t r = 0; r < count; ++r)
      kernels::rmsnorm_row(x_inout + r * dim, blk.mlp_norm_w.data(), dim, T(1e-5),
                           z_scratch + r * dim);
    std::vector<T> gateup(static_cast<size_t>(count * 2 * hid));
    kernels::gemm_rows(z_scratch, count, dim, bw.gateup_t.data(), 2 * hid, gateup.data());
    std::vector<T> hrows(static_cast<size_t>(count * hid));
    for (int64_t r = 0; r < count; ++r) {
      const T* g = gateup.data() + r * 2 * hid;
      T* hr = hrows.data() + r * hid;
      for (int64_t i = 0; i < hid; ++i) hr[i] = g[i] * sigmoid_scalar(g[i]) * g[hid + i];
    }
    accumulate_rows(hrows.data(), count, hid, bw.down_t.data(), x_inout);
  }

  // x_inout[r,:] += rows[r,:] · wt  (the residual add around each sublayer)
  void accumulate_rows(const T* rows, int64_t count, int64_t in, const T* wt, T* x_inout) {
    const int64_t dim = model_->spec.dim;
    std::vector<T> mix(static_cast<size_t>(count * dim));
    kernels::gemm_rows(rows, count, in, wt, dim, mix.data());
    for (int64_t i = 0; i < count * dim; ++i) x_inout[i] += mix[i];
  }

  size_t block_index(const BlockT<T>& blk) const {
    return static_cast<size_t>(&blk - model_->blocks.data());
  }

  const ModelT<T>* model_;
  const InferWeightsT<T>* w_;
  std::vector<LayerKvT<T>> kv_;
  std::vector<std::vector<SsmHeadStateT<T>>> base_, run_;
  int64_t base_pos_ = 0, run_pos_ = 0;
};

// ---------------------------------------------------------------------------
// Plain generation

struct DecodePolicy {
  bool greedy = true;
  double temperature = 1.0;
  uint64_t seed = 0;
};

template <class T>
struct GenerateResultT {
  std::vector<int32_t> tokens;             // generated tokens (EOS included if hit)
  std::vector<std::vector<T>> logits;      // per generated token, when requested
  bool hit_eos = false;
};

// Sequential decoding: one advance per generated token. Also the reference
// that speculative decoding must reproduce token-for-token under greedy.
template <class T>
GenerateResultT<T> generate(const ModelT<T>& model, const InferWeightsT<T>& weights,
                            std::span<const int32_t> prompt, int64_t max_new,
                            const DecodePolicy& policy = {}, bool keep_logits = false,
                            int32_t eos = kEosToken) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  DecodeSessionT<T> session(model, weights);
  std::vector<int32_t> tokens(prompt.begin(), prompt.end());
  GenerateResultT<T> out;
  std::mt19937_64 rng(policy.seed);
  for (int64_t i = 0; i < max_new; ++i) {
    auto logits = session.advance(tokens, static_cast<int64_t>(tokens.size()), -1);
    const std::vector<T>& row = logits.back();
    int32_t next;
    if (policy.greedy) {
      next = kernels::argmax(row.data(), static_cast<int64_t>(row.size()));
    } else {
      std::vector<double> probs(row.size());
      double mx = row[kernels::argmax(row.data(), static_cast<int64_t>(row.size()))];
      double sum = 0;
      for (size_t v = 0; v < row.size(); ++v) {
        probs[v] = std::exp((static_cast<double>(row[v]) - mx) / policy.temperature);
        sum += probs[v];
      }
      std::uniform_real_distribution<double> unif(0.0, sum);
      double u = unif(rng);
      size_t v = 0;
      for (; v + 1 < probs.size(); ++v) {
        if (u < probs[v]) break;
        u -= probs[v];
      }
      next = static_cast<int32_t>(v);
    }
    tokens.push_back(next);
    out.tokens.push_back(next);
    if (keep_logits) out.logits.push_back(row);
    if (next == eos && eos >= 0) {
      out.hit_eos = true;
      break;
    }
  }
  return out;
}

}  // namespace hybridlm
