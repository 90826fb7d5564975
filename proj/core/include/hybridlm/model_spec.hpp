#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace hybridlm {

enum class LayerKind { kAttention, kSsm, kMlpOnly };

inline std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kAttention: return "attention";
    case LayerKind::kSsm: return "ssm";
    case LayerKind::kMlpOnly: return "mlp_only";
  }
  throw std::logic_error("unknown layer kind");
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "attention") return LayerKind::kAttention;
  if (s == "ssm") return LayerKind::kSsm;
  if (s == "mlp_only") return LayerKind::kMlpOnly;
  throw std::invalid_argument("unknown layer kind: " + s);
}

// Byte-level vocabulary: 256 byte values plus BOS and EOS.
inline constexpr int32_t kByteVocab = 258;
inline constexpr int32_t kBosToken = 256;
inline constexpr int32_t kEosToken = 257;

struct HybridModelSpec {
  int64_t vocab = kByteVocab;
  int64_t dim = 64;           // D, model width
  int64_t num_layers = 2;
  int64_t num_heads = 2;      // query heads
  int64_t num_kv_heads = 2;   // shared K/V heads; num_heads % num_kv_heads == 0
  int64_t state_dim = 0;      // N', SSM state axis; 0 means "equal to head_dim"
  int64_t conv_kernel = 4;    // L_c
  int64_t mlp_hidden = 0;     // 0 means 2*dim
  bool rotary = false;
  bool tie_embeddings = false;
  std::vector<LayerKind> layer_kinds;          // empty means all attention
  std::set<std::string> frozen_groups;         // parameter-group names, e.g. {"mlp"}

  int64_t head_dim() const { return dim / num_heads; }
  int64_t effective_state_dim() const { return state_dim > 0 ? state_dim : head_dim(); }
  int64_t effective_mlp_hidden() const { return mlp_hidden > 0 ? mlp_hidden : 2 * dim; }
  int64_t kv_group_size() const { return num_heads / num_kv_heads; }

  std::vector<LayerKind> kinds() const {
    if (layer_kinds.empty())
      return std::vector<LayerKind>(static_cast<size_t>(num_layers), LayerKind::kAttention);
    return layer_kinds;
  }

  double attention_fraction() const {
    auto k = kinds();
    int64_t attn = 0;
    for (auto v : k) attn += v == LayerKind::kAttention ? 1 : 0;
    return static_cast<double>(attn) / static_cast<double>(k.size());
  }

  void validate() const {
    if (dim <= 0 || num_layers <= 0 || num_heads <= 0 || num_kv_heads <= 0 || vocab <= 0)
      throw std::invalid_argument("model spec: all dimensions must be positive");
    if (dim % num_heads != 0)
      throw std::invalid_argument("model spec: dim " + std::to_string(dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
    if (num_heads % num_kv_heads != 0)
      throw std::invalid_argument("model spec: num_heads " + std::to_string(num_heads) +
                                  " not divisible by num_kv_heads " +
                                  std::to_string(num_kv_heads));
    if (conv_kernel <= 0) throw std::invalid_argument("model spec: conv_kernel must be positive");
    if (!layer_kinds.empty() &&
        static_cast<int64_t>(layer_kinds.size()) != num_layers)
      throw std::invalid_argument("model spec: layer_kinds length " +
                                  std::to_string(layer_kinds.size()) + " != num_layers " +
                                  std::to_string(num_layers));
    if (rotary && head_dim() % 2 != 0)
      throw std::invalid_argument("model spec: rotary requires even head_dim");
  }
};

}  // namespace hybridlm
