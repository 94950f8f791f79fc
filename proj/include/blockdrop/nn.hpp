#pragma once

// Pre-norm transformer blocks, the droppable block stack, and low-rank
// adapters on the attention projections with exact merging.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "blockdrop/tensor.hpp"

namespace blockdrop {

enum class Activation { GELU, RELU };

inline std::string activation_name(Activation a) { return a == Activation::GELU ? "gelu" : "relu"; }
inline Activation activation_from_name(const std::string& s) {
  if (s == "gelu") return Activation::GELU;
  if (s == "relu") return Activation::RELU;
  throw ConfigError("unknown activation '" + s + "'");
}

enum class Proj { Q = 0, K = 1, V = 2, O = 3 };

inline std::string proj_name(Proj p) {
  switch (p) {
    case Proj::Q: return "q";
    case Proj::K: return "k";
    case Proj::V: return "v";
    case Proj::O: return "o";
  }
  throw LookupError("bad projection");
}
inline Proj proj_from_name(const std::string& s) {
  if (s == "q") return Proj::Q;
  if (s == "k") return Proj::K;
  if (s == "v") return Proj::V;
  if (s == "o") return Proj::O;
  throw ConfigError("unknown attention projection '" + s + "'");
}

// Low-rank pair attached to one attention projection. `up` starts at zero so
// a fresh adapter is a no-op; the effective weight is W + (alpha/rank) down*up.
struct LoraAdapter {
  Tensor down;  // [d x r]
  Tensor up;    // [r x d]
  int rank = 0;
  double alpha = 0.0;
  Proj target = Proj::Q;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct TransformerBlock {
  Tensor w_q, w_k, w_v, w_o;  // [d x d]
  Tensor w_ff1;               // [d x h]
  Tensor w_ff2;               // [h x d]
  LayerNormParams ln_attn, ln_ffn;
  int head_count = 1;
  Activation activation = Activation::GELU;
  std::array<std::optional<LoraAdapter>, 4> adapters;

  int width() const { return w_q.dim(0); }
  int ffn_hidden() const { return w_ff1.dim(1); }
  bool has_adapters() const {
    for (const auto& a : adapters)
      if (a) return true;
    return false;
  }
};

// Block outputs of one forward pass, keyed by original block index.
struct FeatureTrace {
  std::vector<std::pair<int, Tensor>> entries;

  void add(int tag, Tensor t) { entries.emplace_back(tag, std::move(t)); }
  const Tensor* find(int tag) const {
    for (const auto& [k, v] : entries)
      if (k == tag) return &v;
    return nullptr;
  }
  std::size_t size() const { return entries.size(); }
};

// Zero counts over post-activation FFN values, for activation sparsity.
struct ActivationStats {
  std::size_t zeros = 0;
  std::size_t total = 0;

  void observe(const Tensor& post_activation) {
    for (double v : post_activation.values()) {
      if (v == 0.0) ++zeros;
      ++total;
    }
  }
  double fraction() const { return total == 0 ? 0.0 : static_cast<double>(zeros) / total; }
};

namespace detail {

inline Tensor lora_project(const Tensor& x, const Tensor& w,
                           const std::optional<LoraAdapter>& adapter) {
  Tensor y = matmul(x, w);
  if (adapter)
    y = add(y, scale(matmul(matmul(x, adapter->down), adapter->up),
                     adapter->alpha / adapter->rank));
  return y;
}

inline Tensor attention(const TransformerBlock& b, const Tensor& x) {
  const int d = b.width();
  const int heads = b.head_count;
  if (heads <= 0 || d % heads != 0)
    throw DimensionError("head_count must divide the block width");
  const int dh = d / heads;
  Tensor q = lora_project(x, b.w_q, b.adapters[static_cast<int>(Proj::Q)]);
  Tensor k = lora_project(x, b.w_k, b.adapters[static_cast<int>(Proj::K)]);
  Tensor v = lora_project(x, b.w_v, b.adapters[static_cast<int>(Proj::V)]);
  std::vector<Tensor> mixed;
  mixed.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    mixed.push_back(matmul(softmax(scores, -1), vh));
  }
  Tensor cat = heads == 1 ? mixed[0] : concat_cols(mixed);
  return lora_project(cat, b.w_o, b.adapters[static_cast<int>(Proj::O)]);
}

inline Tensor ffn(const TransformerBlock& b, const Tensor& x, ActivationStats* act_stats) {
  Tensor h = matmul(x, b.w_ff1);
  Tensor a = b.activation == Activation::GELU ? gelu(h) : relu(h);
  if (act_stats) act_stats->observe(a);
  return matmul(a, b.w_ff2);
}

}  // namespace detail

// Pre-norm residual block: x + Attn(LN(x)), then + FFN(LN(.)).
// When `trace` is given the output is registered under `identity_tag`.
inline Tensor block_forward(const TransformerBlock& block, const Tensor& x, int identity_tag = -1,
                            FeatureTrace* trace = nullptr, ActivationStats* act_stats = nullptr) {
  if (x.ndim() != 2 || x.dim(1) != block.width())
    throw DimensionError("block_forward input width " + shape_str(x.shape()) +
                         " does not match block width " + std::to_string(block.width()));
  Tensor h = add(x, detail::attention(block, layer_norm(x, block.ln_attn.gain, block.ln_attn.bias)));
  Tensor out =
      add(h, detail::ffn(block, layer_norm(h, block.ln_ffn.gain, block.ln_ffn.bias), act_stats));
  if (trace && identity_tag >= 0) trace->add(identity_tag, out);
  return out;
}

// The droppable backbone: embedding, learned positions, blocks with identity
// tags, and a closing norm plus output projection consumed by the detector.
struct BlockStack {
  Tensor embed;      // [d_in x d]
  Tensor pos_embed;  // [T x d]
  std::vector<TransformerBlock> blocks;
  std::vector<int> identity_tags;  // original index of each surviving block
  LayerNormParams final_norm;
  Tensor unembed;  // [d x d]

  int width() const { return embed.dim(1); }
  int seq_len() const { return pos_embed.dim(0); }

  void validate() const {
    if (blocks.size() != identity_tags.size())
      throw ContractError("identity tag count must equal block count");
    for (std::size_t i = 1; i < identity_tags.size(); ++i)
      if (identity_tags[i] <= identity_tags[i - 1])
        throw ContractError("identity tags must be strictly increasing");
  }
};

inline Tensor backbone_forward(const BlockStack& stack, const Tensor& features,
                               FeatureTrace* trace = nullptr,
                               ActivationStats* act_stats = nullptr,
                               Tensor* embedded_out = nullptr) {
  Tensor x = add(matmul(features, stack.embed), stack.pos_embed);
  if (embedded_out) *embedded_out = x;
  for (std::size_t i = 0; i < stack.blocks.size(); ++i)
    x = block_forward(stack.blocks[i], x, stack.identity_tags[i], trace, act_stats);
  return layer_norm(x, stack.final_norm.gain, stack.final_norm.bias);
}

// ---------------------------------------------------------------------------
// Parameter traversal

template <class Fn>
void for_each_block_tensor(TransformerBlock& b, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".w_q", b.w_q);
  fn(prefix + ".w_k", b.w_k);
  fn(prefix + ".w_v", b.w_v);
  fn(prefix + ".w_o", b.w_o);
  fn(prefix + ".w_ff1", b.w_ff1);
  fn(prefix + ".w_ff2", b.w_ff2);
  fn(prefix + ".ln_attn.gain", b.ln_attn.gain);
  fn(prefix + ".ln_attn.bias", b.ln_attn.bias);
  fn(prefix + ".ln_ffn.gain", b.ln_ffn.gain);
  fn(prefix + ".ln_ffn.bias", b.ln_ffn.bias);
  for (auto& a : b.adapters) {
    if (!a) continue;
    fn(prefix + ".lora_" + proj_name(a->target) + ".down", a->down);
    fn(prefix + ".lora_" + proj_name(a->target) + ".up", a->up);
  }
}

template <class Fn>
void for_each_stack_tensor(BlockStack& s, Fn&& fn) {
  fn("backbone.embed", s.embed);
  fn("backbone.pos_embed", s.pos_embed);
  for (std::size_t i = 0; i < s.blocks.size(); ++i)
    for_each_block_tensor(s.blocks[i], "backbone.block" + std::to_string(i), fn);
  fn("backbone.final_norm.gain", s.final_norm.gain);
  fn("backbone.final_norm.bias", s.final_norm.bias);
  fn("backbone.unembed", s.unembed);
}

// ---------------------------------------------------------------------------
// LoRA insertion and merging

// Gives every surviving block a zero-initialized adapter on each target
// projection and freezes everything else in the stack, so subsequent training
// touches only the adapters.
inline void insert_lora(BlockStack& stack, double rank_ratio, const std::vector<Proj>& targets,
                        Rng& rng) {
  if (!(rank_ratio > 0.0 && rank_ratio <= 1.0)) throw ContractError("rank_ratio must be in (0,1]");
  if (targets.empty()) throw ContractError("insert_lora requires at least one target projection");
  const int d = stack.width();
  const int rank = std::max(1, static_cast<int>(std::lround(rank_ratio * d)));
  for_each_stack_tensor(stack, [](const std::string&, Tensor& t) { t.set_requires_grad(false); });
  for (auto& block : stack.blocks) {
    for (Proj p : targets) {
      LoraAdapter adapter;
      adapter.rank = rank;
      adapter.alpha = static_cast<double>(rank);  // effective scale 1
      adapter.target = p;
      adapter.down = Tensor::randn({d, rank}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
      adapter.up = Tensor::zeros({rank, d}, true);
      block.adapters[static_cast<int>(p)] = std::move(adapter);
    }
  }
}

// Folds every adapter into its base projection (W + (alpha/r) down*up) and
// restores the plain, fully trainable stack. Output-preserving by
// construction; the architecture does not change.
inline void merge_lora(BlockStack& stack) {
  for (auto& block : stack.blocks) {
    for (auto& slot : block.adapters) {
      if (!slot) continue;
      const LoraAdapter& a = *slot;
      Tensor* w = nullptr;
      switch (a.target) {
        case Proj::Q: w = &block.w_q; break;
        case Proj::K: w = &block.w_k; break;
        case Proj::V: w = &block.w_v; break;
        case Proj::O: w = &block.w_o; break;
      }
      const int d = w->dim(0);
      Tensor merged = w->clone();
      {
        detail::EMat W(merged.mutable_values().data(), d, d);
        detail::CEMat A(a.down.values().data(), d, a.rank);
        detail::CEMat B(a.up.values().data(), a.rank, d);
        W.noalias() += (a.alpha / a.rank) * (A * B);
      }
      *w = std::move(merged);
      slot.reset();
    }
  }
  for_each_stack_tensor(stack, [](const std::string&, Tensor& t) { t.set_requires_grad(true); });
}

// ---------------------------------------------------------------------------
// Block removal

// Removes the block with the given original index. Survivors keep their tags
// and share weight storage with the input stack.
inline BlockStack drop_block(const BlockStack& stack, int original_index) {
  if (stack.blocks.size() < 2)
    throw ContractError("cannot drop a block from a single-block stack");
  std::size_t pos = stack.identity_tags.size();
  for (std::size_t i = 0; i < stack.identity_tags.size(); ++i) {
    if (stack.identity_tags[i] == original_index) {
      pos = i;
      break;
    }
  }
  if (pos == stack.identity_tags.size())
    throw LookupError("no surviving block has original index " + std::to_string(original_index));
  BlockStack out = stack;
  out.blocks.erase(out.blocks.begin() + pos);
  out.identity_tags.erase(out.identity_tags.begin() + pos);
  return out;
}

}  // namespace blockdrop
