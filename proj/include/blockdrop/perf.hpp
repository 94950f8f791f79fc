#pragma once

// Analytic MACs accounting, forward-latency measurement, and activation
// sparsity. MACs convention: a linear map T x d_in -> d_out costs
// T*d_in*d_out; attention adds T^2*d for scores and T^2*d for value mixing;
// normalizations, activations, softmax, and elementwise adds cost zero.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "blockdrop/detector.hpp"

namespace blockdrop {

struct MacsBreakdown {
  std::vector<std::pair<std::string, std::int64_t>> per_layer;
  // backbone_total covers the droppable backbone blocks; the stem
  // (embedding, positions, unembed) and the detection head are accounted to
  // head_total, so backbone_total scales exactly with the block count.
  std::int64_t backbone_total = 0;
  std::int64_t head_total = 0;
  std::int64_t grand_total = 0;
  double backbone_fraction = 0.0;
};

namespace detail {

inline std::int64_t block_macs(const TransformerBlock& b, int t,
                               std::vector<std::pair<std::string, std::int64_t>>* layers,
                               const std::string& prefix) {
  const std::int64_t T = t;
  const std::int64_t d = b.width();
  const std::int64_t h = b.ffn_hidden();
  const std::int64_t qkv = 3 * T * d * d;
  const std::int64_t scores = T * T * d;
  const std::int64_t mix = T * T * d;
  const std::int64_t out = T * d * d;
  const std::int64_t ff1 = T * d * h;
  const std::int64_t ff2 = T * h * d;
  if (layers) {
    layers->emplace_back(prefix + ".attn.qkv", qkv);
    layers->emplace_back(prefix + ".attn.scores", scores);
    layers->emplace_back(prefix + ".attn.mix", mix);
    layers->emplace_back(prefix + ".attn.out", out);
    layers->emplace_back(prefix + ".ffn.in", ff1);
    layers->emplace_back(prefix + ".ffn.out", ff2);
  }
  return qkv + scores + mix + out + ff1 + ff2;
}

}  // namespace detail

inline MacsBreakdown count_macs(const DetectorModel& m, int seq_len) {
  if (seq_len != m.config.seq_len)
    throw DimensionError("input length " + std::to_string(seq_len) +
                         " does not match the model's sequence length");
  MacsBreakdown b;
  const std::int64_t T = seq_len;
  const std::int64_t Tp = seq_len / m.config.pool_factor;
  const std::int64_t d = m.config.width;
  const std::int64_t d_in = m.config.d_in;
  const std::int64_t classes = m.config.num_classes + 1;

  for (std::size_t i = 0; i < m.backbone.blocks.size(); ++i) {
    std::string prefix = "backbone.block" + std::to_string(m.backbone.identity_tags[i]);
    b.backbone_total +=
        detail::block_macs(m.backbone.blocks[i], static_cast<int>(T), &b.per_layer, prefix);
  }

  auto head_layer = [&](const std::string& name, std::int64_t macs) {
    b.per_layer.emplace_back(name, macs);
    b.head_total += macs;
  };
  head_layer("stem.embed", T * d_in * d);
  head_layer("stem.unembed", Tp * d * d);
  for (std::size_t i = 0; i < m.head.blocks.size(); ++i) {
    std::vector<std::pair<std::string, std::int64_t>> layers;
    std::int64_t macs = detail::block_macs(m.head.blocks[i], static_cast<int>(Tp), &layers,
                                           "head.block" + std::to_string(i));
    for (auto& l : layers) b.per_layer.push_back(std::move(l));
    b.head_total += macs;
  }
  head_layer("head.cls", Tp * d * classes);
  head_layer("head.reg", Tp * d * 2);

  b.grand_total = b.backbone_total + b.head_total;
  b.backbone_fraction =
      b.grand_total == 0 ? 0.0 : static_cast<double>(b.backbone_total) / b.grand_total;
  return b;
}

inline MacsBreakdown count_macs(const DetectorModel& m) { return count_macs(m, m.config.seq_len); }

// ---------------------------------------------------------------------------
// Latency

struct LatencyStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;
  int reps = 0;
  int threads = 1;
};

// Forward-only wall-clock timing at batch 1. With threads > 1, that many
// forward streams run concurrently and every forward is timed individually.
inline LatencyStats latency_bench(const DetectorModel& model, int warmup, int reps,
                                  int threads = 1) {
  if (reps < 10) throw ContractError("latency_bench requires at least 10 reps");
  if (warmup < 0) throw ContractError("warmup must be nonnegative");
  NoGradScope no_grad;
  Rng rng(42);
  Tensor input = Tensor::randn({model.config.seq_len, model.config.d_in}, rng);
  for (int i = 0; i < warmup; ++i) model_forward(model, input);

  std::vector<double> samples_ms(reps, 0.0);
  parallel_for(static_cast<std::size_t>(reps), threads, [&](std::size_t i) {
    auto t0 = std::chrono::steady_clock::now();
    HeadOutput out = model_forward(model, input);
    auto t1 = std::chrono::steady_clock::now();
    (void)out;
    samples_ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  });

  LatencyStats stats;
  stats.reps = reps;
  stats.threads = threads;
  double sum = 0.0;
  for (double s : samples_ms) sum += s;
  stats.mean_ms = sum / reps;
  double var = 0.0;
  for (double s : samples_ms) var += (s - stats.mean_ms) * (s - stats.mean_ms);
  stats.std_ms = reps > 1 ? std::sqrt(var / (reps - 1)) : 0.0;
  return stats;
}

// ---------------------------------------------------------------------------
// Activation sparsity

// Fraction of exactly-zero post-activation FFN values over the dataset.
inline double activation_sparsity(const DetectorModel& model,
                                  const std::vector<SyntheticSequence>& sequences) {
  NoGradScope no_grad;
  ActivationStats stats;
  for (const auto& seq : sequences) model_forward(model, seq.features, nullptr, &stats);
  return stats.fraction();
}

// Replaces the FFN activation of every block (backbone and head); weights are
// untouched and shared with the input model.
inline DetectorModel swap_activation(const DetectorModel& model, Activation target) {
  DetectorModel out = model;
  out.config.activation = target;
  for (auto& b : out.backbone.blocks) b.activation = target;
  for (auto& b : out.head.blocks) b.activation = target;
  return out;
}

}  // namespace blockdrop
