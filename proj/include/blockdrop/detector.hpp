#pragma once

// Synthetic 1-D temporal action detection task and the anchor-free detector:
// dataset generation, per-timestep label assignment, task losses, and
// decoding of head outputs into scored action intervals.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "blockdrop/eval.hpp"
#include "blockdrop/nn.hpp"

namespace blockdrop {

// ---------------------------------------------------------------------------
// Configuration

struct TaskConfig {
  int num_seq = 60;
  int seq_len = 96;  // feature timesteps, one per second
  int d_in = 16;
  int num_classes = 3;
  double noise_sigma = 0.5;
  double pattern_scale = 1.2;
  int min_len = 16;
  int max_len = 40;
  int max_instances = 3;
  std::uint64_t seed = 1;

  void validate() const {
    if (seq_len < 32) throw ConfigError("task.seq_len must be at least 32");
    if (num_classes < 2) throw ConfigError("task.num_classes must be at least 2");
    if (num_seq < 5) throw ConfigError("task.num_seq must be at least 5");
    if (d_in < 1) throw ConfigError("task.d_in must be positive");
    if (noise_sigma < 0.0) throw ConfigError("task.noise_sigma must be nonnegative");
    if (min_len < 1 || max_len < min_len || max_len > seq_len)
      throw ConfigError("task instance length range is invalid");
    if (max_instances < 1) throw ConfigError("task.max_instances must be positive");
  }
};

struct ModelConfig {
  int depth = 12;
  int width = 32;
  int heads = 4;
  int head_depth = 2;
  int pool_factor = 8;
  int ffn_multiple = 4;
  Activation activation = Activation::GELU;
  // Blocks initialized as near-identities and frozen during baseline
  // training; used to study selection behavior on known-redundant depth.
  std::vector<int> planted_identity_blocks;
  double planted_scale = 1e-3;
  // Task-coupled dimensions, kept here so a checkpoint is self-describing.
  int d_in = 16;
  int num_classes = 3;
  int seq_len = 96;

  void validate() const {
    if (depth < 1) throw ConfigError("model.depth must be positive");
    if (width < 1 || heads < 1 || width % heads != 0)
      throw ConfigError("model.width must be a positive multiple of model.heads");
    if (head_depth < 0) throw ConfigError("model.head_depth must be nonnegative");
    if (pool_factor < 1 || seq_len % pool_factor != 0)
      throw ConfigError("model.pool_factor must evenly divide seq_len");
    if (ffn_multiple < 1) throw ConfigError("model.ffn_multiple must be positive");
    for (int b : planted_identity_blocks)
      if (b < 0 || b >= depth) throw ConfigError("planted block index out of range");
  }
};

// Decode/assignment grid: position j sits at time j*stride.
struct TimeGrid {
  int num_positions = 0;
  double stride = 1.0;

  double coord(int j) const { return j * stride; }
  double horizon() const { return num_positions * stride; }
};

// ---------------------------------------------------------------------------
// Model

struct DetectorHead {
  std::vector<TransformerBlock> blocks;
  Tensor cls_w, cls_b;  // [d x (C+1)], [C+1]; class C is background
  Tensor reg_w, reg_b;  // [d x 2], [2]
};

struct HeadOutput {
  Tensor class_logits;  // [T' x (C+1)]
  Tensor offsets;       // [T' x 2], nonnegative via softplus
};

struct DetectorModel {
  ModelConfig config;
  BlockStack backbone;
  DetectorHead head;

  TimeGrid grid() const {
    return {config.seq_len / config.pool_factor, static_cast<double>(config.pool_factor)};
  }
  int background_class() const { return config.num_classes; }
};

inline TransformerBlock init_block(int width, int hidden, int heads, Activation act, Rng& rng,
                                   double residual_scale = 1.0) {
  TransformerBlock b;
  double ws = 1.0 / std::sqrt(static_cast<double>(width));
  b.w_q = Tensor::randn({width, width}, rng, ws, true);
  b.w_k = Tensor::randn({width, width}, rng, ws, true);
  b.w_v = Tensor::randn({width, width}, rng, ws, true);
  b.w_o = Tensor::randn({width, width}, rng, ws * residual_scale, true);
  b.w_ff1 = Tensor::randn({width, hidden}, rng, ws, true);
  b.w_ff2 = Tensor::randn({hidden, width}, rng, residual_scale / std::sqrt(static_cast<double>(hidden)), true);
  b.ln_attn = {Tensor::ones({width}, true), Tensor::zeros({width}, true)};
  b.ln_ffn = {Tensor::ones({width}, true), Tensor::zeros({width}, true)};
  b.head_count = heads;
  b.activation = act;
  return b;
}

inline DetectorModel build_detector(const ModelConfig& cfg, Rng rng) {
  cfg.validate();
  DetectorModel m;
  m.config = cfg;
  const int d = cfg.width;
  const int hidden = cfg.ffn_multiple * d;
  m.backbone.embed = Tensor::randn({cfg.d_in, d}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_in)), true);
  m.backbone.pos_embed = Tensor::randn({cfg.seq_len, d}, rng, 0.02, true);
  for (int i = 0; i < cfg.depth; ++i) {
    bool planted = std::find(cfg.planted_identity_blocks.begin(),
                             cfg.planted_identity_blocks.end(),
                             i) != cfg.planted_identity_blocks.end();
    TransformerBlock b = init_block(d, hidden, cfg.heads, cfg.activation, rng,
                                    planted ? cfg.planted_scale : 1.0);
    if (planted)
      for_each_block_tensor(b, "", [](const std::string&, Tensor& t) { t.set_requires_grad(false); });
    m.backbone.blocks.push_back(std::move(b));
    m.backbone.identity_tags.push_back(i);
  }
  m.backbone.final_norm = {Tensor::ones({d}, true), Tensor::zeros({d}, true)};
  m.backbone.unembed = Tensor::randn({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  for (int i = 0; i < cfg.head_depth; ++i)
    m.head.blocks.push_back(init_block(d, hidden, cfg.heads, cfg.activation, rng));
  m.head.cls_w = Tensor::randn({d, cfg.num_classes + 1}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  m.head.cls_b = Tensor::zeros({cfg.num_classes + 1}, true);
  m.head.reg_w = Tensor::randn({d, 2}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  m.head.reg_b = Tensor::zeros({2}, true);
  return m;
}

template <class Fn>
void for_each_head_tensor(DetectorHead& h, Fn&& fn) {
  for (std::size_t i = 0; i < h.blocks.size(); ++i)
    for_each_block_tensor(h.blocks[i], "head.block" + std::to_string(i), fn);
  fn("head.cls_w", h.cls_w);
  fn("head.cls_b", h.cls_b);
  fn("head.reg_w", h.reg_w);
  fn("head.reg_b", h.reg_b);
}

template <class Fn>
void for_each_model_tensor(DetectorModel& m, Fn&& fn) {
  for_each_stack_tensor(m.backbone, fn);
  for_each_head_tensor(m.head, fn);
}

inline DetectorModel deep_copy(const DetectorModel& m) {
  DetectorModel c = m;
  for_each_model_tensor(c, [](const std::string&, Tensor& t) { t = t.clone(); });
  return c;
}

inline std::size_t count_parameters(DetectorModel& m, bool trainable_only = false) {
  std::size_t n = 0;
  for_each_model_tensor(m, [&](const std::string&, Tensor& t) {
    if (!trainable_only || t.requires_grad()) n += t.numel();
  });
  return n;
}

inline std::size_t trainable_backbone_parameters(DetectorModel& m) {
  std::size_t n = 0;
  for_each_stack_tensor(m.backbone, [&](const std::string&, Tensor& t) {
    if (t.requires_grad()) n += t.numel();
  });
  return n;
}

inline HeadOutput model_forward(const DetectorModel& m, const Tensor& features,
                                FeatureTrace* trace = nullptr,
                                ActivationStats* act_stats = nullptr,
                                Tensor* embedded_out = nullptr) {
  Tensor b = backbone_forward(m.backbone, features, trace, act_stats, embedded_out);
  Tensor x = matmul(avg_pool_rows(b, m.config.pool_factor), m.backbone.unembed);
  for (const auto& block : m.head.blocks) x = block_forward(block, x, -1, nullptr, act_stats);
  HeadOutput out;
  out.class_logits = add(matmul(x, m.head.cls_w), m.head.cls_b);
  out.offsets = softplus(add(matmul(x, m.head.reg_w), m.head.reg_b));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

struct SyntheticSequence {
  Tensor features;  // [T x d_in]
  std::vector<ActionInstance> instances;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<SyntheticSequence> train;
  std::vector<SyntheticSequence> val;
};

// One fixed random direction per class; an instance adds its class pattern on
// every timestep it covers.
inline std::vector<std::vector<double>> class_patterns(const TaskConfig& cfg) {
  Rng rng = Rng(cfg.seed).derive(0xA11C1A55);
  std::vector<std::vector<double>> patterns(cfg.num_classes);
  for (auto& p : patterns) {
    p.resize(cfg.d_in);
    for (auto& v : p) v = cfg.pattern_scale * rng.normal();
  }
  return patterns;
}

namespace detail {

inline SyntheticSequence generate_sequence(const TaskConfig& cfg,
                                           const std::vector<std::vector<double>>& patterns,
                                           std::uint64_t seq_seed) {
  Rng rng{seq_seed};
  SyntheticSequence seq;
  seq.seed = seq_seed;
  int target = static_cast<int>(rng.randint(1, cfg.max_instances));
  for (int attempt = 0; attempt < 60 && static_cast<int>(seq.instances.size()) < target;
       ++attempt) {
    int len = static_cast<int>(rng.randint(cfg.min_len, cfg.max_len));
    int start = static_cast<int>(rng.randint(0, cfg.seq_len - len));
    bool overlaps = false;
    for (const auto& other : seq.instances) {
      if (start < other.end + 2 && other.start < start + len + 2) {
        overlaps = true;
        break;
      }
    }
    if (overlaps) continue;
    ActionInstance inst;
    inst.start = start;
    inst.end = start + len;
    inst.class_id = static_cast<int>(rng.randint(0, cfg.num_classes - 1));
    inst.score = 1.0;
    seq.instances.push_back(inst);
  }
  std::sort(seq.instances.begin(), seq.instances.end(),
            [](const ActionInstance& a, const ActionInstance& b) { return a.start < b.start; });

  std::vector<double> feat(static_cast<std::size_t>(cfg.seq_len) * cfg.d_in);
  for (auto& v : feat) v = cfg.noise_sigma * rng.normal();
  for (const auto& inst : seq.instances) {
    const auto& p = patterns[inst.class_id];
    for (int t = static_cast<int>(inst.start); t < static_cast<int>(inst.end); ++t)
      for (int j = 0; j < cfg.d_in; ++j) feat[static_cast<std::size_t>(t) * cfg.d_in + j] += p[j];
  }
  seq.features = Tensor::from_data({cfg.seq_len, cfg.d_in}, std::move(feat));
  return seq;
}

}  // namespace detail

// Deterministic in cfg.seed; sequences i with i % 5 == 4 form the val split.
inline Dataset generate_dataset(const TaskConfig& cfg) {
  cfg.validate();
  auto patterns = class_patterns(cfg);
  Dataset ds;
  for (int i = 0; i < cfg.num_seq; ++i) {
    auto seq = detail::generate_sequence(cfg, patterns,
                                         splitmix64(cfg.seed ^ splitmix64(1000 + i)));
    if (i % 5 == 4)
      ds.val.push_back(std::move(seq));
    else
      ds.train.push_back(std::move(seq));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Label assignment

struct LabelTargets {
  std::vector<int> class_target;             // background = num_classes
  std::vector<std::array<double, 2>> offsets;  // (t - start, end - t)
  std::vector<char> positive;

  int positive_count() const {
    int n = 0;
    for (char p : positive) n += p != 0;
    return n;
  }
};

// A grid position is positive when it falls inside an instance; among nested
// instances the shorter one wins, earlier list order breaking exact ties.
inline LabelTargets assign_labels(const std::vector<ActionInstance>& instances,
                                  const TimeGrid& grid, int num_classes) {
  LabelTargets t;
  t.class_target.assign(grid.num_positions, num_classes);
  t.offsets.assign(grid.num_positions, {0.0, 0.0});
  t.positive.assign(grid.num_positions, 0);
  for (int j = 0; j < grid.num_positions; ++j) {
    double c = grid.coord(j);
    const ActionInstance* best = nullptr;
    for (const auto& inst : instances) {
      check_interval(inst);
      if (c < inst.start || c >= inst.end) continue;
      if (!best || (inst.end - inst.start) < (best->end - best->start)) best = &inst;
    }
    if (best) {
      t.class_target[j] = best->class_id;
      t.offsets[j] = {c - best->start, best->end - c};
      t.positive[j] = 1;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Differentiable interval GIoU (column-vector tensors)

inline Tensor interval_giou(const Tensor& start_a, const Tensor& end_a, const Tensor& start_b,
                            const Tensor& end_b) {
  Tensor inter = relu(sub(minimum(end_a, end_b), maximum(start_a, start_b)));
  Tensor uni = sub(add(sub(end_a, start_a), sub(end_b, start_b)), inter);
  Tensor enclose = sub(maximum(end_a, end_b), minimum(start_a, start_b));
  return sub(div(inter, uni), div(sub(enclose, uni), enclose));
}

// Predicted intervals at every grid position: (coord - o_s, coord + o_e).
// Returns {starts, ends} as [T' x 1] tensors.
inline std::pair<Tensor, Tensor> decode_interval_tensors(const Tensor& offsets,
                                                         const TimeGrid& grid) {
  std::vector<double> coords(grid.num_positions);
  for (int j = 0; j < grid.num_positions; ++j) coords[j] = grid.coord(j);
  Tensor c = Tensor::from_data({grid.num_positions, 1}, std::move(coords));
  Tensor o_s = slice_cols(offsets, 0, 1);
  Tensor o_e = slice_cols(offsets, 1, 1);
  return {sub(c, o_s), add(c, o_e)};
}

// ---------------------------------------------------------------------------
// Task losses

struct TadLoss {
  Tensor cls;
  Tensor reg;
};

// L_cls: mean softmax cross-entropy over all grid positions (optionally the
// focal variant). L_reg: mean (1 - GIoU) over positive positions on decoded
// intervals; zero when there is no positive.
inline TadLoss tad_loss(const HeadOutput& head_out, const LabelTargets& targets,
                        const TimeGrid& grid, bool focal = false) {
  const int n = grid.num_positions;
  const int c_total = head_out.class_logits.dim(1);
  if (head_out.class_logits.dim(0) != n || head_out.offsets.dim(0) != n)
    throw DimensionError("head output does not match the time grid");
  std::vector<double> onehot(static_cast<std::size_t>(n) * c_total, 0.0);
  for (int j = 0; j < n; ++j) onehot[static_cast<std::size_t>(j) * c_total + targets.class_target[j]] = 1.0;
  Tensor mask = Tensor::from_data({n, c_total}, std::move(onehot));

  TadLoss loss;
  Tensor logp = log_softmax(head_out.class_logits, -1);
  if (focal) {
    // (1-p)^2 modulation, gamma fixed at 2.
    Tensor focal_weight = square(add_scalar(neg(softmax(head_out.class_logits, -1)), 1.0));
    loss.cls = scale(sum(mul(mul(focal_weight, logp), mask)), -1.0 / n);
  } else {
    loss.cls = scale(sum(mul(logp, mask)), -1.0 / n);
  }

  int n_pos = targets.positive_count();
  if (n_pos == 0) {
    loss.reg = Tensor::scalar(0.0);
    return loss;
  }
  auto [pred_s, pred_e] = decode_interval_tensors(head_out.offsets, grid);
  std::vector<double> ts(n), te(n), pm(n);
  for (int j = 0; j < n; ++j) {
    if (targets.positive[j]) {
      ts[j] = grid.coord(j) - targets.offsets[j][0];
      te[j] = grid.coord(j) + targets.offsets[j][1];
      pm[j] = 1.0;
    } else {
      // Dummy valid interval; masked out of the loss.
      ts[j] = grid.coord(j);
      te[j] = grid.coord(j) + 1.0;
      pm[j] = 0.0;
    }
  }
  Tensor tgt_s = Tensor::from_data({n, 1}, std::move(ts));
  Tensor tgt_e = Tensor::from_data({n, 1}, std::move(te));
  Tensor pos_mask = Tensor::from_data({n, 1}, std::move(pm));
  Tensor giou = interval_giou(pred_s, pred_e, tgt_s, tgt_e);
  loss.reg = scale(sum(mul(sub(Tensor::ones({n, 1}), giou), pos_mask)), 1.0 / n_pos);
  return loss;
}

// ---------------------------------------------------------------------------
// Decoding

// Per grid position: class = argmax non-background probability, score = that
// probability; score threshold, per-class NMS, then top max_dets by score.
inline std::vector<ActionInstance> decode_predictions(const HeadOutput& head_out,
                                                      const TimeGrid& grid,
                                                      const EvalConfig& cfg) {
  const int n = grid.num_positions;
  const int c_total = head_out.class_logits.dim(1);
  const int num_classes = c_total - 1;
  std::vector<ActionInstance> candidates;
  auto logits = head_out.class_logits.values();
  auto offsets = head_out.offsets.values();
  double horizon = grid.horizon();
  for (int j = 0; j < n; ++j) {
    const double* row = logits.data() + static_cast<std::size_t>(j) * c_total;
    double mx = row[0];
    for (int c = 1; c < c_total; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < c_total; ++c) denom += std::exp(row[c] - mx);
    int best = 0;
    double best_p = -1.0;
    for (int c = 0; c < num_classes; ++c) {
      double p = std::exp(row[c] - mx) / denom;
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    if (best_p < cfg.score_thr) continue;
    double o_s = offsets[static_cast<std::size_t>(j) * 2];
    double o_e = offsets[static_cast<std::size_t>(j) * 2 + 1];
    ActionInstance inst;
    inst.start = std::max(0.0, grid.coord(j) - o_s);
    inst.end = std::min(horizon, grid.coord(j) + o_e);
    inst.class_id = best;
    inst.score = best_p;
    if (inst.start < inst.end) candidates.push_back(inst);
  }
  std::vector<ActionInstance> kept = nms(std::move(candidates), cfg.nms_tiou);
  if (static_cast<int>(kept.size()) > cfg.max_dets) kept.resize(cfg.max_dets);
  return kept;
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation

inline std::vector<std::vector<ActionInstance>> predict_dataset(
    const DetectorModel& model, const std::vector<SyntheticSequence>& sequences,
    const EvalConfig& cfg, int threads = 1) {
  std::vector<std::vector<ActionInstance>> preds(sequences.size());
  parallel_for(sequences.size(), threads, [&](std::size_t i) {
    HeadOutput out = model_forward(model, sequences[i].features);
    preds[i] = decode_predictions(out, model.grid(), cfg);
  });
  return preds;
}

inline MapResult evaluate_model(const DetectorModel& model,
                                const std::vector<SyntheticSequence>& sequences,
                                const EvalConfig& cfg, int threads = 1) {
  auto preds = predict_dataset(model, sequences, cfg, threads);
  std::vector<std::vector<ActionInstance>> gts(sequences.size());
  for (std::size_t i = 0; i < sequences.size(); ++i) gts[i] = sequences[i].instances;
  return mean_map(preds, gts, cfg);
}

}  // namespace blockdrop
