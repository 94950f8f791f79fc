#pragma once

// Block selection and the progressive drop loop: score every single-block
// subnet, drop the least important block, recover with LoRA-based alignment
// training, and repeat while validation performance holds up. Also the
// simultaneous-drop ablation and a magnitude-based width-pruning baseline.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "blockdrop/align.hpp"
#include "blockdrop/detector.hpp"
#include "blockdrop/perf.hpp"
#include "blockdrop/train.hpp"

namespace blockdrop {

enum class MetricKind { TRAIN_MAP, TRAIN_LOSS, BLOCK_IO_MSE };

inline std::string metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::TRAIN_MAP: return "train_map";
    case MetricKind::TRAIN_LOSS: return "train_loss";
    case MetricKind::BLOCK_IO_MSE: return "block_io_mse";
  }
  throw LookupError("bad metric kind");
}
inline MetricKind metric_from_name(const std::string& s) {
  if (s == "train_map") return MetricKind::TRAIN_MAP;
  if (s == "train_loss") return MetricKind::TRAIN_LOSS;
  if (s == "block_io_mse") return MetricKind::BLOCK_IO_MSE;
  throw ConfigError("unknown selection metric '" + s + "'");
}

struct CandidateScore {
  int block_original_index = 0;
  MetricKind metric_kind = MetricKind::TRAIN_MAP;
  // train_map: performance gap mAP(M0) - mAP(subnet); train_loss: mean total
  // loss; block_io_mse: mean input/output MSE of the block in the parent.
  double raw_value = 0.0;
  // Always -raw_value: the smaller the gap/loss/discrepancy, the safer the
  // block is to drop.
  double importance = 0.0;
};

struct RecoveryConfig {
  double lr = 1e-3;
  int steps = 200;
  double rank_ratio = 0.25;
  bool freeze_head = false;
  bool full_ft = false;
  std::vector<Proj> lora_targets{Proj::Q, Proj::K, Proj::V, Proj::O};
  LossWeights weights;
  std::uint64_t seed = 1;

  void validate() const {
    if (lr <= 0.0) throw ConfigError("recovery.lr must be positive");
    if (steps < 0) throw ConfigError("recovery.steps must be nonnegative");
    if (!(rank_ratio > 0.0 && rank_ratio <= 1.0))
      throw ConfigError("recovery.rank_ratio must be in (0,1]");
    if (lora_targets.empty()) throw ConfigError("recovery.lora_targets must not be empty");
  }
};

struct CompressConfig {
  MetricKind metric_kind = MetricKind::TRAIN_MAP;
  double epsilon = 0.0;  // allowed val-mAP slack below the uncompressed model
  int max_drops = 3;
  RecoveryConfig recovery;
  EvalConfig eval;
  int threads = 1;

  void validate() const {
    if (epsilon < 0.0) throw ConfigError("compress.epsilon must be nonnegative");
    if (max_drops < 0) throw ConfigError("compress.max_drops must be nonnegative");
    recovery.validate();
    eval.validate();
  }
};

struct DropReport {
  int iteration = 0;
  std::vector<CandidateScore> candidates;
  int chosen_block = -1;
  double pre_recovery_map = 0.0;   // val mAP@0.5 of the unrecovered subnet
  double post_recovery_map = 0.0;  // val mAP@0.5 after recovery
  std::int64_t backbone_macs = 0;
  double macs_ratio = 0.0;  // vs the uncompressed backbone
  double recovery_seconds = 0.0;
  std::vector<double> recovery_loss;
  std::size_t trainable_backbone_params = 0;  // during this iteration's recovery
};

struct ProgressiveResult {
  DetectorModel model;
  std::vector<DropReport> reports;
  std::vector<DetectorModel> iteration_models;  // post-recovery model per iteration
  std::vector<int> drop_order;  // drops embodied in the returned model
  double baseline_map = 0.0;
  std::int64_t baseline_backbone_macs = 0;
};

namespace detail {

inline double report_map(const MapResult& r) {
  for (std::size_t i = 0; i < r.thresholds.size(); ++i)
    if (std::abs(r.thresholds[i] - 0.5) < 1e-12) return r.per_threshold[i];
  return r.average;
}

inline std::uint64_t recovery_seed(std::uint64_t base, int iteration) {
  return splitmix64(base ^ splitmix64(0x5EC0 + static_cast<std::uint64_t>(iteration)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subnet enumeration and scoring

// One subnet per surviving block; untouched blocks share weight storage with
// the parent.
inline std::vector<std::pair<int, DetectorModel>> enumerate_subnets(const DetectorModel& model) {
  if (model.backbone.blocks.size() < 2)
    throw ContractError("subnet enumeration requires at least 2 blocks");
  std::vector<std::pair<int, DetectorModel>> out;
  out.reserve(model.backbone.blocks.size());
  for (int tag : model.backbone.identity_tags) {
    DetectorModel subnet = model;
    subnet.backbone = drop_block(model.backbone, tag);
    out.emplace_back(tag, std::move(subnet));
  }
  return out;
}

// Shared evaluation inputs for subnet scoring.
struct SelectionContext {
  const DetectorModel* teacher = nullptr;  // the uncompressed model
  double teacher_train_map = 0.0;          // mean mAP of the teacher on the train split
  const std::vector<TeacherContext>* teacher_ctx = nullptr;  // per train sequence
  const std::vector<LabelTargets>* targets = nullptr;        // per train sequence
  EvalConfig eval;
  LossWeights weights;
  int threads = 1;
};

inline std::vector<CandidateScore> evaluate_subnets(
    const DetectorModel& parent, const std::vector<std::pair<int, DetectorModel>>& subnets,
    const std::vector<SyntheticSequence>& train_data, MetricKind metric,
    const SelectionContext& ctx) {
  std::vector<CandidateScore> scores(subnets.size());
  switch (metric) {
    case MetricKind::TRAIN_MAP: {
      parallel_for(subnets.size(), ctx.threads, [&](std::size_t i) {
        MapResult r = evaluate_model(subnets[i].second, train_data, ctx.eval);
        double gap = ctx.teacher_train_map - r.average;
        scores[i] = {subnets[i].first, metric, gap, -gap};
      });
      break;
    }
    case MetricKind::TRAIN_LOSS: {
      if (!ctx.teacher_ctx || !ctx.targets)
        throw ContractError("train_loss scoring needs teacher contexts and targets");
      parallel_for(subnets.size(), ctx.threads, [&](std::size_t i) {
        NoGradScope no_grad;
        double total = 0.0;
        for (std::size_t s = 0; s < train_data.size(); ++s) {
          LossBreakdown l = student_loss(subnets[i].second, train_data[s], (*ctx.teacher_ctx)[s],
                                         (*ctx.targets)[s], ctx.weights);
          total += l.total.value();
        }
        double loss = total / train_data.size();
        scores[i] = {subnets[i].first, metric, loss, -loss};
      });
      break;
    }
    case MetricKind::BLOCK_IO_MSE: {
      // One parent forward per sequence; no subnet forward needed.
      const auto& tags = parent.backbone.identity_tags;
      std::vector<std::vector<double>> per_seq(train_data.size(),
                                               std::vector<double>(tags.size(), 0.0));
      parallel_for(train_data.size(), ctx.threads, [&](std::size_t s) {
        NoGradScope no_grad;
        FeatureTrace trace;
        Tensor embedded;
        model_forward(parent, train_data[s].features, &trace, nullptr, &embedded);
        Tensor input = embedded;
        for (std::size_t k = 0; k < tags.size(); ++k) {
          const Tensor& output = trace.entries[k].second;
          double mse = 0.0;
          auto in_v = input.values();
          auto out_v = output.values();
          for (std::size_t j = 0; j < in_v.size(); ++j) {
            double diff = out_v[j] - in_v[j];
            mse += diff * diff;
          }
          per_seq[s][k] = mse / in_v.size();
          input = output;
        }
      });
      for (std::size_t k = 0; k < tags.size(); ++k) {
        double mse = 0.0;
        for (std::size_t s = 0; s < train_data.size(); ++s) mse += per_seq[s][k];
        mse /= train_data.size();
        scores[k] = {tags[k], metric, mse, -mse};
      }
      break;
    }
  }
  return scores;
}

// Highest importance wins; ties break to the lowest original block index.
inline int select_drop_candidate(const std::vector<CandidateScore>& scores) {
  if (scores.empty()) throw ContractError("no candidate scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i].importance > scores[best].importance ||
        (scores[i].importance == scores[best].importance &&
         scores[i].block_original_index < scores[best].block_original_index))
      best = i;
  }
  return scores[best].block_original_index;
}

// ---------------------------------------------------------------------------
// Recovery

struct RecoveryResult {
  DetectorModel model;
  std::vector<double> loss_curve;
  std::size_t trainable_backbone_params = 0;
};

// Trains a private copy of the subnet against the frozen teacher with the
// total alignment loss, then folds the adapters back in. With full_ft the
// whole backbone trains instead of LoRA.
inline RecoveryResult recover(const DetectorModel& subnet, const DetectorModel& teacher,
                              const std::vector<SyntheticSequence>& train_data,
                              const RecoveryConfig& cfg,
                              const std::vector<TeacherContext>* teacher_ctx_cache = nullptr,
                              const std::vector<LabelTargets>* targets_cache = nullptr) {
  cfg.validate();
  if (train_data.empty()) throw ContractError("empty training set");
  RecoveryResult result;
  result.model = deep_copy(subnet);
  DetectorModel& model = result.model;

  Rng rng(cfg.seed);
  if (cfg.full_ft) {
    for_each_stack_tensor(model.backbone,
                          [](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  } else {
    Rng lora_rng = rng.derive(0x10A);
    insert_lora(model.backbone, cfg.rank_ratio, cfg.lora_targets, lora_rng);
  }
  for_each_head_tensor(model.head, [&](const std::string&, Tensor& t) {
    t.set_requires_grad(!cfg.freeze_head);
  });

  std::vector<TeacherContext> local_ctx;
  if (!teacher_ctx_cache) {
    local_ctx.reserve(train_data.size());
    for (const auto& seq : train_data) local_ctx.push_back(teacher_context(teacher, seq.features));
    teacher_ctx_cache = &local_ctx;
  }
  std::vector<LabelTargets> local_targets;
  if (!targets_cache) {
    local_targets = label_cache(train_data, model.grid(), model.config.num_classes);
    targets_cache = &local_targets;
  }

  result.trainable_backbone_params = trainable_backbone_parameters(model);
  AdamOptimizer opt(collect_trainable(model), {.lr = cfg.lr});
  Rng order_rng = rng.derive(0x0D4);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);
  result.loss_curve.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    if (step % static_cast<int>(order.size()) == 0) order_rng.shuffle(order);
    std::size_t idx = order[step % order.size()];
    Tape tape;
    Tensor loss;
    {
      auto scope = tape.activate();
      LossBreakdown l = student_loss(model, train_data[idx], (*teacher_ctx_cache)[idx],
                                     (*targets_cache)[idx], cfg.weights);
      loss = l.total;
    }
    double value = loss.value();
    if (!std::isfinite(value) || value > kDivergenceLimit)
      throw TrainingError("recovery training diverged (loss " + std::to_string(value) + ")",
                          step);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    result.loss_curve.push_back(value);
  }

  merge_lora(model.backbone);
  for_each_head_tensor(model.head,
                       [](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  return result;
}

// ---------------------------------------------------------------------------
// Progressive drop loop

// Iterates scoring -> drop -> recovery until post-recovery validation mAP
// falls below the uncompressed model's by more than epsilon, or max_drops is
// reached. Returns the last model that satisfied the criterion together with
// every iteration's report (including a final failed one).
inline ProgressiveResult progressive_drop(const DetectorModel& m0, const Dataset& data,
                                          const CompressConfig& cfg) {
  cfg.validate();
  ProgressiveResult result;
  result.model = m0;
  result.baseline_map = detail::report_map(evaluate_model(m0, data.val, cfg.eval, cfg.threads));
  result.baseline_backbone_macs = count_macs(m0).backbone_total;

  SelectionContext sctx;
  sctx.teacher = &m0;
  sctx.eval = cfg.eval;
  sctx.weights = cfg.recovery.weights;
  sctx.threads = cfg.threads;
  sctx.teacher_train_map = evaluate_model(m0, data.train, cfg.eval, cfg.threads).average;

  std::vector<TeacherContext> teacher_ctx;
  teacher_ctx.reserve(data.train.size());
  for (const auto& seq : data.train) teacher_ctx.push_back(teacher_context(m0, seq.features));
  std::vector<LabelTargets> targets = label_cache(data.train, m0.grid(), m0.config.num_classes);
  sctx.teacher_ctx = &teacher_ctx;
  sctx.targets = &targets;

  DetectorModel current = m0;
  for (int iter = 1; iter <= cfg.max_drops; ++iter) {
    if (current.backbone.blocks.size() < 2) break;
    auto subnets = enumerate_subnets(current);
    DropReport report;
    report.iteration = iter;
    report.candidates = evaluate_subnets(current, subnets, data.train, cfg.metric_kind, sctx);
    report.chosen_block = select_drop_candidate(report.candidates);

    DetectorModel subnet = current;
    subnet.backbone = drop_block(current.backbone, report.chosen_block);
    report.pre_recovery_map =
        detail::report_map(evaluate_model(subnet, data.val, cfg.eval, cfg.threads));

    RecoveryConfig rcfg = cfg.recovery;
    rcfg.seed = detail::recovery_seed(cfg.recovery.seed, iter);
    auto t0 = std::chrono::steady_clock::now();
    RecoveryResult rec = recover(subnet, m0, data.train, rcfg, &teacher_ctx, &targets);
    auto t1 = std::chrono::steady_clock::now();
    report.recovery_seconds = std::chrono::duration<double>(t1 - t0).count();
    report.recovery_loss = std::move(rec.loss_curve);
    report.trainable_backbone_params = rec.trainable_backbone_params;
    report.post_recovery_map =
        detail::report_map(evaluate_model(rec.model, data.val, cfg.eval, cfg.threads));
    report.backbone_macs = count_macs(rec.model).backbone_total;
    report.macs_ratio =
        static_cast<double>(report.backbone_macs) / result.baseline_backbone_macs;
    result.reports.push_back(std::move(report));
    result.iteration_models.push_back(rec.model);

    if (result.reports.back().post_recovery_map < result.baseline_map - cfg.epsilon) break;
    current = rec.model;
    result.drop_order.push_back(result.reports.back().chosen_block);
    result.model = current;
  }
  return result;
}

// Removes all listed blocks at once, then runs a single recovery phase
// against the input model as teacher. Used by the progressive-vs-simultaneous
// ablation.
inline DetectorModel simultaneous_drop(const DetectorModel& model,
                                       const std::vector<int>& block_indices,
                                       const std::vector<SyntheticSequence>& train_data,
                                       const RecoveryConfig& cfg) {
  for (std::size_t i = 0; i < block_indices.size(); ++i)
    for (std::size_t j = i + 1; j < block_indices.size(); ++j)
      if (block_indices[i] == block_indices[j])
        throw ContractError("duplicate block index in simultaneous drop");
  DetectorModel subnet = model;
  for (int tag : block_indices) subnet.backbone = drop_block(subnet.backbone, tag);
  RecoveryConfig rcfg = cfg;
  rcfg.seed = detail::recovery_seed(cfg.seed, 1);
  return recover(subnet, model, train_data, rcfg).model;
}

// ---------------------------------------------------------------------------
// Width-pruning baseline

// Keeps the given number of FFN hidden channels per block, selected by
// largest L2 column norm of w_ff1; kept channels preserve their order.
inline DetectorModel width_prune_channels(const DetectorModel& model, int channels_per_block) {
  if (channels_per_block < 1) throw ConfigError("channel count must be positive");
  DetectorModel out = model;
  for (auto& block : out.backbone.blocks) {
    const int d = block.width();
    const int h = block.ffn_hidden();
    if (channels_per_block > h)
      throw ConfigError("cannot keep more channels than the block has");
    if (channels_per_block == h) continue;
    std::vector<double> norms(h, 0.0);
    auto w1 = block.w_ff1.values();
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < h; ++j) {
        double v = w1[static_cast<std::size_t>(i) * h + j];
        norms[j] += v * v;
      }
    std::vector<int> idx(h);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return norms[a] > norms[b]; });
    idx.resize(channels_per_block);
    std::sort(idx.begin(), idx.end());

    std::vector<double> new_w1(static_cast<std::size_t>(d) * channels_per_block);
    std::vector<double> new_w2(static_cast<std::size_t>(channels_per_block) * d);
    auto w2 = block.w_ff2.values();
    for (int i = 0; i < d; ++i)
      for (int jj = 0; jj < channels_per_block; ++jj)
        new_w1[static_cast<std::size_t>(i) * channels_per_block + jj] =
            w1[static_cast<std::size_t>(i) * h + idx[jj]];
    for (int jj = 0; jj < channels_per_block; ++jj)
      for (int i = 0; i < d; ++i)
        new_w2[static_cast<std::size_t>(jj) * d + i] =
            w2[static_cast<std::size_t>(idx[jj]) * d + i];
    bool rg = block.w_ff1.requires_grad();
    block.w_ff1 = Tensor::from_data({d, channels_per_block}, std::move(new_w1), rg);
    block.w_ff2 = Tensor::from_data({channels_per_block, d}, std::move(new_w2), rg);
  }
  return out;
}

// Uniformly shrinks FFN hidden widths until backbone MACs fall to at most
// ratio * original; attention width is untouched.
inline DetectorModel width_prune_baseline(const DetectorModel& model, double target_macs_ratio) {
  if (!(target_macs_ratio > 0.0 && target_macs_ratio <= 1.0))
    throw ConfigError("target MACs ratio must be in (0,1]");
  if (target_macs_ratio == 1.0) return model;
  const std::int64_t T = model.config.seq_len;
  const std::int64_t d = model.config.width;
  // Per-block attention cost is fixed; only the FFN term 2*T*d*h shrinks.
  const std::int64_t attn = 4 * T * d * d + 2 * T * T * d;
  std::int64_t total = count_macs(model).backbone_total;
  const auto blocks = static_cast<std::int64_t>(model.backbone.blocks.size());
  double target_per_block = target_macs_ratio * static_cast<double>(total) / blocks;
  double ffn_budget = target_per_block - static_cast<double>(attn);
  int channels = static_cast<int>(std::floor(ffn_budget / (2.0 * T * d)));
  if (channels < 1)
    throw ConfigError("target MACs ratio is unreachable by FFN channel pruning");
  return width_prune_channels(model, channels);
}

}  // namespace blockdrop
