#pragma once

// Teacher-student alignment for recovery training: cross-depth feature
// alignment between surviving blocks and the uncompressed teacher, prediction
// alignment on class scores (KL) and boundaries (GIoU), and the total loss
// that combines them with the task losses.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "blockdrop/detector.hpp"

namespace blockdrop {

// Correspondence between student block positions and teacher original
// indices. The teacher is always the uncompressed model, so a surviving
// block's identity tag is its teacher index; dropped indices are absent.
struct BlockMap {
  std::vector<std::pair<int, int>> pairs;  // (student position, teacher original index)

  static BlockMap from_tags(const std::vector<int>& student_tags) {
    BlockMap map;
    for (std::size_t i = 0; i < student_tags.size(); ++i)
      map.pairs.emplace_back(static_cast<int>(i), student_tags[i]);
    return map;
  }
  std::size_t size() const { return pairs.size(); }
};

// Mean over mapped blocks of the per-block MSE between teacher and student
// outputs. With a single dropped block this equals the (1/(I-1)) sum over the
// surviving indices.
inline Tensor feature_alignment_loss(const FeatureTrace& teacher_trace,
                                     const FeatureTrace& student_trace, const BlockMap& map) {
  if (map.size() == 0) return Tensor::scalar(0.0);
  Tensor acc;
  for (const auto& [pos, tag] : map.pairs) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= student_trace.size())
      throw MappingError("student position " + std::to_string(pos) + " outside trace");
    const auto& [student_tag, student_out] = student_trace.entries[pos];
    if (student_tag != tag)
      throw MappingError("student block at position " + std::to_string(pos) +
                         " carries tag " + std::to_string(student_tag) + ", expected " +
                         std::to_string(tag));
    const Tensor* teacher_out = teacher_trace.find(tag);
    if (!teacher_out)
      throw MappingError("teacher trace has no entry for block " + std::to_string(tag));
    if (teacher_out->shape() != student_out.shape())
      throw MappingError("teacher/student feature shapes differ for block " + std::to_string(tag));
    Tensor mse = mean(square(sub(*teacher_out, student_out)));
    acc = acc.defined() ? add(acc, mse) : mse;
  }
  return scale(acc, 1.0 / static_cast<double>(map.size()));
}

// Mean over timesteps of KL(softmax(teacher) || softmax(student)). Gradients
// flow only through the student logits.
inline Tensor kl_alignment_loss(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape())
    throw DimensionError("teacher and student logits must have equal shapes");
  const int rows = teacher_logits.dim(0);
  const int cols = teacher_logits.dim(1);
  // Teacher entropy term and probabilities, computed outside the graph.
  std::vector<double> probs(teacher_logits.numel());
  double teacher_term = 0.0;
  auto tv = teacher_logits.values();
  for (int r = 0; r < rows; ++r) {
    const double* row = tv.data() + static_cast<std::size_t>(r) * cols;
    double mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) denom += std::exp(row[c] - mx);
    double log_denom = std::log(denom);
    for (int c = 0; c < cols; ++c) {
      double logp = row[c] - mx - log_denom;
      double p = std::exp(logp);
      probs[static_cast<std::size_t>(r) * cols + c] = p;
      if (p > 0.0) teacher_term += p * logp;
    }
  }
  Tensor p_teacher = Tensor::from_data(teacher_logits.shape(), std::move(probs));
  Tensor cross = sum(mul(p_teacher, log_softmax(student_logits, -1)));
  return add_scalar(scale(cross, -1.0 / rows), teacher_term / rows);
}

// Mean (1 - GIoU) between teacher and student intervals over the positive
// grid positions; zero when there is no positive.
inline Tensor giou_alignment_loss(const std::pair<Tensor, Tensor>& teacher_intervals,
                                  const std::pair<Tensor, Tensor>& student_intervals,
                                  const std::vector<char>& positive_mask) {
  const int n = teacher_intervals.first.dim(0);
  if (static_cast<int>(positive_mask.size()) != n)
    throw DimensionError("positive mask length does not match interval count");
  int n_pos = 0;
  for (char p : positive_mask) n_pos += p != 0;
  if (n_pos == 0) return Tensor::scalar(0.0);
  std::vector<double> mask_values(n);
  for (int i = 0; i < n; ++i) mask_values[i] = positive_mask[i] ? 1.0 : 0.0;
  Tensor mask = Tensor::from_data({n, 1}, std::move(mask_values));
  Tensor giou = interval_giou(teacher_intervals.first, teacher_intervals.second,
                              student_intervals.first, student_intervals.second);
  return scale(sum(mul(sub(Tensor::ones({n, 1}), giou), mask)), 1.0 / n_pos);
}

struct LossWeights {
  double feature = 1.0;
  double pred_cls = 1.0;
  double pred_reg = 1.0;
  double cls = 1.0;
  double reg = 1.0;
};

namespace detail {

inline void require_finite_term(const Tensor& t, const char* name) {
  if (!std::isfinite(t.value()))
    throw NumericError(std::string("loss term '") + name + "' is not finite");
}

}  // namespace detail

// Weighted sum of the five training terms; unweighted it is the plain sum
// L_pc + L_pr + L_f + L_cls + L_reg.
inline Tensor total_loss(const Tensor& pred_cls, const Tensor& pred_reg, const Tensor& feature,
                         const Tensor& cls, const Tensor& reg, const LossWeights& w = {}) {
  detail::require_finite_term(pred_cls, "pred_cls");
  detail::require_finite_term(pred_reg, "pred_reg");
  detail::require_finite_term(feature, "feature");
  detail::require_finite_term(cls, "cls");
  detail::require_finite_term(reg, "reg");
  Tensor acc = Tensor::scalar(0.0);
  if (w.pred_cls != 0.0) acc = add(acc, scale(pred_cls, w.pred_cls));
  if (w.pred_reg != 0.0) acc = add(acc, scale(pred_reg, w.pred_reg));
  if (w.feature != 0.0) acc = add(acc, scale(feature, w.feature));
  if (w.cls != 0.0) acc = add(acc, scale(cls, w.cls));
  if (w.reg != 0.0) acc = add(acc, scale(reg, w.reg));
  return acc;
}

// ---------------------------------------------------------------------------
// Per-sequence teacher cache and the full training loss

// Frozen teacher outputs for one sequence, computed once outside any tape.
struct TeacherContext {
  FeatureTrace trace;
  Tensor logits;
  std::pair<Tensor, Tensor> intervals;
};

inline TeacherContext teacher_context(const DetectorModel& teacher, const Tensor& features) {
  NoGradScope no_grad;
  TeacherContext ctx;
  HeadOutput out = model_forward(teacher, features, &ctx.trace);
  ctx.logits = out.class_logits;
  ctx.intervals = decode_interval_tensors(out.offsets, teacher.grid());
  return ctx;
}

struct LossBreakdown {
  Tensor total, cls, reg, feature, pred_cls, pred_reg;
};

// Runs the student forward (recorded on the active tape) and assembles the
// total training loss against a cached teacher context.
inline LossBreakdown student_loss(const DetectorModel& student, const SyntheticSequence& seq,
                                  const TeacherContext& teacher_ctx, const LabelTargets& targets,
                                  const LossWeights& weights) {
  LossBreakdown out;
  FeatureTrace student_trace;
  bool need_trace = weights.feature != 0.0;
  HeadOutput head_out =
      model_forward(student, seq.features, need_trace ? &student_trace : nullptr);
  TimeGrid grid = student.grid();
  TadLoss task = tad_loss(head_out, targets, grid);
  out.cls = task.cls;
  out.reg = task.reg;
  out.feature = need_trace
                    ? feature_alignment_loss(teacher_ctx.trace, student_trace,
                                             BlockMap::from_tags(student.backbone.identity_tags))
                    : Tensor::scalar(0.0);
  out.pred_cls = weights.pred_cls != 0.0
                     ? kl_alignment_loss(teacher_ctx.logits, head_out.class_logits)
                     : Tensor::scalar(0.0);
  out.pred_reg = weights.pred_reg != 0.0
                     ? giou_alignment_loss(teacher_ctx.intervals,
                                           decode_interval_tensors(head_out.offsets, grid),
                                           targets.positive)
                     : Tensor::scalar(0.0);
  out.total = total_loss(out.pred_cls, out.pred_reg, out.feature, out.cls, out.reg, weights);
  return out;
}

}  // namespace blockdrop
