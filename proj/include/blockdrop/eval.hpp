#pragma once

// 1-D detection metrics: temporal IoU, generalized IoU, per-class NMS,
// average precision with all-point interpolation, and mean AP over a set of
// tIoU thresholds.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "blockdrop/common.hpp"

namespace blockdrop {

// A predicted or ground-truth action interval. Ground truth carries score 1.
struct ActionInstance {
  double start = 0.0;
  double end = 0.0;
  int class_id = 0;
  double score = 1.0;
};

inline void check_interval(const ActionInstance& a) {
  if (!(a.start < a.end)) throw ContractError("degenerate interval: start must be < end");
}

inline double tiou(const ActionInstance& a, const ActionInstance& b) {
  check_interval(a);
  check_interval(b);
  double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return inter / uni;
}

// IoU minus the normalized empty span of the smallest enclosing interval.
inline double giou_1d(const ActionInstance& a, const ActionInstance& b) {
  check_interval(a);
  check_interval(b);
  double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  double uni = (a.end - a.start) + (b.end - b.start) - inter;
  double enclose = std::max(a.end, b.end) - std::min(a.start, b.start);
  return inter / uni - (enclose - uni) / enclose;
}

namespace detail {

// Score-descending order with a deterministic tie-break.
inline bool score_order(const ActionInstance& a, const ActionInstance& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.start != b.start) return a.start < b.start;
  if (a.end != b.end) return a.end < b.end;
  return a.class_id < b.class_id;
}

}  // namespace detail

// Greedy per-class suppression: keep in descending score order, drop any
// instance overlapping a kept same-class instance above the threshold.
inline std::vector<ActionInstance> nms(std::vector<ActionInstance> instances, double tiou_thr) {
  std::stable_sort(instances.begin(), instances.end(), detail::score_order);
  std::vector<ActionInstance> kept;
  for (const ActionInstance& cand : instances) {
    bool suppressed = false;
    for (const ActionInstance& k : kept) {
      if (k.class_id == cand.class_id && tiou(k, cand) > tiou_thr) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

struct EvalConfig {
  std::vector<double> tiou_thresholds{0.3, 0.4, 0.5, 0.6, 0.7};
  double nms_tiou = 0.5;
  double score_thr = 0.05;
  int max_dets = 50;

  void validate() const {
    if (tiou_thresholds.empty()) throw ConfigError("tiou_thresholds must not be empty");
    for (std::size_t i = 0; i < tiou_thresholds.size(); ++i) {
      double t = tiou_thresholds[i];
      if (t <= 0.0 || t >= 1.0) throw ConfigError("tiou thresholds must lie in (0,1)");
      if (i > 0 && t <= tiou_thresholds[i - 1])
        throw ConfigError("tiou thresholds must be sorted ascending");
    }
    if (max_dets <= 0) throw ConfigError("max_dets must be positive");
  }
};

namespace detail {

struct ScoredMatch {
  double score;
  bool tp;
};

// PASCAL-style greedy matching for one class across all sequences:
// predictions in descending score order claim the highest-overlap unmatched
// ground truth of the same sequence.
inline std::vector<ScoredMatch> match_class(
    const std::vector<std::vector<ActionInstance>>& preds_by_seq,
    const std::vector<std::vector<ActionInstance>>& gts_by_seq, int class_id, double thr,
    std::size_t* gt_count) {
  struct Ref {
    std::size_t seq;
    ActionInstance inst;
  };
  std::vector<Ref> preds;
  std::vector<std::vector<bool>> gt_used(gts_by_seq.size());
  *gt_count = 0;
  for (std::size_t s = 0; s < gts_by_seq.size(); ++s) {
    std::size_t n = 0;
    for (const auto& g : gts_by_seq[s])
      if (g.class_id == class_id) ++n;
    gt_used[s].assign(gts_by_seq[s].size(), false);
    *gt_count += n;
  }
  for (std::size_t s = 0; s < preds_by_seq.size(); ++s)
    for (const auto& p : preds_by_seq[s])
      if (p.class_id == class_id) preds.push_back({s, p});
  std::stable_sort(preds.begin(), preds.end(), [](const Ref& a, const Ref& b) {
    if (a.inst.score != b.inst.score) return a.inst.score > b.inst.score;
    if (a.seq != b.seq) return a.seq < b.seq;
    return score_order(a.inst, b.inst);
  });

  std::vector<ScoredMatch> out;
  out.reserve(preds.size());
  for (const Ref& p : preds) {
    const auto& gts = gts_by_seq[p.seq];
    double best = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (gts[i].class_id != class_id || gt_used[p.seq][i]) continue;
      double ov = tiou(p.inst, gts[i]);
      if (ov > best) {
        best = ov;
        best_i = i;
      }
    }
    bool tp = best >= thr;
    if (tp) gt_used[p.seq][best_i] = true;
    out.push_back({p.inst.score, tp});
  }
  return out;
}

// Area under the precision-recall curve using the precision envelope.
inline double ap_from_matches(const std::vector<ScoredMatch>& matches, std::size_t gt_count) {
  if (gt_count == 0) return 0.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& m : matches) {
    if (m.tp)
      ++tp;
    else
      ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    double env = 0.0;
    for (std::size_t j = i; j < precision.size(); ++j) env = std::max(env, precision[j]);
    ap += (recall[i] - prev_recall) * env;
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace detail

// AP for one class at one threshold. Predictions are sorted internally.
inline double average_precision(const std::vector<std::vector<ActionInstance>>& preds_by_seq,
                                const std::vector<std::vector<ActionInstance>>& gts_by_seq,
                                int class_id, double tiou_thr) {
  std::size_t gt_count = 0;
  auto matches = detail::match_class(preds_by_seq, gts_by_seq, class_id, tiou_thr, &gt_count);
  return detail::ap_from_matches(matches, gt_count);
}

struct MapResult {
  std::vector<double> thresholds;
  std::vector<double> per_threshold;
  double average = 0.0;

  double at(double thr) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (std::abs(thresholds[i] - thr) < 1e-12) return per_threshold[i];
    throw LookupError("no mAP recorded at threshold " + std::to_string(thr));
  }
};

// mAP per threshold = mean AP over classes present in the ground truth;
// classes without ground truth are excluded from the mean.
inline MapResult mean_map(const std::vector<std::vector<ActionInstance>>& preds_by_seq,
                          const std::vector<std::vector<ActionInstance>>& gts_by_seq,
                          const EvalConfig& cfg) {
  cfg.validate();
  if (preds_by_seq.size() != gts_by_seq.size())
    throw DimensionError("prediction and ground-truth sequence counts differ");
  std::vector<int> classes;
  for (const auto& seq : gts_by_seq)
    for (const auto& g : seq) classes.push_back(g.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  MapResult result;
  result.thresholds = cfg.tiou_thresholds;
  for (double thr : cfg.tiou_thresholds) {
    double sum = 0.0;
    for (int c : classes) sum += average_precision(preds_by_seq, gts_by_seq, c, thr);
    result.per_threshold.push_back(classes.empty() ? 0.0 : sum / classes.size());
  }
  double total = 0.0;
  for (double v : result.per_threshold) total += v;
  result.average = result.per_threshold.empty() ? 0.0 : total / result.per_threshold.size();
  return result;
}

}  // namespace blockdrop
