#pragma once

// Run configuration: one JSON document covering task, model, training,
// compression, and evaluation. Parsing is strict — unknown keys are rejected
// so typos never silently fall back to defaults. One global seed derives the
// dataset, initialization, and training-order seeds.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "blockdrop/checkpoint.hpp"
#include "blockdrop/compress.hpp"

namespace blockdrop {

namespace detail {

class StrictObject {
 public:
  StrictObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    touched_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const std::exception&) {
      throw ConfigError("bad value for " + path_ + "." + key);
    }
  }

  bool has(const char* key) {
    touched_.insert(key);
    return j_.contains(key);
  }

  const Json& child(const char* key) { return j_.at(key); }

  void done() const {
    for (const auto& [key, value] : j_.items())
      if (!touched_.contains(key)) throw ConfigError("unknown key " + path_ + "." + key);
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> touched_;
};

}  // namespace detail

struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = hardware concurrency
  TaskConfig task;
  ModelConfig model;
  TrainConfig train;
  CompressConfig compress;
  EvalConfig eval;

  int resolved_threads() const {
    if (threads > 0) return threads;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }

  std::uint64_t init_seed() const { return splitmix64(seed ^ splitmix64(0x1217)); }

  // Propagates shared dimensions and derived seeds, then validates.
  void finalize() {
    model.d_in = task.d_in;
    model.num_classes = task.num_classes;
    model.seq_len = task.seq_len;
    task.seed = seed;
    train.seed = splitmix64(seed ^ splitmix64(0x7124));
    compress.recovery.seed = splitmix64(seed ^ splitmix64(0x2EC0));
    compress.eval = eval;
    compress.threads = resolved_threads();
    task.validate();
    model.validate();
    train.validate();
    compress.validate();
    eval.validate();
  }
};

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig cfg;
  detail::StrictObject root(j, "config");
  root.get("seed", cfg.seed);
  root.get("threads", cfg.threads);
  if (root.has("task")) {
    detail::StrictObject o(root.child("task"), "task");
    o.get("num_seq", cfg.task.num_seq);
    o.get("seq_len", cfg.task.seq_len);
    o.get("d_in", cfg.task.d_in);
    o.get("num_classes", cfg.task.num_classes);
    o.get("noise_sigma", cfg.task.noise_sigma);
    o.get("pattern_scale", cfg.task.pattern_scale);
    o.get("min_len", cfg.task.min_len);
    o.get("max_len", cfg.task.max_len);
    o.get("max_instances", cfg.task.max_instances);
    o.done();
  }
  if (root.has("model")) {
    detail::StrictObject o(root.child("model"), "model");
    o.get("depth", cfg.model.depth);
    o.get("width", cfg.model.width);
    o.get("heads", cfg.model.heads);
    o.get("head_depth", cfg.model.head_depth);
    o.get("pool_factor", cfg.model.pool_factor);
    o.get("ffn_multiple", cfg.model.ffn_multiple);
    if (o.has("activation"))
      cfg.model.activation = activation_from_name(o.child("activation").get<std::string>());
    o.get("planted_identity_blocks", cfg.model.planted_identity_blocks);
    o.get("planted_scale", cfg.model.planted_scale);
    o.done();
  }
  if (root.has("train")) {
    detail::StrictObject o(root.child("train"), "train");
    o.get("lr", cfg.train.lr);
    o.get("steps", cfg.train.steps);
    o.get("focal", cfg.train.focal);
    o.done();
  }
  if (root.has("compress")) {
    detail::StrictObject o(root.child("compress"), "compress");
    if (o.has("metric"))
      cfg.compress.metric_kind = metric_from_name(o.child("metric").get<std::string>());
    o.get("epsilon", cfg.compress.epsilon);
    o.get("max_drops", cfg.compress.max_drops);
    if (o.has("recovery")) {
      detail::StrictObject r(o.child("recovery"), "compress.recovery");
      r.get("lr", cfg.compress.recovery.lr);
      r.get("steps", cfg.compress.recovery.steps);
      r.get("rank_ratio", cfg.compress.recovery.rank_ratio);
      r.get("freeze_head", cfg.compress.recovery.freeze_head);
      r.get("full_ft", cfg.compress.recovery.full_ft);
      if (r.has("lora_targets")) {
        cfg.compress.recovery.lora_targets.clear();
        for (const auto& t : r.child("lora_targets"))
          cfg.compress.recovery.lora_targets.push_back(proj_from_name(t.get<std::string>()));
      }
      if (r.has("weights")) {
        detail::StrictObject w(r.child("weights"), "compress.recovery.weights");
        w.get("feature", cfg.compress.recovery.weights.feature);
        w.get("pred_cls", cfg.compress.recovery.weights.pred_cls);
        w.get("pred_reg", cfg.compress.recovery.weights.pred_reg);
        w.get("cls", cfg.compress.recovery.weights.cls);
        w.get("reg", cfg.compress.recovery.weights.reg);
        w.done();
      }
      r.done();
    }
    o.done();
  }
  if (root.has("eval")) {
    detail::StrictObject o(root.child("eval"), "eval");
    o.get("tiou_thresholds", cfg.eval.tiou_thresholds);
    o.get("nms_tiou", cfg.eval.nms_tiou);
    o.get("score_thr", cfg.eval.score_thr);
    o.get("max_dets", cfg.eval.max_dets);
    o.done();
  }
  root.done();
  cfg.finalize();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(detail::read_json(path));
}

inline Json run_config_to_json(const RunConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["task"] = {{"num_seq", cfg.task.num_seq},
               {"seq_len", cfg.task.seq_len},
               {"d_in", cfg.task.d_in},
               {"num_classes", cfg.task.num_classes},
               {"noise_sigma", cfg.task.noise_sigma},
               {"pattern_scale", cfg.task.pattern_scale},
               {"min_len", cfg.task.min_len},
               {"max_len", cfg.task.max_len},
               {"max_instances", cfg.task.max_instances}};
  j["model"] = {{"depth", cfg.model.depth},
                {"width", cfg.model.width},
                {"heads", cfg.model.heads},
                {"head_depth", cfg.model.head_depth},
                {"pool_factor", cfg.model.pool_factor},
                {"ffn_multiple", cfg.model.ffn_multiple},
                {"activation", activation_name(cfg.model.activation)},
                {"planted_identity_blocks", cfg.model.planted_identity_blocks},
                {"planted_scale", cfg.model.planted_scale}};
  j["train"] = {{"lr", cfg.train.lr}, {"steps", cfg.train.steps}, {"focal", cfg.train.focal}};
  Json targets = Json::array();
  for (Proj p : cfg.compress.recovery.lora_targets) targets.push_back(proj_name(p));
  j["compress"] = {{"metric", metric_name(cfg.compress.metric_kind)},
                   {"epsilon", cfg.compress.epsilon},
                   {"max_drops", cfg.compress.max_drops},
                   {"recovery",
                    {{"lr", cfg.compress.recovery.lr},
                     {"steps", cfg.compress.recovery.steps},
                     {"rank_ratio", cfg.compress.recovery.rank_ratio},
                     {"freeze_head", cfg.compress.recovery.freeze_head},
                     {"full_ft", cfg.compress.recovery.full_ft},
                     {"lora_targets", targets},
                     {"weights",
                      {{"feature", cfg.compress.recovery.weights.feature},
                       {"pred_cls", cfg.compress.recovery.weights.pred_cls},
                       {"pred_reg", cfg.compress.recovery.weights.pred_reg},
                       {"cls", cfg.compress.recovery.weights.cls},
                       {"reg", cfg.compress.recovery.weights.reg}}}}}};
  j["eval"] = {{"tiou_thresholds", cfg.eval.tiou_thresholds},
               {"nms_tiou", cfg.eval.nms_tiou},
               {"score_thr", cfg.eval.score_thr},
               {"max_dets", cfg.eval.max_dets}};
  return j;
}

}  // namespace blockdrop
