#pragma once

// Command implementations behind the blockdrop CLI: train, compress,
// evaluate, bench, and the ablation suites. Logs go to stderr; data goes to
// files under the chosen output directory only.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "blockdrop/checkpoint.hpp"
#include "blockdrop/compress.hpp"
#include "blockdrop/config.hpp"
#include "blockdrop/perf.hpp"

namespace blockdrop {

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string drop_order_str(const std::vector<int>& order) {
  std::string s = "[";
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(order[i]);
  }
  return s + "]";
}

}  // namespace detail

inline Json map_result_to_json(const MapResult& r) {
  Json j;
  j["thresholds"] = r.thresholds;
  j["per_threshold"] = r.per_threshold;
  j["average"] = r.average;
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof(key), "map@%.2f", r.thresholds[i]);
    j[key] = r.per_threshold[i];
  }
  return j;
}

// ---------------------------------------------------------------------------
// Prediction CSV (sequence_id,start,end,class_id,score)

inline void write_predictions_csv(const std::filesystem::path& path,
                                  const std::vector<std::vector<ActionInstance>>& preds_by_seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "sequence_id,start,end,class_id,score\n";
  for (std::size_t s = 0; s < preds_by_seq.size(); ++s)
    for (const auto& p : preds_by_seq[s])
      out << s << ',' << detail::fmt_double(p.start) << ',' << detail::fmt_double(p.end) << ','
          << p.class_id << ',' << detail::fmt_double(p.score) << '\n';
}

inline std::vector<std::vector<ActionInstance>> read_predictions_csv(
    const std::filesystem::path& path, std::size_t num_sequences) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::vector<ActionInstance>> preds(num_sequences);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty predictions file");
  if (line != "sequence_id,start,end,class_id,score")
    throw IoError("unexpected predictions CSV header: " + line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 5)
      throw IoError("bad predictions CSV row at line " + std::to_string(line_no));
    std::size_t seq = std::stoul(fields[0]);
    if (seq >= num_sequences)
      throw IoError("sequence_id out of range at line " + std::to_string(line_no));
    ActionInstance inst;
    inst.start = std::stod(fields[1]);
    inst.end = std::stod(fields[2]);
    inst.class_id = std::stoi(fields[3]);
    inst.score = std::stod(fields[4]);
    preds[seq].push_back(inst);
  }
  return preds;
}

// ---------------------------------------------------------------------------
// Drop reports

inline Json drop_report_to_json(const DropReport& r) {
  Json j;
  j["iteration"] = r.iteration;
  j["chosen_block"] = r.chosen_block;
  Json cands = Json::array();
  for (const auto& c : r.candidates)
    cands.push_back({{"block", c.block_original_index},
                     {"metric", metric_name(c.metric_kind)},
                     {"raw_value", c.raw_value},
                     {"importance", c.importance}});
  j["candidates"] = std::move(cands);
  j["pre_recovery_map"] = r.pre_recovery_map;
  j["post_recovery_map"] = r.post_recovery_map;
  j["backbone_macs"] = r.backbone_macs;
  j["macs_ratio"] = r.macs_ratio;
  j["recovery_seconds"] = r.recovery_seconds;
  j["trainable_backbone_params"] = r.trainable_backbone_params;
  j["recovery_loss"] = r.recovery_loss;
  return j;
}

inline void write_report_files(const ProgressiveResult& result, MetricKind metric,
                               const std::filesystem::path& out_dir) {
  Json j;
  j["baseline_map"] = result.baseline_map;
  j["baseline_backbone_macs"] = result.baseline_backbone_macs;
  j["metric"] = metric_name(metric);
  j["drop_order"] = result.drop_order;
  Json iters = Json::array();
  for (const auto& r : result.reports) iters.push_back(drop_report_to_json(r));
  j["iterations"] = std::move(iters);
  detail::write_text(out_dir / "report.json", j.dump(2) + "\n");

  std::ofstream csv(out_dir / "report.csv", std::ios::binary);
  if (!csv) throw IoError("cannot write report.csv");
  csv << "iteration,chosen_block,metric,pre_map,post_map,macs,macs_ratio\n";
  for (const auto& r : result.reports)
    csv << r.iteration << ',' << r.chosen_block << ',' << metric_name(metric) << ','
        << detail::fmt_double(r.pre_recovery_map) << ','
        << detail::fmt_double(r.post_recovery_map) << ',' << r.backbone_macs << ','
        << detail::fmt_double(r.macs_ratio) << '\n';
}

// ---------------------------------------------------------------------------
// Commands

inline void run_train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::cerr << "[train] generating dataset (seed " << cfg.seed << ")\n";
  Dataset ds = generate_dataset(cfg.task);
  std::cerr << "[train] building " << cfg.model.depth << "-block detector\n";
  DetectorModel model = build_detector(cfg.model, Rng(cfg.init_seed()));
  std::cerr << "[train] training for " << cfg.train.steps << " steps\n";
  std::vector<double> curve = train_baseline(model, ds.train, cfg.train);
  MapResult val = evaluate_model(model, ds.val, cfg.eval, cfg.resolved_threads());
  std::cerr << "[train] val mAP avg " << val.average << "\n";

  save_model(model, out_dir / "checkpoint");
  save_dataset(ds, cfg.task, out_dir / "dataset");
  detail::write_text(out_dir / "config.json", run_config_to_json(cfg).dump(2) + "\n");
  Json metrics;
  metrics["val"] = map_result_to_json(val);
  metrics["train_steps"] = cfg.train.steps;
  metrics["train_loss_final"] = curve.empty() ? 0.0 : curve.back();
  detail::write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
}

struct LoadedBaseline {
  DetectorModel model;
  Dataset data;
  TaskConfig task;
};

// Loads the artifacts written by run_train and checks them against the
// active config.
inline LoadedBaseline load_baseline(const RunConfig& cfg, const std::filesystem::path& dir) {
  LoadedBaseline out{load_model(dir / "checkpoint"), {}, {}};
  auto [ds, task] = load_dataset(dir / "dataset");
  out.data = std::move(ds);
  out.task = task;
  const ModelConfig& a = out.model.config;
  const ModelConfig& b = cfg.model;
  if (a.width != b.width || a.heads != b.heads || a.head_depth != b.head_depth ||
      a.pool_factor != b.pool_factor || a.d_in != b.d_in || a.num_classes != b.num_classes ||
      a.seq_len != b.seq_len)
    throw ConfigError("checkpoint architecture does not match the config");
  if (task.seed != cfg.task.seed || task.num_seq != cfg.task.num_seq ||
      task.seq_len != cfg.task.seq_len || task.num_classes != cfg.task.num_classes)
    throw ConfigError("stored dataset does not match the config task section");
  return out;
}

inline void run_compress(const RunConfig& cfg, const std::filesystem::path& baseline_dir,
                         const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  LoadedBaseline base = load_baseline(cfg, baseline_dir);
  std::cerr << "[compress] metric " << metric_name(cfg.compress.metric_kind) << ", max "
            << cfg.compress.max_drops << " drops\n";
  ProgressiveResult result = progressive_drop(base.model, base.data, cfg.compress);
  for (const auto& r : result.reports)
    std::cerr << "[compress] iter " << r.iteration << ": dropped block " << r.chosen_block
              << " (val mAP " << r.pre_recovery_map << " -> " << r.post_recovery_map << ")\n";
  std::cerr << "[compress] drop order " << detail::drop_order_str(result.drop_order) << "\n";

  for (std::size_t i = 0; i < result.iteration_models.size(); ++i)
    save_model(result.iteration_models[i],
               out_dir / ("iter" + std::to_string(i + 1)) / "checkpoint");
  save_model(result.model, out_dir / "final" / "checkpoint");
  detail::write_text(out_dir / "config.json", run_config_to_json(cfg).dump(2) + "\n");
  write_report_files(result, cfg.compress.metric_kind, out_dir);
}

inline void run_evaluate(const RunConfig& cfg, const std::filesystem::path& ckpt_dir,
                         const std::filesystem::path& data_dir, const std::string& split,
                         const std::optional<std::filesystem::path>& preds_csv,
                         const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto [ds, task] = load_dataset(data_dir);
  const std::vector<SyntheticSequence>* sequences = nullptr;
  std::vector<SyntheticSequence> all;
  if (split == "train") {
    sequences = &ds.train;
  } else if (split == "val") {
    sequences = &ds.val;
  } else if (split == "all") {
    all = ds.train;
    all.insert(all.end(), ds.val.begin(), ds.val.end());
    sequences = &all;
  } else {
    throw ConfigError("unknown split '" + split + "' (expected train|val|all)");
  }

  std::vector<std::vector<ActionInstance>> preds;
  if (preds_csv) {
    preds = read_predictions_csv(*preds_csv, sequences->size());
  } else {
    DetectorModel model = load_model(ckpt_dir / "checkpoint");
    preds = predict_dataset(model, *sequences, cfg.eval, cfg.resolved_threads());
    write_predictions_csv(out_dir / "predictions.csv", preds);
  }
  std::vector<std::vector<ActionInstance>> gts(sequences->size());
  for (std::size_t i = 0; i < sequences->size(); ++i) gts[i] = (*sequences)[i].instances;
  MapResult r = mean_map(preds, gts, cfg.eval);
  std::cerr << "[evaluate] split " << split << " mAP avg " << r.average << "\n";
  Json metrics;
  metrics["split"] = split;
  metrics["result"] = map_result_to_json(r);
  detail::write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
}

inline void run_bench(const std::filesystem::path& ckpt_dir, int warmup, int reps, int threads,
                      const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  DetectorModel model = load_model(ckpt_dir / "checkpoint");
  MacsBreakdown macs = count_macs(model);
  LatencyStats stats = latency_bench(model, warmup, reps, threads);
  std::cerr << "[bench] mean " << stats.mean_ms << " ms, std " << stats.std_ms << " ms\n";
  Json j;
  j["model_id"] = ckpt_dir.string();
  j["macs"] = macs.grand_total;
  j["backbone_macs"] = macs.backbone_total;
  j["mean_ms"] = stats.mean_ms;
  j["std_ms"] = stats.std_ms;
  j["threads"] = stats.threads;
  j["reps"] = stats.reps;
  detail::write_text(out_dir / "bench.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Ablation suites

namespace detail {

inline void write_table(const std::filesystem::path& out_dir, const std::string& name,
                        const std::vector<std::string>& columns,
                        const std::vector<std::vector<std::string>>& rows, const Json& extra) {
  std::ofstream csv(out_dir / (name + ".csv"), std::ios::binary);
  if (!csv) throw IoError("cannot write " + name + ".csv");
  for (std::size_t i = 0; i < columns.size(); ++i) csv << (i ? "," : "") << columns[i];
  csv << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) csv << (i ? "," : "") << row[i];
    csv << '\n';
  }
  Json j;
  j["suite"] = name;
  j["columns"] = columns;
  j["rows"] = rows;
  j["detail"] = extra;
  write_text(out_dir / (name + ".json"), j.dump(2) + "\n");
}

}  // namespace detail

inline void run_ablate(const RunConfig& cfg, const std::string& suite,
                       const std::filesystem::path& baseline_dir,
                       const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  LoadedBaseline base = load_baseline(cfg, baseline_dir);

  if (suite == "metrics") {
    // Selection-metric comparison: one progressive run per metric.
    std::vector<std::vector<std::string>> rows;
    Json extra = Json::array();
    for (MetricKind metric :
         {MetricKind::TRAIN_LOSS, MetricKind::TRAIN_MAP, MetricKind::BLOCK_IO_MSE}) {
      CompressConfig cc = cfg.compress;
      cc.metric_kind = metric;
      std::cerr << "[ablate:metrics] running " << metric_name(metric) << "\n";
      ProgressiveResult r = progressive_drop(base.model, base.data, cc);
      double final_map = r.reports.empty() ? r.baseline_map : r.reports.back().post_recovery_map;
      rows.push_back({metric_name(metric), detail::fmt_double(final_map),
                      detail::fmt_double(r.baseline_map),
                      "\"" + detail::drop_order_str(r.drop_order) + "\""});
      Json d;
      d["metric"] = metric_name(metric);
      d["baseline_map"] = r.baseline_map;
      d["final_map"] = final_map;
      d["drop_order"] = r.drop_order;
      extra.push_back(std::move(d));
    }
    detail::write_table(out_dir, "metrics", {"metric", "final_map", "baseline_map", "drop_order"},
                        rows, extra);
  } else if (suite == "alignment") {
    // Alignment-loss combinations: none / feature / prediction / both.
    struct Setup {
      const char* name;
      bool feature, prediction;
    };
    std::vector<std::vector<std::string>> rows;
    Json extra = Json::array();
    for (Setup s : {Setup{"none", false, false}, Setup{"feature", true, false},
                    Setup{"prediction", false, true}, Setup{"both", true, true}}) {
      CompressConfig cc = cfg.compress;
      cc.recovery.weights.feature = s.feature ? 1.0 : 0.0;
      cc.recovery.weights.pred_cls = s.prediction ? 1.0 : 0.0;
      cc.recovery.weights.pred_reg = s.prediction ? 1.0 : 0.0;
      std::cerr << "[ablate:alignment] running " << s.name << "\n";
      ProgressiveResult r = progressive_drop(base.model, base.data, cc);
      double final_map = r.reports.empty() ? r.baseline_map : r.reports.back().post_recovery_map;
      rows.push_back({s.name, s.feature ? "1" : "0", s.prediction ? "1" : "0",
                      detail::fmt_double(final_map)});
      Json d;
      d["config"] = s.name;
      d["feature"] = s.feature;
      d["prediction"] = s.prediction;
      d["final_map"] = final_map;
      d["baseline_map"] = r.baseline_map;
      d["drop_order"] = r.drop_order;
      extra.push_back(std::move(d));
    }
    detail::write_table(out_dir, "alignment", {"config", "feature", "prediction", "final_map"},
                        rows, extra);
  } else if (suite == "lora") {
    // LoRA vs full fine-tuning across progressive iterations.
    std::vector<std::vector<std::string>> rows;
    Json extra = Json::array();
    DetectorModel counting = base.model;  // handle copy for parameter counting
    std::size_t full_backbone = 0;
    for_each_stack_tensor(counting.backbone,
                          [&](const std::string&, Tensor& t) { full_backbone += t.numel(); });
    for (bool full_ft : {false, true}) {
      const char* method = full_ft ? "full_ft" : "lora";
      CompressConfig cc = cfg.compress;
      cc.recovery.full_ft = full_ft;
      std::cerr << "[ablate:lora] running " << method << "\n";
      ProgressiveResult r = progressive_drop(base.model, base.data, cc);
      rows.push_back({method, "0", detail::fmt_double(r.baseline_map),
                      std::to_string(full_ft ? full_backbone : 0)});
      for (const auto& rep : r.reports) {
        rows.push_back({method, std::to_string(rep.iteration),
                        detail::fmt_double(rep.post_recovery_map),
                        std::to_string(rep.trainable_backbone_params)});
        Json d;
        d["method"] = method;
        d["iteration"] = rep.iteration;
        d["map"] = rep.post_recovery_map;
        d["trainable_backbone_params"] = rep.trainable_backbone_params;
        extra.push_back(std::move(d));
      }
    }
    detail::write_table(out_dir, "lora", {"method", "drop_count", "map", "trainable_backbone_params"},
                        rows, extra);
  } else if (suite == "sim_vs_prog") {
    // Progressive drop vs dropping the same set at once.
    std::cerr << "[ablate:sim_vs_prog] progressive phase\n";
    ProgressiveResult prog = progressive_drop(base.model, base.data, cfg.compress);
    double prog_map = prog.reports.empty() ? prog.baseline_map
                                           : prog.reports.back().post_recovery_map;
    std::cerr << "[ablate:sim_vs_prog] simultaneous phase on "
              << detail::drop_order_str(prog.drop_order) << "\n";
    DetectorModel sim =
        simultaneous_drop(base.model, prog.drop_order, base.data.train, cfg.compress.recovery);
    double sim_map =
        detail::report_map(evaluate_model(sim, base.data.val, cfg.eval, cfg.compress.threads));
    std::vector<std::vector<std::string>> rows{
        {"progressive", "\"" + detail::drop_order_str(prog.drop_order) + "\"",
         detail::fmt_double(prog_map)},
        {"simultaneous", "\"" + detail::drop_order_str(prog.drop_order) + "\"",
         detail::fmt_double(sim_map)}};
    Json extra;
    extra["baseline_map"] = prog.baseline_map;
    extra["progressive_map"] = prog_map;
    extra["simultaneous_map"] = sim_map;
    extra["drop_order"] = prog.drop_order;
    detail::write_table(out_dir, "sim_vs_prog", {"strategy", "drop_order", "final_map"}, rows,
                        extra);
  } else if (suite == "sparsity") {
    // GELU -> ReLU swap plus alignment fine-tune.
    double base_map =
        detail::report_map(evaluate_model(base.model, base.data.val, cfg.eval, cfg.compress.threads));
    double base_sparsity = activation_sparsity(base.model, base.data.val);
    std::cerr << "[ablate:sparsity] baseline sparsity " << base_sparsity << "\n";
    DetectorModel swapped = swap_activation(base.model, Activation::RELU);
    RecoveryConfig rc = cfg.compress.recovery;
    RecoveryResult rec = recover(swapped, base.model, base.data.train, rc);
    double relu_map =
        detail::report_map(evaluate_model(rec.model, base.data.val, cfg.eval, cfg.compress.threads));
    double relu_sparsity = activation_sparsity(rec.model, base.data.val);
    std::cerr << "[ablate:sparsity] post-swap sparsity " << relu_sparsity << "\n";
    std::vector<std::vector<std::string>> rows{
        {"gelu", detail::fmt_double(base_map), detail::fmt_double(base_sparsity)},
        {"relu_recovered", detail::fmt_double(relu_map), detail::fmt_double(relu_sparsity)}};
    Json extra;
    extra["gelu"] = {{"map", base_map}, {"sparsity", base_sparsity}};
    extra["relu_recovered"] = {{"map", relu_map}, {"sparsity", relu_sparsity}};
    detail::write_table(out_dir, "sparsity", {"model", "map", "sparsity"}, rows, extra);
  } else {
    throw ConfigError("unknown ablation suite '" + suite +
                      "' (expected metrics|alignment|lora|sim_vs_prog|sparsity)");
  }
}

}  // namespace blockdrop
