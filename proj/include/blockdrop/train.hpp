#pragma once

// Adam-style optimizer and the baseline training loop for the uncompressed
// detector.

#include <cmath>
#include <string>
#include <vector>

#include "blockdrop/align.hpp"
#include "blockdrop/detector.hpp"

namespace blockdrop {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].numel(), 0.0);
      v_[i].assign(params_[i].numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      auto g = params_[i].grad();
      auto w = params_[i].mutable_values();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      }
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
  AdamConfig cfg_;
};

inline std::vector<Tensor> collect_trainable(DetectorModel& m) {
  std::vector<Tensor> params;
  for_each_model_tensor(m, [&](const std::string&, Tensor& t) {
    if (t.requires_grad()) params.push_back(t);
  });
  return params;
}

struct TrainConfig {
  double lr = 2e-3;
  int steps = 800;
  std::uint64_t seed = 1;
  bool focal = false;

  void validate() const {
    if (lr <= 0.0) throw ConfigError("train.lr must be positive");
    if (steps < 0) throw ConfigError("train.steps must be nonnegative");
  }
};

inline std::vector<LabelTargets> label_cache(const std::vector<SyntheticSequence>& sequences,
                                             const TimeGrid& grid, int num_classes) {
  std::vector<LabelTargets> out;
  out.reserve(sequences.size());
  for (const auto& s : sequences) out.push_back(assign_labels(s.instances, grid, num_classes));
  return out;
}

inline constexpr double kDivergenceLimit = 1e6;

// One optimizer step per sequence, shuffled each epoch. Returns the per-step
// total-loss curve.
inline std::vector<double> train_baseline(DetectorModel& model,
                                          const std::vector<SyntheticSequence>& train_data,
                                          const TrainConfig& cfg) {
  cfg.validate();
  if (train_data.empty()) throw ContractError("empty training set");
  auto targets = label_cache(train_data, model.grid(), model.config.num_classes);
  AdamOptimizer opt(collect_trainable(model), {.lr = cfg.lr});
  Rng rng = Rng(cfg.seed).derive(0x7121A1);
  std::vector<std::size_t> order(train_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> curve;
  curve.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    if (step % static_cast<int>(order.size()) == 0) rng.shuffle(order);
    const std::size_t idx = order[step % order.size()];
    Tape tape;
    Tensor loss;
    {
      auto scope = tape.activate();
      HeadOutput out = model_forward(model, train_data[idx].features);
      TadLoss task = tad_loss(out, targets[idx], model.grid(), cfg.focal);
      loss = add(task.cls, task.reg);
    }
    double value = loss.value();
    if (!std::isfinite(value) || value > kDivergenceLimit)
      throw TrainingError("baseline training diverged (loss " + std::to_string(value) + ")", step);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    curve.push_back(value);
  }
  return curve;
}

}  // namespace blockdrop
