#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "megabyte/config.hpp"
#include "megabyte/data.hpp"
#include "megabyte/model.hpp"
#include "megabyte/params.hpp"
#include "megabyte/rng.hpp"

namespace megabyte {

// Weight matrices and embeddings ~ N(0, std²) truncated at ±2σ; layer-norm
// gains 1; biases and local positions 0.
inline Parameters init_weights(const ModelConfig& config, std::uint64_t seed, double init_std = 0.006) {
  Rng rng(seed);
  Parameters params;
  for (const auto& spec : parameter_inventory(config)) {
    std::vector<real> values(shape_numel(spec.shape), real(0));
    switch (spec.kind) {
      case ParamKind::kMatrix:
      case ParamKind::kEmbedding:
        for (auto& v : values) v = static_cast<real>(rng.truncated_normal(init_std, 2.0));
        break;
      case ParamKind::kGain:
        std::fill(values.begin(), values.end(), real(1));
        break;
      case ParamKind::kBias:
      case ParamKind::kZeroInit:
        break;
    }
    params.add(spec.name, Tensor::from(spec.shape, std::move(values)));
  }
  return params;
}

// Linear warmup 0 -> peak over warmup_updates, then linear decay to end_lr at
// total_updates.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_updates) throw ConfigError("lr_at: step beyond total_updates");
  if (cfg.warmup_updates > 0 && step <= cfg.warmup_updates) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_updates);
  }
  const std::size_t decay_steps = cfg.total_updates - cfg.warmup_updates;
  if (decay_steps == 0) return cfg.peak_lr;
  const double frac = static_cast<double>(step - cfg.warmup_updates) / static_cast<double>(decay_steps);
  return cfg.peak_lr + (cfg.end_lr - cfg.peak_lr) * frac;
}

inline double global_grad_norm(const Parameters& params) {
  double sq = 0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (real g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

struct ClipResult {
  double norm_before = 0;
  double scale = 1;
};

// Rescales all gradients so their global L2 norm is at most max_norm.
inline ClipResult clip_gradients(Parameters& params, double max_norm = 1.0) {
  ClipResult result;
  result.norm_before = global_grad_norm(params);
  if (result.norm_before > max_norm && result.norm_before > 0) {
    result.scale = max_norm / result.norm_before;
    for (auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (real& g : t.mutable_grad()) g = static_cast<real>(g * result.scale);
    }
  }
  return result;
}

struct AdamState {
  std::vector<std::vector<real>> first_moment;
  std::vector<std::vector<real>> second_moment;
  std::vector<bool> decayed;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;

  static AdamState for_parameters(const Parameters& params, const ModelConfig& config, const TrainConfig& cfg) {
    AdamState s;
    s.beta1 = cfg.adam_beta1;
    s.beta2 = cfg.adam_beta2;
    s.eps = cfg.adam_eps;
    std::map<std::string, ParamKind> kinds;
    for (const auto& spec : parameter_inventory(config)) kinds[spec.name] = spec.kind;
    for (const auto& [name, t] : params) {
      s.first_moment.emplace_back(t.numel(), real(0));
      s.second_moment.emplace_back(t.numel(), real(0));
      auto it = kinds.find(name);
      s.decayed.push_back(it != kinds.end() && decays(it->second));
    }
    return s;
  }
};

// One Adam update with bias correction and decoupled weight decay
// (p -= lr·wd·p on decayed tensors only).
inline void adam_step(Parameters& params, AdamState& state, double lr, double weight_decay) {
  if (state.first_moment.size() != params.size()) throw ConfigError("optimizer state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const bool decay = state.decayed[i];
    ++i;
    auto values = t.mutable_data();
    if (m.size() != values.size()) throw ConfigError("optimizer moment shape mismatch for " + name);
    const bool has_grad = t.has_grad();
    const auto grads = t.grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grads[j]) : 0.0;
      m[j] = static_cast<real>(state.beta1 * m[j] + (1.0 - state.beta1) * g);
      v[j] = static_cast<real>(state.beta2 * v[j] + (1.0 - state.beta2) * g * g);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      double p = values[j];
      if (decay) p -= lr * weight_decay * p;
      p -= lr * mhat / (std::sqrt(vhat) + state.eps);
      values[j] = static_cast<real>(p);
    }
  }
}

struct LossRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss_bits = 0;
  double grad_norm = 0;
};

struct TrainResult {
  std::vector<LossRecord> curve;
  AdamState optimizer;
};

// Deterministic loop: windows are shuffled once per epoch with a seeded
// stream, dropout uses its own stream, and every update clips before Adam.
// `on_step` (optional) sees each record as it is produced.
inline TrainResult train(MegabyteModel& model, const std::vector<Document>& docs, const TrainConfig& cfg,
                         const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  const std::size_t T = mc.context_length;
  const std::size_t stride = cfg.window_stride == 0 ? T : cfg.window_stride;
  std::vector<Window> windows = make_windows(docs, T, stride);
  if (windows.empty()) throw DataError("no training windows");

  Rng root(cfg.seed);
  Rng order_rng = root.fork();
  Rng dropout_rng = root.fork();
  TrainResult result;
  result.optimizer = AdamState::for_parameters(model.parameters(), mc, cfg);

  std::vector<Window> order = windows;
  order_rng.shuffle(order);
  std::size_t cursor = 0;
  model.set_training(&dropout_rng);
  struct EvalOnExit {
    MegabyteModel& m;
    ~EvalOnExit() { m.set_eval(); }
  } restore{model};
  for (std::size_t step = 0; step < cfg.total_updates; ++step) {
    std::vector<Window> rows;
    while (rows.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        order = windows;
        order_rng.shuffle(order);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    const Batch batch = make_batch(docs, rows, T);
    model.parameters().zero_grad();
    Tensor loss;
    try {
      loss = model.loss_bits(batch.inputs, batch.rows, batch.mask);
    } catch (const NumericError& e) {
      throw NumericError("non-finite forward pass at step " + std::to_string(step) + ": " + e.what());
    }
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("loss is not finite at step " + std::to_string(step));
    }
    backward(loss);
    const ClipResult clip = clip_gradients(model.parameters(), cfg.clip_norm);
    if (!std::isfinite(clip.norm_before)) {
      throw NumericError("gradient norm is not finite at step " + std::to_string(step));
    }
    const double lr = lr_at(step + 1, cfg);
    adam_step(model.parameters(), result.optimizer, lr, cfg.weight_decay);
    LossRecord rec{step, lr, loss_value, clip.norm_before};
    result.curve.push_back(rec);
    if (on_step) on_step(rec);
  }
  model.parameters().zero_grad();
  return result;
}

inline std::string loss_curve_csv(const std::vector<LossRecord>& curve) {
  std::string out = "step,lr,loss_bits_per_byte,grad_norm\n";
  char line[160];
  for (const auto& r : curve) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g\n", r.step, r.lr, r.loss_bits, r.grad_norm);
    out += line;
  }
  return out;
}

}  // namespace megabyte
