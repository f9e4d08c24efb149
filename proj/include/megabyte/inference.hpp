#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "megabyte/data.hpp"
#include "megabyte/model.hpp"
#include "megabyte/rng.hpp"

namespace megabyte {

// Anything that scores fixed-length windows: for `count` windows of
// context_length() bytes each, returns ln p(byte | earlier bytes of the same
// window) for every slot.
template <class S>
concept WindowScorer = requires(const S& s, std::span<const std::uint8_t> windows, std::size_t count) {
  { s.context_length() } -> std::convertible_to<std::size_t>;
  { s.patch_size() } -> std::convertible_to<std::size_t>;
  { s.score_windows(windows, count) } -> std::same_as<std::vector<double>>;
};

// Teacher-forced MEGABYTE scoring in eval mode, batched.
class ModelScorer {
 public:
  explicit ModelScorer(const MegabyteModel& model, std::size_t batch = 16) : model_(model), batch_(std::max<std::size_t>(1, batch)) {}

  std::size_t context_length() const { return model_.config().context_length; }
  std::size_t patch_size() const { return model_.config().patch_size; }

  std::vector<double> score_windows(std::span<const std::uint8_t> windows, std::size_t count) const {
    if (model_.training()) throw Error("scoring requires the model in eval mode");
    const std::size_t T = context_length(), V = model_.config().vocab_size;
    if (windows.size() != count * T) throw ShapeError("score_windows: byte count does not match window count");
    NoGradGuard no_grad;
    std::vector<double> out(count * T);
    for (std::size_t first = 0; first < count; first += batch_) {
      const std::size_t rows = std::min(batch_, count - first);
      const auto chunk = windows.subspan(first * T, rows * T);
      const Tensor lp = model_.log_probs(chunk, rows);
      for (std::size_t i = 0; i < rows * T; ++i) out[first * T + i] = lp[i * V + chunk[i]];
    }
    return out;
  }

 private:
  const MegabyteModel& model_;
  std::size_t batch_;
};

enum class EvalMode { kBasic, kSliding, kStrided, kSlidingStrided };

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "basic") return EvalMode::kBasic;
  if (s == "sliding") return EvalMode::kSliding;
  if (s == "strided") return EvalMode::kStrided;
  if (s == "sliding+strided") return EvalMode::kSlidingStrided;
  throw ConfigError("unknown eval mode '" + s + "' (expected basic, sliding, strided, sliding+strided)");
}

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::kBasic:
      return "basic";
    case EvalMode::kSliding:
      return "sliding";
    case EvalMode::kStrided:
      return "strided";
    case EvalMode::kSlidingStrided:
      return "sliding+strided";
  }
  return "?";
}

// Nominal forward passes per scored byte relative to basic inference.
inline int cost_multiplier(EvalMode m) {
  switch (m) {
    case EvalMode::kBasic:
      return 1;
    case EvalMode::kSliding:
    case EvalMode::kStrided:
      return 2;
    case EvalMode::kSlidingStrided:
      return 4;
  }
  return 0;
}

// Windows to score plus, for each output position, the (window, slot) whose
// score it takes.
struct ScorePlan {
  std::size_t context_length = 0;
  ByteSequence windows;
  struct Pick {
    std::size_t window;
    std::size_t slot;
    std::size_t target;
  };
  std::vector<Pick> picks;
  std::size_t window_count() const { return windows.size() / context_length; }

  // Appends stream[offset, offset+T) zero-padded; returns its window index.
  std::size_t add_window(std::span<const std::uint8_t> stream, std::size_t offset) {
    const std::size_t index = window_count();
    windows.resize(windows.size() + context_length, 0);
    const std::size_t len = std::min(context_length, stream.size() - offset);
    std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>(offset), len,
                windows.begin() + static_cast<std::ptrdiff_t>(index * context_length));
    return index;
  }
};

namespace detail {

// Non-overlapping windows over `bytes`; picks every real slot whose target
// lies in [keep_begin, keep_end) (targets are offset by `base`).
inline void plan_basic(ScorePlan& plan, std::span<const std::uint8_t> bytes, std::size_t base, std::size_t keep_begin,
                       std::size_t keep_end) {
  const std::size_t T = plan.context_length;
  for (std::size_t o = 0; o < bytes.size(); o += T) {
    if (o + T <= keep_begin || o >= keep_end) continue;
    const std::size_t w = plan.add_window(bytes, o);
    for (std::size_t i = 0; i < T && o + i < bytes.size(); ++i) {
      const std::size_t t = o + i;
      if (t >= keep_begin && t < keep_end) plan.picks.push_back({w, i, base + t});
    }
  }
}

// Two passes: A over `bytes`, B over P/2 zero bytes followed by `bytes`. Each
// position is taken from the pass that puts it in the first half of a patch.
inline void plan_strided(ScorePlan& plan, std::span<const std::uint8_t> bytes, std::size_t base, std::size_t patch,
                         std::size_t keep_begin, std::size_t keep_end) {
  if (patch % 2 != 0) throw ConfigError("strided inference needs an even patch size, got " + std::to_string(patch));
  const std::size_t T = plan.context_length, half = patch / 2;
  for (std::size_t o = 0; o < bytes.size(); o += T) {
    const std::size_t w = plan.add_window(bytes, o);
    for (std::size_t i = 0; i < T && o + i < bytes.size(); ++i) {
      const std::size_t t = o + i;
      if (i % patch < half && t >= keep_begin && t < keep_end) plan.picks.push_back({w, i, base + t});
    }
  }
  ByteSequence shifted(half, 0);
  shifted.insert(shifted.end(), bytes.begin(), bytes.end());
  for (std::size_t o = 0; o < shifted.size(); o += T) {
    const std::size_t w = plan.add_window(shifted, o);
    for (std::size_t i = 0; i < T && o + i < shifted.size(); ++i) {
      const std::size_t j = o + i;
      if (j < half || i % patch >= half) continue;
      const std::size_t t = j - half;
      if (t >= keep_begin && t < keep_end) plan.picks.push_back({w, i, base + t});
    }
  }
}

// Windows every T/2 bytes; the first keeps all its positions, later ones only
// the positions not covered by their predecessor.
inline void plan_sliding(ScorePlan& plan, std::span<const std::uint8_t> bytes, std::size_t base, std::size_t patch,
                         bool strided) {
  const std::size_t T = plan.context_length;
  const std::size_t stride = std::max<std::size_t>(1, T / 2);
  for (std::size_t o = 0;; o += stride) {
    const std::size_t len = std::min(T, bytes.size() - o);
    const auto window = bytes.subspan(o, len);
    const std::size_t keep_begin = o == 0 ? 0 : T - stride;
    if (strided) {
      plan_strided(plan, window, base + o, patch, keep_begin, len);
    } else {
      plan_basic(plan, window, base + o, keep_begin, len);
    }
    if (o + T >= bytes.size()) break;
  }
}

inline void plan_mode(ScorePlan& plan, std::span<const std::uint8_t> bytes, std::size_t base, std::size_t patch,
                      EvalMode mode) {
  switch (mode) {
    case EvalMode::kBasic:
      plan_basic(plan, bytes, base, 0, bytes.size());
      break;
    case EvalMode::kStrided:
      plan_strided(plan, bytes, base, patch, 0, bytes.size());
      break;
    case EvalMode::kSliding:
      plan_sliding(plan, bytes, base, patch, false);
      break;
    case EvalMode::kSlidingStrided:
      plan_sliding(plan, bytes, base, patch, true);
      break;
  }
}

template <WindowScorer S>
std::vector<double> execute_plan(const S& scorer, const ScorePlan& plan, std::size_t outputs) {
  const std::vector<double> scores = scorer.score_windows(plan.windows, plan.window_count());
  std::vector<double> out(outputs, std::nan(""));
  std::vector<unsigned char> seen(outputs, 0);
  for (const auto& pick : plan.picks) {
    if (pick.target >= outputs || seen[pick.target]) throw Error("score plan covers a position twice or out of range");
    seen[pick.target] = 1;
    out[pick.target] = scores[pick.window * plan.context_length + pick.slot];
  }
  for (auto s : seen) {
    if (!s) throw Error("score plan leaves a position uncovered");
  }
  return out;
}

}  // namespace detail

// ln p(x_t | context) for every position of `bytes` under the given mode.
template <WindowScorer S>
std::vector<double> sequence_log_probs(const S& scorer, std::span<const std::uint8_t> bytes, EvalMode mode) {
  ScorePlan plan{scorer.context_length(), {}, {}};
  detail::plan_mode(plan, bytes, 0, scorer.patch_size(), mode);
  return detail::execute_plan(scorer, plan, bytes.size());
}

struct StridedResult {
  std::vector<double> log_probs;
  std::vector<bool> from_shifted_pass;  // true where pass B supplied the value
};

// Two forward passes offset by P/2; position t comes from pass A when
// t mod P < P/2 and from the shifted pass B otherwise.
template <WindowScorer S>
StridedResult strided_inference(const S& scorer, std::span<const std::uint8_t> bytes) {
  const std::size_t P = scorer.patch_size();
  StridedResult r;
  r.log_probs = sequence_log_probs(scorer, bytes, EvalMode::kStrided);
  r.from_shifted_pass.resize(bytes.size());
  for (std::size_t t = 0; t < bytes.size(); ++t) r.from_shifted_pass[t] = t % P >= P / 2;
  return r;
}

struct EvalReport {
  EvalMode mode = EvalMode::kBasic;
  double bpb = 0;
  double total_bits = 0;
  std::size_t total_bytes = 0;
  std::size_t windows_scored = 0;
  int cost_multiplier = 1;
  std::vector<double> per_position_bits;   // mean bits at each within-patch position
  std::vector<std::size_t> per_position_count;
};

// Bits per byte over all documents (windows never span documents).
// Within-patch position is the byte's document offset mod P.
template <WindowScorer S>
EvalReport evaluate_bpb(const S& scorer, const std::vector<Document>& docs, EvalMode mode) {
  const std::size_t P = scorer.patch_size();
  std::size_t total = 0;
  for (const auto& d : docs) total += d.bytes.size();
  if (total < P) throw DataError("corpus shorter than one patch (" + std::to_string(total) + " < " + std::to_string(P) + " bytes)");

  ScorePlan plan{scorer.context_length(), {}, {}};
  std::size_t base = 0;
  for (const auto& d : docs) {
    detail::plan_mode(plan, d.bytes, base, P, mode);
    base += d.bytes.size();
  }
  const std::vector<double> lp = detail::execute_plan(scorer, plan, total);

  EvalReport report;
  report.mode = mode;
  report.total_bytes = total;
  report.windows_scored = plan.window_count();
  report.cost_multiplier = cost_multiplier(mode);
  report.per_position_bits.assign(P, 0.0);
  report.per_position_count.assign(P, 0);
  std::size_t t = 0;
  for (const auto& d : docs) {
    for (std::size_t i = 0; i < d.bytes.size(); ++i, ++t) {
      const double bits = -lp[t] / std::numbers::ln2;
      report.total_bits += bits;
      report.per_position_bits[i % P] += bits;
      report.per_position_count[i % P] += 1;
    }
  }
  for (std::size_t p = 0; p < P; ++p) {
    if (report.per_position_count[p]) report.per_position_bits[p] /= static_cast<double>(report.per_position_count[p]);
  }
  report.bpb = report.total_bits / static_cast<double>(total);
  return report;
}

inline std::string eval_report_csv(const EvalReport& r) {
  std::string out = "mode,bpb,total_bytes,cost_multiplier,windows_scored\n";
  char line[256];
  std::snprintf(line, sizeof line, "%s,%.17g,%zu,%d,%zu\n", to_string(r.mode).c_str(), r.bpb, r.total_bytes,
                r.cost_multiplier, r.windows_scored);
  out += line;
  out += "position_in_patch,mean_bits,count\n";
  for (std::size_t p = 0; p < r.per_position_bits.size(); ++p) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%zu\n", p, r.per_position_bits[p], r.per_position_count[p]);
    out += line;
  }
  return out;
}

// PPL = 2^(bpb · bytes / words).
inline double bpb_to_word_ppl(double bpb, std::size_t total_bytes, std::size_t total_words) {
  if (total_words == 0) throw DataError("word-level perplexity needs at least one word");
  if (total_bytes == 0) throw DataError("word-level perplexity needs at least one byte");
  return std::exp2(bpb * static_cast<double>(total_bytes) / static_cast<double>(total_words));
}

// ---------------------------------------------------------------------------
// Incremental decoding

namespace detail {

inline std::vector<real> row_times(std::span<const real> x, const Tensor& w) {
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  std::vector<real> y(out_dim, real(0));
  const real* wd = w.data().data();
  for (std::size_t i = 0; i < in; ++i) {
    const real xi = x[i];
    for (std::size_t j = 0; j < out_dim; ++j) y[j] += xi * wd[i * out_dim + j];
  }
  return y;
}

inline std::vector<real> layer_norm_row(std::span<const real> x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = x.size();
  real mean = 0, var = 0;
  for (real v : x) mean += v;
  mean /= static_cast<real>(d);
  for (real v : x) var += (v - mean) * (v - mean);
  var /= static_cast<real>(d);
  const real inv = real(1) / std::sqrt(var + kLayerNormEps);
  std::vector<real> y(d);
  for (std::size_t j = 0; j < d; ++j) y[j] = (x[j] - mean) * inv * gain[j] + bias[j];
  return y;
}

// Per-layer key/value rows, position-ordered.
struct KvRows {
  std::vector<std::vector<real>> keys;
  std::vector<std::vector<real>> values;
};

}  // namespace detail

// Byte-at-a-time decoder with per-layer key/value caches. The global model
// advances once per patch; the local model once per byte, with the previous
// patch's cached rows providing the cross-patch slots.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const MegabyteModel& model) : model_(model), cfg_(model.config()) {
    global_cache_.resize(cfg_.uses_global() ? cfg_.global_layers : 0);
    local_current_.resize(cfg_.uses_local_transformer() ? cfg_.local_layers : 0);
    local_previous_.resize(local_current_.size());
  }

  std::size_t position() const { return bytes_.size(); }
  std::size_t serial_steps() const { return serial_steps_; }
  const ByteSequence& bytes() const { return bytes_; }

  // ln p(next byte | bytes so far), V entries.
  std::vector<double> next_log_probs() {
    const std::size_t t = bytes_.size();
    if (t >= cfg_.context_length) throw ConfigError("generation beyond context length " + std::to_string(cfg_.context_length));
    const std::size_t P = cfg_.patch_size, p = t % P;
    if (p == 0) start_patch(t / P);
    std::vector<real> h;
    if (cfg_.no_local) {
      h = detail::row_times(global_chunk(p), model_.parameters().at("global_to_local"));
    } else {
      h = local_step(t, p);
      serial_steps_ += cfg_.local_layers;
    }
    const Tensor& table = model_.parameters().at("local.embed");
    const std::size_t V = cfg_.vocab_size, D = cfg_.local_dim;
    std::vector<double> logits(V);
    for (std::size_t v = 0; v < V; ++v) {
      double s = 0;
      for (std::size_t j = 0; j < D; ++j) s += static_cast<double>(h[j]) * table[v * D + j];
      logits[v] = s;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    const double lse = mx + std::log(z);
    for (double& l : logits) l -= lse;
    pending_ = true;
    return logits;
  }

  // Commits the byte at the current position (after next_log_probs).
  void feed(std::uint8_t byte) {
    if (!pending_) throw Error("feed() must follow next_log_probs()");
    if (byte >= cfg_.vocab_size) throw DataError("byte outside vocabulary");
    pending_ = false;
    bytes_.push_back(byte);
  }

 private:
  std::span<const real> global_chunk(std::size_t p) const {
    return std::span<const real>(global_out_).subspan(p * cfg_.global_dim, cfg_.global_dim);
  }

  void start_patch(std::size_t k) {
    for (std::size_t l = 0; l < local_current_.size(); ++l) {
      local_previous_[l] = std::move(local_current_[l]);
      local_current_[l] = {};
    }
    if (!cfg_.uses_global()) return;
    std::vector<real> x = global_input(k);
    const auto& params = model_.parameters();
    for (std::size_t l = 0; l < cfg_.global_layers; ++l) {
      x = layer_step("global.layers." + std::to_string(l) + ".", x, global_cache_[l], nullptr, cfg_.global_heads, false,
                     k);
    }
    if (cfg_.global_layers > 0) x = detail::layer_norm_row(x, params.at("global.ln_f.gain"), params.at("global.ln_f.bias"));
    global_out_ = std::move(x);
    serial_steps_ += cfg_.global_layers;
  }

  std::vector<real> global_input(std::size_t k) const {
    const auto& params = model_.parameters();
    const std::size_t P = cfg_.patch_size, DG = cfg_.global_dim;
    if (k == 0) {
      const auto pad = params.at("global.pad").data();
      return std::vector<real>(pad.begin(), pad.end());
    }
    const std::size_t end = k * P;
    std::vector<real> emb;
    if (cfg_.conv_encoder) {
      // The conv stack looks back up to 12 bytes; rerun it over the prefix.
      NoGradGuard no_grad;
      std::vector<int> ids(bytes_.begin(), bytes_.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor e = reshape(embedding(params.at("global.embed"), ids), {1, end, DG});
      std::vector<real> pos(params.at("global.pos").data().begin(),
                            params.at("global.pos").data().begin() + static_cast<std::ptrdiff_t>(end * DG));
      e = add(e, Tensor::from({1, end, DG}, std::move(pos)));
      for (std::size_t w : kConvWidths) {
        const std::string p = "global.conv" + std::to_string(w);
        e = add(e, relu(causal_conv1d(e, params.at(p + ".weight"), params.at(p + ".bias"))));
      }
      emb.assign(e.data().end() - static_cast<std::ptrdiff_t>(P * DG), e.data().end());
    } else {
      emb.resize(P * DG);
      const Tensor& table = params.at("global.embed");
      const Tensor& pos = params.at("global.pos");
      for (std::size_t i = 0; i < P; ++i) {
        const std::size_t t = end - P + i;
        for (std::size_t j = 0; j < DG; ++j) emb[i * DG + j] = table[bytes_[t] * DG + j] + pos[t * DG + j];
      }
    }
    return emb;
  }

  std::vector<real> local_step(std::size_t t, std::size_t p) {
    const auto& params = model_.parameters();
    const std::size_t DL = cfg_.local_dim;
    std::vector<real> x(DL, real(0));
    if (cfg_.uses_global()) x = detail::row_times(global_chunk(p), params.at("global_to_local"));
    const Tensor& table = params.at("local.embed");
    const Tensor& pad = params.at("local.pad");
    const Tensor& pos = params.at("local.pos");
    for (std::size_t j = 0; j < DL; ++j) {
      x[j] += p == 0 ? pad[j] : table[bytes_[t - 1] * DL + j];
      x[j] += pos[p * DL + j];
    }
    for (std::size_t l = 0; l < cfg_.local_layers; ++l) {
      x = layer_step("local.layers." + std::to_string(l) + ".", x, local_current_[l], &local_previous_[l],
                     cfg_.local_heads, cfg_.cross_patch_window > 0, p);
    }
    if (cfg_.local_layers > 0) x = detail::layer_norm_row(x, params.at("local.ln_f.gain"), params.at("local.ln_f.bias"));
    return x;
  }

  // One pre-norm layer for the newest position `pos`, appending its key and
  // value to `cache`. With cross-patch slots, `previous` holds the previous
  // patch's rows (empty for the first patch, which sees zero slots).
  std::vector<real> layer_step(const std::string& prefix, const std::vector<real>& x, detail::KvRows& cache,
                               const detail::KvRows* previous, std::size_t heads, bool cross, std::size_t pos) const {
    const auto& params = model_.parameters();
    const std::size_t C = x.size(), d = C / heads;
    const std::vector<real> a = detail::layer_norm_row(x, params.at(prefix + "ln1.gain"), params.at(prefix + "ln1.bias"));
    std::vector<real> q = detail::row_times(a, params.at(prefix + "attn.wq"));
    cache.keys.push_back(detail::row_times(a, params.at(prefix + "attn.wk")));
    cache.values.push_back(detail::row_times(a, params.at(prefix + "attn.wv")));
    if (cache.keys.size() != pos + 1) throw Error("decoder cache out of sync");

    const std::size_t r = cross ? cfg_.cross_patch_window : 0;
    std::vector<const std::vector<real>*> keys, values;
    std::vector<double> key_pos;
    const std::vector<real> zeros(C, real(0));
    for (std::size_t j = 0; j < r; ++j) {
      const bool have = previous && !previous->keys.empty();
      const std::size_t src = cfg_.patch_size - r + j;
      keys.push_back(have ? &previous->keys[src] : &zeros);
      values.push_back(have ? &previous->values[src] : &zeros);
      key_pos.push_back(static_cast<double>(j) - static_cast<double>(r));
    }
    for (std::size_t j = 0; j <= pos; ++j) {
      keys.push_back(&cache.keys[j]);
      values.push_back(&cache.values[j]);
      key_pos.push_back(static_cast<double>(j));
    }

    std::vector<real> att(C, real(0));
    const real inv_sqrt_d = real(1) / std::sqrt(static_cast<real>(d));
    std::vector<real> qh(d), kh(d);
    std::vector<real> scores(keys.size());
    for (std::size_t h = 0; h < heads; ++h) {
      std::copy_n(q.begin() + static_cast<std::ptrdiff_t>(h * d), d, qh.begin());
      if (cross) kernel::rotate_pairs(qh.data(), d, static_cast<double>(pos), 1.0);
      for (std::size_t j = 0; j < keys.size(); ++j) {
        std::copy_n(keys[j]->begin() + static_cast<std::ptrdiff_t>(h * d), d, kh.begin());
        if (cross) kernel::rotate_pairs(kh.data(), d, key_pos[j], 1.0);
        real s = 0;
        for (std::size_t c = 0; c < d; ++c) s += qh[c] * kh[c];
        scores[j] = s * inv_sqrt_d;
      }
      const real mx = *std::max_element(scores.begin(), scores.end());
      real z = 0;
      for (auto& s : scores) z += (s = std::exp(s - mx));
      for (std::size_t j = 0; j < keys.size(); ++j) {
        const real w = scores[j] / z;
        for (std::size_t c = 0; c < d; ++c) att[h * d + c] += w * (*values[j])[h * d + c];
      }
    }
    std::vector<real> out = detail::row_times(att, params.at(prefix + "attn.wo"));
    std::vector<real> h1(C);
    for (std::size_t j = 0; j < C; ++j) h1[j] = x[j] + out[j];
    const std::vector<real> f = detail::layer_norm_row(h1, params.at(prefix + "ln2.gain"), params.at(prefix + "ln2.bias"));
    std::vector<real> hidden = detail::row_times(f, params.at(prefix + "ff.w1"));
    const Tensor& b1 = params.at(prefix + "ff.b1");
    for (std::size_t j = 0; j < hidden.size(); ++j) hidden[j] = std::max(real(0), hidden[j] + b1[j]);
    std::vector<real> ff = detail::row_times(hidden, params.at(prefix + "ff.w2"));
    const Tensor& b2 = params.at(prefix + "ff.b2");
    for (std::size_t j = 0; j < C; ++j) h1[j] += ff[j] + b2[j];
    return h1;
  }

  const MegabyteModel& model_;
  const ModelConfig& cfg_;
  ByteSequence bytes_;
  std::vector<real> global_out_;
  std::vector<detail::KvRows> global_cache_;
  std::vector<detail::KvRows> local_current_;
  std::vector<detail::KvRows> local_previous_;
  std::size_t serial_steps_ = 0;
  bool pending_ = false;
};

struct GenTrace {
  ByteSequence bytes;                     // generated bytes only
  std::vector<double> log_probs;          // ln p of each generated byte (untempered)
  std::vector<std::size_t> serial_steps;  // cumulative serial steps after each generated byte
  std::vector<double> prompt_log_probs;   // teacher-forced ln p of each prompt byte
  std::size_t total_serial_steps = 0;
};

// Greedy argmax for temperature 0 (lowest byte wins ties), else a draw from
// softmax(log p / temperature).
inline std::uint8_t sample_byte(const std::vector<double>& log_probs, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    return static_cast<std::uint8_t>(std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin());
  }
  const double mx = *std::max_element(log_probs.begin(), log_probs.end());
  std::vector<double> w(log_probs.size());
  double z = 0;
  for (std::size_t i = 0; i < w.size(); ++i) z += (w[i] = std::exp((log_probs[i] - mx) / temperature));
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return static_cast<std::uint8_t>(i);
    u -= w[i];
  }
  return static_cast<std::uint8_t>(w.size() - 1);
}

// Autoregressive generation with caches. Prompt bytes run through the same
// byte-serial path, so serial steps cover every position processed.
inline GenTrace generate(const MegabyteModel& model, std::span<const std::uint8_t> prompt, std::size_t n_bytes,
                         double temperature, std::uint64_t seed) {
  if (temperature < 0) throw ConfigError("temperature must be >= 0");
  if (model.training()) throw Error("generation requires the model in eval mode");
  const std::size_t T = model.config().context_length;
  if (prompt.size() + n_bytes > T) {
    throw ConfigError("requested length " + std::to_string(prompt.size() + n_bytes) + " exceeds context length " +
                      std::to_string(T));
  }
  Rng rng(seed);
  IncrementalDecoder decoder(model);
  GenTrace trace;
  for (std::uint8_t b : prompt) {
    const auto lp = decoder.next_log_probs();
    trace.prompt_log_probs.push_back(lp.at(b));
    decoder.feed(b);
  }
  for (std::size_t i = 0; i < n_bytes; ++i) {
    const auto lp = decoder.next_log_probs();
    const std::uint8_t b = sample_byte(lp, temperature, rng);
    decoder.feed(b);
    trace.bytes.push_back(b);
    trace.log_probs.push_back(lp[b]);
    trace.serial_steps.push_back(decoder.serial_steps());
  }
  trace.total_serial_steps = decoder.serial_steps();
  return trace;
}

}  // namespace megabyte
