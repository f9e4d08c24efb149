#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "megabyte/config.hpp"
#include "megabyte/ops.hpp"
#include "megabyte/params.hpp"

namespace megabyte {

// Sentinel id for pad slots in prepared patch ids.
inline constexpr int kPadId = -1;

// K×P grid of byte ids (kPadId for pad slots), row-major.
struct PatchIds {
  std::size_t patches = 0;
  std::size_t patch_size = 0;
  std::vector<int> ids;

  int at(std::size_t k, std::size_t p) const { return ids[k * patch_size + p]; }
};

namespace detail {

inline void check_patchable(std::size_t length, std::size_t patch_size) {
  if (patch_size == 0) throw ConfigError("patch size must be >= 1");
  if (length == 0 || length % patch_size != 0) {
    throw DataError("sequence length " + std::to_string(length) + " is not a positive multiple of patch size " +
                    std::to_string(patch_size));
  }
}

}  // namespace detail

// Global-model input ids: patch 0 is all pad, patch k >= 1 holds bytes
// [(k-1)P, kP). The final P bytes never enter the global model.
inline PatchIds prepare_global_input(std::span<const std::uint8_t> bytes, std::size_t patch_size) {
  detail::check_patchable(bytes.size(), patch_size);
  PatchIds out{bytes.size() / patch_size, patch_size, std::vector<int>(bytes.size(), kPadId)};
  for (std::size_t t = 0; t + patch_size < bytes.size(); ++t) out.ids[t + patch_size] = bytes[t];
  return out;
}

// Local-model input ids: each patch shifted right by one with a leading pad,
// so slot (k, p) holds byte kP+p-1 and predicts byte kP+p.
inline PatchIds prepare_local_input(std::span<const std::uint8_t> bytes, std::size_t patch_size) {
  detail::check_patchable(bytes.size(), patch_size);
  PatchIds out{bytes.size() / patch_size, patch_size, std::vector<int>(bytes.size(), kPadId)};
  for (std::size_t k = 0; k < out.patches; ++k)
    for (std::size_t p = 1; p < patch_size; ++p) out.ids[k * patch_size + p] = bytes[k * patch_size + p - 1];
  return out;
}

// Intermediate tensors of one forward pass (B = batch of sequences).
struct Activations {
  Tensor h_embed;       // [B, T, D_G]
  Tensor h_global_in;   // [B, K, P·D_G]
  Tensor h_global_out;  // [B, K, P·D_G]
  Tensor h_local_in;    // [B·K, P, D_L]
  Tensor h_local_out;   // [B·K, P, D_L]
  Tensor logits;        // [B·T, V]
};

class MegabyteModel {
 public:
  MegabyteModel(ModelConfig config, Parameters params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    params_.check_against(config_);
  }

  const ModelConfig& config() const { return config_; }
  const Parameters& parameters() const { return params_; }
  Parameters& parameters() { return params_; }

  // Training mode enables dropout on attention and feedforward outputs, drawn
  // from `rng` (not owned). Embedding lookups never get dropout.
  void set_training(Rng* rng) {
    training_ = true;
    dropout_rng_ = rng;
  }
  void set_eval() {
    training_ = false;
    dropout_rng_ = nullptr;
  }
  bool training() const { return training_; }

  // Byte embeddings plus absolute positions (then the optional causal conv
  // stack), shifted one patch right behind the pad patch and reshaped so each
  // row is one patch vector.
  Activations embed_global(std::span<const std::uint8_t> bytes, std::size_t batch) const {
    check_batch(bytes, batch);
    const std::size_t T = config_.context_length, P = config_.patch_size, K = config_.patch_count();
    const std::size_t DG = config_.global_dim;
    Activations act;
    std::vector<int> ids(bytes.begin(), bytes.end());
    Tensor emb = reshape(embedding(params_.at("global.embed"), ids), {batch, T, DG});
    emb = add_broadcast(emb, params_.at("global.pos"));
    if (config_.conv_encoder) emb = conv_stack(emb);
    act.h_embed = emb;
    Tensor pad = repeat_leading(params_.at("global.pad"), batch);
    Tensor shifted = K > 1 ? concat_seq(pad, slice_seq(emb, 0, T - P)) : pad;
    act.h_global_in = reshape(shifted, {batch, K, P * DG});
    return act;
  }

  // Pre-norm causal transformer over the K patch positions.
  Tensor global_forward(const Tensor& h_global_in) const {
    return transformer("global", h_global_in, config_.global_layers, config_.global_heads, 0, 0);
  }

  // h_local_in[k,p] = w_GL · h_global_out[k, p-th D_G chunk] + E_local(byte kP+p-1 or pad) + E_local_pos[p].
  // h_global_out may be undefined for the no_global variant.
  Tensor combine_for_local(const Tensor& h_global_out, std::span<const std::uint8_t> bytes, std::size_t batch) const {
    check_batch(bytes, batch);
    const std::size_t T = config_.context_length, P = config_.patch_size, K = config_.patch_count();
    const std::size_t DL = config_.local_dim, V = config_.vocab_size;
    std::vector<int> ids;
    ids.reserve(batch * T);
    for (std::size_t b = 0; b < batch; ++b) {
      const PatchIds local = prepare_local_input(bytes.subspan(b * T, T), P);
      for (int id : local.ids) ids.push_back(id == kPadId ? static_cast<int>(V) : id);
    }
    const Tensor table = concat0(params_.at("local.embed"), reshape(params_.at("local.pad"), {1, DL}));
    Tensor h = reshape(embedding(table, ids), {batch * K, P, DL});
    h = add_broadcast(h, params_.at("local.pos"));
    if (h_global_out.defined()) {
      Tensor projected = linear(reshape(h_global_out, {batch * T, config_.global_dim}), params_.at("global_to_local"));
      h = add(h, reshape(projected, {batch * K, P, DL}));
    }
    return h;
  }

  // Local transformer over each patch independently (plus cross-patch slots
  // when r > 0); returns h_local_out [B·K, P, D_L].
  Tensor local_forward(const Tensor& h_local_in) const {
    const std::size_t r = config_.cross_patch_window;
    return transformer("local", h_local_in, config_.local_layers, config_.local_heads, config_.patch_count(), r);
  }

  // Output head tied to the local byte embedding: logits = h · E_localᵀ.
  Tensor output_logits(const Tensor& h_local_out) const {
    const std::size_t rows = h_local_out.numel() / config_.local_dim;
    return matmul_nt(reshape(h_local_out, {rows, config_.local_dim}), params_.at("local.embed"));
  }

  Activations run(std::span<const std::uint8_t> bytes, std::size_t batch) const {
    check_batch(bytes, batch);
    Activations act;
    if (config_.uses_global()) {
      act = embed_global(bytes, batch);
      act.h_global_out = global_forward(act.h_global_in);
    }
    if (config_.no_local) {
      // Each position read straight off its global-output chunk: bytes within a
      // patch are predicted conditionally independently.
      const std::size_t rows = batch * config_.context_length;
      Tensor h = linear(reshape(act.h_global_out, {rows, config_.global_dim}), params_.at("global_to_local"));
      act.logits = matmul_nt(h, params_.at("local.embed"));
      return act;
    }
    act.h_local_in = combine_for_local(act.h_global_out, bytes, batch);
    act.h_local_out = local_forward(act.h_local_in);
    act.logits = output_logits(act.h_local_out);
    return act;
  }

  // Unnormalized scores [B·T, V]; row t scores byte t given bytes < t.
  Tensor logits(std::span<const std::uint8_t> bytes, std::size_t batch = 1) const { return run(bytes, batch).logits; }

  // Natural-log probabilities [B·T, V].
  Tensor log_probs(std::span<const std::uint8_t> bytes, std::size_t batch = 1) const {
    return log_softmax_last(logits(bytes, batch));
  }

  // Mean next-byte cross-entropy in bits over positions with nonzero mask.
  Tensor loss_bits(std::span<const std::uint8_t> bytes, std::size_t batch, std::span<const real> mask = {}) const {
    std::vector<int> targets(bytes.begin(), bytes.end());
    return cross_entropy_bits(logits(bytes, batch), targets, mask);
  }

 private:
  void check_batch(std::span<const std::uint8_t> bytes, std::size_t batch) const {
    if (batch == 0 || bytes.size() != batch * config_.context_length) {
      throw ShapeError("expected " + std::to_string(batch) + " x " + std::to_string(config_.context_length) +
                       " bytes, got " + std::to_string(bytes.size()));
    }
    for (auto b : bytes) {
      if (b >= config_.vocab_size) throw DataError("byte id " + std::to_string(b) + " outside vocabulary");
    }
  }

  // x = x + relu(conv_w(x)) for widths 3, 5, 7.
  Tensor conv_stack(Tensor x) const {
    for (std::size_t w : kConvWidths) {
      const std::string p = "global.conv" + std::to_string(w);
      x = add(x, relu(causal_conv1d(x, params_.at(p + ".weight"), params_.at(p + ".bias"))));
    }
    return x;
  }

  Tensor drop(const Tensor& x) const { return dropout(x, config_.dropout, dropout_rng_, training_); }

  // Pre-norm decoder stack on x[N, t, C]. When r > 0, rows of N form groups
  // of `group` consecutive patches and each layer's attention also sees the
  // last r keys/values of the previous patch in the group, with rotary
  // positions.
  Tensor transformer(const std::string& prefix, Tensor x, std::size_t layers, std::size_t heads, std::size_t group,
                     std::size_t r) const {
    for (std::size_t l = 0; l < layers; ++l) {
      const std::string p = prefix + ".layers." + std::to_string(l) + ".";
      const Tensor a = layer_norm(x, params_.at(p + "ln1.gain"), params_.at(p + "ln1.bias"));
      const Tensor q = linear(a, params_.at(p + "attn.wq"));
      const Tensor k = linear(a, params_.at(p + "attn.wk"));
      const Tensor v = linear(a, params_.at(p + "attn.wv"));
      Tensor att;
      if (r > 0) {
        att = causal_attention(q, k, v, heads, previous_patch_tail(k, group, r), previous_patch_tail(v, group, r),
                               true);
      } else {
        att = causal_attention(q, k, v, heads);
      }
      x = add(x, drop(linear(att, params_.at(p + "attn.wo"))));
      const Tensor f = layer_norm(x, params_.at(p + "ln2.gain"), params_.at(p + "ln2.bias"));
      const Tensor hidden = relu(linear(f, params_.at(p + "ff.w1"), params_.at(p + "ff.b1")));
      x = add(x, drop(linear(hidden, params_.at(p + "ff.w2"), params_.at(p + "ff.b2"))));
    }
    if (layers > 0) x = layer_norm(x, params_.at(prefix + ".ln_f.gain"), params_.at(prefix + ".ln_f.bias"));
    return x;
  }

  ModelConfig config_;
  Parameters params_;
  bool training_ = false;
  Rng* dropout_rng_ = nullptr;
};

}  // namespace megabyte
