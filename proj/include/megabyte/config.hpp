#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "megabyte/core.hpp"

namespace megabyte {

// Architecture of one MEGABYTE decoder.
struct ModelConfig {
  std::size_t vocab_size = 256;      // V
  std::size_t context_length = 64;   // T, bytes per window
  std::size_t patch_size = 4;        // P
  std::size_t global_dim = 16;       // D_G, per-byte slice of the global model width
  std::size_t local_dim = 32;        // D_L
  std::size_t global_layers = 2;
  std::size_t local_layers = 2;
  std::size_t global_heads = 2;
  std::size_t local_heads = 2;
  std::size_t ff_multiplier = 4;     // feedforward hidden = multiplier · width
  std::size_t cross_patch_window = 0;  // r; 0 disables cross-patch attention
  bool conv_encoder = false;
  bool no_local = false;
  bool no_global = false;
  double dropout = 0.1;

  std::size_t patch_count() const { return context_length / patch_size; }
  std::size_t global_width() const { return patch_size * global_dim; }
  bool cross_patch_attention() const { return cross_patch_window > 0; }
  bool uses_global() const { return !no_global; }
  bool uses_local_transformer() const { return !no_local; }
  // Layer counts that actually run, for serial-step accounting.
  std::size_t effective_global_layers() const { return no_global ? 0 : global_layers; }
  std::size_t effective_local_layers() const { return no_local ? 0 : local_layers; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
    if (vocab_size < 1) fail("vocab_size must be >= 1");
    if (patch_size < 1) fail("patch_size must be >= 1");
    if (context_length < 1) fail("context_length must be >= 1");
    if (context_length % patch_size != 0) fail("context_length must be a multiple of patch_size");
    if (global_dim < 1 || local_dim < 1) fail("global_dim and local_dim must be >= 1");
    if (no_local && no_global) fail("no_local and no_global are mutually exclusive");
    if (ff_multiplier < 1) fail("ff_multiplier must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0,1)");
    if (uses_global() && global_layers > 0) {
      if (global_heads < 1 || global_width() % global_heads != 0)
        fail("patch_size*global_dim must be divisible by global_heads");
    }
    if (uses_local_transformer() && local_layers > 0) {
      if (local_heads < 1 || local_dim % local_heads != 0) fail("local_dim must be divisible by local_heads");
      if (cross_patch_window > patch_size) fail("cross_patch_window must be <= patch_size");
      if (cross_patch_window > 0 && (local_dim / local_heads) % 2 != 0)
        fail("cross-patch attention uses rotary embeddings and needs an even local head dimension");
    }
  }
};

// Optimization recipe: Adam with decoupled weight decay, gradient clipping,
// linear warmup followed by linear decay to end_lr.
struct TrainConfig {
  double peak_lr = 2e-4;
  std::size_t warmup_updates = 500;
  std::size_t total_updates = 1000;
  double end_lr = 0.0;
  double clip_norm = 1.0;
  double weight_decay = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  double init_std = 0.006;
  std::size_t batch_size = 8;
  std::size_t window_stride = 0;  // 0 means context_length
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid train config: " + m); };
    if (warmup_updates > total_updates) fail("warmup_updates must be <= total_updates");
    if (peak_lr < 0 || end_lr < 0 || clip_norm < 0 || weight_decay < 0) fail("rates must be >= 0");
    if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1) fail("adam betas must be in [0,1)");
    if (adam_eps <= 0) fail("adam_eps must be > 0");
    if (init_std <= 0) fail("init_std must be > 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
  }
};

}  // namespace megabyte
