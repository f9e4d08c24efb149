#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "megabyte/config.hpp"
#include "megabyte/tensor.hpp"

namespace megabyte {

// How a parameter is initialized and whether weight decay touches it.
enum class ParamKind {
  kMatrix,     // projection / feedforward / conv weights: trunc-normal init, decayed
  kEmbedding,  // lookup tables and pad embeddings: trunc-normal init, not decayed
  kGain,       // layer-norm gain: ones
  kBias,       // zeros
  kZeroInit,   // learned but starts at zero (local positions)
};

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

inline bool decays(ParamKind kind) { return kind == ParamKind::kMatrix; }

namespace detail {

inline void transformer_inventory(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t layers,
                                  std::size_t width, std::size_t ff_multiplier) {
  const std::size_t hidden = width * ff_multiplier;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = prefix + ".layers." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", {width}, ParamKind::kGain});
    out.push_back({p + "ln1.bias", {width}, ParamKind::kBias});
    out.push_back({p + "attn.wq", {width, width}, ParamKind::kMatrix});
    out.push_back({p + "attn.wk", {width, width}, ParamKind::kMatrix});
    out.push_back({p + "attn.wv", {width, width}, ParamKind::kMatrix});
    out.push_back({p + "attn.wo", {width, width}, ParamKind::kMatrix});
    out.push_back({p + "ln2.gain", {width}, ParamKind::kGain});
    out.push_back({p + "ln2.bias", {width}, ParamKind::kBias});
    out.push_back({p + "ff.w1", {width, hidden}, ParamKind::kMatrix});
    out.push_back({p + "ff.b1", {hidden}, ParamKind::kBias});
    out.push_back({p + "ff.w2", {hidden, width}, ParamKind::kMatrix});
    out.push_back({p + "ff.b2", {width}, ParamKind::kBias});
  }
  if (layers > 0) {
    out.push_back({prefix + ".ln_f.gain", {width}, ParamKind::kGain});
    out.push_back({prefix + ".ln_f.bias", {width}, ParamKind::kBias});
  }
}

}  // namespace detail

inline constexpr std::size_t kConvWidths[] = {3, 5, 7};

// Every learnable tensor the config calls for, in a fixed order.
inline std::vector<ParamSpec> parameter_inventory(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  const std::size_t V = c.vocab_size, T = c.context_length, P = c.patch_size;
  const std::size_t DG = c.global_dim, DL = c.local_dim;
  if (c.uses_global()) {
    out.push_back({"global.embed", {V, DG}, ParamKind::kEmbedding});
    out.push_back({"global.pos", {T, DG}, ParamKind::kEmbedding});
    out.push_back({"global.pad", {P, DG}, ParamKind::kEmbedding});
    if (c.conv_encoder) {
      for (std::size_t w : kConvWidths) {
        const std::string p = "global.conv" + std::to_string(w);
        out.push_back({p + ".weight", {w, DG, DG}, ParamKind::kMatrix});
        out.push_back({p + ".bias", {DG}, ParamKind::kBias});
      }
    }
    detail::transformer_inventory(out, "global", c.global_layers, c.global_width(), c.ff_multiplier);
    out.push_back({"global_to_local", {DG, DL}, ParamKind::kMatrix});
  }
  out.push_back({"local.embed", {V, DL}, ParamKind::kEmbedding});
  if (c.uses_local_transformer()) {
    out.push_back({"local.pad", {DL}, ParamKind::kEmbedding});
    out.push_back({"local.pos", {P, DL}, ParamKind::kZeroInit});
    detail::transformer_inventory(out, "local", c.local_layers, DL, c.ff_multiplier);
  }
  return out;
}

// Non-embedding parameter counts for the cost model: `global` are applied once
// per patch (global transformer layers), `local` once per byte (local layers,
// the global-to-local projection, conv encoder).
struct ParameterCounts {
  std::size_t global = 0;
  std::size_t local = 0;
  std::size_t embedding = 0;
  std::size_t total() const { return global + local + embedding; }
};

inline ParameterCounts count_parameters(const ModelConfig& c) {
  ParameterCounts counts;
  for (const auto& spec : parameter_inventory(c)) {
    const std::size_t n = shape_numel(spec.shape);
    if (spec.kind == ParamKind::kEmbedding || spec.kind == ParamKind::kZeroInit) {
      counts.embedding += n;
    } else if (spec.name.starts_with("global.layers.") || spec.name.starts_with("global.ln_f.")) {
      counts.global += n;
    } else {
      counts.local += n;
    }
  }
  return counts;
}

// Named, ordered collection of learnable tensors.
class Parameters {
 public:
  void add(std::string name, Tensor tensor) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(tensor));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].second;
  }
  Tensor& at(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const Parameters&>(*this).at(name));
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  // Fresh leaves with copied values (no shared storage).
  Parameters clone() const {
    Parameters out;
    for (const auto& [name, t] : entries_) out.add(name, t.detach());
    return out;
  }

  // Throws unless names and shapes match the config's inventory exactly.
  void check_against(const ModelConfig& config) const {
    const auto inventory = parameter_inventory(config);
    if (inventory.size() != entries_.size()) {
      throw ConfigError("parameter set has " + std::to_string(entries_.size()) + " tensors, config expects " +
                        std::to_string(inventory.size()));
    }
    for (const auto& spec : inventory) {
      if (!contains(spec.name)) throw ConfigError("missing parameter: " + spec.name);
      if (at(spec.name).shape() != spec.shape) {
        throw ConfigError("parameter " + spec.name + " has shape " + shape_str(at(spec.name).shape()) +
                          ", config expects " + shape_str(spec.shape));
      }
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace megabyte
