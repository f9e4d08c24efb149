#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "megabyte/core.hpp"

namespace megabyte {

using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

enum class ArchKind { kTransformer, kLinearTransformer, kMegabyte };

inline std::string to_string(ArchKind k) {
  switch (k) {
    case ArchKind::kTransformer:
      return "transformer";
    case ArchKind::kLinearTransformer:
      return "linear_transformer";
    case ArchKind::kMegabyte:
      return "megabyte";
  }
  return "?";
}

inline ArchKind parse_arch(const std::string& s) {
  if (s == "transformer") return ArchKind::kTransformer;
  if (s == "linear_transformer" || s == "linear") return ArchKind::kLinearTransformer;
  if (s == "megabyte") return ArchKind::kMegabyte;
  throw ConfigError("unknown architecture '" + s + "' (expected transformer, linear_transformer, megabyte)");
}

// Non-embedding parameter counts and shape of one architecture. Transformers
// use `params` and `layers`; MEGABYTE uses the global/local fields.
struct ArchSpec {
  ArchKind kind = ArchKind::kTransformer;
  std::uint64_t params = 0;         // m
  std::uint64_t global_params = 0;  // m_g
  std::uint64_t local_params = 0;   // m_l
  std::uint64_t dim = 0;            // D (linear-attention term)
  std::uint64_t patch_size = 1;     // P
  std::uint64_t layers = 0;         // transformer layer count
  std::uint64_t global_layers = 0;
  std::uint64_t local_layers = 0;

  static ArchSpec transformer(std::uint64_t m, std::uint64_t layers = 0) {
    ArchSpec s;
    s.params = m;
    s.layers = layers;
    return s;
  }
  static ArchSpec linear_transformer(std::uint64_t m, std::uint64_t dim, std::uint64_t layers = 0) {
    ArchSpec s = transformer(m, layers);
    s.kind = ArchKind::kLinearTransformer;
    s.dim = dim;
    return s;
  }
  static ArchSpec megabyte(std::uint64_t m_g, std::uint64_t m_l, std::uint64_t patch, std::uint64_t l_global = 0,
                           std::uint64_t l_local = 0) {
    ArchSpec s;
    s.kind = ArchKind::kMegabyte;
    s.global_params = m_g;
    s.local_params = m_l;
    s.patch_size = patch;
    s.global_layers = l_global;
    s.local_layers = l_local;
    return s;
  }

  void validate() const {
    if (kind == ArchKind::kMegabyte) {
      if (patch_size < 1) throw ConfigError("megabyte spec needs patch_size >= 1");
      if (global_params == 0 && local_params == 0) throw ConfigError("megabyte spec needs a positive parameter count");
    } else {
      if (params == 0) throw ConfigError(to_string(kind) + " spec needs m > 0");
      if (kind == ArchKind::kLinearTransformer && dim == 0) throw ConfigError("linear_transformer spec needs D > 0");
    }
  }
};

// transformer 2m; megabyte 2(m_g/P + m_l); linear transformer 2m + 9D.
inline Rational flops_per_token(const ArchSpec& s) {
  s.validate();
  switch (s.kind) {
    case ArchKind::kTransformer:
      return Rational(2 * BigInt(s.params));
    case ArchKind::kLinearTransformer:
      return Rational(2 * BigInt(s.params) + 9 * BigInt(s.dim));
    case ArchKind::kMegabyte:
      return 2 * (Rational(BigInt(s.global_params), BigInt(s.patch_size)) + Rational(BigInt(s.local_params)));
  }
  return 0;
}

namespace detail {

inline void require_divisible(std::uint64_t T, std::uint64_t P) {
  if (P == 0 || T == 0 || T % P != 0) {
    throw ConfigError("sequence length " + std::to_string(T) + " must be a positive multiple of patch size " +
                      std::to_string(P));
  }
}

}  // namespace detail

// (T/P)² + T·P attention score computations for MEGABYTE; halved when masked.
inline Rational attention_ops(std::uint64_t T, std::uint64_t P, bool masked = false) {
  detail::require_divisible(T, P);
  const BigInt K = T / P;
  Rational ops(K * K + BigInt(T) * P);
  return masked ? ops / 2 : ops;
}

// T² for a full-attention transformer; halved when masked.
inline Rational transformer_attention_ops(std::uint64_t T, bool masked = false) {
  Rational ops(BigInt(T) * T);
  return masked ? ops / 2 : ops;
}

// The same formula for any real-valued P (no divisibility requirement).
inline Rational attention_cost(std::uint64_t T, std::uint64_t P) {
  if (P == 0) throw ConfigError("patch size must be >= 1");
  const Rational K{BigInt(T), BigInt(P)};
  return K * K + Rational(BigInt(T) * P);
}

struct PatchChoice {
  double continuous_optimum = 0;     // (2T)^{1/3}
  std::uint64_t cube_root_rule = 0;  // round(T^{1/3})
  double cube_root_cost_bound = 0;   // T^{4/3}
  std::uint64_t best_integer = 0;    // integer P in [1, T] minimizing the formula cost
  std::uint64_t best_divisor = 0;    // divisor of T minimizing the formula cost
};

// Divisor of T closest to x (smaller one on ties).
inline std::uint64_t nearest_divisor(std::uint64_t T, double x) {
  if (T == 0) throw ConfigError("T must be >= 1");
  std::uint64_t best = 1;
  double best_gap = std::abs(x - 1.0);
  for (std::uint64_t d = 2; d <= T; ++d) {
    if (T % d != 0) continue;
    const double gap = std::abs(x - static_cast<double>(d));
    if (gap < best_gap) {
      best = d;
      best_gap = gap;
    }
  }
  return best;
}

inline PatchChoice optimal_patch(std::uint64_t T) {
  if (T == 0) throw ConfigError("optimal_patch: T must be >= 1");
  PatchChoice c;
  const double t = static_cast<double>(T);
  c.continuous_optimum = std::cbrt(2.0 * t);
  c.cube_root_rule = static_cast<std::uint64_t>(std::llround(std::cbrt(t)));
  if (c.cube_root_rule == 0) c.cube_root_rule = 1;
  c.cube_root_cost_bound = std::pow(std::cbrt(t), 4.0);
  const std::uint64_t r = c.cube_root_rule;
  if (r * r * r == T) c.cube_root_cost_bound = static_cast<double>(T * r);
  Rational best_cost, best_div_cost;
  for (std::uint64_t P = 1; P <= T; ++P) {
    const Rational cost = attention_cost(T, P);
    if (c.best_integer == 0 || cost < best_cost) {
      c.best_integer = P;
      best_cost = cost;
    }
    if (T % P == 0 && (c.best_divisor == 0 || cost < best_div_cost)) {
      c.best_divisor = P;
      best_div_cost = cost;
    }
    if (Rational(BigInt(T) * P) > best_cost) break;  // T·P alone already exceeds the best
  }
  return c;
}

struct SerialSteps {
  BigInt megabyte;
  BigInt transformer;
  Rational ratio() const { return Rational(megabyte, transformer); }
};

// MEGABYTE (T/P)(L_global + P·L_local) against a transformer running
// T·(L_global + L_local) serial layers, or T·transformer_layers when the
// baseline's depth is given separately.
inline SerialSteps serial_steps(std::uint64_t l_global, std::uint64_t l_local, std::uint64_t P, std::uint64_t T,
                                std::optional<std::uint64_t> transformer_layers = std::nullopt) {
  detail::require_divisible(T, P);
  SerialSteps s;
  s.megabyte = BigInt(T / P) * (BigInt(l_global) + BigInt(P) * l_local);
  s.transformer = BigInt(T) * transformer_layers.value_or(l_global + l_local);
  return s;
}

// Exact decimal when the denominator divides a power of ten, else "num/den".
inline std::string rational_string(const Rational& r) {
  BigInt num = boost::multiprecision::numerator(r), den = boost::multiprecision::denominator(r);
  if (den == 1) return num.str();
  BigInt d = den;
  std::size_t twos = 0, fives = 0;
  while (d % 2 == 0) d /= 2, ++twos;
  while (d % 5 == 0) d /= 5, ++fives;
  if (d != 1) return num.str() + "/" + den.str();
  const std::size_t digits = std::max(twos, fives);
  BigInt scaled = num * boost::multiprecision::pow(BigInt(10), static_cast<unsigned>(digits)) / den;
  const bool negative = scaled < 0;
  if (negative) scaled = -scaled;
  std::string s = scaled.str();
  if (s.size() <= digits) s.insert(0, digits - s.size() + 1, '0');
  s.insert(s.size() - digits, ".");
  return negative ? "-" + s : s;
}

struct CostRow {
  ArchSpec spec;
  std::uint64_t T = 0;
  Rational flops;
  Rational attn_ops;
  BigInt serial_steps;
};

// Per-token FLOPs, attention score count and serial steps for one spec at one
// sequence length. Linear transformers build no score matrix (attn_ops 0).
inline CostRow cost_row(const ArchSpec& s, std::uint64_t T, bool masked = false) {
  CostRow row{s, T, flops_per_token(s), 0, 0};
  if (s.kind == ArchKind::kMegabyte) {
    row.attn_ops = attention_ops(T, s.patch_size, masked);
    row.serial_steps = serial_steps(s.global_layers, s.local_layers, s.patch_size, T).megabyte;
  } else {
    row.attn_ops = s.kind == ArchKind::kTransformer ? transformer_attention_ops(T, masked) : Rational(0);
    row.serial_steps = BigInt(T) * s.layers;
  }
  return row;
}

inline std::vector<CostRow> sweep(const std::vector<ArchSpec>& grid, const std::vector<std::uint64_t>& lengths,
                                  bool masked = false) {
  if (grid.empty()) throw ConfigError("cost sweep needs at least one architecture");
  if (lengths.empty()) throw ConfigError("cost sweep needs at least one sequence length");
  std::vector<CostRow> rows;
  for (const auto& s : grid)
    for (auto T : lengths) rows.push_back(cost_row(s, T, masked));
  return rows;
}

inline std::string sweep_to_csv(const std::vector<CostRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    if (r.spec.kind == ArchKind::kLinearTransformer) {
      out += "# linear_transformer flops_per_token = 2m + 9D; the 9D attention estimate may underestimate real cost\n";
      break;
    }
  }
  out += "kind,m_g,m_l,P,D,T,flops_per_token,attn_ops,serial_steps\n";
  for (const auto& r : rows) {
    const auto& s = r.spec;
    const bool mb = s.kind == ArchKind::kMegabyte;
    out += to_string(s.kind) + "," + std::to_string(mb ? s.global_params : s.params) + "," +
           std::to_string(mb ? s.local_params : 0) + "," + std::to_string(mb ? s.patch_size : 1) + "," +
           std::to_string(s.dim) + "," + std::to_string(r.T) + "," + rational_string(r.flops) + "," +
           rational_string(r.attn_ops) + "," + r.serial_steps.str() + "\n";
  }
  return out;
}

// "660M", "5.8B", "170e9", "151000000": exact non-negative integer sizes with
// optional K/M/B/G/T suffix.
inline std::uint64_t parse_size(const std::string& text) {
  auto fail = [&] { throw ConfigError("malformed size '" + text + "'"); };
  std::string s = text;
  if (s.empty()) fail();
  unsigned scale_exp = 0;
  const char last = static_cast<char>(std::toupper(static_cast<unsigned char>(s.back())));
  const std::string suffixes = "KMBGT";
  if (auto pos = suffixes.find(last); pos != std::string::npos) {
    static constexpr unsigned kExp[] = {3, 6, 9, 9, 12};
    scale_exp = kExp[pos];
    s.pop_back();
  }
  std::string mantissa = s, exponent;
  if (auto e = s.find_first_of("eE"); e != std::string::npos) {
    if (scale_exp != 0) fail();
    mantissa = s.substr(0, e);
    exponent = s.substr(e + 1);
    if (exponent.empty() || exponent.size() > 2) fail();
    for (char c : exponent)
      if (!std::isdigit(static_cast<unsigned char>(c))) fail();
    scale_exp = static_cast<unsigned>(std::stoul(exponent));
  }
  std::string digits;
  std::size_t frac_digits = 0;
  bool seen_dot = false;
  for (char c : mantissa) {
    if (c == '.') {
      if (seen_dot) fail();
      seen_dot = true;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      digits += c;
      if (seen_dot) ++frac_digits;
    } else {
      fail();
    }
  }
  if (digits.empty()) fail();
  Rational value{BigInt(digits)};
  value /= BigInt(boost::multiprecision::pow(BigInt(10), static_cast<unsigned>(frac_digits)));
  value *= BigInt(boost::multiprecision::pow(BigInt(10), scale_exp));
  if (boost::multiprecision::denominator(value) != 1) fail();
  const BigInt n = boost::multiprecision::numerator(value);
  if (n > BigInt(std::numeric_limits<std::uint64_t>::max())) fail();
  return n.convert_to<std::uint64_t>();
}

struct SizeComparison {
  ArchSpec megabyte;
  ArchSpec transformer;
};

// Three reference MEGABYTE/transformer size pairs at P=8.
inline std::vector<SizeComparison> reference_size_pairs() {
  return {
      {ArchSpec::megabyte(452'000'000, 151'000'000, 8), ArchSpec::transformer(660'000'000)},
      {ArchSpec::megabyte(5'800'000'000, 604'000'000, 8), ArchSpec::transformer(6'700'000'000)},
      {ArchSpec::megabyte(170'000'000'000, 3'200'000'000, 8), ArchSpec::transformer(175'000'000'000)},
  };
}

}  // namespace megabyte
