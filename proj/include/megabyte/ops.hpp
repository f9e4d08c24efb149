#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "megabyte/parallel.hpp"
#include "megabyte/rng.hpp"
#include "megabyte/tensor.hpp"

namespace megabyte {

inline constexpr real kLayerNormEps = real(1e-5);
inline constexpr double kRotaryBase = 10000.0;

// Counts query-key score evaluations made by causal_attention. Used to check
// the attention cost law against an instrumented forward pass.
inline std::atomic<std::uint64_t>& attention_score_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

namespace kernel {

// C[m×n] += A[m×k] · B[k×n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const real* a, const real* b, real* c) {
  parallel_for(m, k * n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      real* crow = c + i * n;
      const real* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const real av = arow[p];
        if (av == real(0)) continue;
        const real* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C[m×n] += Aᵀ · B with A stored [k×m], B [k×n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const real* a, const real* b, real* c) {
  parallel_for(m, k * n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      real* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const real av = a[p * m + i];
        if (av == real(0)) continue;
        const real* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C[m×n] += A[m×k] · Bᵀ with B stored [n×k]
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const real* a, const real* b, real* c) {
  std::vector<real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

inline void rotate_pairs(real* vec, std::size_t d, double position, double sign) {
  for (std::size_t i = 0; i + 1 < d; i += 2) {
    const double freq = std::pow(kRotaryBase, -static_cast<double>(i) / static_cast<double>(d));
    const double angle = sign * position * freq;
    const real c = static_cast<real>(std::cos(angle));
    const real s = static_cast<real>(std::sin(angle));
    const real x0 = vec[i];
    const real x1 = vec[i + 1];
    vec[i] = x0 * c - x1 * s;
    vec[i + 1] = x0 * s + x1 * c;
  }
}

}  // namespace kernel

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

inline std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<real> out(m * n, real(0));
  kernel::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const real* dc = self.grad.data();
    const real* av = self.inputs[0]->data.data();
    const real* bv = self.inputs[1]->data.data();
    if (real* da = detail::input_grad(self, 0)) kernel::gemm_nt(m, n, k, dc, bv, da);
    if (real* db = detail::input_grad(self, 1)) kernel::gemm_tn(k, m, n, av, dc, db);
  });
}

// a[m×k] · b[n×k]ᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<real> out(m * n, real(0));
  kernel::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::make_result("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const real* dc = self.grad.data();
    const real* av = self.inputs[0]->data.data();
    const real* bv = self.inputs[1]->data.data();
    if (real* da = detail::input_grad(self, 0)) kernel::gemm_nn(m, n, k, dc, bv, da);
    if (real* db = detail::input_grad(self, 1)) kernel::gemm_tn(n, m, k, dc, av, db);
  });
}

// x[..., in] · w[in×out] (+ bias[out]) applied to every leading row.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  detail::require(w.rank() == 2 && detail::last_dim(x) == w.dim(0),
                  "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), out_dim = w.dim(1), rows = x.numel() / in;
  if (bias.defined()) detail::require(bias.numel() == out_dim, "linear: bias size mismatch");
  std::vector<real> out(rows * out_dim, real(0));
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_dim);
  }
  kernel::gemm_nn(rows, in, out_dim, x.data().data(), w.data().data(), out.data());
  Shape shape = x.shape();
  shape.back() = out_dim;
  return detail::make_result("linear", std::move(shape), std::move(out), {x, w, bias},
                             [rows, in, out_dim](detail::Node& self) {
                               const real* dy = self.grad.data();
                               const real* xv = self.inputs[0]->data.data();
                               const real* wv = self.inputs[1]->data.data();
                               if (real* dx = detail::input_grad(self, 0)) kernel::gemm_nt(rows, out_dim, in, dy, wv, dx);
                               if (real* dw = detail::input_grad(self, 1)) kernel::gemm_tn(in, rows, out_dim, xv, dy, dw);
                               if (real* db = detail::input_grad(self, 2)) {
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < out_dim; ++j) db[j] += dy[r * out_dim + j];
                               }
                             });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<real> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& g = self.grad;
    for (std::size_t k = 0; k < 2; ++k) {
      if (real* d = detail::input_grad(self, k))
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

// a + b where b's shape equals the trailing dimensions of a.
inline Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require(bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin()),
                  "add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(as));
  const std::size_t inner = b.numel();
  std::vector<real> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % inner];
  return detail::make_result("add_broadcast", as, std::move(out), {a, b}, [inner](detail::Node& self) {
    const auto& g = self.grad;
    if (real* da = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (real* db = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) db[i % inner] += g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    if (real* da = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    if (real* db = detail::input_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
  });
}

inline Tensor scale(const Tensor& x, real factor) {
  std::vector<real> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result("scale", x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    if (real* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += factor * self.grad[i];
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<real> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > real(0) ? v : real(0);
  return detail::make_result("relu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    if (real* d = detail::input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->data;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (xv[i] > real(0)) d[i] += self.grad[i];
    }
  });
}

inline Tensor sum(const Tensor& x) {
  real total = 0;
  for (real v : x.data()) total += v;
  return detail::make_result("sum", {1}, {total}, {x}, [](detail::Node& self) {
    if (real* d = detail::input_grad(self, 0)) {
      const std::size_t n = self.inputs[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[0];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<real> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (real* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

inline Tensor softmax_last(const Tensor& x) {
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  std::vector<real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const real* in = x.data().data() + r * n;
    real* o = out.data() + r * n;
    const real mx = *std::max_element(in, in + n);
    real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return detail::make_result("softmax_last", x.shape(), std::move(out), {x}, [n, rows](detail::Node& self) {
    real* d = detail::input_grad(self, 0);
    if (!d) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const real* y = self.data.data() + r * n;
      const real* g = self.grad.data() + r * n;
      real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

inline Tensor log_softmax_last(const Tensor& x) {
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  std::vector<real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const real* in = x.data().data() + r * n;
    real* o = out.data() + r * n;
    const real mx = *std::max_element(in, in + n);
    real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const real lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  return detail::make_result("log_softmax_last", x.shape(), std::move(out), {x}, [n, rows](detail::Node& self) {
    real* d = detail::input_grad(self, 0);
    if (!d) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const real* y = self.data.data() + r * n;
      const real* g = self.grad.data() + r * n;
      real total = 0;
      for (std::size_t j = 0; j < n; ++j) total += g[j];
      for (std::size_t j = 0; j < n; ++j) d[r * n + j] += g[j] - std::exp(y[j]) * total;
    }
  });
}

// Pre-norm layer normalization over the last axis, eps = 1e-5.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = detail::last_dim(x), rows = x.numel() / d;
  detail::require(gain.numel() == d && bias.numel() == d, "layer_norm: gain/bias must have size " + std::to_string(d));
  std::vector<real> out(x.numel());
  std::vector<real> xhat(x.numel());
  std::vector<real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const real* in = x.data().data() + r * d;
    real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<real>(d);
    real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<real>(d);
    inv_std[r] = real(1) / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const real* g = self.grad.data();
        const auto& gv = self.inputs[1]->data;
        real* dx = detail::input_grad(self, 0);
        real* dgain = detail::input_grad(self, 1);
        real* dbias = detail::input_grad(self, 2);
        std::vector<real> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const real* gr = g + r * d;
          const real* xh = xhat.data() + r * d;
          if (dgain)
            for (std::size_t j = 0; j < d; ++j) dgain[j] += gr[j] * xh[j];
          if (dbias)
            for (std::size_t j = 0; j < d; ++j) dbias[j] += gr[j];
          if (!dx) continue;
          real mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = gr[j] * gv[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
          }
          mean_dxhat /= static_cast<real>(d);
          mean_dxhat_xhat /= static_cast<real>(d);
          for (std::size_t j = 0; j < d; ++j)
            dx[r * d + j] += inv_std[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      });
}

// Inverted dropout; identity when not training or rate is zero.
inline Tensor dropout(const Tensor& x, double rate, Rng* rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  if (!rng) throw Error("dropout in training mode needs an rng stream");
  const real keep_scale = static_cast<real>(1.0 / (1.0 - rate));
  std::vector<real> mask(x.numel());
  for (auto& m : mask) m = rng->uniform() >= rate ? keep_scale : real(0);
  std::vector<real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return detail::make_result("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    if (real* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < mask.size(); ++i) d[i] += self.grad[i] * mask[i];
  });
}

// Row lookup: out[i] = table[ids[i]].
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::require(table.rank() == 2, "embedding: table must be 2-D");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<real> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DataError("embedding: id " + std::to_string(ids[i]) + " out of range [0," + std::to_string(rows) + ")");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return detail::make_result("embedding", {ids.size(), d}, std::move(out), {table},
                             [d, saved = std::move(saved)](detail::Node& self) {
                               if (real* dt = detail::input_grad(self, 0)) {
                                 for (std::size_t i = 0; i < saved.size(); ++i) {
                                   real* row = dt + static_cast<std::size_t>(saved[i]) * d;
                                   for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
                                 }
                               }
                             });
}

// Concatenation along axis 0; trailing shapes must match.
inline Tensor concat0(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == b.rank() && std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1),
                  "concat0: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<real> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t split = a.numel();
  return detail::make_result("concat0", std::move(shape), std::move(out), {a, b}, [split](detail::Node& self) {
    const auto& g = self.grad;
    if (real* da = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < split; ++i) da[i] += g[i];
    if (real* db = detail::input_grad(self, 1))
      for (std::size_t i = split; i < g.size(); ++i) db[i - split] += g[i];
  });
}

// [N,m,d] ++ [N,n,d] -> [N,m+n,d]
inline Tensor concat_seq(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                  "concat_seq: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), m = a.dim(1), k = b.dim(1), d = a.dim(2);
  std::vector<real> out(n * (m + k) * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * m * d, m * d, out.data() + i * (m + k) * d);
    std::copy_n(b.data().data() + i * k * d, k * d, out.data() + i * (m + k) * d + m * d);
  }
  return detail::make_result("concat_seq", {n, m + k, d}, std::move(out), {a, b}, [n, m, k, d](detail::Node& self) {
    const real* g = self.grad.data();
    real* da = detail::input_grad(self, 0);
    real* db = detail::input_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const real* gi = g + i * (m + k) * d;
      if (da)
        for (std::size_t j = 0; j < m * d; ++j) da[i * m * d + j] += gi[j];
      if (db)
        for (std::size_t j = 0; j < k * d; ++j) db[i * k * d + j] += gi[m * d + j];
    }
  });
}

// x[N,t,d][:, start:start+len, :]
inline Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t len) {
  detail::require(x.rank() == 3 && len > 0 && start + len <= x.dim(1), "slice_seq: range out of bounds");
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<real> out(n * len * d);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data().data() + (i * t + start) * d, len * d, out.data() + i * len * d);
  return detail::make_result("slice_seq", {n, len, d}, std::move(out), {x}, [n, t, d, start, len](detail::Node& self) {
    if (real* dx = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len * d; ++j) dx[(i * t + start) * d + j] += self.grad[i * len * d + j];
  });
}

// Stacks `count` copies of x along a new leading axis.
inline Tensor repeat_leading(const Tensor& x, std::size_t count) {
  Shape shape{count};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t inner = x.numel();
  std::vector<real> out;
  out.reserve(count * inner);
  for (std::size_t i = 0; i < count; ++i) out.insert(out.end(), x.data().begin(), x.data().end());
  return detail::make_result("repeat_leading", std::move(shape), std::move(out), {x}, [inner](detail::Node& self) {
    if (real* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i % inner] += self.grad[i];
  });
}

// For x[N,t,c] viewed as groups of `group` consecutive rows along N (the
// patches of one sequence), returns out[n] = x[n-1][t-r:t] for patches with a
// predecessor in the same group and zeros for the first patch of each group.
inline Tensor previous_patch_tail(const Tensor& x, std::size_t group, std::size_t r) {
  detail::require(x.rank() == 3 && group > 0 && x.dim(0) % group == 0 && r >= 1 && r <= x.dim(1),
                  "previous_patch_tail: bad arguments for shape " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
  std::vector<real> out(n * r * c, real(0));
  for (std::size_t i = 0; i < n; ++i) {
    if (i % group == 0) continue;
    std::copy_n(x.data().data() + ((i - 1) * t + (t - r)) * c, r * c, out.data() + i * r * c);
  }
  return detail::make_result("previous_patch_tail", {n, r, c}, std::move(out), {x}, [n, t, c, r, group](detail::Node& self) {
    if (real* dx = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        if (i % group == 0) continue;
        for (std::size_t j = 0; j < r * c; ++j) dx[((i - 1) * t + (t - r)) * c + j] += self.grad[i * r * c + j];
      }
    }
  });
}

// Multi-head causal self-attention on token-major tensors.
//
// q, k, v: [N, t, heads·d]. Optional extra_k / extra_v: [N, r, heads·d] slots
// that every query may attend to (the previous patch's tail); they sit at
// positions -r..-1 ahead of position 0. Query i sees the extras and keys 0..i.
// With rotary=true queries and keys are rotated by their absolute positions
// (base 10000, pairs of adjacent dims) before scoring.
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                               const Tensor& extra_k = Tensor(), const Tensor& extra_v = Tensor(),
                               bool rotary = false) {
  detail::require(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
                  "causal_attention: q/k/v shapes differ or are not [N,t,C]");
  detail::require(heads > 0 && q.dim(2) % heads == 0, "causal_attention: channels not divisible by heads");
  const bool has_extra = extra_k.defined();
  detail::require(has_extra == extra_v.defined(), "causal_attention: extra keys and values must come together");
  const std::size_t n = q.dim(0), t = q.dim(1), channels = q.dim(2), d = channels / heads;
  const std::size_t r = has_extra ? extra_k.dim(1) : 0;
  if (has_extra) {
    detail::require(extra_k.rank() == 3 && extra_k.shape() == extra_v.shape() && extra_k.dim(0) == n &&
                        extra_k.dim(2) == channels,
                    "causal_attention: extra slots must be [N,r,C] matching q");
  }
  detail::require(!rotary || d % 2 == 0, "causal_attention: rotary needs an even head dimension");
  const std::size_t slots = r + t;
  const real inv_sqrt_d = real(1) / std::sqrt(static_cast<real>(d));

  // Gathers head h of batch b into contiguous (rotated) rows.
  auto gather = [=](const real* kdata, const real* edata, const real* qdata, std::size_t b, std::size_t h,
                    std::vector<real>& qs, std::vector<real>& ks, std::vector<real>& vs, const real* vdata,
                    const real* evdata) {
    for (std::size_t i = 0; i < t; ++i) {
      std::copy_n(qdata + (b * t + i) * channels + h * d, d, qs.data() + i * d);
      if (rotary) kernel::rotate_pairs(qs.data() + i * d, d, static_cast<double>(i), 1.0);
    }
    for (std::size_t j = 0; j < slots; ++j) {
      const real* ksrc = j < r ? edata + (b * r + j) * channels + h * d : kdata + (b * t + (j - r)) * channels + h * d;
      const real* vsrc = j < r ? evdata + (b * r + j) * channels + h * d : vdata + (b * t + (j - r)) * channels + h * d;
      std::copy_n(ksrc, d, ks.data() + j * d);
      std::copy_n(vsrc, d, vs.data() + j * d);
      if (rotary) kernel::rotate_pairs(ks.data() + j * d, d, static_cast<double>(j) - static_cast<double>(r), 1.0);
    }
  };

  const real* qd = q.data().data();
  const real* kd = k.data().data();
  const real* vd = v.data().data();
  const real* ekd = has_extra ? extra_k.data().data() : nullptr;
  const real* evd = has_extra ? extra_v.data().data() : nullptr;

  std::vector<real> out(n * t * channels, real(0));
  std::vector<real> probs(n * heads * t * slots, real(0));
  parallel_for(n * heads, t * slots * d, [&](std::size_t begin, std::size_t end) {
    std::vector<real> qs(t * d), ks(slots * d), vs(slots * d), scores(slots);
    for (std::size_t bh = begin; bh < end; ++bh) {
      const std::size_t b = bh / heads, h = bh % heads;
      gather(kd, ekd, qd, b, h, qs, ks, vs, vd, evd);
      for (std::size_t i = 0; i < t; ++i) {
        const std::size_t visible = r + i + 1;
        for (std::size_t j = 0; j < slots; ++j) {
          real s = 0;
          for (std::size_t c = 0; c < d; ++c) s += qs[i * d + c] * ks[j * d + c];
          scores[j] = s * inv_sqrt_d;
        }
        real mx = scores[0];
        for (std::size_t j = 1; j < visible; ++j) mx = std::max(mx, scores[j]);
        real z = 0;
        real* p = probs.data() + (bh * t + i) * slots;
        for (std::size_t j = 0; j < visible; ++j) z += (p[j] = std::exp(scores[j] - mx));
        for (std::size_t j = 0; j < visible; ++j) p[j] /= z;
        real* o = out.data() + (b * t + i) * channels + h * d;
        for (std::size_t j = 0; j < visible; ++j)
          for (std::size_t c = 0; c < d; ++c) o[c] += p[j] * vs[j * d + c];
      }
    }
  });
  attention_score_counter() += static_cast<std::uint64_t>(n * heads * t * slots);

  return detail::make_result(
      "causal_attention", q.shape(), std::move(out), {q, k, v, extra_k, extra_v},
      [=, probs = std::move(probs)](detail::Node& self) {
        const real* qd = self.inputs[0]->data.data();
        const real* kd = self.inputs[1]->data.data();
        const real* vd = self.inputs[2]->data.data();
        const real* ekd = has_extra ? self.inputs[3]->data.data() : nullptr;
        const real* evd = has_extra ? self.inputs[4]->data.data() : nullptr;
        real* dq = detail::input_grad(self, 0);
        real* dk = detail::input_grad(self, 1);
        real* dv = detail::input_grad(self, 2);
        real* dek = has_extra ? detail::input_grad(self, 3) : nullptr;
        real* dev = has_extra ? detail::input_grad(self, 4) : nullptr;
        const real* g = self.grad.data();
        std::vector<real> qs(t * d), ks(slots * d), vs(slots * d);
        std::vector<real> dqs(t * d), dks(slots * d), dvs(slots * d), dp(slots);
        for (std::size_t bh = 0; bh < n * heads; ++bh) {
          const std::size_t b = bh / heads, h = bh % heads;
          gather(kd, ekd, qd, b, h, qs, ks, vs, vd, evd);
          std::fill(dqs.begin(), dqs.end(), real(0));
          std::fill(dks.begin(), dks.end(), real(0));
          std::fill(dvs.begin(), dvs.end(), real(0));
          for (std::size_t i = 0; i < t; ++i) {
            const std::size_t visible = r + i + 1;
            const real* p = probs.data() + (bh * t + i) * slots;
            const real* go = g + (b * t + i) * channels + h * d;
            real weighted = 0;
            for (std::size_t j = 0; j < visible; ++j) {
              real s = 0;
              for (std::size_t c = 0; c < d; ++c) {
                s += go[c] * vs[j * d + c];
                dvs[j * d + c] += p[j] * go[c];
              }
              dp[j] = s;
              weighted += p[j] * s;
            }
            for (std::size_t j = 0; j < visible; ++j) {
              const real ds = p[j] * (dp[j] - weighted) * inv_sqrt_d;
              for (std::size_t c = 0; c < d; ++c) {
                dqs[i * d + c] += ds * ks[j * d + c];
                dks[j * d + c] += ds * qs[i * d + c];
              }
            }
          }
          if (rotary) {
            for (std::size_t i = 0; i < t; ++i) kernel::rotate_pairs(dqs.data() + i * d, d, static_cast<double>(i), -1.0);
            for (std::size_t j = 0; j < slots; ++j)
              kernel::rotate_pairs(dks.data() + j * d, d, static_cast<double>(j) - static_cast<double>(r), -1.0);
          }
          for (std::size_t i = 0; i < t; ++i) {
            if (dq)
              for (std::size_t c = 0; c < d; ++c) dq[(b * t + i) * channels + h * d + c] += dqs[i * d + c];
          }
          for (std::size_t j = 0; j < slots; ++j) {
            real* kdst = j < r ? dek : dk;
            real* vdst = j < r ? dev : dv;
            const std::size_t row = j < r ? b * r + j : b * t + (j - r);
            if (kdst)
              for (std::size_t c = 0; c < d; ++c) kdst[row * channels + h * d + c] += dks[j * d + c];
            if (vdst)
              for (std::size_t c = 0; c < d; ++c) vdst[row * channels + h * d + c] += dvs[j * d + c];
          }
        }
      });
}

// Left-zero-padded causal convolution over the time axis of x[N,t,d_in] with
// weight[width, d_in, d_out] and bias[d_out]:
//   out[n,i] = bias + Σ_j x[n, i-(width-1)+j] · weight[j]
// Tap width-1 multiplies the current position.
inline Tensor causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require(x.rank() == 3 && weight.rank() == 3 && weight.dim(1) == x.dim(2),
                  "causal_conv1d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  const std::size_t n = x.dim(0), t = x.dim(1), din = x.dim(2), width = weight.dim(0), dout = weight.dim(2);
  detail::require(bias.numel() == dout, "causal_conv1d: bias size mismatch");
  std::vector<real> out(n * t * dout);
  for (std::size_t row = 0; row < n * t; ++row) std::copy_n(bias.data().data(), dout, out.data() + row * dout);
  const real* xd = x.data().data();
  const real* wd = weight.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t shift = width - 1 - j;  // source row = i - shift
      if (shift >= t) continue;
      const std::size_t len = t - shift;
      kernel::gemm_nn(len, din, dout, xd + b * t * din, wd + j * din * dout, out.data() + (b * t + shift) * dout);
    }
  }
  return detail::make_result(
      "causal_conv1d", {n, t, dout}, std::move(out), {x, weight, bias}, [n, t, din, dout, width](detail::Node& self) {
        const real* g = self.grad.data();
        const real* xd = self.inputs[0]->data.data();
        const real* wd = self.inputs[1]->data.data();
        real* dx = detail::input_grad(self, 0);
        real* dw = detail::input_grad(self, 1);
        real* db = detail::input_grad(self, 2);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t j = 0; j < width; ++j) {
            const std::size_t shift = width - 1 - j;
            if (shift >= t) continue;
            const std::size_t len = t - shift;
            const real* gslice = g + (b * t + shift) * dout;
            if (dx) kernel::gemm_nt(len, dout, din, gslice, wd + j * din * dout, dx + b * t * din);
            if (dw) kernel::gemm_tn(din, len, dout, xd + b * t * din, gslice, dw + j * din * dout);
          }
          if (db)
            for (std::size_t i = 0; i < t; ++i)
              for (std::size_t o = 0; o < dout; ++o) db[o] += g[(b * t + i) * dout + o];
        }
      });
}

// Mean cross-entropy in bits over rows whose weight is nonzero. weights may be
// empty (all rows count). Gradient wrt logits is (softmax - onehot)·w/(count·ln2).
inline Tensor cross_entropy_bits(const Tensor& logits, std::span<const int> targets,
                                 std::span<const real> weights = {}) {
  detail::require(logits.rank() == 2 && logits.dim(0) == targets.size(), "cross_entropy_bits: logits/targets mismatch");
  detail::require(weights.empty() || weights.size() == targets.size(), "cross_entropy_bits: weights size mismatch");
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  std::vector<real> w(rows, real(1));
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), w.begin());
  real count = 0;
  for (real x : w) count += x;
  if (count <= real(0)) throw DataError("cross_entropy_bits: no unmasked positions");
  const real norm = real(1) / (count * std::numbers::ln2_v<real>);
  std::vector<real> probs(rows * v);
  real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) throw DataError("cross_entropy_bits: target out of range");
    const real* in = logits.data().data() + r * v;
    const real mx = *std::max_element(in, in + v);
    real z = 0;
    for (std::size_t j = 0; j < v; ++j) z += (probs[r * v + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    if (w[r] != real(0)) total += w[r] * (mx + std::log(z) - in[targets[r]]);
  }
  std::vector<int> saved(targets.begin(), targets.end());
  return detail::make_result("cross_entropy_bits", {1}, {total * norm}, {logits},
                             [rows, v, norm, w = std::move(w), probs = std::move(probs), saved = std::move(saved)](
                                 detail::Node& self) {
                               real* d = detail::input_grad(self, 0);
                               if (!d) return;
                               const real g = self.grad[0] * norm;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 if (w[r] == real(0)) continue;
                                 const real scale = g * w[r];
                                 for (std::size_t j = 0; j < v; ++j) d[r * v + j] += scale * probs[r * v + j];
                                 d[r * v + static_cast<std::size_t>(saved[r])] -= scale;
                               }
                             });
}

}  // namespace megabyte
