// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "umoe/tensor.hpp"

namespace umoe::ops {

namespace detail {

template <class T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class T>
bool wants(const typename Tensor<T>::Node& n) {
  return n.requires_grad;
}

}  // namespace detail

/// a[m×k] · b[k×n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return Tensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    const T* g = self.grad.data();
    if (A.requires_grad) {
      auto& ga = grad_of<T>(A);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B.data[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (B.requires_grad) {
      auto& gb = grad_of<T>(B);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

/// a[m×k] · b[n×k]ᵀ.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()) + "ᵀ");
  std::vector<T> out(m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += pa[i * k + p] * pb[j * k + p];
      out[i * n + j] = s;
    }
  return Tensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    const T* g = self.grad.data();
    if (A.requires_grad) {
      auto& ga = grad_of<T>(A);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * B.data[j * k + p];
        }
    }
    if (B.requires_grad) {
      auto& gb = grad_of<T>(B);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gv * A.data[i * k + p];
        }
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](auto& self) {
    for (int s = 0; s < 2; ++s) {
      auto& P = *self.parents[static_cast<std::size_t>(s)];
      if (!P.requires_grad) continue;
      auto& gp = grad_of<T>(P);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    }
  });
}

/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](auto& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) {
      auto& ga = grad_of<T>(A);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * B.data[i];
    }
    if (B.requires_grad) {
      auto& gb = grad_of<T>(B);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * A.data[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [s](auto& self) {
    auto& ga = grad_of<T>(*self.parents[0]);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * s;
  });
}

/// x[m×n] + bias[n] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_matrix(x, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.size() != n)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, bias}, [m, n](auto& self) {
    auto& X = *self.parents[0];
    auto& B = *self.parents[1];
    if (X.requires_grad) {
      auto& gx = grad_of<T>(X);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& gb = grad_of<T>(B);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
    }
  });
}

/// x · sigmoid(x).
template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](auto& self) {
    auto& X = *self.parents[0];
    auto& gx = grad_of<T>(X);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T sg = T(1) / (T(1) + std::exp(-X.data[i]));
      gx[i] += self.grad[i] * (sg * (T(1) + X.data[i] * (T(1) - sg)));
    }
  });
}

/// Softmax along `axis` (negative counts from the end), max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const auto r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.dim(static_cast<std::size_t>(axis));
  for (int i = 0; i < axis; ++i) outer *= x.dim(static_cast<std::size_t>(i));
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(static_cast<std::size_t>(i));
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        const T v = x[base + j * inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      T sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
    }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [outer, inner, n](auto& self) {
    auto& gx = grad_of<T>(*self.parents[0]);
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

/// Normalizes each length-d row to zero mean and unit variance, then
/// applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d)
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " vs input " + shape_str(x.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](auto& self) {
        auto& X = *self.parents[0];
        auto& G = *self.parents[1];
        auto& B = *self.parents[2];
        const auto& g = self.grad;
        if (G.requires_grad) {
          auto& gg = grad_of<T>(G);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (B.requires_grad) {
          auto& gb = grad_of<T>(B);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (X.requires_grad) {
          auto& gx = grad_of<T>(X);
          std::vector<T> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = g[r * d + j] * G.data[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * xhat[r * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      });
}

/// Sets entries above the diagonal of a square score matrix to -inf.
template <class T>
Tensor<T> causal_mask(const Tensor<T>& s) {
  detail::require_matrix(s, "causal_mask");
  const std::size_t t = s.dim(0), n = s.dim(1);
  std::vector<T> out(s.vec());
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = -std::numeric_limits<T>::infinity();
  return Tensor<T>::make_result(s.shape(), std::move(out), {s}, [t, n](auto& self) {
    auto& gs = grad_of<T>(*self.parents[0]);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j <= i && j < n; ++j) gs[i * n + j] += self.grad[i * n + j];
  });
}

/// Columns [c0, c1) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
  if (c0 > c1 || c1 > n) throw DimensionError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  std::vector<T> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * n + c0 + j];
  return Tensor<T>::make_result({m, w}, std::move(out), {x}, [m, n, w, c0](auto& self) {
    auto& gx = grad_of<T>(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += self.grad[i * w + j];
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts disagree");
    offs.push_back(n);
    n += p.dim(1);
  }
  std::vector<T> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + offs[k] + j] = parts[k][i * w + j];
  }
  return Tensor<T>::make_result({m, n}, std::move(out), parts, [m, n, offs](auto& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& P = *self.parents[k];
      if (!P.requires_grad) continue;
      auto& gp = grad_of<T>(P);
      const std::size_t w = P.shape[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += self.grad[i * n + offs[k] + j];
    }
  });
}

/// Rows [r0, r1) of a matrix.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t n = x.dim(1);
  if (r0 > r1 || r1 > x.dim(0)) throw DimensionError("slice_rows: range out of bounds for " + shape_str(x.shape()));
  std::vector<T> out(x.vec().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                     x.vec().begin() + static_cast<std::ptrdiff_t>(r1 * n));
  return Tensor<T>::make_result({r1 - r0, n}, std::move(out), {x}, [r0, n](auto& self) {
    auto& gx = grad_of<T>(*self.parents[0]);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[r0 * n + i] += self.grad[i];
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.dim(1) != n)
      throw DimensionError("concat_rows: widths disagree, " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    m += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
  return Tensor<T>::make_result({m, n}, std::move(out), parts, [](auto& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      auto& P = *pp;
      if (P.requires_grad) {
        auto& gp = grad_of<T>(P);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[off + i];
      }
      off += P.data.size();
    }
  });
}

/// Row gather: out[i] = table[ids[i]].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t v = table.dim(0), n = table.dim(1);
  std::vector<T> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v)
      throw DimensionError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                           shape_str(table.shape()));
    std::copy_n(table.data().data() + ids[i] * n, n, out.data() + i * n);
  }
  return Tensor<T>::make_result({ids.size(), n}, std::move(out), {table}, [ids, n](auto& self) {
    auto& gt = grad_of<T>(*self.parents[0]);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gt[ids[i] * n + j] += self.grad[i * n + j];
  });
}

/// out[t][s] = x[t][idx[t*k+s]] for a [T×n] matrix and k indices per row.
template <class T>
Tensor<T> take_along_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx, std::size_t k) {
  detail::require_matrix(x, "take_along_rows");
  const std::size_t t = x.dim(0), n = x.dim(1);
  if (idx.size() != t * k) throw DimensionError("take_along_rows: index count mismatch");
  std::vector<T> out(t * k);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t c = idx[i * k + s];
      if (c >= n) throw DimensionError("take_along_rows: column index out of range");
      out[i * k + s] = x[i * n + c];
    }
  return Tensor<T>::make_result({t, k}, std::move(out), {x}, [idx, t, k, n](auto& self) {
    auto& gx = grad_of<T>(*self.parents[0]);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t s = 0; s < k; ++s) gx[i * n + idx[i * k + s]] += self.grad[i * k + s];
  });
}

/// Gated accumulation of expert rows into token slots:
///   out[t] = Σ_s gates[t][s] · rows[slot_row[t*k+s]]   (s ascending)
/// Accumulation order per token is fixed by slot, independent of how the
/// rows were produced.
template <class T>
Tensor<T> combine_slots(const Tensor<T>& rows, const Tensor<T>& gates, const std::vector<std::size_t>& slot_row) {
  detail::require_matrix(rows, "combine_slots");
  detail::require_matrix(gates, "combine_slots");
  const std::size_t t = gates.dim(0), k = gates.dim(1), d = rows.dim(1);
  if (slot_row.size() != t * k) throw DimensionError("combine_slots: slot map size mismatch");
  std::vector<T> out(t * d, T(0));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t r = slot_row[i * k + s];
      if (r >= rows.dim(0)) throw DimensionError("combine_slots: row index out of range");
      const T g = gates[i * k + s];
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += g * rows[r * d + j];
    }
  return Tensor<T>::make_result({t, d}, std::move(out), {rows, gates}, [slot_row, t, k, d](auto& self) {
    auto& R = *self.parents[0];
    auto& G = *self.parents[1];
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t s = 0; s < k; ++s) {
        const std::size_t r = slot_row[i * k + s];
        const T* go = self.grad.data() + i * d;
        if (R.requires_grad) {
          auto& gr = grad_of<T>(R);
          const T g = G.data[i * k + s];
          for (std::size_t j = 0; j < d; ++j) gr[r * d + j] += g * go[j];
        }
        if (G.requires_grad) {
          auto& gg = grad_of<T>(G);
          T acc = 0;
          for (std::size_t j = 0; j < d; ++j) acc += go[j] * R.data[r * d + j];
          gg[i * k + s] += acc;
        }
      }
  });
}

/// Column means of a [m×n] matrix, shape [n].
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (m == 0) throw DimensionError("mean_rows: empty input");
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (auto& v : out) v /= static_cast<T>(m);
  return Tensor<T>::make_result({n}, std::move(out), {x}, [m, n](auto& self) {
    auto& gx = grad_of<T>(*self.parents[0]);
    const T inv = T(1) / static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += self.grad[j] * inv;
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) s += v;
  return Tensor<T>::make_result({1}, {s}, {x}, [](auto& self) {
    auto& gx = grad_of<T>(*self.parents[0]);
    for (auto& g : gx) g += self.grad[0];
  });
}

/// Elementwise mean of equally shaped tensors by pairwise reduction, so
/// identical inputs reproduce the input exactly when the count is a power
/// of two.
template <class T>
Tensor<T> mean_of(std::vector<Tensor<T>> xs) {
  if (xs.empty()) throw DimensionError("mean_of: no inputs");
  const auto count = static_cast<T>(xs.size());
  while (xs.size() > 1) {
    std::vector<Tensor<T>> next;
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2) next.push_back(add(xs[i], xs[i + 1]));
    if (xs.size() % 2) next.push_back(xs.back());
    xs = std::move(next);
  }
  return scale(xs[0], T(1) / count);
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, over positions where `ignore` is false.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                        const std::vector<bool>& ignore = {}) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) throw DimensionError("cross_entropy: target count does not match logits rows");
  if (!ignore.empty() && ignore.size() != t) throw DimensionError("cross_entropy: ignore mask length mismatch");
  std::vector<T> probs(t * v, T(0));
  T total = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!ignore.empty() && ignore[i]) continue;
    if (targets[i] >= v)
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " >= vocab " + std::to_string(v));
    const T* row = logits.data().data() + i * v;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < v; ++j) {
      if (std::isnan(row[j])) throw NumericError("cross_entropy: NaN logit");
      mx = std::max(mx, row[j]);
    }
    T se = 0;
    for (std::size_t j = 0; j < v; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[i * v + j] = e;
      se += e;
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= se;
    total += (mx + std::log(se)) - row[targets[i]];
    ++counted;
  }
  if (counted == 0) throw NumericError("cross_entropy: every position is ignored");
  const T n = static_cast<T>(counted);
  return Tensor<T>::make_result(
      {1}, {total / n}, {logits},
      [probs = std::move(probs), targets, ignore, t, v, n](auto& self) {
        auto& gl = grad_of<T>(*self.parents[0]);
        const T g = self.grad[0] / n;
        for (std::size_t i = 0; i < t; ++i) {
          if (!ignore.empty() && ignore[i]) continue;
          for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * probs[i * v + j];
          gl[i * v + targets[i]] -= g;
        }
      });
}

}  // namespace umoe::ops
