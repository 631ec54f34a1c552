#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vphype/errors.hpp"
#include "vphype/flops.hpp"
#include "vphype/tensor.hpp"

namespace vphype {

namespace detail {

// Right-aligned broadcast of two shapes (trailing dims equal or 1).
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    std::int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    std::int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` viewed as `out_shape` (0 where broadcast).
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out_shape) {
  std::vector<std::int64_t> strides(out_shape.size(), 0);
  auto own = row_major_strides(shape);
  std::size_t off = out_shape.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    strides[off + i] = (shape[i] == 1 && out_shape[off + i] != 1) ? 0 : own[i];
  }
  return strides;
}

// Odometer iteration over out_shape delivering (linear, a_offset, b_offset).
template <typename F>
void for_each_bcast(const Shape& out_shape, const std::vector<std::int64_t>& a_str,
                    const std::vector<std::int64_t>& b_str, F&& f) {
  std::int64_t n = shape_numel(out_shape);
  if (n == 0) return;
  int nd = static_cast<int>(out_shape.size());
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t a_off = 0, b_off = 0;
  for (std::int64_t lin = 0;;) {
    f(lin, a_off, b_off);
    if (++lin == n) break;
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      a_off += a_str[d];
      b_off += b_str[d];
      if (idx[d] < out_shape[d]) break;
      a_off -= a_str[d] * out_shape[d];
      b_off -= b_str[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::int64_t n = shape_numel(out_shape);
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& ad = a.data();
  const auto& bd = b.data();

  if (a.shape() == out_shape && b.shape() == out_shape) {
    switch (op) {
      case BinOp::Add:
        for (std::int64_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i];
        break;
      case BinOp::Sub:
        for (std::int64_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i];
        break;
      case BinOp::Mul:
        for (std::int64_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i];
        break;
      case BinOp::Div:
        for (std::int64_t i = 0; i < n; ++i) out[i] = ad[i] / bd[i];
        break;
    }
  } else {
    auto a_str = broadcast_strides(a.shape(), out_shape);
    auto b_str = broadcast_strides(b.shape(), out_shape);
    for_each_bcast(out_shape, a_str, b_str, [&](std::int64_t lin, std::int64_t ao, std::int64_t bo) {
      switch (op) {
        case BinOp::Add: out[lin] = ad[ao] + bd[bo]; break;
        case BinOp::Sub: out[lin] = ad[ao] - bd[bo]; break;
        case BinOp::Mul: out[lin] = ad[ao] * bd[bo]; break;
        case BinOp::Div: out[lin] = ad[ao] / bd[bo]; break;
      }
    });
  }
  flops::add(static_cast<std::uint64_t>(n));

  Tensor ta = a, tb = b;
  Shape os = out_shape;
  return Tensor::make_op(
      out_shape, std::move(out), {a, b}, [ta, tb, os, op](detail::Node& self) {
        auto a_str = broadcast_strides(ta.shape(), os);
        auto b_str = broadcast_strides(tb.shape(), os);
        auto an = ta.node();
        auto bn = tb.node();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        const auto& g = self.grad;
        const auto& ad = an->data;
        const auto& bd = bn->data;
        for_each_bcast(os, a_str, b_str, [&](std::int64_t lin, std::int64_t ao, std::int64_t bo) {
          double gv = g[lin];
          switch (op) {
            case BinOp::Add:
              if (an->requires_grad) an->grad[ao] += gv;
              if (bn->requires_grad) bn->grad[bo] += gv;
              break;
            case BinOp::Sub:
              if (an->requires_grad) an->grad[ao] += gv;
              if (bn->requires_grad) bn->grad[bo] -= gv;
              break;
            case BinOp::Mul:
              if (an->requires_grad) an->grad[ao] += gv * bd[bo];
              if (bn->requires_grad) bn->grad[bo] += gv * ad[ao];
              break;
            case BinOp::Div:
              if (an->requires_grad) an->grad[ao] += gv / bd[bo];
              if (bn->requires_grad) bn->grad[bo] -= gv * ad[ao] / (bd[bo] * bd[bo]);
              break;
          }
        });
      });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Div); }

namespace detail {

// value = f(x); derivative supplied as d(x, y).
inline Tensor unary_op(const Tensor& x, double (*f)(double), double (*df)(double, double)) {
  const std::int64_t n = x.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& xd = x.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = f(xd[i]);
  flops::add(static_cast<std::uint64_t>(n));
  Tensor tx = x;
  return Tensor::make_op(x.shape(), std::move(out), {x}, [tx, df](detail::Node& self) {
    auto xn = tx.node();
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const auto& g = self.grad;
    const auto& xd = xn->data;
    const auto& yd = self.data;
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] * df(xd[i], yd[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  // log(1 + e^x) with a linear guard for large x
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace detail

inline Tensor neg(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor exp_op(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::exp(v); },
                          [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::log(v); },
                          [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt_op(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::sqrt(v); },
                          [](double, double y) { return 0.5 / y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                          [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return detail::stable_sigmoid(v); },
                          [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v * detail::stable_sigmoid(v); },
      [](double v, double) {
        double s = detail::stable_sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Tensor gelu(const Tensor& x) {
  // exact erf form
  return detail::unary_op(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)); },
      [](double v, double) {
        double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
        double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
        return cdf + v * pdf;
      });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return detail::stable_softplus(v); },
                          [](double v, double) { return detail::stable_sigmoid(v); });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  const std::int64_t n = x.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& xd = x.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = xd[i] * c;
  flops::add(static_cast<std::uint64_t>(n));
  Tensor tx = x;
  return Tensor::make_op(x.shape(), std::move(out), {x}, [tx, c](detail::Node& self) {
    auto xn = tx.node();
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
  });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  const std::int64_t n = x.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& xd = x.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = xd[i] + c;
  flops::add(static_cast<std::uint64_t>(n));
  Tensor tx = x;
  return Tensor::make_op(x.shape(), std::move(out), {x}, [tx](detail::Node& self) {
    auto xn = tx.node();
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

// --- structural ops ---------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                         " changes element count");
  }
  Tensor tx = x;
  std::vector<double> out = x.data();
  return Tensor::make_op(std::move(new_shape), std::move(out), {x}, [tx](detail::Node& self) {
    auto xn = tx.node();
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

// out[i] = x[index_map[i]]; backward scatter-adds. index_map values must be
// valid indices into x.
inline Tensor gather(const Tensor& x, std::vector<std::int64_t> index_map, Shape out_shape) {
  if (static_cast<std::int64_t>(index_map.size()) != shape_numel(out_shape)) {
    throw DimensionError("gather index map length does not match output shape");
  }
  std::vector<double> out(index_map.size());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < index_map.size(); ++i) out[i] = xd[index_map[i]];
  Tensor tx = x;
  auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(index_map));
  return Tensor::make_op(std::move(out_shape), std::move(out), {x}, [tx, idx](detail::Node& self) {
    auto xn = tx.node();
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const auto& g = self.grad;
    for (std::size_t i = 0; i < idx->size(); ++i) xn->grad[(*idx)[i]] += g[i];
  });
}

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) throw DimensionError("permute rank mismatch");
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[perm[i]];
  auto in_strides = row_major_strides(s);
  std::vector<std::int64_t> strides(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) strides[i] = in_strides[perm[i]];

  std::int64_t n = x.numel();
  std::vector<std::int64_t> index_map(static_cast<std::size_t>(n));
  int nd = static_cast<int>(out_shape.size());
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t off = 0;
  for (std::int64_t lin = 0;;) {
    index_map[lin] = off;
    if (++lin == n) break;
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out_shape[d]) break;
      off -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return gather(x, std::move(index_map), std::move(out_shape));
}

inline Tensor transpose_last2(const Tensor& x) {
  std::vector<int> perm(x.shape().size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw DimensionError("slice axis out of range");
  if (start < 0 || len <= 0 || start + len > s[axis]) {
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for axis size " + std::to_string(s[axis]));
  }
  Shape out_shape = s;
  out_shape[axis] = len;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::vector<std::int64_t> index_map(static_cast<std::size_t>(outer * len * inner));
  std::int64_t p = 0;
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t j = 0; j < len; ++j) {
      std::int64_t base = (o * s[axis] + start + j) * inner;
      for (std::int64_t k = 0; k < inner; ++k) index_map[p++] = base + k;
    }
  }
  return gather(x, std::move(index_map), std::move(out_shape));
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) throw DimensionError("concat axis out of range");
  std::int64_t axis_total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != s0[i]) {
        throw DimensionError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
      }
    }
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> axis_sizes;
  for (const auto& x : xs) axis_sizes.push_back(x.shape()[axis]);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t dst_axis = 0;
    for (std::size_t xi = 0; xi < xs.size(); ++xi) {
      const auto& xd = xs[xi].data();
      std::int64_t block = axis_sizes[xi] * inner;
      std::copy(xd.begin() + o * block, xd.begin() + (o + 1) * block,
                out.begin() + (o * axis_total + dst_axis) * inner);
      dst_axis += axis_sizes[xi];
    }
  }
  std::vector<Tensor> inputs = xs;
  std::int64_t at = axis_total;
  return Tensor::make_op(
      std::move(out_shape), std::move(out), xs,
      [inputs, axis_sizes, outer, inner, at](detail::Node& self) {
        const auto& g = self.grad;
        std::int64_t src_axis = 0;
        for (std::size_t xi = 0; xi < inputs.size(); ++xi) {
          auto xn = inputs[xi].node();
          std::int64_t block = axis_sizes[xi] * inner;
          if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
              const double* gp = g.data() + (o * at + src_axis) * inner;
              double* dp = xn->grad.data() + o * block;
              for (std::int64_t i = 0; i < block; ++i) dp[i] += gp[i];
            }
          }
          src_axis += axis_sizes[xi];
        }
      });
}

// Row selection from a [T, D] matrix: out[b, :] = m[ids[b], :].
inline Tensor gather_rows(const Tensor& m, const std::vector<std::int64_t>& ids) {
  if (m.ndim() != 2) throw DimensionError("gather_rows expects a 2-d tensor");
  std::int64_t T = m.dim(0), D = m.dim(1);
  std::vector<std::int64_t> index_map;
  index_map.reserve(ids.size() * static_cast<std::size_t>(D));
  for (std::int64_t id : ids) {
    if (id < 0 || id >= T) {
      throw TaskIdError("row index " + std::to_string(id) + " out of range [0," + std::to_string(T) + ")");
    }
    for (std::int64_t j = 0; j < D; ++j) index_map.push_back(id * D + j);
  }
  return gather(m, std::move(index_map), Shape{static_cast<std::int64_t>(ids.size()), D});
}

// --- reductions --------------------------------------------------------------

inline Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw DimensionError("sum axis out of range");
  std::int64_t outer = 1, inner = 1, n = s[axis];
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  const auto& xd = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t j = 0; j < n; ++j) {
      const double* xp = xd.data() + (o * n + j) * inner;
      double* op = out.data() + o * inner;
      for (std::int64_t k = 0; k < inner; ++k) op[k] += xp[k];
    }
  }
  flops::add(static_cast<std::uint64_t>(x.numel()));
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (static_cast<int>(i) == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(s[i]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor tx = x;
  return Tensor::make_op(std::move(out_shape), std::move(out), {x},
                         [tx, outer, inner, n](detail::Node& self) {
                           auto xn = tx.node();
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           const auto& g = self.grad;
                           for (std::int64_t o = 0; o < outer; ++o) {
                             for (std::int64_t j = 0; j < n; ++j) {
                               double* dp = xn->grad.data() + (o * n + j) * inner;
                               const double* gp = g.data() + o * inner;
                               for (std::int64_t k = 0; k < inner; ++k) dp[k] += gp[k];
                             }
                           }
                         });
}

inline Tensor mean_axis(const Tensor& x, int axis, bool keepdim = false) {
  return mul_scalar(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[axis]));
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  flops::add(static_cast<std::uint64_t>(x.numel()));
  Tensor tx = x;
  return Tensor::make_op(Shape{1}, {s}, {x}, [tx](detail::Node& self) {
    auto xn = tx.node();
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    double g = self.grad[0];
    for (auto& v : xn->grad) v += g;
  });
}

// --- matmul ------------------------------------------------------------------

namespace detail {

// c[M,P] += a[M,K] * b[K,P]
inline void mm_acc(const double* a, const double* b, double* c, std::int64_t M, std::int64_t K,
                   std::int64_t P) {
  for (std::int64_t m = 0; m < M; ++m) {
    for (std::int64_t k = 0; k < K; ++k) {
      double av = a[m * K + k];
      if (av == 0.0) continue;
      const double* bp = b + k * P;
      double* cp = c + m * P;
      for (std::int64_t p = 0; p < P; ++p) cp[p] += av * bp[p];
    }
  }
}

// da[M,K] += g[M,P] * b[K,P]^T
inline void mm_grad_a(const double* g, const double* b, double* da, std::int64_t M, std::int64_t K,
                      std::int64_t P) {
  for (std::int64_t m = 0; m < M; ++m) {
    for (std::int64_t k = 0; k < K; ++k) {
      const double* gp = g + m * P;
      const double* bp = b + k * P;
      double s = 0.0;
      for (std::int64_t p = 0; p < P; ++p) s += gp[p] * bp[p];
      da[m * K + k] += s;
    }
  }
}

// db[K,P] += a[M,K]^T * g[M,P]
inline void mm_grad_b(const double* a, const double* g, double* db, std::int64_t M, std::int64_t K,
                      std::int64_t P) {
  for (std::int64_t m = 0; m < M; ++m) {
    for (std::int64_t k = 0; k < K; ++k) {
      double av = a[m * K + k];
      if (av == 0.0) continue;
      const double* gp = g + m * P;
      double* dp = db + k * P;
      for (std::int64_t p = 0; p < P; ++p) dp[p] += av * gp[p];
    }
  }
}

}  // namespace detail

// Batched matrix product [..,M,K] x [..,K,P] -> [..,M,P]; leading batch dims
// broadcast right-aligned.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul requires rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  std::int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
  std::int64_t Kb = sb[sb.size() - 2], P = sb[sb.size() - 1];
  if (K != Kb) {
    throw DimensionError("matmul inner dimension mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  }
  Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
  Shape batch = detail::broadcast_shape(batch_a, batch_b);
  std::int64_t nbatch = shape_numel(batch);
  auto a_bstr = detail::broadcast_strides(batch_a, batch);
  auto b_bstr = detail::broadcast_strides(batch_b, batch);
  // scale element strides to matrix-sized blocks
  for (auto& v : a_bstr) v *= M * K;
  for (auto& v : b_bstr) v *= K * P;

  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(P);
  std::vector<double> out(static_cast<std::size_t>(nbatch * M * P), 0.0);
  const auto& ad = a.data();
  const auto& bd = b.data();
  detail::for_each_bcast(batch, a_bstr, b_bstr, [&](std::int64_t lin, std::int64_t ao, std::int64_t bo) {
    detail::mm_acc(ad.data() + ao, bd.data() + bo, out.data() + lin * M * P, M, K, P);
  });
  flops::add(static_cast<std::uint64_t>(2 * nbatch * M * K * P));

  Tensor ta = a, tb = b;
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {a, b},
      [ta, tb, batch, a_bstr, b_bstr, M, K, P](detail::Node& self) {
        auto an = ta.node();
        auto bn = tb.node();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        const auto& g = self.grad;
        detail::for_each_bcast(batch, a_bstr, b_bstr,
                               [&](std::int64_t lin, std::int64_t ao, std::int64_t bo) {
                                 const double* gp = g.data() + lin * M * P;
                                 if (an->requires_grad) {
                                   detail::mm_grad_a(gp, bn->data.data() + bo, an->grad.data() + ao, M, K, P);
                                 }
                                 if (bn->requires_grad) {
                                   detail::mm_grad_b(an->data.data() + ao, gp, bn->grad.data() + bo, M, K, P);
                                 }
                               });
      });
}

// --- convolutions --------------------------------------------------------------

// Cross-correlation (no kernel flip), zero padding.
// x: [B, Cin, H, W], w: [Cout, Cin, k, k], bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
                     std::int64_t padding) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) {
    throw DimensionError("conv2d expects x [B,C,H,W] and w [Cout,Cin,k,k], got " + shape_str(xs) +
                         " and " + shape_str(ws));
  }
  std::int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  std::int64_t Cout = ws[0], k = ws[2];
  if (ws[1] != Cin) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(xs) + " vs kernel " + shape_str(ws));
  }
  if (ws[3] != k) throw DimensionError("conv2d kernel must be square, got " + shape_str(ws));
  if (k % 2 == 0) throw DimensionError("conv2d kernel size must be odd, got " + std::to_string(k));
  if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
  if (H + 2 * padding < k || W + 2 * padding < k) {
    throw DimensionError("conv2d kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(xs) + " with padding " + std::to_string(padding));
  }
  std::int64_t OH = (H + 2 * padding - k) / stride + 1;
  std::int64_t OW = (W + 2 * padding - k) / stride + 1;
  bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Cout)) {
    throw DimensionError("conv2d bias must have shape [Cout]");
  }

  std::vector<double> out(static_cast<std::size_t>(B * Cout * OH * OW), 0.0);
  const auto& xd = x.data();
  const auto& wd = w.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t co = 0; co < Cout; ++co) {
      double bv = has_bias ? bias.data()[co] : 0.0;
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          double acc = bv;
          for (std::int64_t ci = 0; ci < Cin; ++ci) {
            const double* xp = xd.data() + ((b * Cin + ci) * H) * W;
            const double* wp = wd.data() + ((co * Cin + ci) * k) * k;
            for (std::int64_t kh = 0; kh < k; ++kh) {
              std::int64_t ih = oh * stride - padding + kh;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t kw = 0; kw < k; ++kw) {
                std::int64_t iw = ow * stride - padding + kw;
                if (iw < 0 || iw >= W) continue;
                acc += xp[ih * W + iw] * wp[kh * k + kw];
              }
            }
          }
          out[((b * Cout + co) * OH + oh) * OW + ow] = acc;
        }
      }
    }
  }
  flops::add(static_cast<std::uint64_t>(2 * B * Cout * OH * OW * Cin * k * k));

  Tensor tx = x, tw = w, tb = bias;
  std::vector<Tensor> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_op(
      Shape{B, Cout, OH, OW}, std::move(out), std::move(inputs),
      [tx, tw, tb, B, Cin, H, W, Cout, k, OH, OW, stride, padding, has_bias](detail::Node& self) {
        auto xn = tx.node();
        auto wn = tw.node();
        auto bn = has_bias ? tb.node() : nullptr;
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        const auto& g = self.grad;
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t co = 0; co < Cout; ++co) {
            for (std::int64_t oh = 0; oh < OH; ++oh) {
              for (std::int64_t ow = 0; ow < OW; ++ow) {
                double gv = g[((b * Cout + co) * OH + oh) * OW + ow];
                if (gv == 0.0) continue;
                if (bn && bn->requires_grad) bn->grad[co] += gv;
                for (std::int64_t ci = 0; ci < Cin; ++ci) {
                  const double* xp = xn->data.data() + ((b * Cin + ci) * H) * W;
                  const double* wp = wn->data.data() + ((co * Cin + ci) * k) * k;
                  double* dxp = xn->requires_grad ? xn->grad.data() + ((b * Cin + ci) * H) * W : nullptr;
                  double* dwp = wn->requires_grad ? wn->grad.data() + ((co * Cin + ci) * k) * k : nullptr;
                  for (std::int64_t kh = 0; kh < k; ++kh) {
                    std::int64_t ih = oh * stride - padding + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (std::int64_t kw = 0; kw < k; ++kw) {
                      std::int64_t iw = ow * stride - padding + kw;
                      if (iw < 0 || iw >= W) continue;
                      if (dxp) dxp[ih * W + iw] += gv * wp[kh * k + kw];
                      if (dwp) dwp[kh * k + kw] += gv * xp[ih * W + iw];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// Per-channel causal 1-d convolution. x: [M, C, L], w: [C, k], bias: [C] or
// undefined. Left padding of k-1 keeps the output length L and makes position
// t depend only on inputs at positions <= t.
inline Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 2) {
    throw DimensionError("depthwise_conv1d expects x [M,C,L] and w [C,k], got " + shape_str(xs) +
                         " and " + shape_str(ws));
  }
  std::int64_t M = xs[0], C = xs[1], L = xs[2], k = ws[1];
  if (ws[0] != C) {
    throw DimensionError("depthwise_conv1d channel mismatch: x has " + std::to_string(C) +
                         " channels, w has " + std::to_string(ws[0]) + " kernel rows");
  }
  bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != C)) {
    throw DimensionError("depthwise_conv1d bias must have shape [C]");
  }
  std::vector<double> out(static_cast<std::size_t>(M * C * L), 0.0);
  const auto& xd = x.data();
  const auto& wd = w.data();
  for (std::int64_t m = 0; m < M; ++m) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xp = xd.data() + (m * C + c) * L;
      const double* wp = wd.data() + c * k;
      double bv = has_bias ? bias.data()[c] : 0.0;
      double* op = out.data() + (m * C + c) * L;
      for (std::int64_t t = 0; t < L; ++t) {
        double acc = bv;
        for (std::int64_t j = 0; j < k; ++j) {
          std::int64_t src = t - (k - 1) + j;
          if (src >= 0) acc += xp[src] * wp[j];
        }
        op[t] = acc;
      }
    }
  }
  flops::add(static_cast<std::uint64_t>(2 * M * C * L * k));

  Tensor tx = x, tw = w, tb = bias;
  std::vector<Tensor> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_op(
      Shape{M, C, L}, std::move(out), std::move(inputs),
      [tx, tw, tb, M, C, L, k, has_bias](detail::Node& self) {
        auto xn = tx.node();
        auto wn = tw.node();
        auto bn = has_bias ? tb.node() : nullptr;
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        const auto& g = self.grad;
        for (std::int64_t m = 0; m < M; ++m) {
          for (std::int64_t c = 0; c < C; ++c) {
            const double* gp = g.data() + (m * C + c) * L;
            const double* xp = xn->data.data() + (m * C + c) * L;
            const double* wp = wn->data.data() + c * k;
            for (std::int64_t t = 0; t < L; ++t) {
              double gv = gp[t];
              if (gv == 0.0) continue;
              if (bn && bn->requires_grad) bn->grad[c] += gv;
              for (std::int64_t j = 0; j < k; ++j) {
                std::int64_t src = t - (k - 1) + j;
                if (src < 0) continue;
                if (xn->requires_grad) xn->grad[(m * C + c) * L + src] += gv * wp[j];
                if (wn->requires_grad) wn->grad[c * k + j] += gv * xp[src];
              }
            }
          }
        }
      });
}

// Per-channel 2-d convolution, stride 1. x: [B,C,H,W], w: [C,k,k], bias [C].
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                               std::int64_t padding) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 3) {
    throw DimensionError("depthwise_conv2d expects x [B,C,H,W] and w [C,k,k]");
  }
  std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3], k = ws[1];
  if (ws[0] != C || ws[2] != k) throw DimensionError("depthwise_conv2d kernel shape mismatch");
  std::int64_t OH = H + 2 * padding - k + 1;
  std::int64_t OW = W + 2 * padding - k + 1;
  if (OH <= 0 || OW <= 0) throw DimensionError("depthwise_conv2d kernel larger than padded input");
  bool has_bias = bias.defined();

  std::vector<double> out(static_cast<std::size_t>(B * C * OH * OW), 0.0);
  const auto& xd = x.data();
  const auto& wd = w.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xp = xd.data() + (b * C + c) * H * W;
      const double* wp = wd.data() + c * k * k;
      double bv = has_bias ? bias.data()[c] : 0.0;
      double* op = out.data() + (b * C + c) * OH * OW;
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          double acc = bv;
          for (std::int64_t kh = 0; kh < k; ++kh) {
            std::int64_t ih = oh - padding + kh;
            if (ih < 0 || ih >= H) continue;
            for (std::int64_t kw = 0; kw < k; ++kw) {
              std::int64_t iw = ow - padding + kw;
              if (iw < 0 || iw >= W) continue;
              acc += xp[ih * W + iw] * wp[kh * k + kw];
            }
          }
          op[oh * OW + ow] = acc;
        }
      }
    }
  }
  flops::add(static_cast<std::uint64_t>(2 * B * C * OH * OW * k * k));

  Tensor tx = x, tw = w, tb = bias;
  std::vector<Tensor> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_op(
      Shape{B, C, OH, OW}, std::move(out), std::move(inputs),
      [tx, tw, tb, B, C, H, W, k, OH, OW, padding, has_bias](detail::Node& self) {
        auto xn = tx.node();
        auto wn = tw.node();
        auto bn = has_bias ? tb.node() : nullptr;
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        const auto& g = self.grad;
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t c = 0; c < C; ++c) {
            const double* gp = g.data() + (b * C + c) * OH * OW;
            const double* xp = xn->data.data() + (b * C + c) * H * W;
            const double* wp = wn->data.data() + c * k * k;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
              for (std::int64_t ow = 0; ow < OW; ++ow) {
                double gv = gp[oh * OW + ow];
                if (gv == 0.0) continue;
                if (bn && bn->requires_grad) bn->grad[c] += gv;
                for (std::int64_t kh = 0; kh < k; ++kh) {
                  std::int64_t ih = oh - padding + kh;
                  if (ih < 0 || ih >= H) continue;
                  for (std::int64_t kw = 0; kw < k; ++kw) {
                    std::int64_t iw = ow - padding + kw;
                    if (iw < 0 || iw >= W) continue;
                    if (xn->requires_grad) xn->grad[(b * C + c) * H * W + ih * W + iw] += gv * wp[kh * k + kw];
                    if (wn->requires_grad) wn->grad[c * k * k + kh * k + kw] += gv * xp[ih * W + iw];
                  }
                }
              }
            }
          }
        }
      });
}

// --- normalization and softmax ----------------------------------------------

inline Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw DimensionError("softmax axis out of range");
  std::int64_t outer = 1, inner = 1, n = s[axis];
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<double> out(x.data().size());
  const auto& xd = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t k = 0; k < inner; ++k) {
      const double* xp = xd.data() + o * n * inner + k;
      double* op = out.data() + o * n * inner + k;
      double mx = xp[0];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[j * inner]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        double e = std::exp(xp[j * inner] - mx);
        op[j * inner] = e;
        sum += e;
      }
      double inv = 1.0 / sum;
      for (std::int64_t j = 0; j < n; ++j) op[j * inner] *= inv;
    }
  }
  flops::add(static_cast<std::uint64_t>(5 * x.numel()));

  Tensor tx = x;
  return Tensor::make_op(s, std::move(out), {x}, [tx, outer, inner, n](detail::Node& self) {
    auto xn = tx.node();
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const auto& g = self.grad;
    const auto& y = self.data;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t k = 0; k < inner; ++k) {
        const double* yp = y.data() + o * n * inner + k;
        const double* gp = g.data() + o * n * inner + k;
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot += gp[j * inner] * yp[j * inner];
        double* dp = xn->grad.data() + o * n * inner + k;
        for (std::int64_t j = 0; j < n; ++j) {
          dp[j * inner] += yp[j * inner] * (gp[j * inner] - dot);
        }
      }
    }
  });
}

// Normalization over the last axis with per-feature affine.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const Shape& s = x.shape();
  std::int64_t n = s.back();
  std::int64_t rows = x.numel() / n;
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layernorm affine params must have length " + std::to_string(n));
  }
  if (eps <= 0.0) throw ContractError("layernorm eps must be positive");

  std::vector<double> out(x.data().size());
  auto xhat = std::make_shared<std::vector<double>>(x.data().size());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xp = xd.data() + r * n;
    double mean = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mean += xp[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      double d = xp[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    double* hp = xhat->data() + r * n;
    double* op = out.data() + r * n;
    for (std::int64_t j = 0; j < n; ++j) {
      hp[j] = (xp[j] - mean) * rs;
      op[j] = hp[j] * gd[j] + bd[j];
    }
  }
  flops::add(static_cast<std::uint64_t>(8 * x.numel()));

  Tensor tx = x, tg = gamma, tb = beta;
  return Tensor::make_op(
      s, std::move(out), {x, gamma, beta}, [tx, tg, tb, xhat, rstd, rows, n](detail::Node& self) {
        auto xn = tx.node();
        auto gn = tg.node();
        auto bn = tb.node();
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        const auto& g = self.grad;
        const auto& gd = gn->data;
        double inv_n = 1.0 / static_cast<double>(n);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* gp = g.data() + r * n;
          const double* hp = xhat->data() + r * n;
          double m1 = 0.0, m2 = 0.0;
          for (std::int64_t j = 0; j < n; ++j) {
            double dxh = gp[j] * gd[j];
            m1 += dxh;
            m2 += dxh * hp[j];
          }
          m1 *= inv_n;
          m2 *= inv_n;
          double rs = (*rstd)[r];
          for (std::int64_t j = 0; j < n; ++j) {
            double dxh = gp[j] * gd[j];
            if (xn->requires_grad) xn->grad[r * n + j] += rs * (dxh - m1 - hp[j] * m2);
            if (gn->requires_grad) gn->grad[j] += gp[j] * hp[j];
            if (bn->requires_grad) bn->grad[j] += gp[j];
          }
        }
      });
}

// Running statistics for batchnorm2d; owned by the hosting module.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool initialized = false;

  explicit BatchNormState(std::int64_t channels = 0)
      : running_mean(static_cast<std::size_t>(channels), 0.0),
        running_var(static_cast<std::size_t>(channels), 1.0) {}
};

// Per-channel normalization over (B, H, W). Training mode normalizes with
// batch statistics and folds them into the running estimates; inference uses
// the running estimates and requires them to be initialized.
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          BatchNormState& state, bool training, double momentum = 0.1,
                          double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("batchnorm2d expects [B,C,H,W], got " + shape_str(s));
  std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("batchnorm2d affine params must have length " + std::to_string(C));
  }
  if (static_cast<std::int64_t>(state.running_mean.size()) != C) {
    throw StateError("batchnorm2d state sized for " + std::to_string(state.running_mean.size()) +
                     " channels, input has " + std::to_string(C));
  }
  if (!training && !state.initialized) {
    throw StateError("batchnorm2d inference with uninitialized running statistics");
  }
  std::int64_t plane = H * W;
  std::int64_t count = B * plane;

  std::vector<double> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
  const auto& xd = x.data();
  if (training) {
    for (std::int64_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const double* xp = xd.data() + (b * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) m += xp[i];
      }
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const double* xp = xd.data() + (b * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          double d = xp[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(count);
      mean[c] = m;
      var[c] = v;
      state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * m;
      state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * v;
    }
    state.initialized = true;
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<double> out(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  for (std::int64_t c = 0; c < C; ++c) {
    double rs = 1.0 / std::sqrt(var[c] + eps);
    (*rstd)[c] = rs;
    for (std::int64_t b = 0; b < B; ++b) {
      const double* xp = xd.data() + (b * C + c) * plane;
      double* hp = xhat->data() + (b * C + c) * plane;
      double* op = out.data() + (b * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        hp[i] = (xp[i] - mean[c]) * rs;
        op[i] = hp[i] * gd[c] + bd[c];
      }
    }
  }
  flops::add(static_cast<std::uint64_t>(8 * x.numel()));

  Tensor tx = x, tg = gamma, tb = beta;
  return Tensor::make_op(
      s, std::move(out), {x, gamma, beta},
      [tx, tg, tb, xhat, rstd, B, C, plane, count, training](detail::Node& self) {
        auto xn = tx.node();
        auto gn = tg.node();
        auto bn = tb.node();
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        const auto& g = self.grad;
        const auto& gd = gn->data;
        for (std::int64_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::int64_t b = 0; b < B; ++b) {
            const double* gp = g.data() + (b * C + c) * plane;
            const double* hp = xhat->data() + (b * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              sum_g += gp[i];
              sum_gh += gp[i] * hp[i];
            }
          }
          if (gn->requires_grad) gn->grad[c] += sum_gh;
          if (bn->requires_grad) bn->grad[c] += sum_g;
          if (xn->requires_grad) {
            double rs = (*rstd)[c];
            double gc = gd[c];
            double inv_count = 1.0 / static_cast<double>(count);
            for (std::int64_t b = 0; b < B; ++b) {
              const double* gp = g.data() + (b * C + c) * plane;
              const double* hp = xhat->data() + (b * C + c) * plane;
              double* dp = xn->grad.data() + (b * C + c) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                if (training) {
                  dp[i] += gc * rs * (gp[i] - inv_count * (sum_g + hp[i] * sum_gh));
                } else {
                  dp[i] += gc * rs * gp[i];
                }
              }
            }
          }
        }
      });
}

// --- interpolation -------------------------------------------------------------

enum class InterpMode { Nearest, Bilinear };

// Spatial resize of [B,C,H,W]. Bilinear uses the align_corners=false
// half-pixel convention; nearest uses floor(i * in/out).
inline Tensor interpolate(const Tensor& x, std::int64_t out_h, std::int64_t out_w, InterpMode mode) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("interpolate expects [B,C,H,W], got " + shape_str(s));
  if (out_h < 1 || out_w < 1) throw DimensionError("interpolate output size must be >= 1");
  std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];

  struct Tap {
    std::int64_t i0, i1;
    double w0, w1;
  };
  auto make_taps = [&](std::int64_t in, std::int64_t out) {
    std::vector<Tap> taps(static_cast<std::size_t>(out));
    double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t i = 0; i < out; ++i) {
      if (mode == InterpMode::Nearest) {
        std::int64_t src = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(i * scale)), in - 1);
        taps[i] = {src, src, 1.0, 0.0};
      } else {
        double sc = (static_cast<double>(i) + 0.5) * scale - 0.5;
        sc = std::max(0.0, std::min(sc, static_cast<double>(in - 1)));
        std::int64_t i0 = static_cast<std::int64_t>(std::floor(sc));
        std::int64_t i1 = std::min(i0 + 1, in - 1);
        double f = sc - static_cast<double>(i0);
        taps[i] = {i0, i1, 1.0 - f, f};
      }
    }
    return taps;
  };
  auto hts = std::make_shared<std::vector<Tap>>(make_taps(H, out_h));
  auto wts = std::make_shared<std::vector<Tap>>(make_taps(W, out_w));

  std::vector<double> out(static_cast<std::size_t>(B * C * out_h * out_w));
  const auto& xd = x.data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* xp = xd.data() + bc * H * W;
    double* op = out.data() + bc * out_h * out_w;
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      const Tap& th = (*hts)[oh];
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        const Tap& tw = (*wts)[ow];
        op[oh * out_w + ow] = th.w0 * (tw.w0 * xp[th.i0 * W + tw.i0] + tw.w1 * xp[th.i0 * W + tw.i1]) +
                              th.w1 * (tw.w0 * xp[th.i1 * W + tw.i0] + tw.w1 * xp[th.i1 * W + tw.i1]);
      }
    }
  }
  flops::add(static_cast<std::uint64_t>((mode == InterpMode::Bilinear ? 8 : 1) * B * C * out_h * out_w));

  Tensor tx = x;
  return Tensor::make_op(
      Shape{B, C, out_h, out_w}, std::move(out), {x},
      [tx, hts, wts, B, C, H, W, out_h, out_w](detail::Node& self) {
        auto xn = tx.node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const auto& g = self.grad;
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
          double* dp = xn->grad.data() + bc * H * W;
          const double* gp = g.data() + bc * out_h * out_w;
          for (std::int64_t oh = 0; oh < out_h; ++oh) {
            const auto& th = (*hts)[oh];
            for (std::int64_t ow = 0; ow < out_w; ++ow) {
              const auto& tw = (*wts)[ow];
              double gv = gp[oh * out_w + ow];
              dp[th.i0 * W + tw.i0] += gv * th.w0 * tw.w0;
              dp[th.i0 * W + tw.i1] += gv * th.w0 * tw.w1;
              dp[th.i1 * W + tw.i0] += gv * th.w1 * tw.w0;
              dp[th.i1 * W + tw.i1] += gv * th.w1 * tw.w1;
            }
          }
        }
      });
}

// --- selective scan --------------------------------------------------------------

// Structured state-space recurrence, sequential reference semantics:
//   h_t = exp(delta_t * A_row) (.) h_{t-1} + (delta_t * B_t) * u_t
//   y_t = <C_t, h_t> + D_d * u_t,  h_0 = 0
// u, delta: [M, D, L]; A: [D, N]; B, C: [M, N, L]; skip: [D].
// delta must be strictly positive (post-softplus).
inline Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& B,
                             const Tensor& C, const Tensor& skip) {
  const Shape& us = u.shape();
  if (us.size() != 3) throw DimensionError("selective_scan u must be [M,D,L], got " + shape_str(us));
  std::int64_t M = us[0], D = us[1], L = us[2];
  if (delta.shape() != us) {
    throw DimensionError("selective_scan delta shape " + shape_str(delta.shape()) +
                         " must match u " + shape_str(us));
  }
  if (A.ndim() != 2 || A.dim(0) != D) {
    throw DimensionError("selective_scan A must be [D,N], got " + shape_str(A.shape()));
  }
  std::int64_t N = A.dim(1);
  Shape bc_shape{M, N, L};
  if (B.shape() != bc_shape || C.shape() != bc_shape) {
    throw DimensionError("selective_scan B and C must be [M,N,L]");
  }
  if (skip.ndim() != 1 || skip.dim(0) != D) {
    throw DimensionError("selective_scan skip must be [D]");
  }
  for (double v : delta.data()) {
    if (!(v > 0.0)) throw ContractError("selective_scan requires delta > 0 elementwise");
  }

  const auto& ud = u.data();
  const auto& dd = delta.data();
  const auto& Ad = A.data();
  const auto& Bd = B.data();
  const auto& Cd = C.data();
  const auto& Sd = skip.data();
  std::vector<double> out(static_cast<std::size_t>(M * D * L));

  bool need_grad = detail::grad_mode() &&
                   (u.requires_grad() || delta.requires_grad() || A.requires_grad() ||
                    B.requires_grad() || C.requires_grad() || skip.requires_grad());
  // state history saved for the adjoint pass: [M, D, L, N]
  auto hist = need_grad ? std::make_shared<std::vector<double>>(
                              static_cast<std::size_t>(M) * D * L * N)
                        : nullptr;

  std::vector<double> h(static_cast<std::size_t>(N));
  for (std::int64_t m = 0; m < M; ++m) {
    for (std::int64_t d = 0; d < D; ++d) {
      std::fill(h.begin(), h.end(), 0.0);
      const double* up = ud.data() + (m * D + d) * L;
      const double* dp = dd.data() + (m * D + d) * L;
      const double* Ap = Ad.data() + d * N;
      double* op = out.data() + (m * D + d) * L;
      for (std::int64_t t = 0; t < L; ++t) {
        double dt = dp[t];
        double ut = up[t];
        double y = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          double da = std::exp(dt * Ap[n]);
          double bt = Bd[(m * N + n) * L + t];
          h[n] = da * h[n] + dt * bt * ut;
          y += Cd[(m * N + n) * L + t] * h[n];
        }
        if (hist) {
          std::copy(h.begin(), h.end(), hist->data() + ((m * D + d) * L + t) * N);
        }
        op[t] = y + Sd[d] * ut;
      }
    }
  }
  flops::add(static_cast<std::uint64_t>(M * D * L) * static_cast<std::uint64_t>(6 * N + 2));

  Tensor tu = u, td = delta, tA = A, tB = B, tC = C, tS = skip;
  return Tensor::make_op(
      Shape{M, D, L}, std::move(out), {u, delta, A, B, C, skip},
      [tu, td, tA, tB, tC, tS, hist, M, D, L, N](detail::Node& self) {
        auto un = tu.node();
        auto dn = td.node();
        auto An = tA.node();
        auto Bn = tB.node();
        auto Cn = tC.node();
        auto Sn = tS.node();
        for (auto* n : {un.get(), dn.get(), An.get(), Bn.get(), Cn.get(), Sn.get()}) {
          if (n->requires_grad) n->ensure_grad();
        }
        const auto& g = self.grad;
        std::vector<double> lam(static_cast<std::size_t>(N));
        for (std::int64_t m = 0; m < M; ++m) {
          for (std::int64_t d = 0; d < D; ++d) {
            std::fill(lam.begin(), lam.end(), 0.0);
            const double* up = un->data.data() + (m * D + d) * L;
            const double* dp = dn->data.data() + (m * D + d) * L;
            const double* Ap = An->data.data() + d * N;
            const double* gp = g.data() + (m * D + d) * L;
            const double* hp = hist->data() + (m * D + d) * L * N;
            for (std::int64_t t = L - 1; t >= 0; --t) {
              double gv = gp[t];
              double dt = dp[t];
              double ut = up[t];
              if (Sn->requires_grad) Sn->grad[d] += gv * ut;
              double du_t = gv * Sn->data[d];
              double ddelta_t = 0.0;
              for (std::int64_t n = 0; n < N; ++n) {
                double h_tn = hp[t * N + n];
                double c_tn = Cn->data[(m * N + n) * L + t];
                if (Cn->requires_grad) Cn->grad[(m * N + n) * L + t] += gv * h_tn;
                lam[n] += gv * c_tn;
                double hprev = t > 0 ? hp[(t - 1) * N + n] : 0.0;
                double da = std::exp(dt * Ap[n]);
                double b_tn = Bn->data[(m * N + n) * L + t];
                ddelta_t += lam[n] * (hprev * da * Ap[n] + b_tn * ut);
                if (An->requires_grad) An->grad[d * N + n] += lam[n] * hprev * da * dt;
                if (Bn->requires_grad) Bn->grad[(m * N + n) * L + t] += lam[n] * dt * ut;
                du_t += lam[n] * dt * b_tn;
                lam[n] *= da;
              }
              if (un->requires_grad) un->grad[(m * D + d) * L + t] += du_t;
              if (dn->requires_grad) dn->grad[(m * D + d) * L + t] += ddelta_t;
            }
          }
        }
      });
}

// --- loss ------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw DimensionError("cross_entropy expects [B,N] logits, got " + shape_str(s));
  std::int64_t B = s[0], N = s[1];
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw DimensionError("cross_entropy label count " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(B));
  }
  for (std::int64_t lb : labels) {
    if (lb < 0 || lb >= N) {
      throw LabelError("label " + std::to_string(lb) + " out of range [0," + std::to_string(N) + ")");
    }
  }
  const auto& xd = logits.data();
  double loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* xp = xd.data() + b * N;
    double mx = xp[0];
    for (std::int64_t j = 1; j < N; ++j) mx = std::max(mx, xp[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < N; ++j) sum += std::exp(xp[j] - mx);
    loss += mx + std::log(sum) - xp[labels[b]];
  }
  loss /= static_cast<double>(B);
  flops::add(static_cast<std::uint64_t>(5 * B * N));

  Tensor tl = logits;
  auto labs = std::make_shared<std::vector<std::int64_t>>(labels);
  return Tensor::make_op(Shape{1}, {loss}, {logits}, [tl, labs, B, N](detail::Node& self) {
    auto ln = tl.node();
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    double gv = self.grad[0] / static_cast<double>(B);
    const auto& xd = ln->data;
    for (std::int64_t b = 0; b < B; ++b) {
      const double* xp = xd.data() + b * N;
      double mx = xp[0];
      for (std::int64_t j = 1; j < N; ++j) mx = std::max(mx, xp[j]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < N; ++j) sum += std::exp(xp[j] - mx);
      for (std::int64_t j = 0; j < N; ++j) {
        double p = std::exp(xp[j] - mx) / sum;
        ln->grad[b * N + j] += gv * (p - ((*labs)[b] == j ? 1.0 : 0.0));
      }
    }
  });
}

// --- composite helpers -------------------------------------------------------------

// x [.., Din] * W [Din, Dout] + b
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

}  // namespace vphype
