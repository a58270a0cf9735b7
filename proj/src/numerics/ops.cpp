#include "hicl/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "hicl/numerics/kernels.hpp"

namespace hicl::ops {

namespace {

template <typename T>
void same_graph(Var<T> a, Var<T> b, const char* op) {
  if (&a.graph() != &b.graph()) {
    throw Error(std::string(op) + ": operands belong to different graphs");
  }
}

// ------------------------------------------------------------ broadcasting

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa;  // stride into a per output axis, 0 if broadcast
  std::vector<std::size_t> sb;
  bool same = false;
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

BroadcastPlan make_plan(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  p.sa.assign(rank, 0);
  p.sb.assign(rank, 0);
  const auto sta = strides_of(a);
  const auto stb = strides_of(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ia = i + a.size();  // index into a, offset by rank
    const std::size_t ib = i + b.size();
    const std::size_t da = ia >= rank ? a[ia - rank] : 1;
    const std::size_t db = ib >= rank ? b[ib - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    }
    p.out[i] = std::max(da, db);
    p.sa[i] = da == 1 ? 0 : sta[ia - rank];
    p.sb[i] = db == 1 ? 0 : stb[ib - rank];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, std::size_t total, F&& f) {
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = p.out[rank - 1];
  if (inner == 0 || total == 0) return;
  const std::size_t ia_step = p.sa[rank - 1];
  const std::size_t ib_step = p.sb[rank - 1];
  std::vector<std::size_t> idx(rank - 1, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * ia_step, ob + j * ib_step);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      oa += p.sa[ax];
      ob += p.sb[ax];
      if (idx[ax] < p.out[ax]) break;
      oa -= p.sa[ax] * p.out[ax];
      ob -= p.sb[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary(const char* name, Var<T> a, Var<T> b, Fwd fwd, DA dfa, DB dfb) {
  same_graph(a, b, name);
  auto plan = std::make_shared<BroadcastPlan>(make_plan(a.shape(), b.shape(), name));
  const std::size_t ida = a.id(), idb = b.id();
  return a.graph().record(
      name, {ida, idb},
      [plan, ida, idb, fwd](Graph<T>& g, std::size_t self) {
        const auto& av = g.value(ida);
        const auto& bv = g.value(idb);
        NdArray<T> out(plan->out);
        T* o = out.ptr();
        const T* pa = av.ptr();
        const T* pb = bv.ptr();
        for_each_broadcast(*plan, out.size(), [&](std::size_t i, std::size_t ia,
                                                  std::size_t ib) {
          o[i] = fwd(pa[ia], pb[ib]);
        });
        g.mutable_value(self) = std::move(out);
      },
      [plan, ida, idb, dfa, dfb](Graph<T>& g, std::size_t self) {
        const T* pa = g.value(ida).ptr();
        const T* pb = g.value(idb).ptr();
        const T* py = g.value(self).ptr();
        const T* gy = g.grad(self).ptr();
        const std::size_t total = g.value(self).size();
        if (g.requires_grad(ida)) {
          T* ga = g.grad(ida).ptr();
          for_each_broadcast(*plan, total, [&](std::size_t i, std::size_t ia,
                                               std::size_t ib) {
            ga[ia] += gy[i] * dfa(pa[ia], pb[ib], py[i]);
          });
        }
        if (g.requires_grad(idb)) {
          T* gb = g.grad(idb).ptr();
          for_each_broadcast(*plan, total, [&](std::size_t i, std::size_t ia,
                                               std::size_t ib) {
            gb[ib] += gy[i] * dfb(pa[ia], pb[ib], py[i]);
          });
        }
      });
}

// y = f(x); dx += dy * df(x, y)
template <typename T, typename F, typename DF>
Var<T> unary(const char* name, Var<T> a, F f, DF df) {
  const std::size_t ida = a.id();
  return a.graph().record(
      name, {ida},
      [ida, f](Graph<T>& g, std::size_t self) {
        const auto& x = g.value(ida);
        NdArray<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
        g.mutable_value(self) = std::move(out);
      },
      [ida, df](Graph<T>& g, std::size_t self) {
        const auto& x = g.value(ida);
        const auto& y = g.value(self);
        const auto& gy = g.grad(self);
        auto& gx = g.grad(ida);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * df(x[i], y[i]);
      });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Splits a shape around `axis` into (outer, n, inner).
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

// ------------------------------------------------------------------ matmul

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  same_graph(a, b, "matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.empty() || bs.size() != 2 || as.back() != bs[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " x " +
                     shape_str(bs));
  }
  const std::size_t k = bs[0], n = bs[1];
  const std::size_t m = k == 0 ? 0 : a.value().size() / k;
  Shape out_shape = as;
  out_shape.back() = n;
  const std::size_t ida = a.id(), idb = b.id();
  return a.graph().record(
      "matmul", {ida, idb},
      [=](Graph<T>& g, std::size_t self) {
        NdArray<T> out(out_shape);
        kernels::gemm<T>(false, false, m, n, k, T(1), g.value(ida).ptr(), k,
                         g.value(idb).ptr(), n, T(0), out.ptr(), n);
        g.mutable_value(self) = std::move(out);
      },
      [=](Graph<T>& g, std::size_t self) {
        const T* gy = g.grad(self).ptr();
        if (g.requires_grad(ida)) {
          kernels::gemm<T>(false, true, m, k, n, T(1), gy, n, g.value(idb).ptr(),
                           n, T(1), g.grad(ida).ptr(), k);
        }
        if (g.requires_grad(idb)) {
          kernels::gemm<T>(true, false, k, n, m, T(1), g.value(ida).ptr(), k, gy,
                           n, T(1), g.grad(idb).ptr(), n);
        }
      });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_b) {
  same_graph(a, b, "bmm");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] ||
      as[2] != (trans_b ? bs[2] : bs[1])) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(as) + " x " +
                     shape_str(bs) + (trans_b ? " (b transposed)" : ""));
  }
  const std::size_t batch = as[0], m = as[1], k = as[2];
  const std::size_t n = trans_b ? bs[1] : bs[2];
  const std::size_t ida = a.id(), idb = b.id();
  return a.graph().record(
      "bmm", {ida, idb},
      [=](Graph<T>& g, std::size_t self) {
        NdArray<T> out(Shape{batch, m, n});
        const T* pa = g.value(ida).ptr();
        const T* pb = g.value(idb).ptr();
        for (std::size_t i = 0; i < batch; ++i) {
          kernels::gemm<T>(false, trans_b, m, n, k, T(1), pa + i * m * k, k,
                           pb + i * k * n, trans_b ? k : n, T(0),
                           out.ptr() + i * m * n, n);
        }
        g.mutable_value(self) = std::move(out);
      },
      [=](Graph<T>& g, std::size_t self) {
        const T* gy = g.grad(self).ptr();
        const T* pa = g.value(ida).ptr();
        const T* pb = g.value(idb).ptr();
        if (g.requires_grad(ida)) {
          T* ga = g.grad(ida).ptr();
          for (std::size_t i = 0; i < batch; ++i) {
            // ga += gy * op(b)^T
            kernels::gemm<T>(false, !trans_b, m, k, n, T(1), gy + i * m * n, n,
                             pb + i * k * n, trans_b ? k : n, T(1),
                             ga + i * m * k, k);
          }
        }
        if (g.requires_grad(idb)) {
          T* gb = g.grad(idb).ptr();
          for (std::size_t i = 0; i < batch; ++i) {
            if (trans_b) {
              // gb [n, k] += gy^T a
              kernels::gemm<T>(true, false, n, k, m, T(1), gy + i * m * n, n,
                               pa + i * m * k, k, T(1), gb + i * n * k, k);
            } else {
              // gb [k, n] += a^T gy
              kernels::gemm<T>(true, false, k, n, m, T(1), pa + i * m * k, k,
                               gy + i * m * n, n, T(1), gb + i * k * n, n);
            }
          }
        }
      });
}

// ------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

template <typename T>
Var<T> maximum(Var<T> a, Var<T> b) {
  // Ties route the gradient to a.
  return binary<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return unary<T>(
      "scale", a, [factor](T x) { return factor * x; },
      [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  return unary<T>(
      "add_scalar", a, [offset](T x) { return x + offset; },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> exp(Var<T> a) {
  const std::size_t ida = a.id();
  return a.graph().record(
      "exp", {ida},
      [ida](Graph<T>& g, std::size_t self) {
        const auto& x = g.value(ida);
        NdArray<T> out(x.shape());
        kernels::vexp<T>(x.ptr(), out.ptr(), x.size());
        g.mutable_value(self) = std::move(out);
      },
      [ida](Graph<T>& g, std::size_t self) {
        const auto& y = g.value(self);
        const auto& gy = g.grad(self);
        auto& gx = g.grad(ida);
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * y[i];
      });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  return unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return unary<T>(
      "tanh", a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(
      "sigmoid", a, [](T x) { return stable_sigmoid(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(Var<T> a) {
  return unary<T>(
      "silu", a, [](T x) { return x * stable_sigmoid(x); },
      [](T x, T) {
        const T s = stable_sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> softplus(Var<T> a) {
  return unary<T>(
      "softplus", a,
      [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](T x, T) { return stable_sigmoid(x); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  const std::size_t ida = a.id();
  return a.graph().record(
      "gelu", {ida},
      [ida](Graph<T>& g, std::size_t self) {
        const auto& x = g.value(ida);
        NdArray<T> out(x.shape());
        kernels::gelu<T>(x.ptr(), out.ptr(), x.size());
        g.mutable_value(self) = std::move(out);
      },
      [ida](Graph<T>& g, std::size_t self) {
        const auto& x = g.value(ida);
        kernels::gelu_backward<T>(x.ptr(), g.grad(self).ptr(), g.grad(ida).ptr(),
                                  x.size());
      });
}

// ------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a, std::size_t axis, bool keepdim) {
  const AxisView v = axis_view(a.shape(), axis, "sum");
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const std::size_t ida = a.id();
  return a.graph().record(
      "sum", {ida},
      [=](Graph<T>& g, std::size_t self) {
        const T* x = g.value(ida).ptr();
        NdArray<T> out(out_shape);
        T* o = out.ptr();
        for (std::size_t p = 0; p < v.outer; ++p) {
          for (std::size_t j = 0; j < v.n; ++j) {
            const T* row = x + (p * v.n + j) * v.inner;
            for (std::size_t q = 0; q < v.inner; ++q) o[p * v.inner + q] += row[q];
          }
        }
        g.mutable_value(self) = std::move(out);
      },
      [=](Graph<T>& g, std::size_t self) {
        const T* gy = g.grad(self).ptr();
        T* gx = g.grad(ida).ptr();
        for (std::size_t p = 0; p < v.outer; ++p) {
          for (std::size_t j = 0; j < v.n; ++j) {
            T* row = gx + (p * v.n + j) * v.inner;
            for (std::size_t q = 0; q < v.inner; ++q) row[q] += gy[p * v.inner + q];
          }
        }
      });
}

template <typename T>
Var<T> mean(Var<T> a, std::size_t axis, bool keepdim) {
  const std::size_t n = axis_view(a.shape(), axis, "mean").n;
  return scale(sum(a, axis, keepdim), T(1) / static_cast<T>(n == 0 ? 1 : n));
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  const std::size_t ida = a.id();
  return a.graph().record(
      "sum_all", {ida},
      [ida](Graph<T>& g, std::size_t self) {
        T acc = 0;
        for (T v : g.value(ida).data()) acc += v;
        g.mutable_value(self) = NdArray<T>::scalar(acc);
      },
      [ida](Graph<T>& g, std::size_t self) {
        const T gy = g.grad(self)[0];
        for (T& v : g.grad(ida).data()) v += gy;
      });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  const std::size_t n = a.value().size();
  return scale(sum_all(a), T(1) / static_cast<T>(n == 0 ? 1 : n));
}

// ------------------------------------------------------------------ layout

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  const std::size_t ida = a.id();
  return a.graph().record(
      "reshape", {ida},
      [ida, shape](Graph<T>& g, std::size_t self) {
        g.mutable_value(self) = g.value(ida).reshaped(shape);
      },
      [ida](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad(self);
        auto& gx = g.grad(ida);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      });
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm) {
  const Shape in_shape = a.shape();
  const std::size_t rank = in_shape.size();
  if (perm.size() != rank) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (perm[i] >= rank || seen[perm[i]]) throw ShapeError("permute: bad permutation");
    seen[perm[i]] = true;
    out_shape[i] = in_shape[perm[i]];
  }
  const auto in_strides = strides_of(in_shape);
  std::vector<std::size_t> src_stride(rank);  // input stride per output axis
  for (std::size_t i = 0; i < rank; ++i) src_stride[i] = in_strides[perm[i]];
  // Visits (out_index, in_offset) in output order.
  auto visit = [out_shape, src_stride, rank](std::size_t total, auto&& f) {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < total; ++o) {
      f(o, off);
      for (std::size_t ax = rank; ax-- > 0;) {
        ++idx[ax];
        off += src_stride[ax];
        if (idx[ax] < out_shape[ax]) break;
        off -= src_stride[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  };
  const std::size_t ida = a.id();
  return a.graph().record(
      "permute", {ida},
      [ida, out_shape, visit](Graph<T>& g, std::size_t self) {
        const T* x = g.value(ida).ptr();
        NdArray<T> out(out_shape);
        T* o = out.ptr();
        visit(out.size(), [&](std::size_t i, std::size_t off) { o[i] = x[off]; });
        g.mutable_value(self) = std::move(out);
      },
      [ida, visit](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad(self);
        T* gx = g.grad(ida).ptr();
        visit(gy.size(), [&](std::size_t i, std::size_t off) { gx[off] += gy[i]; });
      });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisView v = axis_view(a.shape(), axis, "slice");
  if (begin > end || end > v.n) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of bounds for axis of size " +
                     std::to_string(v.n));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  const std::size_t ida = a.id();
  return a.graph().record(
      "slice", {ida},
      [=](Graph<T>& g, std::size_t self) {
        const T* x = g.value(ida).ptr();
        NdArray<T> out(out_shape);
        T* o = out.ptr();
        for (std::size_t p = 0; p < v.outer; ++p) {
          std::copy_n(x + (p * v.n + begin) * v.inner, len * v.inner,
                      o + p * len * v.inner);
        }
        g.mutable_value(self) = std::move(out);
      },
      [=](Graph<T>& g, std::size_t self) {
        const T* gy = g.grad(self).ptr();
        T* gx = g.grad(ida).ptr();
        for (std::size_t p = 0; p < v.outer; ++p) {
          T* dst = gx + (p * v.n + begin) * v.inner;
          const T* src = gy + p * len * v.inner;
          for (std::size_t q = 0; q < len * v.inner; ++q) dst[q] += src[q];
        }
      });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  std::vector<std::size_t> ids, widths;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    same_graph(parts[0], p, "concat");
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    widths.push_back(s[axis]);
  }
  const AxisView v = axis_view(out_shape, axis, "concat");
  return parts[0].graph().record(
      "concat", ids,
      [=](Graph<T>& g, std::size_t self) {
        NdArray<T> out(out_shape);
        T* o = out.ptr();
        std::size_t start = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const T* x = g.value(ids[k]).ptr();
          const std::size_t w = widths[k];
          for (std::size_t p = 0; p < v.outer; ++p) {
            std::copy_n(x + p * w * v.inner, w * v.inner,
                        o + (p * v.n + start) * v.inner);
          }
          start += w;
        }
        g.mutable_value(self) = std::move(out);
      },
      [=](Graph<T>& g, std::size_t self) {
        const T* gy = g.grad(self).ptr();
        std::size_t start = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::size_t w = widths[k];
          if (g.requires_grad(ids[k])) {
            T* gx = g.grad(ids[k]).ptr();
            for (std::size_t p = 0; p < v.outer; ++p) {
              const T* src = gy + (p * v.n + start) * v.inner;
              T* dst = gx + p * w * v.inner;
              for (std::size_t q = 0; q < w * v.inner; ++q) dst[q] += src[q];
            }
          }
          start += w;
        }
      });
}

// ----------------------------------------------------------------- softmax

template <typename T>
Var<T> softmax(Var<T> a, bool causal) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("softmax: needs at least one axis");
  const std::size_t n = s.back();
  if (causal && (s.size() < 2 || s[s.size() - 2] != n)) {
    throw ShapeError("softmax: causal mode needs a square trailing block, got " +
                     shape_str(s));
  }
  const std::size_t ida = a.id();
  // Number of unmasked entries in a row.
  auto valid = [causal, n](std::size_t row) { return causal ? row % n + 1 : n; };
  return a.graph().record(
      causal ? "softmax_causal" : "softmax", {ida},
      [=](Graph<T>& g, std::size_t self) {
        const auto& x = g.value(ida);
        NdArray<T> out(x.shape());
        const std::size_t rows = n == 0 ? 0 : x.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = x.ptr() + r * n;
          T* yr = out.ptr() + r * n;
          const std::size_t m = valid(r);
          T mx = xr[0];
          for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, xr[j]);
          T total = 0;
          for (std::size_t j = 0; j < m; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            total += yr[j];
          }
          const T inv = T(1) / total;
          for (std::size_t j = 0; j < m; ++j) yr[j] *= inv;
        }
        g.mutable_value(self) = std::move(out);
      },
      [=](Graph<T>& g, std::size_t self) {
        const auto& y = g.value(self);
        const auto& gy = g.grad(self);
        auto& gx = g.grad(ida);
        const std::size_t rows = n == 0 ? 0 : y.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * n;
          const std::size_t m = valid(r);
          T dot = 0;
          for (std::size_t j = 0; j < m; ++j) dot += y[base + j] * gy[base + j];
          for (std::size_t j = 0; j < m; ++j) {
            gx[base + j] += y[base + j] * (gy[base + j] - dot);
          }
        }
      });
}

// -------------------------------------------------------------------- scan

template <typename T>
Var<T> ssm_scan(Var<T> u, Var<T> delta, Var<T> a, Var<T> b, Var<T> c,
                Var<T> d) {
  for (const auto& v : {delta, a, b, c, d}) same_graph(u, v, "ssm_scan");
  const Shape& us = u.shape();
  if (us.size() != 3) throw ShapeError("ssm_scan: u must be [batch, seq, inner]");
  kernels::ScanShape shape{us[0], us[1], us[2], a.shape().size() == 2 ? a.dim(1) : 0};
  const Shape bs{shape.batch, shape.seq, shape.state};
  if (delta.shape() != us || a.shape() != Shape{shape.inner, shape.state} ||
      b.shape() != bs || c.shape() != bs || d.shape() != Shape{shape.inner}) {
    throw ShapeError("ssm_scan: inconsistent shapes u" + shape_str(us) + " delta" +
                     shape_str(delta.shape()) + " A" + shape_str(a.shape()) +
                     " B" + shape_str(b.shape()) + " C" + shape_str(c.shape()) +
                     " D" + shape_str(d.shape()));
  }
  auto states = std::make_shared<std::vector<T>>();
  const std::vector<std::size_t> ids{u.id(), delta.id(), a.id(),
                                     b.id(), c.id(),     d.id()};
  return u.graph().record(
      "ssm_scan", ids,
      [shape, states, ids](Graph<T>& g, std::size_t self) {
        for (T v : g.value(ids[1]).data()) {
          if (!(v > T(0))) throw Error("ssm_scan: step sizes must be positive");
        }
        states->assign(shape.states_size(), T(0));
        NdArray<T> out(g.value(ids[0]).shape());
        kernels::ssm_scan_forward<T>(
            shape, {g.value(ids[0]).ptr(), g.value(ids[1]).ptr(),
                    g.value(ids[2]).ptr(), g.value(ids[3]).ptr(),
                    g.value(ids[4]).ptr(), g.value(ids[5]).ptr(), out.ptr(),
                    states->data()});
        g.mutable_value(self) = std::move(out);
      },
      [shape, states, ids](Graph<T>& g, std::size_t self) {
        auto grad_ptr = [&](std::size_t k) -> T* {
          return g.requires_grad(ids[k]) ? g.grad(ids[k]).ptr() : nullptr;
        };
        kernels::ScanBackwardArgs<T> args{
            g.value(ids[0]).ptr(), g.value(ids[1]).ptr(), g.value(ids[2]).ptr(),
            g.value(ids[3]).ptr(), g.value(ids[4]).ptr(), g.value(ids[5]).ptr(),
            states->data(),        g.grad(self).ptr(),    grad_ptr(0),
            grad_ptr(1),           grad_ptr(2),           grad_ptr(3),
            grad_ptr(4),           grad_ptr(5)};
        kernels::ssm_scan_backward<T>(shape, args);
      });
}

// ----------------------------------------------------------- instantiation

#define HICL_INSTANTIATE(T)                                                  \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                 \
  template Var<T> bmm<T>(Var<T>, Var<T>, bool);                              \
  template Var<T> add<T>(Var<T>, Var<T>);                                    \
  template Var<T> sub<T>(Var<T>, Var<T>);                                    \
  template Var<T> mul<T>(Var<T>, Var<T>);                                    \
  template Var<T> div<T>(Var<T>, Var<T>);                                    \
  template Var<T> maximum<T>(Var<T>, Var<T>);                                \
  template Var<T> scale<T>(Var<T>, T);                                       \
  template Var<T> add_scalar<T>(Var<T>, T);                                  \
  template Var<T> exp<T>(Var<T>);                                            \
  template Var<T> log<T>(Var<T>);                                            \
  template Var<T> sqrt<T>(Var<T>);                                           \
  template Var<T> tanh<T>(Var<T>);                                           \
  template Var<T> sigmoid<T>(Var<T>);                                        \
  template Var<T> silu<T>(Var<T>);                                           \
  template Var<T> softplus<T>(Var<T>);                                       \
  template Var<T> relu<T>(Var<T>);                                           \
  template Var<T> gelu<T>(Var<T>);                                           \
  template Var<T> sum<T>(Var<T>, std::size_t, bool);                         \
  template Var<T> mean<T>(Var<T>, std::size_t, bool);                        \
  template Var<T> sum_all<T>(Var<T>);                                        \
  template Var<T> mean_all<T>(Var<T>);                                       \
  template Var<T> reshape<T>(Var<T>, Shape);                                 \
  template Var<T> permute<T>(Var<T>, std::vector<std::size_t>);              \
  template Var<T> slice<T>(Var<T>, std::size_t, std::size_t, std::size_t);   \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::size_t);        \
  template Var<T> softmax<T>(Var<T>, bool);                                  \
  template Var<T> ssm_scan<T>(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>);

HICL_INSTANTIATE(float)
HICL_INSTANTIATE(double)

#undef HICL_INSTANTIATE

}  // namespace hicl::ops
