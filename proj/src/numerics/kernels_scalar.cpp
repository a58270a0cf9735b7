// Scalar reference kernels. These define the semantics the SIMD variants are
// tested against; keep them plain.

#include <cmath>
#include <numbers>
#include <vector>

#include "hicl/numerics/kernels.hpp"

namespace hicl::kernels::scalar {

namespace {

template <typename T>
void gemm_ref(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
              std::size_t k, T alpha, const T* a, std::size_t lda, const T* b,
              std::size_t ldb, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      T& out = c[i * ldc + j];
      out = beta == T(0) ? alpha * acc : alpha * acc + beta * out;
    }
  }
}

template <typename T>
void vexp_ref(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

template <typename T>
void gelu_ref(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
    y[i] = T(0.5) * v * (T(1) + t);
  }
}

template <typename T>
void gelu_backward_ref(const T* x, const T* dy, T* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
    const T dinner = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
    dx[i] += dy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dinner);
  }
}

template <typename T>
void scan_forward_ref(const ScanShape& s, const ScanForwardArgs<T>& p) {
  const std::size_t I = s.inner, S = s.state, L = s.seq;
  for (std::size_t bi = 0; bi < s.batch; ++bi) {
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = (bi * L + t);
      const T* u = p.u + row * I;
      const T* dt = p.delta + row * I;
      const T* bt = p.b + row * S;
      const T* ct = p.c + row * S;
      T* y = p.y + row * I;
      T* h = p.states + row * S * I;
      const T* hprev = t > 0 ? h - S * I : nullptr;
      for (std::size_t i = 0; i < I; ++i) y[i] = p.d[i] * u[i];
      for (std::size_t st = 0; st < S; ++st) {
        for (std::size_t i = 0; i < I; ++i) {
          const T decay = std::exp(dt[i] * p.a[i * S + st]);
          const T prev = hprev ? hprev[st * I + i] : T(0);
          const T hv = decay * prev + dt[i] * bt[st] * u[i];
          h[st * I + i] = hv;
          y[i] += ct[st] * hv;
        }
      }
    }
  }
}

template <typename T>
void scan_backward_ref(const ScanShape& s, const ScanBackwardArgs<T>& p) {
  const std::size_t I = s.inner, S = s.state, L = s.seq;
  std::vector<T> carry(S * I);
  for (std::size_t bi = 0; bi < s.batch; ++bi) {
    std::fill(carry.begin(), carry.end(), T(0));
    for (std::size_t t = L; t-- > 0;) {
      const std::size_t row = bi * L + t;
      const T* u = p.u + row * I;
      const T* dt = p.delta + row * I;
      const T* bt = p.b + row * S;
      const T* ct = p.c + row * S;
      const T* dy = p.dy + row * I;
      const T* h = p.states + row * S * I;
      const T* hprev = t > 0 ? h - S * I : nullptr;
      for (std::size_t i = 0; i < I; ++i) {
        if (p.du) p.du[row * I + i] += p.d[i] * dy[i];
        if (p.dd) p.dd[i] += dy[i] * u[i];
      }
      for (std::size_t st = 0; st < S; ++st) {
        T dc_acc = 0;
        T db_acc = 0;
        for (std::size_t i = 0; i < I; ++i) {
          const T g = carry[st * I + i] + ct[st] * dy[i];
          dc_acc += dy[i] * h[st * I + i];
          const T av = p.a[i * S + st];
          const T decay = std::exp(dt[i] * av);
          const T prev = hprev ? hprev[st * I + i] : T(0);
          if (p.ddelta) {
            p.ddelta[row * I + i] += g * (av * decay * prev + bt[st] * u[i]);
          }
          if (p.da) p.da[i * S + st] += g * dt[i] * decay * prev;
          db_acc += g * dt[i] * u[i];
          if (p.du) p.du[row * I + i] += g * dt[i] * bt[st];
          carry[st * I + i] = g * decay;
        }
        if (p.dc) p.dc[row * S + st] += dc_acc;
        if (p.db) p.db[row * S + st] += db_acc;
      }
    }
  }
}

}  // namespace

template <typename T>
const KernelTable<T>& table() {
  static const KernelTable<T> t{&gemm_ref<T>,         &vexp_ref<T>,
                                &gelu_ref<T>,         &gelu_backward_ref<T>,
                                &scan_forward_ref<T>, &scan_backward_ref<T>};
  return t;
}

template const KernelTable<float>& table<float>();
template const KernelTable<double>& table<double>();

}  // namespace hicl::kernels::scalar
