// AVX2 + FMA kernels. Compiled with -mavx2 -mfma; only reached after the
// dispatcher has confirmed CPU support.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hicl/numerics/kernels.hpp"

namespace hicl::kernels::avx2 {

namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
  using reg = __m256;
  static constexpr std::size_t width = 8;
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg set1(float v) { return _mm256_set1_ps(v); }
  static reg zero() { return _mm256_setzero_ps(); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_ps(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
  static reg div(reg a, reg b) { return _mm256_div_ps(a, b); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg fnmadd(reg a, reg b, reg c) { return _mm256_fnmadd_ps(a, b, c); }
  static float hsum(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }

  // exp(x) by range reduction x = n ln2 + r and a degree-7 Taylor polynomial
  // on |r| <= ln2/2 (truncation error < 1e-8 relative).
  static reg exp(reg x) {
    const reg hi = set1(88.3762626647949f);
    const reg lo = set1(-87.3365447505531f);
    const reg overflow = _mm256_cmp_ps(x, set1(88.7228391f), _CMP_GT_OQ);
    const reg underflow = _mm256_cmp_ps(x, lo, _CMP_LT_OQ);
    reg xc = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
    reg n = _mm256_round_ps(mul(xc, set1(1.44269504088896341f)),
                            _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    reg r = fnmadd(n, set1(0.693359375f), xc);
    r = fnmadd(n, set1(-2.12194440e-4f), r);
    reg p = set1(1.0f / 5040.0f);
    p = fmadd(p, r, set1(1.0f / 720.0f));
    p = fmadd(p, r, set1(1.0f / 120.0f));
    p = fmadd(p, r, set1(1.0f / 24.0f));
    p = fmadd(p, r, set1(1.0f / 6.0f));
    p = fmadd(p, r, set1(0.5f));
    p = fmadd(p, r, set1(1.0f));
    p = fmadd(p, r, set1(1.0f));
    __m256i e = _mm256_cvtps_epi32(n);
    e = _mm256_slli_epi32(_mm256_add_epi32(e, _mm256_set1_epi32(127)), 23);
    reg out = mul(p, _mm256_castsi256_ps(e));
    out = _mm256_blendv_ps(out, zero(), underflow);
    out = _mm256_blendv_ps(out, set1(std::numeric_limits<float>::infinity()),
                           overflow);
    // NaN inputs propagate.
    return _mm256_blendv_ps(out, x, _mm256_cmp_ps(x, x, _CMP_UNORD_Q));
  }
};

template <>
struct Vec<double> {
  using reg = __m256d;
  static constexpr std::size_t width = 4;
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg set1(double v) { return _mm256_set1_pd(v); }
  static reg zero() { return _mm256_setzero_pd(); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_pd(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
  static reg div(reg a, reg b) { return _mm256_div_pd(a, b); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg fnmadd(reg a, reg b, reg c) { return _mm256_fnmadd_pd(a, b, c); }
  static double hsum(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }

  // Same scheme as the float version with a degree-13 polynomial.
  static reg exp(reg x) {
    const reg hi = set1(709.43613930310391);
    const reg lo = set1(-708.39641853226408);
    const reg overflow = _mm256_cmp_pd(x, set1(709.782712893384), _CMP_GT_OQ);
    const reg underflow = _mm256_cmp_pd(x, lo, _CMP_LT_OQ);
    reg xc = _mm256_min_pd(_mm256_max_pd(x, lo), hi);
    reg n = _mm256_round_pd(mul(xc, set1(1.4426950408889634)),
                            _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    reg r = fnmadd(n, set1(6.93145751953125e-1), xc);
    r = fnmadd(n, set1(1.42860682030941723212e-6), r);
    static constexpr double kInvFact[] = {
        1.0 / 6227020800.0, 1.0 / 479001600.0, 1.0 / 39916800.0,
        1.0 / 3628800.0,    1.0 / 362880.0,    1.0 / 40320.0,
        1.0 / 5040.0,       1.0 / 720.0,       1.0 / 120.0,
        1.0 / 24.0,         1.0 / 6.0,         0.5,
        1.0,                1.0};
    reg p = set1(kInvFact[0]);
    for (std::size_t i = 1; i < std::size(kInvFact); ++i) {
      p = fmadd(p, r, set1(kInvFact[i]));
    }
    __m256i e = _mm256_cvtepi32_epi64(_mm256_cvtpd_epi32(n));
    e = _mm256_slli_epi64(_mm256_add_epi64(e, _mm256_set1_epi64x(1023)), 52);
    reg out = mul(p, _mm256_castsi256_pd(e));
    out = _mm256_blendv_pd(out, zero(), underflow);
    out = _mm256_blendv_pd(out, set1(std::numeric_limits<double>::infinity()),
                           overflow);
    return _mm256_blendv_pd(out, x, _mm256_cmp_pd(x, x, _CMP_UNORD_Q));
  }
};

// ---------------------------------------------------------------- gemm

template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buffers[4];
  return buffers[slot];
}

// Computes an MR x (2*width) tile of C from row-major A (MR x k) and B (k x n).
template <typename T, int MR>
inline void tile2(std::size_t k, const T* a, std::size_t lda, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc, T alpha, T beta) {
  using V = Vec<T>;
  typename V::reg acc0[MR], acc1[MR];
  for (int r = 0; r < MR; ++r) acc0[r] = acc1[r] = V::zero();
  for (std::size_t p = 0; p < k; ++p) {
    const auto b0 = V::load(b + p * ldb);
    const auto b1 = V::load(b + p * ldb + V::width);
    for (int r = 0; r < MR; ++r) {
      const auto av = V::set1(a[r * lda + p]);
      acc0[r] = V::fmadd(av, b0, acc0[r]);
      acc1[r] = V::fmadd(av, b1, acc1[r]);
    }
  }
  const auto va = V::set1(alpha);
  for (int r = 0; r < MR; ++r) {
    T* row = c + r * ldc;
    auto o0 = V::mul(va, acc0[r]);
    auto o1 = V::mul(va, acc1[r]);
    if (beta != T(0)) {
      const auto vb = V::set1(beta);
      o0 = V::fmadd(vb, V::load(row), o0);
      o1 = V::fmadd(vb, V::load(row + V::width), o1);
    }
    V::store(row, o0);
    V::store(row + V::width, o1);
  }
}

template <typename T, int MR>
inline void tile1(std::size_t k, const T* a, std::size_t lda, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc, T alpha, T beta) {
  using V = Vec<T>;
  typename V::reg acc[MR];
  for (int r = 0; r < MR; ++r) acc[r] = V::zero();
  for (std::size_t p = 0; p < k; ++p) {
    const auto b0 = V::load(b + p * ldb);
    for (int r = 0; r < MR; ++r) {
      acc[r] = V::fmadd(V::set1(a[r * lda + p]), b0, acc[r]);
    }
  }
  const auto va = V::set1(alpha);
  for (int r = 0; r < MR; ++r) {
    T* row = c + r * ldc;
    auto o = V::mul(va, acc[r]);
    if (beta != T(0)) o = V::fmadd(V::set1(beta), V::load(row), o);
    V::store(row, o);
  }
}

template <typename T, int MR>
void column_block(bool wide, std::size_t k, const T* a, std::size_t lda,
                  const T* b, std::size_t ldb, T* c, std::size_t ldc, T alpha,
                  T beta) {
  if (wide) {
    tile2<T, MR>(k, a, lda, b, ldb, c, ldc, alpha, beta);
  } else {
    tile1<T, MR>(k, a, lda, b, ldb, c, ldc, alpha, beta);
  }
}

template <typename T>
void gemm_avx2(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
               std::size_t k, T alpha, const T* a, std::size_t lda, const T* b,
               std::size_t ldb, T beta, T* c, std::size_t ldc) {
  using V = Vec<T>;
  constexpr std::size_t W = V::width;
  if (m == 0 || n == 0) return;

  if (trans_a) {
    auto& buf = scratch<T>(0);
    buf.resize(m * k);
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t i = 0; i < m; ++i) buf[i * k + p] = a[p * lda + i];
    }
    a = buf.data();
    lda = k;
  }
  if (trans_b) {
    auto& buf = scratch<T>(1);
    buf.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) buf[p * n + j] = b[j * ldb + p];
    }
    b = buf.data();
    ldb = n;
  }

  std::size_t j0 = 0;
  auto run_rows = [&](bool wide) {
    std::size_t i0 = 0;
    for (; i0 + 4 <= m; i0 += 4) {
      column_block<T, 4>(wide, k, a + i0 * lda, lda, b + j0, ldb,
                         c + i0 * ldc + j0, ldc, alpha, beta);
    }
    switch (m - i0) {
      case 3:
        column_block<T, 3>(wide, k, a + i0 * lda, lda, b + j0, ldb,
                           c + i0 * ldc + j0, ldc, alpha, beta);
        break;
      case 2:
        column_block<T, 2>(wide, k, a + i0 * lda, lda, b + j0, ldb,
                           c + i0 * ldc + j0, ldc, alpha, beta);
        break;
      case 1:
        column_block<T, 1>(wide, k, a + i0 * lda, lda, b + j0, ldb,
                           c + i0 * ldc + j0, ldc, alpha, beta);
        break;
      default:
        break;
    }
  };
  for (; j0 + 2 * W <= n; j0 += 2 * W) run_rows(true);
  for (; j0 + W <= n; j0 += W) run_rows(false);
  for (; j0 < n; ++j0) {
    for (std::size_t i = 0; i < m; ++i) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * lda + p] * b[p * ldb + j0];
      T& out = c[i * ldc + j0];
      out = beta == T(0) ? alpha * acc : alpha * acc + beta * out;
    }
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
void vexp_avx2(const T* x, T* y, std::size_t n) {
  using V = Vec<T>;
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width) V::store(y + i, V::exp(V::load(x + i)));
  for (; i < n; ++i) y[i] = std::exp(x[i]);
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

// tanh(z) = 1 - 2 / (exp(2z) + 1)
template <typename T>
inline typename Vec<T>::reg vtanh(typename Vec<T>::reg z) {
  using V = Vec<T>;
  const auto e = V::exp(V::add(z, z));
  return V::sub(V::set1(T(1)), V::div(V::set1(T(2)), V::add(e, V::set1(T(1)))));
}

template <typename T>
void gelu_avx2(const T* x, T* y, std::size_t n) {
  using V = Vec<T>;
  const auto c = V::set1(kGeluC<T>);
  const auto a = V::set1(kGeluA<T>);
  const auto half = V::set1(T(0.5));
  const auto one = V::set1(T(1));
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width) {
    const auto v = V::load(x + i);
    const auto v3 = V::mul(V::mul(v, v), v);
    const auto t = vtanh<T>(V::mul(c, V::fmadd(a, v3, v)));
    V::store(y + i, V::mul(V::mul(half, v), V::add(one, t)));
  }
  for (; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
    y[i] = T(0.5) * v * (T(1) + t);
  }
}

template <typename T>
void gelu_backward_avx2(const T* x, const T* dy, T* dx, std::size_t n) {
  using V = Vec<T>;
  const auto c = V::set1(kGeluC<T>);
  const auto a = V::set1(kGeluA<T>);
  const auto a3 = V::set1(T(3) * kGeluA<T>);
  const auto half = V::set1(T(0.5));
  const auto one = V::set1(T(1));
  std::size_t i = 0;
  for (; i + V::width <= n; i += V::width) {
    const auto v = V::load(x + i);
    const auto v2 = V::mul(v, v);
    const auto t = vtanh<T>(V::mul(c, V::fmadd(a, V::mul(v2, v), v)));
    const auto dinner = V::mul(c, V::fmadd(a3, v2, one));
    const auto sech2 = V::fnmadd(t, t, one);
    const auto grad = V::fmadd(V::mul(V::mul(half, v), sech2), dinner,
                               V::mul(half, V::add(one, t)));
    V::store(dx + i, V::fmadd(V::load(dy + i), grad, V::load(dx + i)));
  }
  for (; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
    const T dinner = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
    dx[i] += dy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dinner);
  }
}

// ---------------------------------------------------------------- scan

// Vectorized over the inner (channel) axis; A is transposed to [state, inner]
// so every inner loop is unit-stride.
template <typename T>
void scan_forward_avx2(const ScanShape& s, const ScanForwardArgs<T>& p) {
  using V = Vec<T>;
  constexpr std::size_t W = V::width;
  const std::size_t I = s.inner, S = s.state, L = s.seq;
  auto& at = scratch<T>(2);
  at.resize(S * I);
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t st = 0; st < S; ++st) at[st * I + i] = p.a[i * S + st];
  }
  for (std::size_t bi = 0; bi < s.batch; ++bi) {
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = bi * L + t;
      const T* u = p.u + row * I;
      const T* dt = p.delta + row * I;
      const T* bt = p.b + row * S;
      const T* ct = p.c + row * S;
      T* y = p.y + row * I;
      T* h = p.states + row * S * I;
      const T* hprev = t > 0 ? h - S * I : nullptr;
      for (std::size_t i = 0; i < I; ++i) y[i] = p.d[i] * u[i];
      for (std::size_t st = 0; st < S; ++st) {
        const T* arow = at.data() + st * I;
        T* hrow = h + st * I;
        const T* prow = hprev ? hprev + st * I : nullptr;
        const auto vb = V::set1(bt[st]);
        const auto vc = V::set1(ct[st]);
        std::size_t i = 0;
        for (; i + W <= I; i += W) {
          const auto vdt = V::load(dt + i);
          const auto decay = V::exp(V::mul(vdt, V::load(arow + i)));
          const auto drive = V::mul(V::mul(vdt, vb), V::load(u + i));
          const auto hv = prow ? V::fmadd(decay, V::load(prow + i), drive) : drive;
          V::store(hrow + i, hv);
          V::store(y + i, V::fmadd(vc, hv, V::load(y + i)));
        }
        for (; i < I; ++i) {
          const T decay = std::exp(dt[i] * arow[i]);
          const T prev = prow ? prow[i] : T(0);
          const T hv = decay * prev + dt[i] * bt[st] * u[i];
          hrow[i] = hv;
          y[i] += ct[st] * hv;
        }
      }
    }
  }
}

template <typename T>
void scan_backward_avx2(const ScanShape& s, const ScanBackwardArgs<T>& p) {
  using V = Vec<T>;
  constexpr std::size_t W = V::width;
  const std::size_t I = s.inner, S = s.state, L = s.seq;
  auto& at = scratch<T>(2);
  at.resize(S * I);
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t st = 0; st < S; ++st) at[st * I + i] = p.a[i * S + st];
  }
  auto& dat = scratch<T>(3);
  dat.assign(S * I, T(0));
  std::vector<T> carry(S * I);
  std::vector<T> du_local(I), ddelta_local(I);

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
        du_local[i] = p.d[i] * dy[i];
        ddelta_local[i] = T(0);
        if (p.dd) p.dd[i] += dy[i] * u[i];
      }
      for (std::size_t st = 0; st < S; ++st) {
        const T* arow = at.data() + st * I;
        T* darow = dat.data() + st * I;
        T* crow = carry.data() + st * I;
        const T* hrow = h + st * I;
        const T* prow = hprev ? hprev + st * I : nullptr;
        const auto vb = V::set1(bt[st]);
        const auto vc = V::set1(ct[st]);
        auto dc_acc = V::zero();
        auto db_acc = V::zero();
        std::size_t i = 0;
        for (; i + W <= I; i += W) {
          const auto vdy = V::load(dy + i);
          const auto g = V::fmadd(vc, vdy, V::load(crow + i));
          dc_acc = V::fmadd(vdy, V::load(hrow + i), dc_acc);
          const auto av = V::load(arow + i);
          const auto vdt = V::load(dt + i);
          const auto vu = V::load(u + i);
          const auto decay = V::exp(V::mul(vdt, av));
          const auto prev = prow ? V::load(prow + i) : V::zero();
          const auto decay_prev = V::mul(decay, prev);
          const auto dd = V::mul(g, V::fmadd(av, decay_prev, V::mul(vb, vu)));
          V::store(ddelta_local.data() + i, V::add(V::load(ddelta_local.data() + i), dd));
          const auto gdt = V::mul(g, vdt);
          V::store(darow + i, V::fmadd(gdt, decay_prev, V::load(darow + i)));
          db_acc = V::fmadd(gdt, vu, db_acc);
          V::store(du_local.data() + i,
                   V::fmadd(gdt, vb, V::load(du_local.data() + i)));
          V::store(crow + i, V::mul(g, decay));
        }
        T dc_tail = 0, db_tail = 0;
        for (; i < I; ++i) {
          const T g = crow[i] + ct[st] * dy[i];
          dc_tail += dy[i] * hrow[i];
          const T av = arow[i];
          const T decay = std::exp(dt[i] * av);
          const T prev = prow ? prow[i] : T(0);
          ddelta_local[i] += g * (av * decay * prev + bt[st] * u[i]);
          darow[i] += g * dt[i] * decay * prev;
          db_tail += g * dt[i] * u[i];
          du_local[i] += g * dt[i] * bt[st];
          crow[i] = g * decay;
        }
        if (p.dc) p.dc[row * S + st] += V::hsum(dc_acc) + dc_tail;
        if (p.db) p.db[row * S + st] += V::hsum(db_acc) + db_tail;
      }
      for (std::size_t i = 0; i < I; ++i) {
        if (p.du) p.du[row * I + i] += du_local[i];
        if (p.ddelta) p.ddelta[row * I + i] += ddelta_local[i];
      }
    }
  }
  if (p.da) {
    for (std::size_t i = 0; i < I; ++i) {
      for (std::size_t st = 0; st < S; ++st) p.da[i * S + st] += dat[st * I + i];
    }
  }
}

}  // namespace

template <typename T>
const KernelTable<T>& table() {
  static const KernelTable<T> t{&gemm_avx2<T>,         &vexp_avx2<T>,
                                &gelu_avx2<T>,         &gelu_backward_avx2<T>,
                                &scan_forward_avx2<T>, &scan_backward_avx2<T>};
  return t;
}

template const KernelTable<float>& table<float>();
template const KernelTable<double>& table<double>();

}  // namespace hicl::kernels::avx2
