#pragma once

// Inner-loop kernels used by the graph primitives. Each kernel has a scalar
// reference implementation and, on x86-64, an AVX2+FMA variant. The variant is
// selected once at startup from CPUID; HICL_KERNELS=scalar|avx2 overrides it.
// Results of the two variants agree to rounding (see kernels_equivalence_test)
// but are not bit-identical, so runs are reproducible per machine and ISA.

#include <cstddef>
#include <string>

namespace hicl::kernels {

enum class Isa { kScalar, kAvx2 };

bool isa_available(Isa isa);
Isa active_isa();
void set_isa(Isa isa);
const char* isa_name(Isa isa);
Isa parse_isa(const std::string& name);

// Restores the previously active ISA on scope exit.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_isa(isa); }
  ~ScopedIsa() { set_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

// Row-major C[m,n] = alpha * op(A) * op(B) + beta * C.
// op(A) is m x k (A is k x m when trans_a); op(B) is k x n.
// When beta == 0, C is write-only (its prior contents are never read).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, T alpha, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T beta, T* c, std::size_t ldc);

template <typename T>
void vexp(const T* x, T* y, std::size_t n);

// Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
void gelu(const T* x, T* y, std::size_t n);

// dx[i] += dy[i] * gelu'(x[i])
template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::size_t n);

// Selective scan over a [batch, seq, inner] input with diagonal state matrix.
//   h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t,   h_{-1} = 0
//   y_t = C_t . h_t + D * u_t
// Shapes: u, delta, y: [batch, seq, inner]; A: [inner, state];
// B, C: [batch, seq, state]; D: [inner].
// `states` receives every h_t laid out as [batch, seq, state, inner] and is
// consumed by the backward pass.
struct ScanShape {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t inner = 0;
  std::size_t state = 0;

  std::size_t states_size() const { return batch * seq * state * inner; }
};

template <typename T>
struct ScanForwardArgs {
  const T* u;
  const T* delta;
  const T* a;
  const T* b;
  const T* c;
  const T* d;
  T* y;
  T* states;
};

// All gradient outputs are accumulated (+=); pass nullptr to skip one.
template <typename T>
struct ScanBackwardArgs {
  const T* u;
  const T* delta;
  const T* a;
  const T* b;
  const T* c;
  const T* d;
  const T* states;
  const T* dy;
  T* du;
  T* ddelta;
  T* da;
  T* db;
  T* dc;
  T* dd;
};

template <typename T>
void ssm_scan_forward(const ScanShape& shape, const ScanForwardArgs<T>& args);

template <typename T>
void ssm_scan_backward(const ScanShape& shape, const ScanBackwardArgs<T>& args);

// Per-variant entry points, exposed so tests can compare them directly.
template <typename T>
struct KernelTable {
  void (*gemm)(bool, bool, std::size_t, std::size_t, std::size_t, T, const T*,
               std::size_t, const T*, std::size_t, T, T*, std::size_t);
  void (*vexp)(const T*, T*, std::size_t);
  void (*gelu)(const T*, T*, std::size_t);
  void (*gelu_backward)(const T*, const T*, T*, std::size_t);
  void (*scan_forward)(const ScanShape&, const ScanForwardArgs<T>&);
  void (*scan_backward)(const ScanShape&, const ScanBackwardArgs<T>&);
};

template <typename T>
const KernelTable<T>& table(Isa isa);

namespace scalar {
template <typename T>
const KernelTable<T>& table();
}

#if defined(__x86_64__)
namespace avx2 {
template <typename T>
const KernelTable<T>& table();
}
#endif

}  // namespace hicl::kernels
