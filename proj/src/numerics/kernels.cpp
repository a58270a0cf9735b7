#include "hicl/numerics/kernels.hpp"

#include <atomic>
#include <cstdlib>

#include "hicl/error.hpp"

namespace hicl::kernels {

namespace {

Isa detect() {
  if (const char* env = std::getenv("HICL_KERNELS")) {
    const Isa requested = parse_isa(env);
    if (isa_available(requested)) return requested;
  }
  return isa_available(Isa::kAvx2) ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

bool isa_available(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return true;
    case Isa::kAvx2:
#if defined(__x86_64__)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_available(isa)) {
    throw Error(std::string("kernel ISA not available on this CPU: ") +
                isa_name(isa));
  }
  current().store(isa, std::memory_order_relaxed);
}

const char* isa_name(Isa isa) {
  return isa == Isa::kAvx2 ? "avx2" : "scalar";
}

Isa parse_isa(const std::string& name) {
  if (name == "scalar") return Isa::kScalar;
  if (name == "avx2") return Isa::kAvx2;
  throw Error("unknown kernel ISA '" + name + "'");
}

template <typename T>
const KernelTable<T>& table(Isa isa) {
#if defined(__x86_64__)
  if (isa == Isa::kAvx2) return avx2::table<T>();
#endif
  (void)isa;
  return scalar::table<T>();
}

template const KernelTable<float>& table<float>(Isa);
template const KernelTable<double>& table<double>(Isa);

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, T alpha, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T beta, T* c, std::size_t ldc) {
  table<T>(active_isa()).gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb,
                              beta, c, ldc);
}

template <typename T>
void vexp(const T* x, T* y, std::size_t n) {
  table<T>(active_isa()).vexp(x, y, n);
}

template <typename T>
void gelu(const T* x, T* y, std::size_t n) {
  table<T>(active_isa()).gelu(x, y, n);
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::size_t n) {
  table<T>(active_isa()).gelu_backward(x, dy, dx, n);
}

template <typename T>
void ssm_scan_forward(const ScanShape& shape, const ScanForwardArgs<T>& args) {
  table<T>(active_isa()).scan_forward(shape, args);
}

template <typename T>
void ssm_scan_backward(const ScanShape& shape, const ScanBackwardArgs<T>& args) {
  table<T>(active_isa()).scan_backward(shape, args);
}

#define HICL_INSTANTIATE(T)                                                   \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T, \
                        const T*, std::size_t, const T*, std::size_t, T, T*,  \
                        std::size_t);                                         \
  template void vexp<T>(const T*, T*, std::size_t);                           \
  template void gelu<T>(const T*, T*, std::size_t);                           \
  template void gelu_backward<T>(const T*, const T*, T*, std::size_t);        \
  template void ssm_scan_forward<T>(const ScanShape&,                         \
                                    const ScanForwardArgs<T>&);               \
  template void ssm_scan_backward<T>(const ScanShape&,                        \
                                     const ScanBackwardArgs<T>&);

HICL_INSTANTIATE(float)
HICL_INSTANTIATE(double)

#undef HICL_INSTANTIATE

}  // namespace hicl::kernels
