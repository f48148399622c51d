#pragma once

#include <cstddef>

namespace vqfr::kern {

// Hot inner loops of the tensor ops, with a scalar reference implementation
// and an AVX2 variant selected once at startup. The two variants are
// bit-identical by contract (equivalence-tested):
//   - elementwise kernels perform the same operation per element;
//   - axpy vectorizes across independent output elements, so each output's
//     accumulation stays a single mul+add;
//   - dot_blocked uses a fixed lane-blocked accumulation order (8 bins for
//     f32, 4 for f64, pairwise tree, then a sequential tail) that the scalar
//     reference reproduces exactly.
// Selection: VQFR_SIMD env var (auto|scalar|avx2), default auto (CPUID).

enum class Isa { Scalar, Avx2 };

Isa active_isa();
const char* isa_name(Isa isa);
bool isa_available(Isa isa);

template <typename T>
struct Table {
    void (*axpy)(size_t n, T a, const T* x, T* y);              // y[i] += a*x[i]
    void (*axpy_strided)(size_t n, T a, const T* x, T* y, size_t ys);  // y[i*ys] += a*x[i]
    void (*add)(size_t n, const T* a, const T* b, T* out);
    void (*sub)(size_t n, const T* a, const T* b, T* out);
    void (*mul)(size_t n, const T* a, const T* b, T* out);
    void (*scale)(size_t n, T a, const T* x, T* out);           // out[i] = a*x[i]
    T (*dot_blocked)(size_t n, const T* a, const T* b);
};

template <typename T>
const Table<T>& table(Isa isa);  // throws std::runtime_error if unavailable

template <typename T>
const Table<T>& active();

// Convenience wrappers over the active table.
template <typename T>
inline void axpy(size_t n, T a, const T* x, T* y) { active<T>().axpy(n, a, x, y); }
template <typename T>
inline void axpy_strided(size_t n, T a, const T* x, T* y, size_t ys) {
    active<T>().axpy_strided(n, a, x, y, ys);
}
template <typename T>
inline void add(size_t n, const T* a, const T* b, T* out) { active<T>().add(n, a, b, out); }
template <typename T>
inline void sub(size_t n, const T* a, const T* b, T* out) { active<T>().sub(n, a, b, out); }
template <typename T>
inline void mul(size_t n, const T* a, const T* b, T* out) { active<T>().mul(n, a, b, out); }
template <typename T>
inline void scale(size_t n, T a, const T* x, T* out) { active<T>().scale(n, a, x, out); }
template <typename T>
inline T dot_blocked(size_t n, const T* a, const T* b) { return active<T>().dot_blocked(n, a, b); }

}  // namespace vqfr::kern
