#include "vqfr/kernels.hpp"

#include <type_traits>

// Scalar reference kernels. These define the numerical contract; the SIMD
// variants must match them bit-for-bit.

namespace vqfr::kern {

namespace {

template <typename T>
void axpy_ref(size_t n, T a, const T* x, T* y) {
    for (size_t i = 0; i < n; i++) y[i] += a * x[i];
}

template <typename T>
void axpy_strided_ref(size_t n, T a, const T* x, T* y, size_t ys) {
    for (size_t i = 0; i < n; i++) y[i * ys] += a * x[i];
}

template <typename T>
void add_ref(size_t n, const T* a, const T* b, T* out) {
    for (size_t i = 0; i < n; i++) out[i] = a[i] + b[i];
}

template <typename T>
void sub_ref(size_t n, const T* a, const T* b, T* out) {
    for (size_t i = 0; i < n; i++) out[i] = a[i] - b[i];
}

template <typename T>
void mul_ref(size_t n, const T* a, const T* b, T* out) {
    for (size_t i = 0; i < n; i++) out[i] = a[i] * b[i];
}

template <typename T>
void scale_ref(size_t n, T a, const T* x, T* out) {
    for (size_t i = 0; i < n; i++) out[i] = a * x[i];
}

// Lane-blocked dot product. Bin count matches the SIMD register width for T
// (8 for f32, 4 for f64); bins reduce pairwise, then the tail is appended
// sequentially. The order is part of the determinism contract.
template <typename T, size_t Lanes>
T dot_blocked_ref(size_t n, const T* a, const T* b) {
    T bins[Lanes] = {};
    size_t main = n - n % Lanes;
    for (size_t i = 0; i < main; i += Lanes) {
        for (size_t j = 0; j < Lanes; j++) bins[j] += a[i + j] * b[i + j];
    }
    T acc;
    if constexpr (Lanes == 8) {
        acc = ((bins[0] + bins[1]) + (bins[2] + bins[3])) +
              ((bins[4] + bins[5]) + (bins[6] + bins[7]));
    } else {
        acc = (bins[0] + bins[1]) + (bins[2] + bins[3]);
    }
    for (size_t i = main; i < n; i++) acc += a[i] * b[i];
    return acc;
}

}  // namespace

template <typename T>
static Table<T> make_scalar_table() {
    Table<T> t;
    t.axpy = &axpy_ref<T>;
    t.axpy_strided = &axpy_strided_ref<T>;
    t.add = &add_ref<T>;
    t.sub = &sub_ref<T>;
    t.mul = &mul_ref<T>;
    t.scale = &scale_ref<T>;
    t.dot_blocked = &dot_blocked_ref<T, (std::is_same_v<T, float> ? 8 : 4)>;
    return t;
}

const Table<float>& scalar_table_f32() {
    static Table<float> t = make_scalar_table<float>();
    return t;
}

const Table<double>& scalar_table_f64() {
    static Table<double> t = make_scalar_table<double>();
    return t;
}

}  // namespace vqfr::kern
