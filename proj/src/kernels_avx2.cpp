// AVX2 kernel variants. Compiled with -mavx2 only when the toolchain supports
// it; dispatch.cpp checks CPUID before handing out this table. Arithmetic
// matches the scalar reference bit-for-bit: mul+add (no FMA, -ffp-contract=off
// globally) and the dot reduction tree mirrors dot_blocked_ref.

#include "vqfr/kernels.hpp"

#ifdef VQFR_HAVE_AVX2

#include <immintrin.h>

namespace vqfr::kern {

namespace {

void axpy_avx2_f32(size_t n, float a, const float* x, float* y) {
    __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 vy = _mm256_loadu_ps(y + i);
        __m256 vx = _mm256_loadu_ps(x + i);
        _mm256_storeu_ps(y + i, _mm256_add_ps(vy, _mm256_mul_ps(va, vx)));
    }
    for (; i < n; i++) y[i] += a * x[i];
}

void axpy_avx2_f64(size_t n, double a, const double* x, double* y) {
    __m256d va = _mm256_set1_pd(a);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        __m256d vx = _mm256_loadu_pd(x + i);
        _mm256_storeu_pd(y + i, _mm256_add_pd(vy, _mm256_mul_pd(va, vx)));
    }
    for (; i < n; i++) y[i] += a * x[i];
}

template <typename T>
void axpy_strided_simd(size_t n, T a, const T* x, T* y, size_t ys) {
    // Scattered writes do not vectorize profitably; same arithmetic as ref.
    for (size_t i = 0; i < n; i++) y[i * ys] += a * x[i];
}

void add_avx2_f32(size_t n, const float* a, const float* b, float* out) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; i++) out[i] = a[i] + b[i];
}

void add_avx2_f64(size_t n, const double* a, const double* b, double* out) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; i++) out[i] = a[i] + b[i];
}

void sub_avx2_f32(size_t n, const float* a, const float* b, float* out) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; i++) out[i] = a[i] - b[i];
}

void sub_avx2_f64(size_t n, const double* a, const double* b, double* out) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; i++) out[i] = a[i] - b[i];
}

void mul_avx2_f32(size_t n, const float* a, const float* b, float* out) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; i++) out[i] = a[i] * b[i];
}

void mul_avx2_f64(size_t n, const double* a, const double* b, double* out) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; i++) out[i] = a[i] * b[i];
}

void scale_avx2_f32(size_t n, float a, const float* x, float* out) {
    __m256 va = _mm256_set1_ps(a);
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    for (; i < n; i++) out[i] = a * x[i];
}

void scale_avx2_f64(size_t n, double a, const double* x, double* out) {
    __m256d va = _mm256_set1_pd(a);
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    for (; i < n; i++) out[i] = a * x[i];
}

float dot_blocked_avx2_f32(size_t n, const float* a, const float* b) {
    __m256 acc = _mm256_setzero_ps();
    size_t main = n - n % 8;
    for (size_t i = 0; i < main; i += 8)
        acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    alignas(32) float bins[8];
    _mm256_store_ps(bins, acc);
    float r = ((bins[0] + bins[1]) + (bins[2] + bins[3])) +
              ((bins[4] + bins[5]) + (bins[6] + bins[7]));
    for (size_t i = main; i < n; i++) r += a[i] * b[i];
    return r;
}

double dot_blocked_avx2_f64(size_t n, const double* a, const double* b) {
    __m256d acc = _mm256_setzero_pd();
    size_t main = n - n % 4;
    for (size_t i = 0; i < main; i += 4)
        acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    alignas(32) double bins[4];
    _mm256_store_pd(bins, acc);
    double r = (bins[0] + bins[1]) + (bins[2] + bins[3]);
    for (size_t i = main; i < n; i++) r += a[i] * b[i];
    return r;
}

}  // namespace

const Table<float>& avx2_table_f32() {
    static Table<float> t = [] {
        Table<float> tt;
        tt.axpy = &axpy_avx2_f32;
        tt.axpy_strided = &axpy_strided_simd<float>;
        tt.add = &add_avx2_f32;
        tt.sub = &sub_avx2_f32;
        tt.mul = &mul_avx2_f32;
        tt.scale = &scale_avx2_f32;
        tt.dot_blocked = &dot_blocked_avx2_f32;
        return tt;
    }();
    return t;
}

const Table<double>& avx2_table_f64() {
    static Table<double> t = [] {
        Table<double> tt;
        tt.axpy = &axpy_avx2_f64;
        tt.axpy_strided = &axpy_strided_simd<double>;
        tt.add = &add_avx2_f64;
        tt.sub = &sub_avx2_f64;
        tt.mul = &mul_avx2_f64;
        tt.scale = &scale_avx2_f64;
        tt.dot_blocked = &dot_blocked_avx2_f64;
        return tt;
    }();
    return t;
}

}  // namespace vqfr::kern

#endif  // VQFR_HAVE_AVX2
