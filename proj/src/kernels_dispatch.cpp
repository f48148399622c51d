#include "vqfr/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

namespace vqfr::kern {

const Table<float>& scalar_table_f32();
const Table<double>& scalar_table_f64();
#ifdef VQFR_HAVE_AVX2
const Table<float>& avx2_table_f32();
const Table<double>& avx2_table_f64();
#endif

namespace {

bool cpu_has_avx2() {
#if defined(VQFR_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

Isa resolve_isa() {
    const char* env = std::getenv("VQFR_SIMD");
    std::string mode = env ? env : "auto";
    if (mode == "scalar") return Isa::Scalar;
    if (mode == "avx2") {
        if (!isa_available(Isa::Avx2))
            throw std::runtime_error("VQFR_SIMD=avx2 requested but AVX2 is unavailable");
        return Isa::Avx2;
    }
    if (mode != "auto" && !mode.empty())
        throw std::runtime_error("VQFR_SIMD must be one of auto|scalar|avx2, got '" + mode + "'");
    return isa_available(Isa::Avx2) ? Isa::Avx2 : Isa::Scalar;
}

}  // namespace

bool isa_available(Isa isa) {
    switch (isa) {
        case Isa::Scalar: return true;
        case Isa::Avx2: return cpu_has_avx2();
    }
    return false;
}

Isa active_isa() {
    static Isa isa = resolve_isa();
    return isa;
}

const char* isa_name(Isa isa) {
    switch (isa) {
        case Isa::Scalar: return "scalar";
        case Isa::Avx2: return "avx2";
    }
    return "?";
}

template <>
const Table<float>& table<float>(Isa isa) {
    switch (isa) {
        case Isa::Scalar: return scalar_table_f32();
        case Isa::Avx2:
#ifdef VQFR_HAVE_AVX2
            if (cpu_has_avx2()) return avx2_table_f32();
#endif
            break;
    }
    throw std::runtime_error(std::string("kernel table unavailable: ") + isa_name(isa));
}

template <>
const Table<double>& table<double>(Isa isa) {
    switch (isa) {
        case Isa::Scalar: return scalar_table_f64();
        case Isa::Avx2:
#ifdef VQFR_HAVE_AVX2
            if (cpu_has_avx2()) return avx2_table_f64();
#endif
            break;
    }
    throw std::runtime_error(std::string("kernel table unavailable: ") + isa_name(isa));
}

template <>
const Table<float>& active<float>() {
    static const Table<float>& t = table<float>(active_isa());
    return t;
}

template <>
const Table<double>& active<double>() {
    static const Table<double>& t = table<double>(active_isa());
    return t;
}

}  // namespace vqfr::kern
