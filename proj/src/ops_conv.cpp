#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "vqfr/kernels.hpp"
#include "vqfr/tensor.hpp"
#include "vqfr/threadpool.hpp"

// Convolution-family ops. Accumulation order per output element is fixed by
// the loop nests below (bias first, then channel-major over kernel taps) and
// is identical between the scalar and SIMD kernel variants; reductions in the
// backward passes use the blocked dot kernel. Threads always own disjoint
// output slices, so results are independent of VQFR_THREADS.

namespace vqfr {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

template <typename T>
struct ConvDims {
    int n, c, h, w;       // input
    int o, kh, kw;        // kernel
    int oh, ow;           // output
    int stride, pad, groups;
    int c_per_g, o_per_g;
};

template <typename T>
ConvDims<T> conv_dims(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                      int pad, int groups) {
    if (x.rank() != 4 || w.rank() != 4) fail("conv2d: x and w must be rank 4");
    if (b.rank() != 1) fail("conv2d: bias must be rank 1");
    ConvDims<T> d;
    d.n = x.dim(0); d.c = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
    d.o = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
    d.stride = stride; d.pad = pad; d.groups = groups;
    if (stride < 1 || pad < 0 || groups < 1) fail("conv2d: bad stride/pad/groups");
    if (d.c % groups != 0 || d.o % groups != 0)
        fail("conv2d: channels " + std::to_string(d.c) + "/" + std::to_string(d.o) +
             " not divisible by groups " + std::to_string(groups));
    d.c_per_g = d.c / groups;
    d.o_per_g = d.o / groups;
    if (w.dim(1) != d.c_per_g)
        fail("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels per group, x has " +
             std::to_string(d.c_per_g));
    if (b.dim(0) != d.o) fail("conv2d: bias extent != out channels");
    int num_h = d.h + 2 * pad - d.kh;
    int num_w = d.w + 2 * pad - d.kw;
    if (num_h < 0 || num_w < 0 || num_h % stride != 0 || num_w % stride != 0)
        fail("conv2d: non-integral output extent for input " + std::to_string(d.h) + "x" +
             std::to_string(d.w) + ", kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
             ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
    d.oh = num_h / stride + 1;
    d.ow = num_w / stride + 1;
    return d;
}

// Valid ow range for a kernel column kw: 0 <= ow*stride - pad + kw < W.
inline void ow_range(int kw, int pad, int stride, int w_in, int ow, int* lo, int* hi) {
    int lo_num = pad - kw;  // ow*stride >= pad - kw
    int l = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
    int hi_num = w_in - 1 + pad - kw;  // ow*stride <= hi_num
    int h = hi_num < 0 ? -1 : hi_num / stride;
    *lo = std::min(l, ow);
    *hi = std::min(h, ow - 1);
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad, int groups) {
    ConvDims<T> d = conv_dims(x, w, b, stride, pad, groups);
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    const T* bv = b.data().data();
    std::vector<T> out(static_cast<size_t>(d.n) * d.o * d.oh * d.ow);

    size_t in_plane = static_cast<size_t>(d.h) * d.w;
    size_t out_plane = static_cast<size_t>(d.oh) * d.ow;
    size_t kplane = static_cast<size_t>(d.kh) * d.kw;

    parallel_for(static_cast<size_t>(d.n) * d.o, [&](size_t idx) {
        int n = static_cast<int>(idx) / d.o;
        int oc = static_cast<int>(idx) % d.o;
        int g = oc / d.o_per_g;
        T* op = out.data() + (static_cast<size_t>(n) * d.o + oc) * out_plane;
        std::fill(op, op + out_plane, bv[oc]);
        for (int cl = 0; cl < d.c_per_g; cl++) {
            int c = g * d.c_per_g + cl;
            const T* xp = xv + (static_cast<size_t>(n) * d.c + c) * in_plane;
            const T* wp = wv + (static_cast<size_t>(oc) * d.c_per_g + cl) * kplane;
            for (int kh = 0; kh < d.kh; kh++)
                for (int kw = 0; kw < d.kw; kw++) {
                    T a = wp[kh * d.kw + kw];
                    int lo, hi;
                    ow_range(kw, d.pad, d.stride, d.w, d.ow, &lo, &hi);
                    for (int oh = 0; oh < d.oh; oh++) {
                        int ih = oh * d.stride - d.pad + kh;
                        if (ih < 0 || ih >= d.h) continue;
                        T* orow = op + static_cast<size_t>(oh) * d.ow;
                        const T* xrow = xp + static_cast<size_t>(ih) * d.w;
                        if (d.stride == 1) {
                            if (hi >= lo)
                                kern::axpy<T>(static_cast<size_t>(hi - lo + 1), a,
                                              xrow + (lo - d.pad + kw), orow + lo);
                        } else {
                            for (int ow = lo; ow <= hi; ow++)
                                orow[ow] += a * xrow[ow * d.stride - d.pad + kw];
                        }
                    }
                }
        }
    }, 4);

    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return make_op<T>({d.n, d.o, d.oh, d.ow}, std::move(out), {x, w, b},
                      [xn, wn, bn, d, in_plane, out_plane, kplane](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* xv2 = xn->value.data();
        const T* wv2 = wn->value.data();
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int n = 0; n < d.n; n++)
                for (int oc = 0; oc < d.o; oc++) {
                    const T* gp = g + (static_cast<size_t>(n) * d.o + oc) * out_plane;
                    T acc = T(0);
                    for (size_t i = 0; i < out_plane; i++) acc += gp[i];
                    bn->grad[oc] += acc;
                }
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            // Threads own disjoint output channels; per-weight reduction runs
            // over (n, oh) in fixed order.
            parallel_for(static_cast<size_t>(d.o), [&](size_t oc_idx) {
                int oc = static_cast<int>(oc_idx);
                int gidx = oc / d.o_per_g;
                for (int cl = 0; cl < d.c_per_g; cl++) {
                    int c = gidx * d.c_per_g + cl;
                    T* dwp = wn->grad.data() + (static_cast<size_t>(oc) * d.c_per_g + cl) * kplane;
                    for (int kh = 0; kh < d.kh; kh++)
                        for (int kw = 0; kw < d.kw; kw++) {
                            int lo, hi;
                            ow_range(kw, d.pad, d.stride, d.w, d.ow, &lo, &hi);
                            T acc = T(0);
                            for (int n = 0; n < d.n; n++) {
                                const T* gp = g + (static_cast<size_t>(n) * d.o + oc) * out_plane;
                                const T* xp = xv2 + (static_cast<size_t>(n) * d.c + c) * in_plane;
                                for (int oh = 0; oh < d.oh; oh++) {
                                    int ih = oh * d.stride - d.pad + kh;
                                    if (ih < 0 || ih >= d.h) continue;
                                    const T* grow = gp + static_cast<size_t>(oh) * d.ow;
                                    const T* xrow = xp + static_cast<size_t>(ih) * d.w;
                                    if (hi < lo) continue;
                                    if (d.stride == 1) {
                                        acc += kern::dot_blocked<T>(static_cast<size_t>(hi - lo + 1),
                                                                    grow + lo, xrow + (lo - d.pad + kw));
                                    } else {
                                        for (int ow = lo; ow <= hi; ow++)
                                            acc += grow[ow] * xrow[ow * d.stride - d.pad + kw];
                                    }
                                }
                            }
                            dwp[kh * d.kw + kw] += acc;
                        }
                }
            }, 2);
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            parallel_for(static_cast<size_t>(d.n), [&](size_t n_idx) {
                int n = static_cast<int>(n_idx);
                for (int oc = 0; oc < d.o; oc++) {
                    int gidx = oc / d.o_per_g;
                    const T* gp = g + (static_cast<size_t>(n) * d.o + oc) * out_plane;
                    for (int cl = 0; cl < d.c_per_g; cl++) {
                        int c = gidx * d.c_per_g + cl;
                        T* dxp = xn->grad.data() + (static_cast<size_t>(n) * d.c + c) * in_plane;
                        const T* wp = wv2 + (static_cast<size_t>(oc) * d.c_per_g + cl) * kplane;
                        for (int kh = 0; kh < d.kh; kh++)
                            for (int kw = 0; kw < d.kw; kw++) {
                                T a = wp[kh * d.kw + kw];
                                int lo, hi;
                                ow_range(kw, d.pad, d.stride, d.w, d.ow, &lo, &hi);
                                for (int oh = 0; oh < d.oh; oh++) {
                                    int ih = oh * d.stride - d.pad + kh;
                                    if (ih < 0 || ih >= d.h) continue;
                                    const T* grow = gp + static_cast<size_t>(oh) * d.ow;
                                    T* dxrow = dxp + static_cast<size_t>(ih) * d.w;
                                    if (hi < lo) continue;
                                    if (d.stride == 1) {
                                        kern::axpy<T>(static_cast<size_t>(hi - lo + 1), a, grow + lo,
                                                      dxrow + (lo - d.pad + kw));
                                    } else {
                                        for (int ow = lo; ow <= hi; ow++)
                                            dxrow[ow * d.stride - d.pad + kw] += a * grow[ow];
                                    }
                                }
                            }
                    }
                }
            }, 1);
        }
    });
}

// ---------------------------------------------------------------------------
// group norm + swish (fused)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> group_norm_swish(const TensorT<T>& x, int groups, const TensorT<T>& gamma,
                            const TensorT<T>& beta, T eps) {
    if (x.rank() != 4) fail("group_norm_swish: expects NCHW input");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (groups < 1 || c % groups != 0)
        fail("group_norm_swish: groups " + std::to_string(groups) + " does not divide channels " +
             std::to_string(c));
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
        fail("group_norm_swish: gamma/beta must be [C]");
    if (!(eps > T(0))) fail("group_norm_swish: eps must be positive");

    int cg = c / groups;
    size_t plane = static_cast<size_t>(h) * w;
    size_t gsz = static_cast<size_t>(cg) * plane;  // elements per (n, group)
    const T* xv = x.data().data();
    const T* gv = gamma.data().data();
    const T* bv = beta.data().data();

    std::vector<T> out(x.numel());
    std::vector<T> means(static_cast<size_t>(n) * groups), invs(static_cast<size_t>(n) * groups);

    for (int b = 0; b < n; b++)
        for (int g = 0; g < groups; g++) {
            const T* base = xv + (static_cast<size_t>(b) * c + static_cast<size_t>(g) * cg) * plane;
            T acc = T(0);
            for (size_t i = 0; i < gsz; i++) acc += base[i];
            T mu = acc / static_cast<T>(gsz);
            T var = T(0);
            for (size_t i = 0; i < gsz; i++) {
                T dlt = base[i] - mu;
                var += dlt * dlt;
            }
            var /= static_cast<T>(gsz);
            T inv = T(1) / std::sqrt(var + eps);
            means[static_cast<size_t>(b) * groups + g] = mu;
            invs[static_cast<size_t>(b) * groups + g] = inv;
            T* op = out.data() + (static_cast<size_t>(b) * c + static_cast<size_t>(g) * cg) * plane;
            for (int cl = 0; cl < cg; cl++) {
                int cc = g * cg + cl;
                for (size_t i = 0; i < plane; i++) {
                    T xh = (base[static_cast<size_t>(cl) * plane + i] - mu) * inv;
                    T u = gv[cc] * xh + bv[cc];
                    T s = u >= T(0) ? T(1) / (T(1) + std::exp(-u)) : std::exp(u) / (T(1) + std::exp(u));
                    op[static_cast<size_t>(cl) * plane + i] = u * s;
                }
            }
        }

    auto xn = x.node();
    auto gn = gamma.node();
    auto btn = beta.node();
    return make_op<T>(x.shape(), std::move(out), {x, gamma, beta},
                      [xn, gn, btn, n, c, groups, cg, plane, gsz, means, invs](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* xv2 = xn->value.data();
        const T* gv2 = gn->value.data();
        const T* bv2 = btn->value.data();
        bool need_x = xn->requires_grad, need_g = gn->requires_grad, need_b = btn->requires_grad;
        if (need_x) xn->ensure_grad();
        if (need_g) gn->ensure_grad();
        if (need_b) btn->ensure_grad();
        std::vector<T> gu(gsz), xhat(gsz);
        for (int b = 0; b < n; b++)
            for (int gr = 0; gr < groups; gr++) {
                size_t off = (static_cast<size_t>(b) * c + static_cast<size_t>(gr) * cg) * plane;
                T mu = means[static_cast<size_t>(b) * groups + gr];
                T inv = invs[static_cast<size_t>(b) * groups + gr];
                for (int cl = 0; cl < cg; cl++) {
                    int cc = gr * cg + cl;
                    for (size_t i = 0; i < plane; i++) {
                        size_t e = static_cast<size_t>(cl) * plane + i;
                        T xh = (xv2[off + e] - mu) * inv;
                        xhat[e] = xh;
                        T u = gv2[cc] * xh + bv2[cc];
                        T s = u >= T(0) ? T(1) / (T(1) + std::exp(-u)) : std::exp(u) / (T(1) + std::exp(u));
                        T dswish = s + u * s * (T(1) - s);
                        gu[e] = g[off + e] * dswish;
                    }
                }
                if (need_g || need_b) {
                    for (int cl = 0; cl < cg; cl++) {
                        int cc = gr * cg + cl;
                        T sg = T(0), sb = T(0);
                        for (size_t i = 0; i < plane; i++) {
                            size_t e = static_cast<size_t>(cl) * plane + i;
                            sg += gu[e] * xhat[e];
                            sb += gu[e];
                        }
                        if (need_g) gn->grad[cc] += sg;
                        if (need_b) btn->grad[cc] += sb;
                    }
                }
                if (need_x) {
                    // d xhat = gu * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    T s1 = T(0), s2 = T(0);
                    for (int cl = 0; cl < cg; cl++) {
                        int cc = gr * cg + cl;
                        for (size_t i = 0; i < plane; i++) {
                            size_t e = static_cast<size_t>(cl) * plane + i;
                            T gx = gu[e] * gv2[cc];
                            s1 += gx;
                            s2 += gx * xhat[e];
                        }
                    }
                    T m1 = s1 / static_cast<T>(gsz);
                    T m2 = s2 / static_cast<T>(gsz);
                    for (int cl = 0; cl < cg; cl++) {
                        int cc = gr * cg + cl;
                        for (size_t i = 0; i < plane; i++) {
                            size_t e = static_cast<size_t>(cl) * plane + i;
                            T gx = gu[e] * gv2[cc];
                            xn->grad[off + e] += inv * (gx - m1 - xhat[e] * m2);
                        }
                    }
                }
            }
    });
}

// ---------------------------------------------------------------------------
// bilinear resize (align_corners=false, edge clamp)
// ---------------------------------------------------------------------------

namespace {

struct ResizeAxis {
    std::vector<int> i0, i1;
    std::vector<double> f;
};

ResizeAxis resize_axis(int in, int out) {
    ResizeAxis a;
    a.i0.resize(out);
    a.i1.resize(out);
    a.f.resize(out);
    for (int i = 0; i < out; i++) {
        double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        int lo = static_cast<int>(std::floor(src));
        double fr = src - lo;
        a.i0[i] = std::clamp(lo, 0, in - 1);
        a.i1[i] = std::clamp(lo + 1, 0, in - 1);
        a.f[i] = fr;
    }
    return a;
}

}  // namespace

template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int out_h, int out_w) {
    if (x.rank() != 4) fail("bilinear_resize: expects NCHW input");
    if (out_h < 1 || out_w < 1) fail("bilinear_resize: output extents must be >= 1");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    ResizeAxis ay = resize_axis(h, out_h);
    ResizeAxis ax = resize_axis(w, out_w);
    size_t in_plane = static_cast<size_t>(h) * w;
    size_t out_plane = static_cast<size_t>(out_h) * out_w;
    const T* xv = x.data().data();
    std::vector<T> out(static_cast<size_t>(n) * c * out_plane);
    parallel_for(static_cast<size_t>(n) * c, [&](size_t p) {
        const T* xp = xv + p * in_plane;
        T* op = out.data() + p * out_plane;
        for (int oy = 0; oy < out_h; oy++) {
            T fy = static_cast<T>(ay.f[oy]);
            const T* r0 = xp + static_cast<size_t>(ay.i0[oy]) * w;
            const T* r1 = xp + static_cast<size_t>(ay.i1[oy]) * w;
            for (int ox = 0; ox < out_w; ox++) {
                T fx = static_cast<T>(ax.f[ox]);
                T v00 = r0[ax.i0[ox]], v01 = r0[ax.i1[ox]];
                T v10 = r1[ax.i0[ox]], v11 = r1[ax.i1[ox]];
                T top = v00 + fx * (v01 - v00);
                T bot = v10 + fx * (v11 - v10);
                op[static_cast<size_t>(oy) * out_w + ox] = top + fy * (bot - top);
            }
        }
    }, 8);
    auto xn = x.node();
    return make_op<T>({n, c, out_h, out_w}, std::move(out), {x},
                      [xn, n, c, w, out_h, out_w, ay, ax, in_plane, out_plane](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* g = self.grad.data();
        parallel_for(static_cast<size_t>(n) * c, [&](size_t p) {
            T* dxp = xn->grad.data() + p * in_plane;
            const T* gp = g + p * out_plane;
            for (int oy = 0; oy < out_h; oy++) {
                T fy = static_cast<T>(ay.f[oy]);
                T* r0 = dxp + static_cast<size_t>(ay.i0[oy]) * w;
                T* r1 = dxp + static_cast<size_t>(ay.i1[oy]) * w;
                for (int ox = 0; ox < out_w; ox++) {
                    T fx = static_cast<T>(ax.f[ox]);
                    T gv = gp[static_cast<size_t>(oy) * out_w + ox];
                    r0[ax.i0[ox]] += (T(1) - fy) * (T(1) - fx) * gv;
                    r0[ax.i1[ox]] += (T(1) - fy) * fx * gv;
                    r1[ax.i0[ox]] += fy * (T(1) - fx) * gv;
                    r1[ax.i1[ox]] += fy * fx * gv;
                }
            }
        }, 8);
    });
}

// ---------------------------------------------------------------------------
// deformable conv (v1-style offsets, stride 1, same-size)
// ---------------------------------------------------------------------------

namespace {

// Bilinear sample of plane[h,w] at (sy, sx) with zero outside; corners
// outside the image contribute zero.
template <typename T>
T sample_zero(const T* plane, int h, int w, T sy, T sx) {
    T fy = std::floor(sy), fx = std::floor(sx);
    int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    T dy = sy - fy, dx = sx - fx;
    T v = T(0);
    for (int iy = 0; iy < 2; iy++)
        for (int ix = 0; ix < 2; ix++) {
            int yy = y0 + iy, xx = x0 + ix;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            T wt = (iy ? dy : T(1) - dy) * (ix ? dx : T(1) - dx);
            v += wt * plane[static_cast<size_t>(yy) * w + xx];
        }
    return v;
}

}  // namespace

template <typename T>
TensorT<T> deformable_conv2d(const TensorT<T>& x, const TensorT<T>& offsets, const TensorT<T>& w,
                             const TensorT<T>& b, int deformable_groups) {
    if (x.rank() != 4 || offsets.rank() != 4 || w.rank() != 4 || b.rank() != 1)
        fail("deformable_conv2d: bad ranks");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != c) fail("deformable_conv2d: grouped weights not supported");
    if (kh % 2 == 0 || kw % 2 == 0) fail("deformable_conv2d: kernel must be odd");
    int k = kh * kw;
    int dg = deformable_groups;
    if (dg < 1 || c % dg != 0) fail("deformable_conv2d: deformable_groups must divide channels");
    if (offsets.dim(0) != n || offsets.dim(2) != h || offsets.dim(3) != wd ||
        offsets.dim(1) != 2 * k * dg)
        fail("deformable_conv2d: offsets must be [N," + std::to_string(2 * k * dg) + ",H,W], got " +
             std::to_string(offsets.dim(1)) + " channels");
    if (b.dim(0) != o) fail("deformable_conv2d: bias extent != out channels");
    int pad_h = (kh - 1) / 2, pad_w = (kw - 1) / 2;
    int c_per_dg = c / dg;

    size_t plane = static_cast<size_t>(h) * wd;
    const T* xv = x.data().data();
    const T* ov = offsets.data().data();
    const T* wv = w.data().data();
    const T* bv = b.data().data();

    auto col_index = [k, plane](int cc, int kk) { return (static_cast<size_t>(cc) * k + kk) * plane; };

    // Sampled-patch buffer (im2col with learned offsets), rebuilt in backward.
    auto build_cols = [&](int bi, std::vector<T>& cols) {
        const T* xb = xv + static_cast<size_t>(bi) * c * plane;
        const T* ob = ov + static_cast<size_t>(bi) * (2 * k * dg) * plane;
        for (int g = 0; g < dg; g++)
            for (int kk = 0; kk < k; kk++) {
                int khi = kk / kw, kwi = kk % kw;
                const T* offy = ob + (static_cast<size_t>(g) * k + kk) * 2 * plane;
                const T* offx = offy + plane;
                for (int oy = 0; oy < h; oy++)
                    for (int ox = 0; ox < wd; ox++) {
                        size_t p = static_cast<size_t>(oy) * wd + ox;
                        T sy = static_cast<T>(oy - pad_h + khi) + offy[p];
                        T sx = static_cast<T>(ox - pad_w + kwi) + offx[p];
                        for (int cl = 0; cl < c_per_dg; cl++) {
                            int cc = g * c_per_dg + cl;
                            cols[col_index(cc, kk) + p] =
                                sample_zero(xb + static_cast<size_t>(cc) * plane, h, wd, sy, sx);
                        }
                    }
            }
    };

    std::vector<T> out(static_cast<size_t>(n) * o * plane);
    {
        std::vector<T> cols(static_cast<size_t>(c) * k * plane);
        for (int bi = 0; bi < n; bi++) {
            build_cols(bi, cols);
            T* ob2 = out.data() + static_cast<size_t>(bi) * o * plane;
            parallel_for(static_cast<size_t>(o), [&](size_t oc) {
                T* op = ob2 + oc * plane;
                std::fill(op, op + plane, bv[oc]);
                const T* wp = wv + oc * static_cast<size_t>(c) * k;
                for (int cc = 0; cc < c; cc++)
                    for (int kk = 0; kk < k; kk++)
                        kern::axpy<T>(plane, wp[static_cast<size_t>(cc) * k + kk],
                                      cols.data() + col_index(cc, kk), op);
            }, 2);
        }
    }

    auto xn = x.node();
    auto on = offsets.node();
    auto wn = w.node();
    auto bn = b.node();
    return make_op<T>({n, o, h, wd}, std::move(out), {x, offsets, w, b},
                      [xn, on, wn, bn, n, c, h, wd, o, k, kh, kw, dg, c_per_dg, pad_h, pad_w, plane,
                       col_index, build_cols](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* xv2 = xn->value.data();
        const T* ov2 = on->value.data();
        const T* wv2 = wn->value.data();
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int bi = 0; bi < n; bi++)
                for (int oc = 0; oc < o; oc++) {
                    const T* gp = g + (static_cast<size_t>(bi) * o + oc) * plane;
                    T acc = T(0);
                    for (size_t i = 0; i < plane; i++) acc += gp[i];
                    bn->grad[oc] += acc;
                }
        }
        bool need_w = wn->requires_grad;
        bool need_x = xn->requires_grad;
        bool need_off = on->requires_grad;
        if (!(need_w || need_x || need_off)) return;

        // Rebuild the sampled patches for all batch items (needed by dW and
        // by the d-cols chain).
        std::vector<T> cols_all(static_cast<size_t>(n) * c * k * plane);
        for (int bi = 0; bi < n; bi++) {
            std::vector<T> cols(static_cast<size_t>(c) * k * plane);
            build_cols(bi, cols);
            std::copy(cols.begin(), cols.end(),
                      cols_all.begin() + static_cast<size_t>(bi) * c * k * plane);
        }
        if (need_w) {
            wn->ensure_grad();
            parallel_for(static_cast<size_t>(o), [&](size_t oc) {
                T* dwp = wn->grad.data() + oc * static_cast<size_t>(c) * k;
                for (int cc = 0; cc < c; cc++)
                    for (int kk = 0; kk < k; kk++) {
                        T acc = T(0);
                        for (int bi = 0; bi < n; bi++) {
                            const T* gp = g + (static_cast<size_t>(bi) * o + oc) * plane;
                            const T* cp = cols_all.data() + static_cast<size_t>(bi) * c * k * plane +
                                          col_index(cc, kk);
                            acc += kern::dot_blocked<T>(plane, gp, cp);
                        }
                        dwp[static_cast<size_t>(cc) * k + kk] += acc;
                    }
            }, 2);
        }
        if (need_x || need_off) {
            if (need_x) xn->ensure_grad();
            if (need_off) on->ensure_grad();
            parallel_for(static_cast<size_t>(n), [&](size_t bi_idx) {
                int bi = static_cast<int>(bi_idx);
                // d cols = W^T * g
                std::vector<T> dcols(static_cast<size_t>(c) * k * plane, T(0));
                for (int oc = 0; oc < o; oc++) {
                    const T* gp = g + (static_cast<size_t>(bi) * o + oc) * plane;
                    const T* wp = wv2 + static_cast<size_t>(oc) * c * k;
                    for (int cc = 0; cc < c; cc++)
                        for (int kk = 0; kk < k; kk++)
                            kern::axpy<T>(plane, wp[static_cast<size_t>(cc) * k + kk], gp,
                                          dcols.data() + col_index(cc, kk));
                }
                const T* xb = xv2 + static_cast<size_t>(bi) * c * plane;
                const T* ob = ov2 + static_cast<size_t>(bi) * (2 * k * dg) * plane;
                T* dxb = need_x ? xn->grad.data() + static_cast<size_t>(bi) * c * plane : nullptr;
                T* dob = need_off ? on->grad.data() + static_cast<size_t>(bi) * (2 * k * dg) * plane
                                  : nullptr;
                for (int gi = 0; gi < dg; gi++)
                    for (int kk = 0; kk < k; kk++) {
                        int khi = kk / kw, kwi = kk % kw;
                        const T* offy = ob + (static_cast<size_t>(gi) * k + kk) * 2 * plane;
                        const T* offx = offy + plane;
                        T* doffy = need_off ? dob + (static_cast<size_t>(gi) * k + kk) * 2 * plane
                                            : nullptr;
                        T* doffx = need_off ? doffy + plane : nullptr;
                        for (int oy = 0; oy < h; oy++)
                            for (int ox = 0; ox < wd; ox++) {
                                size_t p = static_cast<size_t>(oy) * wd + ox;
                                T sy = static_cast<T>(oy - pad_h + khi) + offy[p];
                                T sx = static_cast<T>(ox - pad_w + kwi) + offx[p];
                                T fy = std::floor(sy), fx = std::floor(sx);
                                int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
                                T dy = sy - fy, dx = sx - fx;
                                T gy_acc = T(0), gx_acc = T(0);
                                for (int cl = 0; cl < c_per_dg; cl++) {
                                    int cc = gi * c_per_dg + cl;
                                    T gc = dcols[col_index(cc, kk) + p];
                                    if (gc == T(0)) continue;
                                    const T* xplane = xb + static_cast<size_t>(cc) * plane;
                                    T corner[2][2] = {{T(0), T(0)}, {T(0), T(0)}};
                                    for (int iy = 0; iy < 2; iy++)
                                        for (int ix = 0; ix < 2; ix++) {
                                            int yy = y0 + iy, xx = x0 + ix;
                                            bool in = yy >= 0 && yy < h && xx >= 0 && xx < wd;
                                            if (in) corner[iy][ix] = xplane[static_cast<size_t>(yy) * wd + xx];
                                            if (in && need_x) {
                                                T wt = (iy ? dy : T(1) - dy) * (ix ? dx : T(1) - dx);
                                                dxb[static_cast<size_t>(cc) * plane +
                                                    static_cast<size_t>(yy) * wd + xx] += wt * gc;
                                            }
                                        }
                                    if (need_off) {
                                        gy_acc += gc * ((corner[1][0] - corner[0][0]) * (T(1) - dx) +
                                                        (corner[1][1] - corner[0][1]) * dx);
                                        gx_acc += gc * ((corner[0][1] - corner[0][0]) * (T(1) - dy) +
                                                        (corner[1][1] - corner[1][0]) * dy);
                                    }
                                }
                                if (need_off) {
                                    doffy[p] += gy_acc;
                                    doffx[p] += gx_acc;
                                }
                            }
                    }
            }, 1);
        }
    });
}

// ---------------------------------------------------------------------------
// Haar split
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> haar_downsample(const TensorT<T>& x) {
    if (x.rank() != 4) fail("haar_downsample: expects NCHW input");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) fail("haar_downsample: H and W must be even");
    int oh = h / 2, ow = w / 2;
    size_t in_plane = static_cast<size_t>(h) * w;
    size_t out_plane = static_cast<size_t>(oh) * ow;
    const T* xv = x.data().data();
    std::vector<T> out(static_cast<size_t>(n) * 4 * c * out_plane);
    const T half = T(0.5);
    for (int b = 0; b < n; b++)
        for (int cc = 0; cc < c; cc++) {
            const T* xp = xv + (static_cast<size_t>(b) * c + cc) * in_plane;
            // band order: LL, LH, HL, HH
            T* bands[4];
            for (int q = 0; q < 4; q++)
                bands[q] = out.data() + ((static_cast<size_t>(b) * 4 + q) * c + cc) * out_plane;
            for (int y = 0; y < oh; y++)
                for (int xw = 0; xw < ow; xw++) {
                    T a = xp[static_cast<size_t>(2 * y) * w + 2 * xw];
                    T bv2 = xp[static_cast<size_t>(2 * y) * w + 2 * xw + 1];
                    T cv = xp[static_cast<size_t>(2 * y + 1) * w + 2 * xw];
                    T dv = xp[static_cast<size_t>(2 * y + 1) * w + 2 * xw + 1];
                    size_t p = static_cast<size_t>(y) * ow + xw;
                    bands[0][p] = (a + bv2 + cv + dv) * half;
                    bands[1][p] = (a - bv2 + cv - dv) * half;
                    bands[2][p] = (a + bv2 - cv - dv) * half;
                    bands[3][p] = (a - bv2 - cv + dv) * half;
                }
        }
    auto xn = x.node();
    return make_op<T>({n, 4 * c, oh, ow}, std::move(out), {x},
                      [xn, n, c, w, oh, ow, in_plane, out_plane, half](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* g = self.grad.data();
        for (int b = 0; b < n; b++)
            for (int cc = 0; cc < c; cc++) {
                T* dxp = xn->grad.data() + (static_cast<size_t>(b) * c + cc) * in_plane;
                const T* bands[4];
                for (int q = 0; q < 4; q++)
                    bands[q] = g + ((static_cast<size_t>(b) * 4 + q) * c + cc) * out_plane;
                for (int y = 0; y < oh; y++)
                    for (int xw = 0; xw < ow; xw++) {
                        size_t p = static_cast<size_t>(y) * ow + xw;
                        T gll = bands[0][p], glh = bands[1][p], ghl = bands[2][p], ghh = bands[3][p];
                        dxp[static_cast<size_t>(2 * y) * w + 2 * xw] += (gll + glh + ghl + ghh) * half;
                        dxp[static_cast<size_t>(2 * y) * w + 2 * xw + 1] += (gll - glh + ghl - ghh) * half;
                        dxp[static_cast<size_t>(2 * y + 1) * w + 2 * xw] += (gll + glh - ghl - ghh) * half;
                        dxp[static_cast<size_t>(2 * y + 1) * w + 2 * xw + 1] += (gll - glh - ghl + ghh) * half;
                    }
            }
    });
}

#define VQFR_INSTANTIATE_CONV(T)                                                              \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,   \
                                  int, int, int);                                             \
    template TensorT<T> group_norm_swish<T>(const TensorT<T>&, int, const TensorT<T>&,       \
                                            const TensorT<T>&, T);                            \
    template TensorT<T> bilinear_resize<T>(const TensorT<T>&, int, int);                     \
    template TensorT<T> deformable_conv2d<T>(const TensorT<T>&, const TensorT<T>&,           \
                                             const TensorT<T>&, const TensorT<T>&, int);     \
    template TensorT<T> haar_downsample<T>(const TensorT<T>&);

VQFR_INSTANTIATE_CONV(float)
VQFR_INSTANTIATE_CONV(double)

#undef VQFR_INSTANTIATE_CONV

}  // namespace vqfr
