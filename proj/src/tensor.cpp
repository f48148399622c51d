#include "vqfr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "vqfr/kernels.hpp"

namespace vqfr {

namespace {

thread_local bool g_grad_enabled = true;
thread_local uint64_t g_seq = 0;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); i++) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---------------------------------------------------------------------------
// TensorT basics
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::zeros(const std::vector<int>& shape) {
    return from_data(shape, std::vector<T>(shape_numel(shape), T(0)));
}

template <typename T>
TensorT<T> TensorT<T>::full(const std::vector<int>& shape, T v) {
    return from_data(shape, std::vector<T>(shape_numel(shape), v));
}

template <typename T>
TensorT<T> TensorT<T>::from_data(const std::vector<int>& shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
        fail("tensor: shape " + shape_str(shape) + " does not match data length " +
             std::to_string(data.size()));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->value = std::move(data);
    n->seq = ++g_seq;
    return TensorT<T>(std::move(n));
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T v) {
    return from_data({}, {v});
}

template <typename T>
TensorT<T> TensorT<T>::param(const std::vector<int>& shape, std::vector<T> data) {
    TensorT<T> t = from_data(shape, std::move(data));
    t.node_->requires_grad = true;
    return t;
}

template <typename T>
T TensorT<T>::item() const {
    if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

template <typename T>
TensorT<T> TensorT<T>::detach() const {
    return from_data(shape(), data());
}

template <typename T>
TensorT<T> make_op(std::vector<int> shape, std::vector<T> value,
                   const std::vector<TensorT<T>>& parents,
                   std::function<void(TensorNode<T>&)> vjp) {
    if (shape_numel(shape) != value.size()) fail("make_op: shape/value mismatch");
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->seq = ++g_seq;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.node()->requires_grad) needs = true;
    }
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->vjp = std::move(vjp);
    }
    return TensorT<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1) fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto* root = loss.node().get();
    // Collect the reachable recorded subgraph.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<TensorNode<T>*> stack{root};
    seen.insert(root);
    while (!stack.empty()) {
        TensorNode<T>* n = stack.back();
        stack.pop_back();
        if (n->vjp) order.push_back(n);
        for (auto& p : n->parents) {
            if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->seq > b->seq; });
    root->ensure_grad();
    root->grad[0] += T(1);
    for (TensorNode<T>* n : order) {
        if (n->grad.empty()) continue;  // no gradient flowed into this node
        n->vjp(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise binary with leading-singleton broadcast
// ---------------------------------------------------------------------------

namespace {

enum class Bcast { None, AScalar, BScalar, ADim0, BDim0 };

template <typename T>
Bcast broadcast_mode(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa == sb) return Bcast::None;
    if (b.numel() == 1) return Bcast::BScalar;
    if (a.numel() == 1) return Bcast::AScalar;
    if (sa.size() == sb.size() && !sa.empty()) {
        bool tail_eq = std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1);
        if (tail_eq && sb[0] == 1) return Bcast::BDim0;
        if (tail_eq && sa[0] == 1) return Bcast::ADim0;
    }
    fail(std::string(op) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
         " do not conform (broadcast only over singleton leading dims)");
}

// Accumulates src (full shape) into dst laid out per mode for operand X.
template <typename T>
void reduce_into_operand(const std::vector<T>& src, std::vector<T>& dst, Bcast mode, bool is_a) {
    if ((is_a && mode == Bcast::AScalar) || (!is_a && mode == Bcast::BScalar)) {
        T acc = T(0);
        for (T v : src) acc += v;
        dst[0] += acc;
    } else if ((is_a && mode == Bcast::ADim0) || (!is_a && mode == Bcast::BDim0)) {
        size_t stride = dst.size();
        for (size_t i = 0; i < src.size(); i++) dst[i % stride] += src[i];
    } else {
        kern::axpy<T>(src.size(), T(1), src.data(), dst.data());
    }
}

template <typename T, typename Fwd, typename DA, typename DB>
TensorT<T> binary_op(const char* name, const TensorT<T>& a, const TensorT<T>& b, Fwd fwd, DA da,
                     DB db) {
    Bcast mode = broadcast_mode(a, b, name);
    bool a_big = !(mode == Bcast::AScalar || mode == Bcast::ADim0);
    const auto& out_shape = a_big ? a.shape() : b.shape();
    size_t n = a_big ? a.numel() : b.numel();
    const auto& av = a.data();
    const auto& bv = b.data();
    size_t an = av.size(), bn = bv.size();
    std::vector<T> out(n);
    for (size_t i = 0; i < n; i++) out[i] = fwd(av[i % an], bv[i % bn]);
    auto anode = a.node();
    auto bnode = b.node();
    return make_op<T>(
        out_shape, std::move(out), {a, b}, [anode, bnode, mode, da, db](TensorNode<T>& self) {
            size_t an2 = anode->value.size(), bn2 = bnode->value.size(), n2 = self.grad.size();
            if (anode->requires_grad) {
                anode->ensure_grad();
                std::vector<T> full(n2);
                for (size_t i = 0; i < n2; i++)
                    full[i] = da(anode->value[i % an2], bnode->value[i % bn2]) * self.grad[i];
                reduce_into_operand(full, anode->grad, mode, true);
            }
            if (bnode->requires_grad) {
                bnode->ensure_grad();
                std::vector<T> full(n2);
                for (size_t i = 0; i < n2; i++)
                    full[i] = db(anode->value[i % an2], bnode->value[i % bn2]) * self.grad[i];
                reduce_into_operand(full, bnode->grad, mode, false);
            }
        });
}

}  // namespace

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

// ---------------------------------------------------------------------------
// scalar ops, unary elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename T, typename Fwd, typename Dx>
TensorT<T> unary_op(const TensorT<T>& x, Fwd fwd, Dx dx) {
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); i++) out[i] = fwd(xv[i]);
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), {x}, [xn, dx](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); i++)
            xn->grad[i] += dx(xn->value[i]) * self.grad[i];
    });
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
    // log(1 + exp(x)) in the numerically stable branch form.
    if (x > T(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

template <typename T>
TensorT<T> scalar_mul(const TensorT<T>& a, T s) {
    return unary_op<T>(a, [s](T x) { return s * x; }, [s](T) { return s; });
}

template <typename T>
TensorT<T> scalar_add(const TensorT<T>& a, T s) {
    return unary_op<T>(a, [s](T x) { return x + s; }, [](T) { return T(1); });
}

template <typename T>
TensorT<T> abs(const TensorT<T>& x) {
    return unary_op<T>(x, [](T v) { return std::abs(v); },
                       [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
TensorT<T> square(const TensorT<T>& x) {
    return unary_op<T>(x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <typename T>
TensorT<T> log(const TensorT<T>& x) {
    return unary_op<T>(x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    return unary_op<T>(x, [](T v) { return sigmoid_scalar(v); },
                       [](T v) {
                           T s = sigmoid_scalar(v);
                           return s * (T(1) - s);
                       });
}

template <typename T>
TensorT<T> softplus(const TensorT<T>& x) {
    return unary_op<T>(x, [](T v) { return softplus_scalar(v); },
                       [](T v) { return sigmoid_scalar(v); });
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& x) {
    return unary_op<T>(x, [](T v) { return std::tanh(v); },
                       [](T v) {
                           T t = std::tanh(v);
                           return T(1) - t * t;
                       });
}

template <typename T>
TensorT<T> swish(const TensorT<T>& x) {
    return unary_op<T>(x, [](T v) { return v * sigmoid_scalar(v); },
                       [](T v) {
                           T s = sigmoid_scalar(v);
                           return s + v * s * (T(1) - s);
                       });
}

// ---------------------------------------------------------------------------
// reductions (strict left-to-right accumulation)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    auto xn = x.node();
    return make_op<T>({}, {acc}, {x}, [xn](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        T g = self.grad[0];
        for (auto& gv : xn->grad) gv += g;
    });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
    if (x.numel() == 0) fail("mean: empty tensor");
    T acc = T(0);
    for (T v : x.data()) acc += v;
    T inv = T(1) / static_cast<T>(x.numel());
    auto xn = x.node();
    return make_op<T>({}, {acc * inv}, {x}, [xn, inv](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        T g = self.grad[0] * inv;
        for (auto& gv : xn->grad) gv += g;
    });
}

// ---------------------------------------------------------------------------
// matmul / linear / gram
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        fail("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " x " +
             shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        fail("matmul: inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    std::vector<T> out(static_cast<size_t>(m) * n, T(0));
    for (int i = 0; i < m; i++)
        for (int kk = 0; kk < k; kk++)
            kern::axpy<T>(n, av[i * k + kk], bv + static_cast<size_t>(kk) * n,
                          out.data() + static_cast<size_t>(i) * n);
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            for (int i = 0; i < m; i++)
                for (int kk = 0; kk < k; kk++)
                    an->grad[static_cast<size_t>(i) * k + kk] += kern::dot_blocked<T>(
                        n, g + static_cast<size_t>(i) * n, bn->value.data() + static_cast<size_t>(kk) * n);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < m; i++)
                for (int kk = 0; kk < k; kk++)
                    kern::axpy<T>(n, an->value[static_cast<size_t>(i) * k + kk],
                                  g + static_cast<size_t>(i) * n,
                                  bn->grad.data() + static_cast<size_t>(kk) * n);
        }
    });
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) fail("linear: bad ranks");
    int n = x.dim(0), d = x.dim(1), o = w.dim(0);
    if (w.dim(1) != d || b.dim(0) != o)
        fail("linear: shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
             shape_str(b.shape()));
    std::vector<T> out(static_cast<size_t>(n) * o);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < o; j++)
            out[static_cast<size_t>(i) * o + j] =
                b.data()[j] + kern::dot_blocked<T>(d, x.data().data() + static_cast<size_t>(i) * d,
                                                   w.data().data() + static_cast<size_t>(j) * d);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return make_op<T>({n, o}, std::move(out), {x, w, b}, [xn, wn, bn, n, d, o](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int i = 0; i < n; i++)
                for (int j = 0; j < o; j++)
                    kern::axpy<T>(d, g[static_cast<size_t>(i) * o + j],
                                  wn->value.data() + static_cast<size_t>(j) * d,
                                  xn->grad.data() + static_cast<size_t>(i) * d);
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            for (int i = 0; i < n; i++)
                for (int j = 0; j < o; j++)
                    kern::axpy<T>(d, g[static_cast<size_t>(i) * o + j],
                                  xn->value.data() + static_cast<size_t>(i) * d,
                                  wn->grad.data() + static_cast<size_t>(j) * d);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < n; i++)
                for (int j = 0; j < o; j++) bn->grad[j] += g[static_cast<size_t>(i) * o + j];
        }
    });
}

template <typename T>
TensorT<T> gram(const TensorT<T>& x) {
    if (x.rank() != 4) fail("gram: expects NCHW input, got " + shape_str(x.shape()));
    int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    T norm = T(1) / (static_cast<T>(c) * static_cast<T>(hw));
    std::vector<T> out(static_cast<size_t>(n) * c * c);
    const T* xv = x.data().data();
    for (int b = 0; b < n; b++) {
        const T* base = xv + static_cast<size_t>(b) * c * hw;
        T* gm = out.data() + static_cast<size_t>(b) * c * c;
        for (int i = 0; i < c; i++)
            for (int j = i; j < c; j++) {
                T v = kern::dot_blocked<T>(hw, base + static_cast<size_t>(i) * hw,
                                           base + static_cast<size_t>(j) * hw) *
                      norm;
                gm[static_cast<size_t>(i) * c + j] = v;
                gm[static_cast<size_t>(j) * c + i] = v;
            }
    }
    auto xn = x.node();
    return make_op<T>({n, c, c}, std::move(out), {x}, [xn, n, c, hw, norm](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* g = self.grad.data();
        for (int b = 0; b < n; b++) {
            const T* base = xn->value.data() + static_cast<size_t>(b) * c * hw;
            T* dx = xn->grad.data() + static_cast<size_t>(b) * c * hw;
            const T* gb = g + static_cast<size_t>(b) * c * c;
            for (int i = 0; i < c; i++)
                for (int j = 0; j < c; j++) {
                    T coef = (gb[static_cast<size_t>(i) * c + j] + gb[static_cast<size_t>(j) * c + i]) * norm;
                    kern::axpy<T>(hw, coef, base + static_cast<size_t>(j) * hw,
                                  dx + static_cast<size_t>(i) * hw);
                }
        }
    });
}

// ---------------------------------------------------------------------------
// concat / reshape / permute / straight-through
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs) {
    if (xs.empty()) fail("concat: no inputs");
    for (const auto& x : xs)
        if (x.rank() != 4) fail("concat: expects NCHW inputs");
    int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
    int c_total = 0;
    for (const auto& x : xs) {
        if (x.dim(0) != n || x.dim(2) != h || x.dim(3) != w)
            fail("concat: non-channel dims differ: " + shape_str(xs[0].shape()) + " vs " +
                 shape_str(x.shape()));
        c_total += x.dim(1);
    }
    size_t plane = static_cast<size_t>(h) * w;
    std::vector<T> out(static_cast<size_t>(n) * c_total * plane);
    for (int b = 0; b < n; b++) {
        size_t dst_c = 0;
        for (const auto& x : xs) {
            size_t cn = static_cast<size_t>(x.dim(1));
            std::copy_n(x.data().data() + static_cast<size_t>(b) * cn * plane, cn * plane,
                        out.data() + (static_cast<size_t>(b) * c_total + dst_c) * plane);
            dst_c += cn;
        }
    }
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& x : xs) nodes.push_back(x.node());
    return make_op<T>({n, c_total, h, w}, std::move(out), xs,
                      [nodes, n, c_total, plane](TensorNode<T>& self) {
                          const T* g = self.grad.data();
                          for (int b = 0; b < n; b++) {
                              size_t src_c = 0;
                              for (auto& xn : nodes) {
                                  size_t cn = xn->value.size() / (static_cast<size_t>(n) * plane);
                                  if (xn->requires_grad) {
                                      xn->ensure_grad();
                                      kern::axpy<T>(cn * plane, T(1),
                                                    g + (static_cast<size_t>(b) * c_total + src_c) * plane,
                                                    xn->grad.data() + static_cast<size_t>(b) * cn * plane);
                                  }
                                  src_c += cn;
                              }
                          }
                      });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, const std::vector<int>& shape) {
    if (shape_numel(shape) != x.numel())
        fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto xn = x.node();
    return make_op<T>(shape, x.data(), {x}, [xn](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        kern::axpy<T>(self.grad.size(), T(1), self.grad.data(), xn->grad.data());
    });
}

namespace {

template <typename T>
TensorT<T> permute4(const TensorT<T>& x, bool to_nhwc) {
    if (x.rank() != 4) fail("permute: expects rank-4 input");
    int d0 = x.dim(0), d1 = x.dim(1), d2 = x.dim(2), d3 = x.dim(3);
    // to_nhwc: [N,C,H,W] -> [N,H,W,C]; else [N,H,W,C] -> [N,C,H,W].
    int N = d0;
    int C = to_nhwc ? d1 : d3;
    int H = to_nhwc ? d2 : d1;
    int W = to_nhwc ? d3 : d2;
    std::vector<T> out(x.numel());
    const T* xv = x.data().data();
    for (int n = 0; n < N; n++)
        for (int c = 0; c < C; c++)
            for (int h = 0; h < H; h++)
                for (int w = 0; w < W; w++) {
                    size_t nchw = ((static_cast<size_t>(n) * C + c) * H + h) * W + w;
                    size_t nhwc = ((static_cast<size_t>(n) * H + h) * W + w) * C + c;
                    if (to_nhwc)
                        out[nhwc] = xv[nchw];
                    else
                        out[nchw] = xv[nhwc];
                }
    std::vector<int> out_shape =
        to_nhwc ? std::vector<int>{N, H, W, C} : std::vector<int>{N, C, H, W};
    auto xn = x.node();
    return make_op<T>(out_shape, std::move(out), {x},
                      [xn, N, C, H, W, to_nhwc](TensorNode<T>& self) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          const T* g = self.grad.data();
                          for (int n = 0; n < N; n++)
                              for (int c = 0; c < C; c++)
                                  for (int h = 0; h < H; h++)
                                      for (int w = 0; w < W; w++) {
                                          size_t nchw = ((static_cast<size_t>(n) * C + c) * H + h) * W + w;
                                          size_t nhwc = ((static_cast<size_t>(n) * H + h) * W + w) * C + c;
                                          if (to_nhwc)
                                              xn->grad[nchw] += g[nhwc];
                                          else
                                              xn->grad[nhwc] += g[nchw];
                                      }
                      });
}

}  // namespace

template <typename T>
TensorT<T> nchw_to_nhwc(const TensorT<T>& x) {
    return permute4(x, true);
}

template <typename T>
TensorT<T> nhwc_to_nchw(const TensorT<T>& x) {
    return permute4(x, false);
}

template <typename T>
TensorT<T> straight_through(const TensorT<T>& z_hat, const TensorT<T>& z_q) {
    if (z_hat.shape() != z_q.shape())
        fail("straight_through: shapes differ: " + shape_str(z_hat.shape()) + " vs " +
             shape_str(z_q.shape()));
    auto zn = z_hat.node();
    return make_op<T>(z_q.shape(), z_q.data(), {z_hat}, [zn](TensorNode<T>& self) {
        if (!zn->requires_grad) return;
        zn->ensure_grad();
        kern::axpy<T>(self.grad.size(), T(1), self.grad.data(), zn->grad.data());
    });
}

// ---------------------------------------------------------------------------
// grad check
// ---------------------------------------------------------------------------

template <typename T>
GradCheckReport grad_check(const std::function<TensorT<T>(const TensorT<T>&)>& f,
                           const TensorT<T>& x, T h) {
    TensorT<T> xv = TensorT<T>::param(x.shape(), x.data());
    TensorT<T> loss = f(xv);
    if (loss.numel() != 1) fail("grad_check: f must be scalar-valued");
    backward(loss);
    std::vector<T> analytic = xv.grad();

    GradCheckReport rep;
    std::vector<T> probe = x.data();
    NoGradGuard ng;
    for (size_t i = 0; i < probe.size(); i++) {
        T orig = probe[i];
        probe[i] = orig + h;
        T fp = f(TensorT<T>::from_data(x.shape(), probe)).item();
        probe[i] = orig - h;
        T fm = f(TensorT<T>::from_data(x.shape(), probe)).item();
        probe[i] = orig;
        double fd = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(h));
        double a = static_cast<double>(analytic[i]);
        double abs_err = std::abs(a - fd);
        double denom = std::max({std::abs(a), std::abs(fd), 1e-4});
        rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
        rep.checked++;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define VQFR_INSTANTIATE(T)                                                                   \
    template class TensorT<T>;                                                                \
    template TensorT<T> make_op<T>(std::vector<int>, std::vector<T>,                          \
                                   const std::vector<TensorT<T>>&,                            \
                                   std::function<void(TensorNode<T>&)>);                      \
    template void backward<T>(const TensorT<T>&);                                             \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                         \
    template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                         \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                         \
    template TensorT<T> scalar_mul<T>(const TensorT<T>&, T);                                  \
    template TensorT<T> scalar_add<T>(const TensorT<T>&, T);                                  \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                      \
    template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);   \
    template TensorT<T> concat_channels<T>(const std::vector<TensorT<T>>&);                   \
    template TensorT<T> mean<T>(const TensorT<T>&);                                           \
    template TensorT<T> sum<T>(const TensorT<T>&);                                            \
    template TensorT<T> abs<T>(const TensorT<T>&);                                            \
    template TensorT<T> square<T>(const TensorT<T>&);                                         \
    template TensorT<T> log<T>(const TensorT<T>&);                                            \
    template TensorT<T> sigmoid<T>(const TensorT<T>&);                                        \
    template TensorT<T> softplus<T>(const TensorT<T>&);                                       \
    template TensorT<T> tanh<T>(const TensorT<T>&);                                           \
    template TensorT<T> swish<T>(const TensorT<T>&);                                          \
    template TensorT<T> reshape<T>(const TensorT<T>&, const std::vector<int>&);               \
    template TensorT<T> nchw_to_nhwc<T>(const TensorT<T>&);                                   \
    template TensorT<T> nhwc_to_nchw<T>(const TensorT<T>&);                                   \
    template TensorT<T> gram<T>(const TensorT<T>&);                                           \
    template TensorT<T> straight_through<T>(const TensorT<T>&, const TensorT<T>&);            \
    template GradCheckReport grad_check<T>(                                                   \
        const std::function<TensorT<T>(const TensorT<T>&)>&, const TensorT<T>&, T);

VQFR_INSTANTIATE(float)
VQFR_INSTANTIATE(double)

#undef VQFR_INSTANTIATE

}  // namespace vqfr
