#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vqfr {

// Dense n-d tensor participating in a reverse-mode gradient tape.
//
// The tape is implicit: every op node stores its parents, a monotonically
// increasing sequence id and a vector-Jacobian closure. backward() replays
// reachable nodes in descending sequence order (creation order is a
// topological order) and accumulates gradients additively -- running
// backward twice without zero_grad() doubles the gradients.
//
// Conventions:
//   - images are NCHW; the VQ boundary uses NHWC via the permute ops;
//   - reductions accumulate strictly left-to-right (determinism contract);
//   - convolution is cross-correlation (no kernel flip);
//   - scalar results have rank 0 and numel 1.
//
// T is float for training and double for gradient checks.

bool grad_enabled();

// RAII guard disabling tape recording (pure forward evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first touched
    bool requires_grad = false;
    uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> vjp;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

    static TensorT zeros(const std::vector<int>& shape);
    static TensorT full(const std::vector<int>& shape, T v);
    static TensorT from_data(const std::vector<int>& shape, std::vector<T> data);
    static TensorT scalar(T v);
    // Leaf with requires_grad=true (a trainable parameter).
    static TensorT param(const std::vector<int>& shape, std::vector<T> data);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node_->value.size(); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }

    T item() const;
    TensorT detach() const;  // stop-gradient: plain leaf sharing no history
    TensorT clone_values() const { return from_data(shape(), data()); }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

// --- graph construction helper (internal to ops, exposed for vq/op modules) ---
template <typename T>
TensorT<T> make_op(std::vector<int> shape, std::vector<T> value,
                   const std::vector<TensorT<T>>& parents,
                   std::function<void(TensorNode<T>&)> vjp);

// --- elementwise / linear ---
// Binary ops broadcast only over singleton leading dims: shapes must be equal,
// or one operand is a scalar, or one operand has extent 1 in dim 0 with all
// other dims equal.
template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> scalar_mul(const TensorT<T>& a, T s);
template <typename T> TensorT<T> scalar_add(const TensorT<T>& a, T s);
template <typename T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b);
template <typename T> TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs);
template <typename T> TensorT<T> mean(const TensorT<T>& x);
template <typename T> TensorT<T> sum(const TensorT<T>& x);
template <typename T> TensorT<T> abs(const TensorT<T>& x);
template <typename T> TensorT<T> square(const TensorT<T>& x);
template <typename T> TensorT<T> log(const TensorT<T>& x);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& x);
template <typename T> TensorT<T> softplus(const TensorT<T>& x);
template <typename T> TensorT<T> tanh(const TensorT<T>& x);
template <typename T> TensorT<T> swish(const TensorT<T>& x);  // x * sigmoid(x)
template <typename T> TensorT<T> reshape(const TensorT<T>& x, const std::vector<int>& shape);
template <typename T> TensorT<T> nchw_to_nhwc(const TensorT<T>& x);
template <typename T> TensorT<T> nhwc_to_nchw(const TensorT<T>& x);
// Gram[n,i,j] = <x[n,i], x[n,j]> / (C*H*W)
template <typename T> TensorT<T> gram(const TensorT<T>& x);

template <typename T> TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <typename T> TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <typename T> TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }
template <typename T> TensorT<T> operator*(const TensorT<T>& a, T s) { return scalar_mul(a, s); }
template <typename T> TensorT<T> operator*(T s, const TensorT<T>& a) { return scalar_mul(a, s); }

// --- structured ops ---
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                  int stride = 1, int pad = 0, int groups = 1);

template <typename T>
TensorT<T> group_norm_swish(const TensorT<T>& x, int groups, const TensorT<T>& gamma,
                            const TensorT<T>& beta, T eps = T(1e-6));

// align_corners=false: src = (i + 0.5) * in/out - 0.5, edge-clamped.
template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int out_h, int out_w);

// Deformable conv (offsets only, no modulation), stride 1, odd kernel,
// same-size output. offsets are [N, 2*KH*KW*dg, H, W]; for deformable group
// g and kernel tap k the offset channels are (g*KH*KW + k)*2 + {0: dy, 1: dx}.
// Samples use bilinear interpolation with zero outside the image. Gradients
// flow to x, w, b and offsets.
template <typename T>
TensorT<T> deformable_conv2d(const TensorT<T>& x, const TensorT<T>& offsets,
                             const TensorT<T>& w, const TensorT<T>& b,
                             int deformable_groups);

// One-level orthonormal Haar split: [N,C,H,W] -> [N,4C,H/2,W/2], band order
// per channel: LL, LH (horizontal detail), HL (vertical), HH (diagonal).
template <typename T>
TensorT<T> haar_downsample(const TensorT<T>& x);

// Forward value = z_q; backward copies the incoming gradient to z_hat
// unchanged; the quantized path receives no gradient through this node.
template <typename T>
TensorT<T> straight_through(const TensorT<T>& z_hat, const TensorT<T>& z_q);

// --- backward & checking ---
template <typename T> void backward(const TensorT<T>& loss);

struct GradCheckReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    size_t checked = 0;
};

// Central differences (f(x+h e) - f(x-h e)) / 2h against the tape gradient.
// Relative error uses denominator max(|analytic|, |fd|, 1e-4).
template <typename T>
GradCheckReport grad_check(const std::function<TensorT<T>(const TensorT<T>&)>& f,
                           const TensorT<T>& x, T h = T(1e-5));

}  // namespace vqfr
