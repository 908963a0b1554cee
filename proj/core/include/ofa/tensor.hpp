#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ofa/error.hpp"
#include "ofa/rng.hpp"

namespace ofa {

// Values are stored as doubles. In Float32 mode (the training default) every
// op result is rounded through IEEE float, so the numerics match 32-bit
// storage while the identical code path can run exact 64-bit verification.
enum class Precision { Float32, Float64 };

void set_precision(Precision p);
Precision precision();

inline double round_to_precision(double x) {
    return precision() == Precision::Float32 ? static_cast<double>(static_cast<float>(x)) : x;
}

// RAII precision override for verification code.
struct PrecisionGuard {
    explicit PrecisionGuard(Precision p) : prev_(precision()) { set_precision(p); }
    ~PrecisionGuard() { set_precision(prev_); }

private:
    Precision prev_;
};

bool grad_enabled();

// RAII scope that disables graph recording (inference, finite differences).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();

private:
    bool prev_;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first needed, then data.size()
    bool requires_grad = false;

    // Recorded graph: set only on non-leaf nodes while grads are enabled.
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    bool tracked() const { return requires_grad || static_cast<bool>(backward_fn); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Value-semantic handle onto a shared buffer/graph node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    // i.i.d. N(0, std^2) entries.
    static Tensor randn(Shape shape, Rng& rng, double std_dev);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double item() const;

    Tensor& set_requires_grad(bool v);
    bool requires_grad() const { return impl_->requires_grad; }
    std::vector<double>& grad();
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad();

    // Identity of the underlying buffer; how weight tying is observable.
    bool same_object(const Tensor& other) const { return impl_ == other.impl_; }

    // Value copy detached from any recorded graph.
    Tensor detach() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// ---- differentiable op set --------------------------------------------------
// add: same shape, or b a row vector broadcast over the rows of 2-D a,
//      or b a scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// mul: elementwise same shape, or b a scalar tensor (numel 1).
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] x [K,N]
Tensor transpose(const Tensor& a);                // 2-D
// softmax over the last axis (axis must name it explicitly or be -1).
Tensor softmax(const Tensor& a, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);
// Inverted dropout; p == 0 or !training is the identity (gradients included).
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor concat(const std::vector<Tensor>& xs, int axis);           // 2-D, axis 0/1
Tensor slice(const Tensor& x, int axis, int start, int end);      // 2-D
// Gather rows of a 2-D tensor and concatenate each group into one output row;
// every group must have the same size (used for strided patchification).
Tensor gather_rows(const Tensor& x, const std::vector<std::vector<int>>& groups);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

// Token-level smoothed cross entropy over logits [T,V].
// loss = mean over non-pad rows of (1-eps)*NLL(target) + eps * mean_v NLL(v).
// When allowed_sets is given, row t with a non-empty set has all other logits
// treated as -1e9 and the smoothing mass spread over the allowed set only
// (the Trie-masked training objective).
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            double smoothing, int pad_id = -1,
                            const std::vector<std::vector<int>>* allowed_sets = nullptr);

// Populates .grad on every tracked tensor reachable from `loss` (scalar).
void backward(const Tensor& loss);

// Central differences (f(x+h)-f(x-h))/2h per coordinate of `param`, mutating
// and restoring it around calls to f. Run under Float64 for verification.
std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& param, double h);

// Numerically stable log-softmax of a plain vector (decode-side helper).
std::vector<double> log_softmax_vec(std::span<const double> logits);

}  // namespace ofa
