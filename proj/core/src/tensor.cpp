#include "ofa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace ofa {

namespace {

Precision g_precision = Precision::Float32;
bool g_grad_enabled = true;

void round_buffer(std::vector<double>& v) {
    if (g_precision == Precision::Float32) {
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}

// Records the node if any input is tracked; otherwise the result is a leaf.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
    round_buffer(data);
    auto impl = make_impl(std::move(shape), std::move(data));
    if (g_grad_enabled) {
        bool tracked = false;
        for (const Tensor& t : inputs) {
            if (t.impl()->tracked()) {
                tracked = true;
                break;
            }
        }
        if (tracked) {
            impl->parents.reserve(inputs.size());
            for (const Tensor& t : inputs) impl->parents.push_back(t.impl());
            impl->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor::wrap(std::move(impl));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void check_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-D, got " + shape_str(t.shape()));
}

}  // namespace

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }
bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = static_cast<size_t>(shape_numel(shape));
    return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
    const auto n = static_cast<size_t>(shape_numel(shape));
    std::vector<double> d(n, round_to_precision(value));
    return Tensor(make_impl(std::move(shape), std::move(d)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("from: " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    round_buffer(values);
    return Tensor(make_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::randn(Shape shape, Rng& rng, double std_dev) {
    const auto n = static_cast<size_t>(shape_numel(shape));
    std::vector<double> d(n);
    for (double& x : d) x = rng.normal() * std_dev;
    round_buffer(d);
    return Tensor(make_impl(std::move(shape), std::move(d)));
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

std::vector<double>& Tensor::grad() {
    impl_->ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(make_impl(impl_->shape, impl_->data)); }

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    if (a.shape() == b.shape()) {
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
        return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.tracked()) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            }
            if (pb.tracked()) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i];
            }
        });
    }
    if (a.ndim() == 2 && b.ndim() == 1 && a.dim(1) == b.dim(0)) {  // row broadcast
        const int rows = a.dim(0), cols = a.dim(1);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) out[static_cast<size_t>(r) * cols + c] = av[static_cast<size_t>(r) * cols + c] + bv[c];
        return make_result(a.shape(), std::move(out), {a, b}, [rows, cols](TensorImpl& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.tracked()) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            }
            if (pb.tracked()) {
                pb.ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) pb.grad[c] += self.grad[static_cast<size_t>(r) * cols + c];
            }
        });
    }
    if (b.numel() == 1) {
        const double s = bv[0];
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
        return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.tracked()) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            }
            if (pb.tracked()) {
                pb.ensure_grad();
                double g = 0.0;
                for (double x : self.grad) g += x;
                pb.grad[0] += g;
            }
        });
    }
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    const auto& av = a.data();
    const auto& bv = b.data();
    if (a.shape() == b.shape()) {
        std::vector<double> out(av.size());
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
        return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.tracked()) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
            }
            if (pb.tracked()) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
            }
        });
    }
    if (b.numel() == 1) {
        const double s = bv[0];
        std::vector<double> out(av.size());
        for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
        return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const double sv = pb.data[0];
            if (pa.tracked()) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * sv;
            }
            if (pb.tracked()) {
                pb.ensure_grad();
                double g = 0.0;
                for (size_t i = 0; i < self.grad.size(); ++i) g += self.grad[i] * pa.data[i];
                pb.grad[0] += g;
            }
        });
    }
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
    return make_result(a.shape(), std::move(out), {a}, [s](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.tracked()) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * s;
    });
}

// ---- linear algebra ----------------------------------------------------------

namespace {
// C[M,N] += A[M,K] * B[K,N], raw row-major buffers, ikj order.
void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B^T where B is [N,K].
void mm_acc_bt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[K,N] += A^T * B where A is [M,K], B is [M,N].
void mm_acc_at(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.tracked()) {
            pa.ensure_grad();
            mm_acc_bt(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
        }
        if (pb.tracked()) {
            pb.ensure_grad();
            mm_acc_at(pa.data.data(), self.grad.data(), pb.grad.data(), m, k, n);
        }
    });
}

Tensor transpose(const Tensor& a) {
    check_2d(a, "transpose");
    const int r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.data().size());
    const auto& av = a.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
    return make_result({c, r}, std::move(out), {a}, [r, c](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.tracked()) return;
        pa.ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                pa.grad[static_cast<size_t>(i) * c + j] += self.grad[static_cast<size_t>(j) * r + i];
    });
}

// ---- nonlinearities ----------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    const int last = a.ndim() - 1;
    if (axis != -1 && axis != last) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " unsupported for " +
                         shape_str(a.shape()) + " (last axis only)");
    }
    const int cols = a.dim(last);
    const int rows = static_cast<int>(a.numel() / cols);
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (int r = 0; r < rows; ++r) {
        const double* in = av.data() + static_cast<size_t>(r) * cols;
        double* o = out.data() + static_cast<size_t>(r) * cols;
        double mx = in[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            z += o[c];
        }
        for (int c = 0; c < cols; ++c) o[c] /= z;
    }
    return make_result(a.shape(), std::move(out), {a}, [rows, cols](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.tracked()) return;
        pa.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const double* y = self.data.data() + static_cast<size_t>(r) * cols;
            const double* dy = self.grad.data() + static_cast<size_t>(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += y[c] * dy[c];
            double* dx = pa.grad.data() + static_cast<size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) dx[c] += y[c] * (dy[c] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const int last = x.ndim() - 1;
    const int cols = x.dim(last);
    if (gain.numel() != cols || bias.numel() != cols) {
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last dim of " + shape_str(x.shape()));
    }
    const int rows = static_cast<int>(x.numel() / cols);
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    std::vector<double> out(xv.size());
    std::vector<double> mu(rows), inv_sigma(rows);
    for (int r = 0; r < rows; ++r) {
        const double* in = xv.data() + static_cast<size_t>(r) * cols;
        double m = 0.0;
        for (int c = 0; c < cols; ++c) m += in[c];
        m /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
            const double d = in[c] - m;
            var += d * d;
        }
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        mu[r] = m;
        inv_sigma[r] = is;
        double* o = out.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) o[c] = (in[c] - m) * is * gv[c] + bv[c];
    }
    return make_result(x.shape(), std::move(out), {x, gain, bias},
                       [rows, cols, mu, inv_sigma](TensorImpl& self) {
                           auto& px = *self.parents[0];
                           auto& pg = *self.parents[1];
                           auto& pb = *self.parents[2];
                           const auto& gv = pg.data;
                           for (int r = 0; r < rows; ++r) {
                               const double* in = px.data.data() + static_cast<size_t>(r) * cols;
                               const double* dy = self.grad.data() + static_cast<size_t>(r) * cols;
                               const double m = mu[r];
                               const double is = inv_sigma[r];
                               if (pg.tracked() || pb.tracked()) {
                                   pg.ensure_grad();
                                   pb.ensure_grad();
                                   for (int c = 0; c < cols; ++c) {
                                       pg.grad[c] += dy[c] * (in[c] - m) * is;
                                       pb.grad[c] += dy[c];
                                   }
                               }
                               if (px.tracked()) {
                                   px.ensure_grad();
                                   // d/dx of (x-mu)*is*g: project out mean and variance directions.
                                   double s1 = 0.0, s2 = 0.0;
                                   for (int c = 0; c < cols; ++c) {
                                       const double gd = dy[c] * gv[c];
                                       s1 += gd;
                                       s2 += gd * (in[c] - m);
                                   }
                                   double* dx = px.grad.data() + static_cast<size_t>(r) * cols;
                                   for (int c = 0; c < cols; ++c) {
                                       const double gd = dy[c] * gv[c];
                                       const double xc = in[c] - m;
                                       dx[c] += is * (gd - s1 / cols - xc * is * is * s2 / cols);
                                   }
                               }
                           }
                       });
}

Tensor gelu(const Tensor& x) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    const auto& xv = x.data();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
    return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& self) {
        auto& px = *self.parents[0];
        if (!px.tracked()) return;
        px.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double v = px.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            px.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw UsageError("dropout: p must be < 1");
    const double keep = 1.0 - p;
    const auto& xv = x.data();
    std::vector<double> out(xv.size());
    auto mask = std::make_shared<std::vector<uint8_t>>(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) {
        const bool on = rng.uniform() >= p;
        (*mask)[i] = on;
        out[i] = on ? xv[i] / keep : 0.0;
    }
    return make_result(x.shape(), std::move(out), {x}, [mask, keep](TensorImpl& self) {
        auto& px = *self.parents[0];
        if (!px.tracked()) return;
        px.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if ((*mask)[i]) px.grad[i] += self.grad[i] / keep;
    });
}

// ---- indexing/layout ---------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    check_2d(table, "embedding_lookup");
    const int rows = table.dim(0), cols = table.dim(1);
    std::vector<double> out(ids.size() * static_cast<size_t>(cols));
    const auto& tv = table.data();
    for (size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || id >= rows) {
            throw ShapeError("embedding_lookup: id " + std::to_string(id) + " outside table " +
                             shape_str(table.shape()));
        }
        std::copy_n(tv.data() + static_cast<size_t>(id) * cols, cols,
                    out.data() + i * static_cast<size_t>(cols));
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return make_result({static_cast<int>(ids.size()), cols}, std::move(out), {table},
                       [idx = std::move(idx), cols](TensorImpl& self) {
                           auto& pt = *self.parents[0];
                           if (!pt.tracked()) return;
                           pt.ensure_grad();
                           for (size_t i = 0; i < idx.size(); ++i) {
                               const double* g = self.grad.data() + i * static_cast<size_t>(cols);
                               double* dst = pt.grad.data() + static_cast<size_t>(idx[i]) * cols;
                               for (int c = 0; c < cols; ++c) dst[c] += g[c];
                           }
                       });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    for (const auto& t : xs) check_2d(t, "concat");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    int rows = xs[0].dim(0), cols = xs[0].dim(1);
    if (axis == 0) {
        rows = 0;
        for (const auto& t : xs) {
            if (t.dim(1) != cols)
                throw ShapeError("concat: column mismatch " + shape_str(t.shape()));
            rows += t.dim(0);
        }
        std::vector<double> out;
        out.reserve(static_cast<size_t>(rows) * cols);
        for (const auto& t : xs) out.insert(out.end(), t.data().begin(), t.data().end());
        return make_result({rows, cols}, std::move(out), xs, [cols](TensorImpl& self) {
            size_t off = 0;
            for (auto& p : self.parents) {
                if (p->tracked()) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off + i];
                }
                off += p->data.size();
            }
            (void)cols;
        });
    }
    cols = 0;
    for (const auto& t : xs) {
        if (t.dim(0) != rows) throw ShapeError("concat: row mismatch " + shape_str(t.shape()));
        cols += t.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(rows) * cols);
    int coff = 0;
    for (const auto& t : xs) {
        const int tc = t.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy_n(t.data().data() + static_cast<size_t>(r) * tc, tc,
                        out.data() + static_cast<size_t>(r) * cols + coff);
        coff += tc;
    }
    return make_result({rows, cols}, std::move(out), xs, [rows, cols](TensorImpl& self) {
        int off = 0;
        for (auto& p : self.parents) {
            const int tc = p->shape[1];
            if (p->tracked()) {
                p->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < tc; ++c)
                        p->grad[static_cast<size_t>(r) * tc + c] +=
                            self.grad[static_cast<size_t>(r) * cols + off + c];
            }
            off += tc;
        }
    });
}

Tensor slice(const Tensor& x, int axis, int start, int end) {
    check_2d(x, "slice");
    const int rows = x.dim(0), cols = x.dim(1);
    const int extent = axis == 0 ? rows : cols;
    if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
    if (start < 0 || end > extent || start >= end) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
    }
    const auto& xv = x.data();
    if (axis == 0) {
        std::vector<double> out(xv.begin() + static_cast<size_t>(start) * cols,
                                xv.begin() + static_cast<size_t>(end) * cols);
        return make_result({end - start, cols}, std::move(out), {x}, [start, cols](TensorImpl& self) {
            auto& px = *self.parents[0];
            if (!px.tracked()) return;
            px.ensure_grad();
            const size_t base = static_cast<size_t>(start) * cols;
            for (size_t i = 0; i < self.grad.size(); ++i) px.grad[base + i] += self.grad[i];
        });
    }
    const int w = end - start;
    std::vector<double> out(static_cast<size_t>(rows) * w);
    for (int r = 0; r < rows; ++r)
        std::copy_n(xv.data() + static_cast<size_t>(r) * cols + start, w,
                    out.data() + static_cast<size_t>(r) * w);
    return make_result({rows, w}, std::move(out), {x}, [rows, cols, start, w](TensorImpl& self) {
        auto& px = *self.parents[0];
        if (!px.tracked()) return;
        px.ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < w; ++c)
                px.grad[static_cast<size_t>(r) * cols + start + c] +=
                    self.grad[static_cast<size_t>(r) * w + c];
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::vector<int>>& groups) {
    check_2d(x, "gather_rows");
    if (groups.empty()) throw ShapeError("gather_rows: empty group list");
    const int cols = x.dim(1);
    const int rows = x.dim(0);
    const size_t gsize = groups[0].size();
    std::vector<double> out(groups.size() * gsize * cols);
    const auto& xv = x.data();
    for (size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].size() != gsize) throw ShapeError("gather_rows: ragged groups");
        for (size_t k = 0; k < gsize; ++k) {
            const int r = groups[g][k];
            if (r < 0 || r >= rows) throw ShapeError("gather_rows: row index out of range");
            std::copy_n(xv.data() + static_cast<size_t>(r) * cols, cols,
                        out.data() + (g * gsize + k) * cols);
        }
    }
    return make_result({static_cast<int>(groups.size()), static_cast<int>(gsize) * cols},
                       std::move(out), {x}, [groups, cols, gsize](TensorImpl& self) {
                           auto& px = *self.parents[0];
                           if (!px.tracked()) return;
                           px.ensure_grad();
                           for (size_t g = 0; g < groups.size(); ++g)
                               for (size_t k = 0; k < gsize; ++k) {
                                   const double* src = self.grad.data() + (g * gsize + k) * cols;
                                   double* dst = px.grad.data() + static_cast<size_t>(groups[g][k]) * cols;
                                   for (int c = 0; c < cols; ++c) dst[c] += src[c];
                               }
                       });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    std::vector<double> out = x.data();
    return make_result(std::move(shape), std::move(out), {x}, [](TensorImpl& self) {
        auto& px = *self.parents[0];
        if (!px.tracked()) return;
        px.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_result({1}, {acc}, {x}, [](TensorImpl& self) {
        auto& px = *self.parents[0];
        if (!px.tracked()) return;
        px.ensure_grad();
        const double g = self.grad[0];
        for (double& v : px.grad) v += g;
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---- loss --------------------------------------------------------------------

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets, double smoothing,
                            int pad_id, const std::vector<std::vector<int>>* allowed_sets) {
    check_2d(logits, "cross_entropy_logits");
    const int t_len = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<int>(targets.size()) != t_len) {
        throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
    }
    if (allowed_sets && static_cast<int>(allowed_sets->size()) != t_len) {
        throw ShapeError("cross_entropy_logits: allowed_sets size mismatch");
    }
    const auto& lv = logits.data();
    // Per-row masked log-softmax; log-probs cached for the backward pass.
    auto logp = std::make_shared<std::vector<double>>(lv.size(), -1e30);
    auto row_allowed = std::make_shared<std::vector<std::vector<int>>>();
    row_allowed->resize(static_cast<size_t>(t_len));
    int counted = 0;
    double total = 0.0;
    for (int t = 0; t < t_len; ++t) {
        const int y = targets[t];
        if (y == pad_id) continue;
        if (y < 0 || y >= vocab) throw ShapeError("cross_entropy_logits: target id out of range");
        const double* row = lv.data() + static_cast<size_t>(t) * vocab;
        std::vector<int>& allow = (*row_allowed)[static_cast<size_t>(t)];
        if (allowed_sets && !(*allowed_sets)[static_cast<size_t>(t)].empty()) {
            allow = (*allowed_sets)[static_cast<size_t>(t)];
        } else {
            allow.resize(static_cast<size_t>(vocab));
            for (int v = 0; v < vocab; ++v) allow[static_cast<size_t>(v)] = v;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (int v : allow) mx = std::max(mx, row[v]);
        double z = 0.0;
        for (int v : allow) z += std::exp(row[v] - mx);
        const double lse = mx + std::log(z);
        double* lp = logp->data() + static_cast<size_t>(t) * vocab;
        double sum_nll = 0.0;
        for (int v : allow) {
            lp[v] = row[v] - lse;
            sum_nll -= lp[v];
        }
        bool target_allowed = false;
        for (int v : allow)
            if (v == y) {
                target_allowed = true;
                break;
            }
        if (!target_allowed)
            throw DecodeError("cross_entropy_logits: target token not in allowed set");
        total += (1.0 - smoothing) * (-lp[y]) + smoothing * (sum_nll / static_cast<double>(allow.size()));
        ++counted;
    }
    if (counted == 0) throw ShapeError("cross_entropy_logits: no non-pad targets");
    const double loss = total / counted;
    std::vector<int> tgt(targets.begin(), targets.end());
    return make_result(
        {1}, {loss}, {logits},
        [tgt = std::move(tgt), logp, row_allowed, smoothing, pad_id, vocab, counted](TensorImpl& self) {
            auto& pl = *self.parents[0];
            if (!pl.tracked()) return;
            pl.ensure_grad();
            const double g = self.grad[0] / counted;
            for (size_t t = 0; t < tgt.size(); ++t) {
                const int y = tgt[t];
                if (y == pad_id) continue;
                const auto& allow = (*row_allowed)[t];
                const double ueps = smoothing / static_cast<double>(allow.size());
                const double* lp = logp->data() + t * static_cast<size_t>(vocab);
                double* dst = pl.grad.data() + t * static_cast<size_t>(vocab);
                for (int v : allow) {
                    const double p = std::exp(lp[v]);
                    double target = ueps;
                    if (v == y) target += 1.0 - smoothing;
                    dst[v] += g * (p - target);
                }
            }
        });
}

// ---- backward ----------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward: loss must be a defined scalar tensor");
    }
    // Iterative post-order DFS: children complete before parents -> reverse order
    // visits each node only after all its consumers.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(loss.impl().get(), 0);
    seen.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (p->backward_fn && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& param, double h) {
    std::vector<double>& w = param.data();
    std::vector<double> g(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
        const double keep = w[i];
        w[i] = keep + h;
        const double fp = f();
        w[i] = keep - h;
        const double fm = f();
        w[i] = keep;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

std::vector<double> log_softmax_vec(std::span<const double> logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

}  // namespace ofa
