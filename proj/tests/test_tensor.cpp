#include <doctest.h>

#include <cmath>

#include "ofa/tensor.hpp"
#include "test_util.hpp"

using namespace ofa;
using testutil::grad_check;

namespace {
Tensor randt(Shape s, Rng& rng) {
    Tensor t = Tensor::randn(std::move(s), rng, 1.0);
    t.set_requires_grad(true);
    return t;
}

// Project to a scalar through a fixed random weighting so upstream grads are generic.
Tensor project(const Tensor& x, uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::randn(x.shape(), rng, 1.0);
    return sum(mul(x, w));
}
}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    const Tensor s = softmax(Tensor::from({1, 2}, {0.0, 0.0}));
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax rows are nonnegative and sum to 1") {
    Rng rng(7);
    const Tensor x = Tensor::randn({5, 9}, rng, 3.0);
    const Tensor s = softmax(x);
    for (int r = 0; r < 5; ++r) {
        double acc = 0.0;
        for (int c = 0; c < 9; ++c) {
            const double v = s.data()[static_cast<size_t>(r) * 9 + c];
            CHECK(v >= 0.0);
            acc += v;
        }
        CHECK(std::abs(acc - 1.0) <= 1e-6);
    }
}

TEST_CASE("layer_norm of a constant vector is zero before gain/bias") {
    const Tensor x = Tensor::full({1, 8}, 3.25);
    const Tensor out = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
    for (double v : out.data()) CHECK(std::abs(v) <= 1e-9);
}

TEST_CASE("matmul by identity is identity") {
    Rng rng(3);
    const Tensor a = Tensor::randn({4, 4}, rng, 1.0);
    Tensor eye = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; ++i) eye.data()[static_cast<size_t>(i) * 4 + i] = 1.0;
    const Tensor out = matmul(eye, a);
    for (size_t i = 0; i < out.data().size(); ++i) CHECK(out.data()[i] == doctest::Approx(a.data()[i]));
}

TEST_CASE("backward: sum gives ones, w.w gives 2w") {
    PrecisionGuard pg(Precision::Float64);
    Rng rng(5);
    Tensor w = randt({6}, rng);
    backward(sum(w));
    for (double g : w.grad()) CHECK(g == doctest::Approx(1.0));

    w.zero_grad();
    backward(sum(mul(w, w)));
    for (size_t i = 0; i < w.grad().size(); ++i)
        CHECK(w.grad()[i] == doctest::Approx(2.0 * w.data()[i]));
}

TEST_CASE("repeated backward after zero_grad reproduces identical grads") {
    PrecisionGuard pg(Precision::Float64);
    Rng rng(11);
    Tensor w = randt({3, 3}, rng);
    Tensor v = randt({3, 3}, rng);
    auto run = [&]() {
        for (Tensor* p : {&w, &v}) p->zero_grad();
        backward(sum(gelu(matmul(w, v))));
        return w.grad();
    };
    const auto g1 = run();
    const auto g2 = run();
    CHECK(g1 == g2);
}

TEST_CASE("finite differences on f = theta^2 at 3") {
    PrecisionGuard pg(Precision::Float64);
    Tensor theta = Tensor::scalar(3.0);
    auto f = [&]() {
        NoGradGuard ng;
        return mul(theta, theta).item();
    };
    const auto g = finite_diff_grad(f, theta, 1e-4);
    CHECK(std::abs(g[0] - 6.0) <= 1e-6);
}

TEST_CASE("finite differences are exact on linear functions") {
    PrecisionGuard pg(Precision::Float64);
    Rng rng(2);
    Tensor w = randt({5}, rng);
    auto f = [&]() {
        NoGradGuard ng;
        return scale(sum(w), 2.5).item();
    };
    const auto g = finite_diff_grad(f, w, 1e-4);
    for (double v : g) CHECK(v == doctest::Approx(2.5).epsilon(1e-10));
}

TEST_CASE("gradient check: every primitive op in isolation") {
    Rng rng(17);
    SUBCASE("matmul") {
        Tensor a = randt({3, 4}, rng), b = randt({4, 5}, rng);
        CHECK(grad_check([&] { return project(matmul(a, b), 1); }, {a, b}) < 1e-6);
    }
    SUBCASE("add broadcast row") {
        Tensor a = randt({3, 4}, rng), b = randt({4}, rng);
        CHECK(grad_check([&] { return project(add(a, b), 2); }, {a, b}) < 1e-6);
    }
    SUBCASE("add scalar") {
        Tensor a = randt({3, 4}, rng), b = randt({1}, rng);
        CHECK(grad_check([&] { return project(add(a, b), 3); }, {a, b}) < 1e-6);
    }
    SUBCASE("mul elementwise and scalar") {
        Tensor a = randt({2, 6}, rng), b = randt({2, 6}, rng), s = randt({1}, rng);
        CHECK(grad_check([&] { return project(mul(mul(a, b), s), 4); }, {a, b, s}) < 1e-6);
    }
    SUBCASE("softmax") {
        Tensor a = randt({4, 7}, rng);
        CHECK(grad_check([&] { return project(softmax(a), 5); }, {a}) < 1e-5);
    }
    SUBCASE("layer_norm") {
        Tensor x = randt({3, 8}, rng), g = randt({8}, rng), b = randt({8}, rng);
        CHECK(grad_check([&] { return project(layer_norm(x, g, b), 6); }, {x, g, b}) < 1e-5);
    }
    SUBCASE("gelu") {
        Tensor x = randt({4, 4}, rng);
        CHECK(grad_check([&] { return project(gelu(x), 7); }, {x}) < 1e-5);
    }
    SUBCASE("embedding_lookup") {
        Tensor t = randt({6, 3}, rng);
        const std::vector<int> ids{0, 5, 2, 2, 1};
        CHECK(grad_check([&] { return project(embedding_lookup(t, ids), 8); }, {t}) < 1e-6);
    }
    SUBCASE("concat and slice") {
        Tensor a = randt({2, 3}, rng), b = randt({2, 3}, rng), c = randt({1, 6}, rng);
        auto f = [&] {
            const Tensor cc = concat({concat({a, b}, 1), c}, 0);
            return project(slice(slice(cc, 0, 0, 3), 1, 1, 5), 9);
        };
        CHECK(grad_check(f, {a, b, c}) < 1e-6);
    }
    SUBCASE("transpose and reshape") {
        Tensor a = randt({3, 5}, rng);
        CHECK(grad_check([&] { return project(reshape(transpose(a), {3, 5}), 10); }, {a}) < 1e-6);
    }
    SUBCASE("gather_rows") {
        Tensor a = randt({6, 2}, rng);
        const std::vector<std::vector<int>> groups{{0, 1}, {4, 4}, {2, 5}};
        CHECK(grad_check([&] { return project(gather_rows(a, groups), 11); }, {a}) < 1e-6);
    }
    SUBCASE("cross_entropy_logits, smoothing 0 and 0.1") {
        Tensor logits = randt({4, 9}, rng);
        const std::vector<int> targets{1, 8, 0, 3};
        CHECK(grad_check([&] { return cross_entropy_logits(logits, targets, 0.0); }, {logits}) < 1e-5);
        CHECK(grad_check([&] { return cross_entropy_logits(logits, targets, 0.1); }, {logits}) < 1e-5);
    }
    SUBCASE("cross_entropy_logits with allowed sets and pad") {
        Tensor logits = randt({3, 9}, rng);
        const std::vector<int> targets{1, 2, 4};  // pad id 2 excluded
        const std::vector<std::vector<int>> allowed{{0, 1, 5}, {}, {3, 4}};
        auto f = [&] { return cross_entropy_logits(logits, targets, 0.1, 2, &allowed); };
        CHECK(grad_check(f, {logits}) < 1e-5);
    }
    SUBCASE("attention-shaped composite") {
        Tensor x = randt({5, 8}, rng), wq = randt({8, 8}, rng), wk = randt({8, 8}, rng),
               wv = randt({8, 8}, rng);
        auto f = [&] {
            const Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
            const Tensor att = softmax(scale(matmul(q, transpose(k)), 0.35));
            return project(matmul(att, v), 12);
        };
        CHECK(grad_check(f, {x, wq, wk, wv}) < 1e-5);
    }
}

TEST_CASE("cross_entropy matches the hand-computed smoothed value") {
    // Correct logit +10 among 8, smoothing 0.1; reference computed by a
    // standalone scalar loop, not the tensor op.
    PrecisionGuard pg(Precision::Float64);
    const int vocab = 8, correct = 3;
    std::vector<double> row(vocab, 0.0);
    row[correct] = 10.0;

    double mx = 10.0, z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    double sum_nll = 0.0;
    for (double v : row) sum_nll += lse - v;
    const double expected = 0.9 * (lse - row[correct]) + 0.1 * (sum_nll / vocab);

    const Tensor logits = Tensor::from({1, vocab}, row);
    const std::vector<int> targets{correct};
    CHECK(cross_entropy_logits(logits, targets, 0.1).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cross_entropy on uniform logits is ln V for any smoothing") {
    const int vocab = 11;
    const Tensor logits = Tensor::zeros({2, vocab});
    const std::vector<int> targets{4, 9};
    for (double eps : {0.0, 0.1, 0.5}) {
        CHECK(cross_entropy_logits(logits, targets, eps).item() ==
              doctest::Approx(std::log(static_cast<double>(vocab))).epsilon(1e-6));
    }
}

TEST_CASE("cross_entropy with a huge correct margin goes to zero at eps 0") {
    std::vector<double> row(6, -50.0);
    row[2] = 50.0;
    const Tensor logits = Tensor::from({1, 6}, row);
    const std::vector<int> targets{2};
    CHECK(cross_entropy_logits(logits, targets, 0.0).item() <= 1e-12);
}

TEST_CASE("dropout with p=0 is the identity and so are its gradients") {
    Rng rng(23);
    Tensor x = randt({3, 3}, rng);
    Rng drop(1);
    const Tensor out = dropout(x, 0.0, drop, true);
    CHECK(out.same_object(x));

    x.zero_grad();
    Rng drop2(1);
    backward(sum(dropout(x, 0.0, drop2, true)));
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("dropout masks and rescales deterministically per seed") {
    Tensor x = Tensor::full({1, 1000}, 1.0);
    Rng a(42), b(42);
    const Tensor o1 = dropout(x, 0.25, a, true);
    const Tensor o2 = dropout(x, 0.25, b, true);
    CHECK(o1.data() == o2.data());
    int kept = 0;
    for (double v : o1.data()) {
        CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
        if (v != 0.0) ++kept;
    }
    CHECK(kept > 650);
    CHECK(kept < 850);
}

TEST_CASE("float32 mode rounds every result through float") {
    set_precision(Precision::Float32);
    const Tensor a = Tensor::scalar(0.1);
    CHECK(a.data()[0] == static_cast<double>(0.1f));
    const Tensor b = scale(a, 3.0);
    CHECK(b.data()[0] == static_cast<double>(static_cast<float>(static_cast<double>(0.1f) * 3.0)));
    set_precision(Precision::Float64);
    const Tensor c = Tensor::scalar(0.1);
    CHECK(c.data()[0] == 0.1);
    set_precision(Precision::Float32);
}

TEST_CASE("shape errors name both shapes") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({4, 5});
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2,3]"), ShapeError);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(backward(Tensor::zeros({2})), UsageError);
}
