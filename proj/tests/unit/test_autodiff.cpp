// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <limits>

#include "doctest.h"
#include "lipedit/autodiff.hpp"
#include "lipedit/rng.hpp"

using namespace lipedit;
using namespace lipedit::ad;

namespace {

// Central finite difference of a scalar function of one parameter tensor.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-5) {
    Tensor g(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

void check_grad(const std::function<Var(const Var&)>& build, const Tensor& x0, double tol = 1e-6) {
    Var x = parameter(x0);
    Var y = build(x);
    backward(y);
    auto f = [&](const Tensor& t) {
        NoGradGuard ng;
        return build(constant(t)).value().item();
    };
    const Tensor num = numeric_grad(f, x0);
    CHECK(max_abs_diff(x.grad(), num) <= tol);
}

}  // namespace

TEST_CASE("elementwise add of small vectors") {
    Var a = constant(Tensor::from({1, 2}));
    Var b = constant(Tensor::from({3, 4}));
    const Tensor c = (a + b).value();
    CHECK(c[0] == 4.0);
    CHECK(c[1] == 6.0);
}

TEST_CASE("matmul hand case and triple loop oracle") {
    Var a = constant(Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
    Var b = constant(Tensor({2, 1}, std::vector<double>{5, 6}));
    const Tensor c = matmul(a, b).value();
    CHECK(c[0] == 17.0);
    CHECK(c[1] == 39.0);

    Rng rng(7);
    const Tensor x = rng.normal_tensor({5, 7});
    const Tensor w = rng.normal_tensor({7, 3});
    const Tensor y = matmul(constant(x), constant(w)).value();
    double worst = 0.0;
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 7; ++k) s += x[i * 7 + k] * w[k * 3 + j];
            worst = std::max(worst, std::abs(s - y[i * 3 + j]));
        }
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("derivative of a square") {
    Var x = parameter(Tensor::scalar(3.0));
    backward(sum(square(x)));
    CHECK(x.grad().item() == doctest::Approx(6.0));
}

TEST_CASE("gradients of composite ops match finite differences") {
    Rng rng(11);
    const Tensor w = rng.normal_tensor({4, 3});
    const Tensor bias = rng.normal_tensor({3});
    check_grad([&](const Var& x) { return sum(silu(linear(x, constant(w), constant(bias)))); }, rng.normal_tensor({2, 4}));
    check_grad([&](const Var& x) { return sum(mul(gelu(x), tanh(x))); }, rng.normal_tensor({6}));
    const Tensor probe = rng.normal_tensor({3, 5});
    check_grad([&](const Var& x) { return sum(mul(layer_norm(x), constant(probe))); },
               rng.normal_tensor({3, 5}));
    check_grad([&](const Var& x) { return sum(mul(softmax(x), constant(Tensor::from({1, 2, 3, 4})))); },
               rng.normal_tensor({2, 4}));
    check_grad([&](const Var& x) { return mean(square(mul(x, constant(Tensor::from({2, -1, 0.5}))))); },
               rng.normal_tensor({4, 3}));
    check_grad([&](const Var& x) { return sum(square(transpose(reshape(x, {3, 2})))); }, rng.normal_tensor({6}));
}

TEST_CASE("attention gradients and masking") {
    Rng rng(5);
    const int heads = 2;
    const Tensor k = rng.normal_tensor({3, 4});
    const Tensor v = rng.normal_tensor({3, 4});
    Tensor mask({2, 3}, 0.0);
    mask[2] = -std::numeric_limits<double>::infinity();
    const Tensor angles = rng.normal_tensor({2, 1});
    check_grad(
        [&](const Var& q) {
            return sum(square(attention(rope_rotate(q, angles, heads), constant(k), constant(v), heads, mask)));
        },
        rng.normal_tensor({2, 4}));

    // a masked key has no influence on the output
    Tensor v2 = v;
    for (int c = 0; c < 4; ++c) v2[2 * 4 + c] += 100.0;
    const Tensor q = rng.normal_tensor({2, 4});
    const Tensor o1 = attention(constant(q), constant(k), constant(v), heads, mask).value();
    const Tensor o2 = attention(constant(q), constant(k), constant(v2), heads, mask).value();
    for (int c = 0; c < 4; ++c) CHECK(o1[c] == o2[c]);

    Tensor full({2, 3}, -std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(attention(constant(q), constant(k), constant(v), heads, full), Error);
}

TEST_CASE("masked row add passes unmasked rows through bitwise with zero gradient") {
    Rng rng(3);
    Var z = parameter(rng.normal_tensor({3, 2}));
    Var u = parameter(rng.normal_tensor({3, 2}));
    const std::vector<uint8_t> m{1, 0, 1};
    Var out = masked_row_add(z, u, m);
    CHECK(out.value()[2] == z.value()[2]);
    CHECK(out.value()[3] == z.value()[3]);
    backward(sum(square(out)));
    CHECK(u.grad()[2] == 0.0);
    CHECK(u.grad()[3] == 0.0);
    CHECK(u.grad()[0] != 0.0);
}

TEST_CASE("row utilities route gradients") {
    Rng rng(9);
    check_grad(
        [&](const Var& x) {
            const std::vector<int64_t> idx{2, 0, 2};
            std::vector<Var> parts{slice_rows(x, 1, 2), gather_rows(x, idx), slice_cols(x, 1, 2)};
            Var a = concat_rows(std::span<const Var>(parts.data(), 2));
            return sum(square(a)) + sum(parts[2]);
        },
        rng.normal_tensor({3, 3}));
}

TEST_CASE("broadcast arithmetic over trailing dims") {
    Rng rng(2);
    const Tensor b = rng.normal_tensor({3});
    check_grad([&](const Var& x) { return sum(square(sub(x, constant(b)))); }, rng.normal_tensor({2, 3}));
    Var x = constant(rng.normal_tensor({2, 3}));
    Var bb = parameter(b);
    backward(sum(mul(x, bb)));
    for (int j = 0; j < 3; ++j) CHECK(bb.grad()[j] == doctest::Approx(x.value()[j] + x.value()[3 + j]));
}
