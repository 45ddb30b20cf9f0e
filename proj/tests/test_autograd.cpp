#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "caal/ops.hpp"
#include "caal/rng.hpp"

using caal::Rng;
using caal::Tensor;
using caal::ag::Var;
namespace ops = caal::ops;
namespace ag = caal::ag;

namespace {

Tensor randn(Rng& rng, std::vector<int> shape, double scale = 1.0, double offset = 0.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale + offset;
    return t;
}

using ScalarFn = std::function<Var(const std::vector<Var>&)>;

// Central-difference check of d f(inputs) / d inputs[k][i] for all k, i.
// f must map the inputs to a scalar Var.
void check_grads(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6,
                 double tol = 1e-6) {
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(Var::leaf(t.clone(), true));
    Var y = f(vars);
    REQUIRE(y.val().size() == 1);
    auto gs = ag::grad(y, vars);

    auto eval = [&](size_t k, int64_t i, double xv) {
        std::vector<Var> vs;
        for (size_t j = 0; j < inputs.size(); ++j) {
            Tensor t = inputs[j].clone();
            if (j == k) t[i] = xv;
            vs.push_back(Var::leaf(t, false));
        }
        ag::GradMode off(false);
        return f(vs).item();
    };

    for (size_t k = 0; k < inputs.size(); ++k) {
        for (int64_t i = 0; i < inputs[k].size(); ++i) {
            double x0 = inputs[k][i];
            double fd = (eval(k, i, x0 + h) - eval(k, i, x0 - h)) / (2.0 * h);
            double an = gs[k].val()[i];
            double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            INFO("input ", k, " element ", i, " analytic ", an, " fd ", fd);
            CHECK(err < tol);
        }
    }
}

}  // namespace

// ------------------------------------------------------------ basics

TEST_CASE("constant graphs carry no parents") {
    Var a = Var::leaf(Tensor::full({3}, 2.0), false);
    Var y = ops::mul(a, a);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("grad requires a scalar root") {
    Var a = Var::leaf(Tensor::zeros({3}), true);
    Var y = ops::mul(a, a);
    CHECK_THROWS_AS(ag::grad(y, {a}), caal::ShapeError);
}

TEST_CASE("unreachable inputs get zero gradients") {
    Var a = Var::leaf(Tensor::full({2}, 1.0), true);
    Var b = Var::leaf(Tensor::full({2}, 1.0), true);
    Var y = ops::sum_all(ops::mul(a, a));
    auto gs = ag::grad(y, {a, b});
    CHECK(gs[1].val()[0] == 0.0);
    CHECK(gs[1].val()[1] == 0.0);
    CHECK(gs[0].val()[0] == 2.0);
}

TEST_CASE("gradient accumulation over a diamond") {
    // y = sum(a*b + a*c) => dy/da = b + c exactly
    Tensor ta = Tensor::from({1.5, -2.0}, {2});
    Tensor tb = Tensor::from({3.0, 4.0}, {2});
    Tensor tc = Tensor::from({-1.0, 0.5}, {2});
    Var a = Var::leaf(ta, true), b = Var::leaf(tb), c = Var::leaf(tc);
    Var y = ops::sum_all(ops::add(ops::mul(a, b), ops::mul(a, c)));
    auto gs = ag::grad(y, {a});
    CHECK(gs[0].val()[0] == 2.0);   // 3 + -1
    CHECK(gs[0].val()[1] == 4.5);   // 4 + 0.5
}

TEST_CASE("GradMode off suppresses recording") {
    Var a = Var::leaf(Tensor::full({2}, 3.0), true);
    ag::GradMode off(false);
    Var y = ops::mul(a, a);
    CHECK_FALSE(y.requires_grad());
}

// ------------------------------------------------------------ elementwise FD

TEST_CASE("elementwise primitives match finite differences") {
    Rng rng(101);
    Tensor a = randn(rng, {2, 3});
    Tensor b = randn(rng, {2, 3}, 1.0, 3.0);  // keep b away from 0 for div

    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::add(v[0], v[1])); },
                {a, b});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::sub(v[0], v[1])); },
                {a, b});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::mul(v[0], v[1])); },
                {a, b});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::div(v[0], v[1])); },
                {a, b});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::adds(v[0], 1.7)); }, {a});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::muls(v[0], -2.5)); }, {a});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::neg(v[0])); }, {a});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::exp(v[0])); }, {a});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::log(v[0])); }, {b});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::sqrt(v[0])); }, {b});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::square(v[0])); }, {a});
    check_grads(
        [](const std::vector<Var>& v) { return ops::sum_all(ops::sigmoid(v[0])); }, {a});
    check_grads(
        [](const std::vector<Var>& v) { return ops::sum_all(ops::softplus(v[0])); }, {a});
}

TEST_CASE("kinked activations away from the kink") {
    Rng rng(202);
    Tensor a = randn(rng, {3, 3});
    for (int64_t i = 0; i < a.size(); ++i)
        if (std::abs(a[i]) < 0.1) a[i] = 0.5;  // FD step must not cross zero

    check_grads(
        [](const std::vector<Var>& v) { return ops::sum_all(ops::leaky_relu(v[0], 0.2)); }, {a});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::relu(v[0])); }, {a});
    check_grads([](const std::vector<Var>& v) { return ops::sum_all(ops::abs(v[0])); }, {a});
}

TEST_CASE("mul_const masks the gradient") {
    Tensor mask = Tensor::from({1, 0, 2, 0}, {4});
    Tensor x = Tensor::from({5, 6, 7, 8}, {4});
    Var a = Var::leaf(x, true);
    Var y = ops::sum_all(ops::mul_const(a, mask));
    auto gs = ag::grad(y, {a});
    CHECK(gs[0].val()[0] == 1.0);
    CHECK(gs[0].val()[1] == 0.0);
    CHECK(gs[0].val()[2] == 2.0);
    CHECK(gs[0].val()[3] == 0.0);
}

// ------------------------------------------------------------ shape ops

TEST_CASE("reshape, broadcast, reduce_sum round trip") {
    Rng rng(303);
    Tensor a = randn(rng, {2, 3, 4});
    Tensor b = randn(rng, {2, 1, 4});
    Tensor w = randn(rng, {2, 3, 4});

    // weight every element so the FD sees distinct sensitivities
    check_grads(
        [&w](const std::vector<Var>& v) {
            Var r = ops::reshape(v[0], {6, 4});
            return ops::sum_all(ops::mul_const(ops::reshape(r, {2, 3, 4}), w));
        },
        {a});
    check_grads(
        [&w](const std::vector<Var>& v) {
            Var bc = ops::broadcast_to(v[0], {2, 3, 4});
            return ops::sum_all(ops::mul_const(bc, w));
        },
        {b});
    check_grads(
        [](const std::vector<Var>& v) {
            Var s = ops::reduce_sum(v[0], {1}, false);  // (2,4)
            return ops::sum_all(ops::square(s));
        },
        {a});
    check_grads(
        [](const std::vector<Var>& v) {
            Var s = ops::reduce_sum(v[0], {0, 2}, true);  // (1,3,1)
            return ops::sum_all(ops::square(s));
        },
        {a});
}

TEST_CASE("reduce_sum values") {
    Tensor a = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
    Var v = Var::leaf(a);
    Tensor s0 = ops::reduce_sum(v, {0}, false).val();
    CHECK(s0.shape() == std::vector<int>{3});
    CHECK(s0[0] == 5.0);
    CHECK(s0[1] == 7.0);
    CHECK(s0[2] == 9.0);
    Tensor s1 = ops::reduce_sum(v, {1}, true).val();
    CHECK(s1.shape() == std::vector<int>{2, 1});
    CHECK(s1[0] == 6.0);
    CHECK(s1[1] == 15.0);
    CHECK(ops::sum_all(v).item() == 21.0);
    CHECK(ops::mean_all(v).item() == 3.5);
}

TEST_CASE("transpose and matmul match finite differences") {
    Rng rng(404);
    Tensor a = randn(rng, {3, 4});
    Tensor b = randn(rng, {4, 2});
    Tensor w = randn(rng, {3, 2});

    check_grads(
        [&w](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::matmul(v[0], v[1]), w));
        },
        {a, b});
    check_grads(
        [](const std::vector<Var>& v) {
            return ops::sum_all(ops::square(ops::transpose(v[0])));
        },
        {a});
}

TEST_CASE("matmul value against a hand computation") {
    Var a = Var::leaf(Tensor::from({1, 2, 3, 4}, {2, 2}));
    Var b = Var::leaf(Tensor::from({5, 6, 7, 8}, {2, 2}));
    Tensor c = ops::matmul(a, b).val();
    CHECK(c[0] == 19.0);
    CHECK(c[1] == 22.0);
    CHECK(c[2] == 43.0);
    CHECK(c[3] == 50.0);
}

TEST_CASE("channel concat, slice, embed") {
    Rng rng(505);
    Tensor a = randn(rng, {2, 2, 3, 3});
    Tensor b = randn(rng, {2, 1, 3, 3});
    Tensor w = randn(rng, {2, 3, 3, 3});

    check_grads(
        [&w](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::concat_ch({v[0], v[1]}), w));
        },
        {a, b});
    check_grads(
        [](const std::vector<Var>& v) {
            return ops::sum_all(ops::square(ops::slice_ch(v[0], 1, 1)));
        },
        {a});
    Tensor w4 = randn(rng, {2, 4, 3, 3});
    check_grads(
        [&w4](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::embed_ch(v[0], 1, 4), w4));
        },
        {a});

    // values: concat then slice recovers the parts
    Var va = Var::leaf(a), vb = Var::leaf(b);
    Var cat = ops::concat_ch({va, vb});
    CHECK(cat.val().shape() == std::vector<int>{2, 3, 3, 3});
    Tensor back = ops::slice_ch(cat, 2, 1).val();
    for (int64_t i = 0; i < back.size(); ++i) CHECK(back[i] == b[i]);
}

// ------------------------------------------------------------ conv family

TEST_CASE("conv2d forward against direct summation") {
    Rng rng(606);
    Tensor x = randn(rng, {2, 3, 5, 6});
    Tensor w = randn(rng, {4, 3, 3, 3});
    int stride = 2, pad = 1;
    Tensor y = ops::conv2d(Var::leaf(x), Var::leaf(w), stride, pad).val();
    int ho = (5 + 2 * pad - 3) / stride + 1, wo = (6 + 2 * pad - 3) / stride + 1;
    REQUIRE(y.shape() == std::vector<int>{2, 4, ho, wo});
    for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 4; ++o)
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < 3; ++c)
                        for (int ki = 0; ki < 3; ++ki)
                            for (int kj = 0; kj < 3; ++kj) {
                                int ih = i * stride - pad + ki, iw = j * stride - pad + kj;
                                if (ih < 0 || ih >= 5 || iw < 0 || iw >= 6) continue;
                                acc += x[((int64_t(n) * 3 + c) * 5 + ih) * 6 + iw] *
                                       w[((int64_t(o) * 3 + c) * 3 + ki) * 3 + kj];
                            }
                    double got = y[((int64_t(n) * 4 + o) * ho + i) * wo + j];
                    CHECK(got == doctest::Approx(acc).epsilon(1e-12));
                }
}

TEST_CASE("conv family matches finite differences") {
    Rng rng(707);
    for (auto [stride, pad, kh] : {std::tuple{1, 1, 3}, std::tuple{2, 1, 4}, std::tuple{1, 0, 1}}) {
        Tensor x = randn(rng, {2, 2, 6, 6});
        Tensor w = randn(rng, {3, 2, kh, kh});
        int ho = (6 + 2 * pad - kh) / stride + 1;
        Tensor g = randn(rng, {2, 3, ho, ho});
        Tensor wy = randn(rng, {2, 3, ho, ho});
        Tensor wx = randn(rng, {2, 2, 6, 6});
        Tensor ww = randn(rng, {3, 2, kh, kh});

        INFO("stride ", stride, " pad ", pad, " k ", kh);
        check_grads(
            [&, stride = stride, pad = pad](const std::vector<Var>& v) {
                return ops::sum_all(ops::mul_const(ops::conv2d(v[0], v[1], stride, pad), wy));
            },
            {x, w}, 1e-5, 1e-5);
        check_grads(
            [&, stride = stride, pad = pad](const std::vector<Var>& v) {
                return ops::sum_all(ops::mul_const(
                    ops::conv2d_input_grad(v[0], v[1], stride, pad, 6, 6), wx));
            },
            {g, w}, 1e-5, 1e-5);
        check_grads(
            [&, stride = stride, pad = pad, kh = kh](const std::vector<Var>& v) {
                return ops::sum_all(ops::mul_const(
                    ops::conv2d_weight_grad(v[0], v[1], stride, pad, kh, kh), ww));
            },
            {x, g}, 1e-5, 1e-5);
    }
}

TEST_CASE("conv2d_input_grad is the adjoint of conv2d") {
    // <conv(x,w), g> == <x, input_grad(g,w)> for all x, g: pins the geometry
    Rng rng(808);
    Tensor x = randn(rng, {1, 2, 5, 5});
    Tensor w = randn(rng, {3, 2, 3, 3});
    Tensor g = randn(rng, {1, 3, 3, 3});
    Var vx = Var::leaf(x), vw = Var::leaf(w), vg = Var::leaf(g);
    double lhs = ops::sum_all(ops::mul_const(ops::conv2d(vx, vw, 2, 1), g)).item();
    double rhs =
        ops::sum_all(ops::mul_const(ops::conv2d_input_grad(vg, vw, 2, 1, 5, 5), x)).item();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

// ------------------------------------------------------------ pooling

TEST_CASE("avg_pool2 and upsample2") {
    Tensor x = Tensor::from({1, 2, 3, 4}, {1, 1, 2, 2});
    Tensor p = ops::avg_pool2(Var::leaf(x)).val();
    CHECK(p.item() == 2.5);
    Tensor u = ops::upsample2(Var::leaf(Tensor::from({7}, {1, 1, 1, 1}))).val();
    for (int64_t i = 0; i < 4; ++i) CHECK(u[i] == 7.0);

    Rng rng(909);
    Tensor a = randn(rng, {2, 2, 4, 4});
    Tensor wp = randn(rng, {2, 2, 2, 2});
    Tensor wu = randn(rng, {2, 2, 8, 8});
    check_grads(
        [&wp](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::avg_pool2(v[0]), wp));
        },
        {a});
    check_grads(
        [&wu](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::upsample2(v[0]), wu));
        },
        {a});
}

// ------------------------------------------------------------ reductions / losses

TEST_CASE("softmax and logsumexp values") {
    Var two = Var::leaf(Tensor::from({0.0, 0.0}, {1, 2}));
    CHECK(ops::logsumexp_rows(two).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    Tensor sm = ops::softmax_rows(two).val();
    CHECK(sm[0] == doctest::Approx(0.5).epsilon(1e-15));

    // huge logits stay finite (detached row max)
    Var big = Var::leaf(Tensor::from({1000.0, 999.0}, {1, 2}));
    Tensor smb = ops::softmax_rows(big).val();
    CHECK(smb.all_finite());
    CHECK(smb[0] + smb[1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(ops::logsumexp_rows(big).item() ==
          doctest::Approx(1000.0 + std::log(1.0 + std::exp(-1.0))).epsilon(1e-15));

    // rows sum to one
    Rng rng(111);
    Tensor l = randn(rng, {5, 7}, 3.0);
    Tensor s = ops::softmax_rows(Var::leaf(l)).val();
    for (int i = 0; i < 5; ++i) {
        double row = 0;
        for (int j = 0; j < 7; ++j) row += s[int64_t(i) * 7 + j];
        CHECK(row == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("softmax-family gradients") {
    Rng rng(222);
    Tensor l = randn(rng, {3, 4}, 2.0);
    Tensor w = randn(rng, {3, 4});
    Tensor w1 = randn(rng, {3, 1});
    check_grads(
        [&w](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::softmax_rows(v[0]), w));
        },
        {l});
    check_grads(
        [&w1](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::logsumexp_rows(v[0]), w1));
        },
        {l});
}

TEST_CASE("cross entropy closed forms and gradients") {
    // uniform logits over C classes: loss = ln C regardless of target
    Tensor onehot = Tensor::zeros({2, 4});
    onehot[0 * 4 + 1] = 1.0;
    onehot[1 * 4 + 3] = 1.0;
    Var logits = Var::leaf(Tensor::zeros({2, 4}));
    CHECK(ops::ce_with_logits(logits, onehot).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-15));

    Rng rng(333);
    Tensor l = randn(rng, {3, 4}, 2.0);
    Tensor oh = Tensor::zeros({3, 4});
    oh[0 * 4 + 2] = 1.0;
    oh[1 * 4 + 0] = 1.0;
    oh[2 * 4 + 3] = 1.0;
    check_grads([&oh](const std::vector<Var>& v) { return ops::ce_with_logits(v[0], oh); }, {l});

    Tensor cw = Tensor::from({0.5, 1.0, 2.0, 4.0}, {4});
    check_grads(
        [&oh, &cw](const std::vector<Var>& v) { return ops::ce_with_logits(v[0], oh, &cw); }, {l});
}

TEST_CASE("binary cross entropy closed forms and gradients") {
    // zero logits: loss = ln 2 for any target
    Tensor y = Tensor::from({1, 0, 1, 0, 0, 1}, {2, 3});
    Var logits = Var::leaf(Tensor::zeros({2, 3}));
    CHECK(ops::bce_with_logits(logits, y).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));

    // extreme logits stay finite
    Var big = Var::leaf(Tensor::from({1000, -1000, -1000, 1000, 1000, -1000}, {2, 3}));
    CHECK(ops::bce_with_logits(big, y).val().all_finite());

    Rng rng(444);
    Tensor l = randn(rng, {3, 4}, 2.0);
    Tensor t = Tensor::zeros({3, 4});
    Rng rt(445);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rt.bernoulli(0.4) ? 1.0 : 0.0;
    check_grads([&t](const std::vector<Var>& v) { return ops::bce_with_logits(v[0], t); }, {l});
    Tensor cw = Tensor::from({2.0, 1.0, 0.5, 3.0}, {4});
    check_grads(
        [&t, &cw](const std::vector<Var>& v) { return ops::bce_with_logits(v[0], t, &cw); }, {l});
}

TEST_CASE("l2_norm_rows and mse") {
    Var a = Var::leaf(Tensor::from({3, 4, 0, 0, 5, 12}, {2, 3}));
    Tensor n = ops::l2_norm_rows(a).val();
    CHECK(n[0] == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(n[1] == doctest::Approx(13.0).epsilon(1e-12));

    Rng rng(555);
    Tensor x = randn(rng, {2, 2, 3, 3});
    Tensor w2 = randn(rng, {2});
    check_grads(
        [&w2](const std::vector<Var>& v) {
            return ops::sum_all(ops::mul_const(ops::l2_norm_rows(v[0]), w2));
        },
        {x});
    Tensor p = randn(rng, {3, 3});
    Tensor q = randn(rng, {3, 3});
    check_grads([](const std::vector<Var>& v) { return ops::mse_loss(v[0], v[1]); }, {p, q});
    Var vp = Var::leaf(p), vq = Var::leaf(q);
    double manual = 0;
    for (int64_t i = 0; i < p.size(); ++i) manual += (p[i] - q[i]) * (p[i] - q[i]);
    CHECK(ops::mse_loss(vp, vq).item() == doctest::Approx(manual / 9.0).epsilon(1e-13));
}

// ------------------------------------------------------------ double backward

TEST_CASE("grad of grad: cubic") {
    // f = sum(x^3), g = 3x^2, sum(g) differentiated again = 6x
    Tensor x = Tensor::from({1.0, -2.0, 0.5}, {3});
    Var v = Var::leaf(x, true);
    Var f = ops::sum_all(ops::mul(ops::mul(v, v), v));
    auto g1 = ag::grad(f, {v}, /*create_graph=*/true);
    Var s = ops::sum_all(g1[0]);
    auto g2 = ag::grad(s, {v});
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(g1[0].val()[i] == doctest::Approx(3 * x[i] * x[i]).epsilon(1e-14));
        CHECK(g2[0].val()[i] == doctest::Approx(6 * x[i]).epsilon(1e-14));
    }
}

TEST_CASE("grad of grad through exp and div") {
    // f = sum(exp(x)/x); f' = exp(x)(x-1)/x^2; f'' = exp(x)(x^2-2x+2)/x^3
    Tensor x = Tensor::from({1.3, 2.7}, {2});
    Var v = Var::leaf(x, true);
    Var f = ops::sum_all(ops::div(ops::exp(v), v));
    auto g1 = ag::grad(f, {v}, true);
    auto g2 = ag::grad(ops::sum_all(g1[0]), {v});
    for (int64_t i = 0; i < 2; ++i) {
        double e = std::exp(x[i]);
        CHECK(g1[0].val()[i] ==
              doctest::Approx(e * (x[i] - 1) / (x[i] * x[i])).epsilon(1e-13));
        CHECK(g2[0].val()[i] ==
              doctest::Approx(e * (x[i] * x[i] - 2 * x[i] + 2) / std::pow(x[i], 3)).epsilon(1e-13));
    }
}

TEST_CASE("gradient-penalty pattern differentiates w.r.t. the weights") {
    // s = sum(sigmoid(conv(x,w))); g = ds/dx; P = sum((|g|_row - 1)^2).
    // dP/dw must match finite differences of the whole nested computation.
    Rng rng(666);
    Tensor x = randn(rng, {2, 1, 4, 4});
    Tensor w = randn(rng, {2, 1, 3, 3}, 0.5);

    auto penalty_value = [&x](const Tensor& wt) {
        Var vx = Var::leaf(x.clone(), true);
        Var vw = Var::leaf(wt.clone(), false);
        Var s = ops::sum_all(ops::sigmoid(ops::conv2d(vx, vw, 1, 1)));
        auto g = ag::grad(s, {vx});
        Var gn = ops::l2_norm_rows(g[0]);
        return ops::sum_all(ops::square(ops::adds(gn, -1.0))).item();
    };

    Var vx = Var::leaf(x, true);
    Var vw = Var::leaf(w, true);
    Var s = ops::sum_all(ops::sigmoid(ops::conv2d(vx, vw, 1, 1)));
    auto g = ag::grad(s, {vx}, /*create_graph=*/true);
    Var gn = ops::l2_norm_rows(g[0]);
    Var P = ops::sum_all(ops::square(ops::adds(gn, -1.0)));
    auto dPdw = ag::grad(P, {vw});

    const double h = 1e-5;
    for (int64_t i = 0; i < w.size(); ++i) {
        Tensor wp = w.clone(), wm = w.clone();
        wp[i] += h;
        wm[i] -= h;
        double fd = (penalty_value(wp) - penalty_value(wm)) / (2 * h);
        double an = dPdw[0].val()[i];
        INFO("weight ", i, " analytic ", an, " fd ", fd);
        CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) < 1e-5);
    }
}

TEST_CASE("interpolated-point gradient penalty end to end") {
    // the exact pattern the critic update uses: x_hat = e*real + (1-e)*fake,
    // differentiate the norm penalty w.r.t. conv weights through x_hat
    Rng rng(777);
    Tensor real = randn(rng, {2, 1, 4, 4});
    Tensor fake = randn(rng, {2, 1, 4, 4});
    Tensor w = randn(rng, {1, 1, 3, 3}, 0.4);
    Tensor eps = Tensor::from({0.3, 0.8}, {2, 1, 1, 1});

    auto gp_value = [&](const Tensor& wt) {
        Var vr = Var::leaf(real), vf = Var::leaf(fake);
        Var e = Var::leaf(eps);
        Var eb = ops::broadcast_to(e, {2, 1, 4, 4});
        Var xh = ops::add(ops::mul(eb, vr), ops::mul(ops::adds(ops::neg(eb), 1.0), vf));
        Var xhl = Var::leaf(xh.val(), true);  // differentiate at the point
        Var score = ops::sum_all(ops::conv2d(xhl, Var::leaf(wt), 1, 1));
        auto g = ag::grad(score, {xhl});
        Var pen = ops::mean_all(ops::square(ops::adds(ops::l2_norm_rows(g[0]), -1.0)));
        return pen.item();
    };

    Var vw = Var::leaf(w, true);
    Var vr = Var::leaf(real), vf = Var::leaf(fake);
    Var eb = ops::broadcast_to(Var::leaf(eps), {2, 1, 4, 4});
    Var xh = ops::add(ops::mul(eb, vr), ops::mul(ops::adds(ops::neg(eb), 1.0), vf));
    Var xhl = Var::leaf(xh.val(), true);
    Var score = ops::sum_all(ops::conv2d(xhl, vw, 1, 1));
    auto g = ag::grad(score, {xhl}, true);
    Var pen = ops::mean_all(ops::square(ops::adds(ops::l2_norm_rows(g[0]), -1.0)));
    auto dw = ag::grad(pen, {vw});

    const double h = 1e-5;
    for (int64_t i = 0; i < w.size(); ++i) {
        Tensor wp = w.clone(), wm = w.clone();
        wp[i] += h;
        wm[i] -= h;
        double fd = (gp_value(wp) - gp_value(wm)) / (2 * h);
        double an = dw[0].val()[i];
        CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) < 1e-5);
    }
}
