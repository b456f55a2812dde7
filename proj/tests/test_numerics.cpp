#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "tim/autograd.hpp"
#include "tim/numerics.hpp"

using namespace tim;
using T64 = TensorT<double>;
using V64 = VarT<double>;
using Tape64 = TapeT<double>;

TEST_CASE("softmax known values") {
    auto p = softmax(std::vector<double>{0.0, std::log(3.0)});
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));
    auto u = softmax(std::vector<double>{5.0, 5.0, 5.0, 5.0});
    for (double x : u) CHECK(x == doctest::Approx(0.25).epsilon(1e-12));
    // Shift invariance, including large offsets (stability).
    auto a = softmax(std::vector<double>{1.0, 2.0, 3.0});
    auto b = softmax(std::vector<double>{1001.0, 1002.0, 1003.0});
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("cross entropy clamps and reports") {
    auto r = cross_entropy(std::vector<double>{0.5, 0.5}, 0);
    CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK_FALSE(r.clamped);
    auto z = cross_entropy(std::vector<double>{0.0, 1.0}, 0);
    CHECK(z.clamped);
    CHECK(std::isfinite(z.loss));
    CHECK_THROWS_AS(cross_entropy(std::vector<double>{1.0}, 2), std::invalid_argument);
}

TEST_CASE("cross_entropy_logits value and batch mean") {
    // Row 0: logits [0, ln3] with label 1 -> -ln(0.75); row 1: [0,0] label 0 -> ln2.
    Tape64 tape;
    T64 l({2, 2}, {0.0, std::log(3.0), 0.0, 0.0});
    V64 lv = leaf(tape, l);
    V64 loss = cross_entropy_logits(lv, {1, 0}, {1, 1});
    const double expect = (-std::log(0.75) + std::log(2.0)) / 2.0;
    CHECK(loss.val().data[0] == doctest::Approx(expect).epsilon(1e-10));
    backward(loss);
    // d/dlogit = (softmax - onehot) / 2
    CHECK(tape.grad(lv.id).at(0, 0) == doctest::Approx(0.25 / 2).epsilon(1e-10));
    CHECK(tape.grad(lv.id).at(0, 1) == doctest::Approx(-0.25 / 2).epsilon(1e-10));
    CHECK(tape.grad(lv.id).at(1, 0) == doctest::Approx(-0.5 / 2).epsilon(1e-10));
    CHECK(tape.grad(lv.id).at(1, 1) == doctest::Approx(0.5 / 2).epsilon(1e-10));
}

TEST_CASE("inactive rows contribute nothing") {
    Tape64 tape;
    T64 l({2, 3}, {1.0, 2.0, 3.0, 100.0, -50.0, 0.0});
    V64 lv = leaf(tape, l);
    V64 loss = cross_entropy_logits(lv, {2, 0}, {1, 0});
    backward(loss);
    for (int j = 0; j < 3; ++j) CHECK(tape.grad(lv.id).at(1, j) == 0.0);
}

// Central finite differences of a scalar function of one tensor.
template <class F>
static T64 fd_grad(T64& x, F f, double h = 1e-6) {
    T64 g(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double keep = x.data[i];
        x.data[i] = keep + h;
        const double up = f();
        x.data[i] = keep - h;
        const double dn = f();
        x.data[i] = keep;
        g.data[i] = (up - dn) / (2 * h);
    }
    return g;
}

static double rel_err(const T64& a, const T64& b) {
    double num = 0, den = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        num += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
        den += b.data[i] * b.data[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

TEST_CASE("autograd ops match finite differences") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        T64 a = T64::randn({3, 4}, rng, 1.0);
        T64 b = T64::randn({4, 5}, rng, 1.0);
        T64 g = T64::randn({1, 4}, rng, 0.5);
        T64 c = T64::randn({1, 4}, rng, 0.5);

        // Composite: sum over CE of layernorm(relu(a)) @ b with causal softmax mix.
        auto value = [&]() {
            V64 av = constant(a), bv = constant(b);
            V64 h = layernorm(relu(av), constant(g), constant(c), 1e-5);
            V64 s = softmax_causal(matmul_nt(h, h), 0);
            V64 logits = matmul(add(h, matmul(s, h)), bv);
            V64 loss = cross_entropy_logits(logits, {1, 0, 3}, {1, 1, 1});
            return loss.val().data[0];
        };
        auto analytic = [&](const T64& wrt, int which) {
            Tape64 tape;
            V64 av = which == 0 ? leaf(tape, a) : constant(a);
            V64 bv = which == 1 ? leaf(tape, b) : constant(b);
            V64 gv = which == 2 ? leaf(tape, g) : constant(g);
            V64 cv = which == 3 ? leaf(tape, c) : constant(c);
            V64 h = layernorm(relu(av), gv, cv, 1e-5);
            V64 s = softmax_causal(matmul_nt(h, h), 0);
            V64 logits = matmul(add(h, matmul(s, h)), bv);
            V64 loss = cross_entropy_logits(logits, {1, 0, 3}, {1, 1, 1});
            backward(loss);
            const int id = which == 0 ? av.id : which == 1 ? bv.id : which == 2 ? gv.id : cv.id;
            (void)wrt;
            return tape.grad(id);
        };
        CHECK(rel_err(analytic(a, 0), fd_grad(a, value)) < 1e-6);
        CHECK(rel_err(analytic(b, 1), fd_grad(b, value)) < 1e-6);
        CHECK(rel_err(analytic(g, 2), fd_grad(g, value)) < 1e-6);
        CHECK(rel_err(analytic(c, 3), fd_grad(c, value)) < 1e-6);
    }
}

TEST_CASE("embed/slice/concat/bias gradients match finite differences") {
    std::mt19937 rng(11);
    T64 table = T64::randn({6, 4}, rng, 1.0);
    T64 bias = T64::randn({1, 8}, rng, 1.0);
    const std::vector<int> ids{0, 3, 3, 5};
    auto value = [&]() {
        V64 t = constant(table);
        V64 e = embed_rows(t, ids);                      // [4,4]
        V64 wide = concat_cols<double>({e, scale(e, 2.0)});  // [4,8]
        V64 w2 = add_bias(wide, constant(bias));
        V64 part = slice_cols(slice_rows(w2, 1, 3), 2, 4);
        V64 loss = cross_entropy_logits(part, {0, 2, 3}, {1, 1, 1});
        return loss.val().data[0];
    };
    Tape64 tape;
    V64 t = leaf(tape, table);
    V64 bv = leaf(tape, bias);
    V64 e = embed_rows(t, ids);
    V64 wide = concat_cols<double>({e, scale(e, 2.0)});
    V64 w2 = add_bias(wide, bv);
    V64 part = slice_cols(slice_rows(w2, 1, 3), 2, 4);
    V64 loss = cross_entropy_logits(part, {0, 2, 3}, {1, 1, 1});
    backward(loss);
    CHECK(rel_err(tape.grad(t.id), fd_grad(table, value)) < 1e-6);
    CHECK(rel_err(tape.grad(bv.id), fd_grad(bias, value)) < 1e-6);
}

TEST_CASE("tape is single use") {
    Tape64 tape;
    V64 x = leaf(tape, T64::full({1, 1}, 2.0));
    V64 y = scale(x, 3.0);
    backward(y);
    CHECK_THROWS_AS(backward(y), std::logic_error);
}

TEST_CASE("adam first step moves by lr in the gradient sign direction") {
    TensorT<float> p = TensorT<float>::full({1, 3}, 1.0f);
    AdamOpt::Hyper h;
    h.lr = 0.1f;
    AdamOpt opt(h);
    opt.attach(&p);
    TensorT<float> g({1, 3}, {0.5f, -2.0f, 0.0f});
    opt.step({&g});
    // With bias correction, |step| == lr for any nonzero gradient (eps aside).
    CHECK(p.data[0] == doctest::Approx(0.9f).epsilon(1e-3));
    CHECK(p.data[1] == doctest::Approx(1.1f).epsilon(1e-3));
    CHECK(p.data[2] == doctest::Approx(1.0f).epsilon(1e-6));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam validates shapes and counts") {
    TensorT<float> p = TensorT<float>::zeros({2, 2});
    AdamOpt opt{AdamOpt::Hyper{}};
    opt.attach(&p);
    TensorT<float> bad = TensorT<float>::zeros({2, 3});
    CHECK_THROWS_AS(opt.step({&bad}), std::invalid_argument);
    CHECK_THROWS_AS(opt.step({}), std::invalid_argument);
    CHECK_THROWS_AS(AdamOpt(AdamOpt::Hyper{-1.0f, 0.9f, 0.999f, 1e-8f}), std::invalid_argument);
}

TEST_CASE("adam drives a quadratic toward its minimum") {
    TensorT<double> p({1, 2}, {5.0, -3.0});
    AdamOptT<double>::Hyper h;
    h.lr = 0.05;
    AdamOptT<double> opt(h);
    opt.attach(&p);
    auto loss = [&]() { return p.data[0] * p.data[0] + 2.0 * p.data[1] * p.data[1]; };
    const double initial = loss();
    for (int i = 0; i < 400; ++i) {
        TensorT<double> g({1, 2}, {2.0 * p.data[0], 4.0 * p.data[1]});
        opt.step({&g});
    }
    CHECK(loss() < initial * 1e-4);
}
