#include <catch_amalgamated.hpp>

#include "helpers.hpp"
#include "msn/autodiff.hpp"

using namespace msn;
using namespace msn::test;

namespace {

// Checks d(weighted_sum(build(x)))/dx against central differences for every
// element of x.
template <typename Build>
void check_grad_all(Tensor<double> x, Build&& build, Rng& rng, double tol = 1e-7) {
    Tensor<double> coeffs;
    {
        Tape<double> probe;
        auto out = build(probe, probe.leaf(x));
        coeffs = random_tensor(probe.value(out).shape(), rng);
    }
    auto eval = [&]() {
        Tape<double> tape;
        auto loss = tape.weighted_sum(build(tape, tape.leaf(x)), coeffs);
        return static_cast<double>(tape.value(loss)[0]);
    };
    Tape<double> tape;
    auto xv = tape.param(x);
    auto loss = tape.weighted_sum(build(tape, xv), coeffs);
    tape.backward(loss);
    const Tensor<double>& g = tape.grad(xv);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double numeric = fd(eval, x[i], 1e-5);
        INFO("element " << i);
        REQUIRE(rel_err(static_cast<double>(g[i]), numeric) < tol);
    }
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor<double> t({2, 3, 4});
    REQUIRE(t.size() == 24);
    t.at(1, 2, 3) = 5.0;
    REQUIRE(t[23] == 5.0);
    REQUIRE(t.reshaped({4, 6}).size() == 24);
    REQUIRE_THROWS_AS(t.reshaped({5, 5}), std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor<double>({2, 0}), std::invalid_argument);
    REQUIRE(Tensor<double>().empty());
}

TEST_CASE("conv2d forward matches direct computation") {
    // 1x1 input, 3x3 kernel: only the center tap contributes under same-padding
    Tape<double> tape;
    Tensor<double> x = Tensor<double>::from_data({1, 1, 1}, {2.0});
    Tensor<double> w({1, 1, 3, 3});
    w[4] = 3.0;  // center
    w[0] = 100.0;  // falls outside
    Tensor<double> b = Tensor<double>::from_data({1}, {0.5});
    auto out = tape.conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b));
    REQUIRE(tape.value(out)[0] == Catch::Approx(6.5));
}

TEST_CASE("conv2d gradients vs finite differences") {
    Rng rng = make_rng(11);
    Tensor<double> x = random_tensor({2, 5, 5}, rng);
    Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
    Tensor<double> b = random_tensor({3}, rng);

    SECTION("w.r.t. input") {
        check_grad_all(x, [&](Tape<double>& t, Tape<double>::Var xv) {
            return t.conv2d(xv, t.leaf(w), t.leaf(b));
        }, rng);
    }
    SECTION("w.r.t. weight") {
        check_grad_all(w, [&](Tape<double>& t, Tape<double>::Var wv) {
            return t.conv2d(t.leaf(x), wv, t.leaf(b));
        }, rng);
    }
    SECTION("w.r.t. bias") {
        check_grad_all(b, [&](Tape<double>& t, Tape<double>::Var bv) {
            return t.conv2d(t.leaf(x), t.leaf(w), bv);
        }, rng);
    }
}

TEST_CASE("conv2d validates shapes") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>({2, 4, 4}));
    REQUIRE_THROWS_AS(tape.conv2d(x, tape.leaf(Tensor<double>({1, 3, 3, 3}))),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(tape.conv2d(x, tape.leaf(Tensor<double>({1, 2, 2, 2}))),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(tape.conv2d(x, tape.leaf(Tensor<double>({1, 2, 3, 3})),
                                  tape.leaf(Tensor<double>({2}))),
                      std::invalid_argument);
}

TEST_CASE("relu gradient") {
    Rng rng = make_rng(12);
    Tensor<double> x = random_tensor({2, 3, 3}, rng, -2.0, 2.0);
    // keep away from the kink
    for (auto& v : x.vec())
        if (std::abs(v) < 0.05) v = 0.1;
    check_grad_all(x, [](Tape<double>& t, Tape<double>::Var xv) { return t.relu(xv); }, rng);
}

TEST_CASE("avgpool2 gradient and shape") {
    Rng rng = make_rng(13);
    Tensor<double> x = random_tensor({2, 6, 4}, rng);
    {
        Tape<double> tape;
        auto out = tape.avgpool2(tape.leaf(x));
        REQUIRE(tape.value(out).shape() == std::vector<int>{2, 3, 2});
    }
    check_grad_all(x, [](Tape<double>& t, Tape<double>::Var xv) { return t.avgpool2(xv); }, rng);
    Tape<double> tape;
    REQUIRE_THROWS_AS(tape.avgpool2(tape.leaf(Tensor<double>({1, 5, 4}))), std::invalid_argument);
}

TEST_CASE("resize_bilinear gradient, identity, and upsample") {
    Rng rng = make_rng(14);
    Tensor<double> x = random_tensor({2, 4, 3}, rng);
    {
        // same-size resize is the identity under half-pixel sampling
        Tape<double> tape;
        auto out = tape.resize_bilinear(tape.leaf(x), 4, 3);
        for (std::size_t i = 0; i < x.size(); ++i)
            REQUIRE(tape.value(out)[i] == Catch::Approx(x[i]));
    }
    {
        // constant input stays constant at any size
        Tape<double> tape;
        Tensor<double> c({1, 2, 2});
        c.fill(0.7);
        auto out = tape.resize_bilinear(tape.leaf(c), 7, 5);
        for (const double v : tape.value(out).vec()) REQUIRE(v == Catch::Approx(0.7));
    }
    check_grad_all(x, [](Tape<double>& t, Tape<double>::Var xv) {
        return t.resize_bilinear(xv, 7, 5);
    }, rng);
    check_grad_all(x, [](Tape<double>& t, Tape<double>::Var xv) {
        return t.resize_bilinear(xv, 2, 2);
    }, rng);
}

TEST_CASE("crop_center gradient and geometry") {
    Rng rng = make_rng(15);
    Tensor<double> x = random_tensor({1, 6, 6}, rng);
    {
        Tape<double> tape;
        auto out = tape.crop_center(tape.leaf(x), 2, 2);
        REQUIRE(tape.value(out).at(0, 0, 0) == x.at(0, 2, 2));
        REQUIRE(tape.value(out).at(0, 1, 1) == x.at(0, 3, 3));
        REQUIRE_THROWS_AS(tape.crop_center(tape.leaf(x), 7, 2), std::invalid_argument);
    }
    check_grad_all(x, [](Tape<double>& t, Tape<double>::Var xv) {
        return t.crop_center(xv, 3, 4);
    }, rng);
}

TEST_CASE("concat_c gradient flows to both inputs") {
    Rng rng = make_rng(16);
    Tensor<double> a = random_tensor({2, 3, 3}, rng);
    Tensor<double> b = random_tensor({3, 3, 3}, rng);
    check_grad_all(a, [&](Tape<double>& t, Tape<double>::Var av) {
        return t.concat_c(av, t.leaf(b));
    }, rng);
    check_grad_all(b, [&](Tape<double>& t, Tape<double>::Var bv) {
        return t.concat_c(t.leaf(a), bv);
    }, rng);
}

TEST_CASE("linear gradient") {
    Rng rng = make_rng(17);
    Tensor<double> x = random_tensor({5}, rng);
    Tensor<double> w = random_tensor({4, 5}, rng);
    Tensor<double> b = random_tensor({4}, rng);
    check_grad_all(x, [&](Tape<double>& t, Tape<double>::Var xv) {
        return t.linear(xv, t.leaf(w), t.leaf(b));
    }, rng);
    check_grad_all(w, [&](Tape<double>& t, Tape<double>::Var wv) {
        return t.linear(t.leaf(x), wv, t.leaf(b));
    }, rng);
    check_grad_all(b, [&](Tape<double>& t, Tape<double>::Var bv) {
        return t.linear(t.leaf(x), t.leaf(w), bv);
    }, rng);
}

TEST_CASE("slice_reshape gradient and bounds") {
    Rng rng = make_rng(18);
    Tensor<double> x = random_tensor({10}, rng);
    check_grad_all(x, [](Tape<double>& t, Tape<double>::Var xv) {
        return t.slice_reshape(xv, 2, {2, 3});
    }, rng);
    Tape<double> tape;
    REQUIRE_THROWS_AS(tape.slice_reshape(tape.leaf(x), 5, {2, 3}), std::invalid_argument);
}

TEST_CASE("softmax_c sums to one and gradient checks") {
    Rng rng = make_rng(19);
    Tensor<double> x = random_tensor({3, 2, 2}, rng, -3.0, 3.0);
    {
        Tape<double> tape;
        auto out = tape.softmax_c(tape.leaf(x));
        const auto& s = tape.value(out);
        for (int y = 0; y < 2; ++y)
            for (int xx = 0; xx < 2; ++xx)
                REQUIRE(s.at(0, y, xx) + s.at(1, y, xx) + s.at(2, y, xx) == Catch::Approx(1.0));
    }
    check_grad_all(x, [](Tape<double>& t, Tape<double>::Var xv) { return t.softmax_c(xv); }, rng,
                   1e-6);
}

TEST_CASE("softmax_cross_entropy value, gradient, ignore handling") {
    Rng rng = make_rng(20);
    Tensor<double> logits = random_tensor({4, 3, 3}, rng, -2.0, 2.0);
    LabelMap y = random_labels(3, 3, 4, rng, 0.3, 4);

    SECTION("uniform logits give ln(n_classes)") {
        Tape<double> tape;
        Tensor<double> z({4, 3, 3});
        auto loss = tape.softmax_cross_entropy(tape.leaf(z), y, 4);
        REQUIRE(tape.value(loss)[0] == Catch::Approx(std::log(4.0)));
    }
    SECTION("all-ignored map gives zero loss and zero gradient") {
        LabelMap all_ig({3, 3});
        all_ig.fill(4);
        Tape<double> tape;
        auto lv = tape.param(logits);
        auto loss = tape.softmax_cross_entropy(lv, all_ig, 4);
        REQUIRE(tape.value(loss)[0] == 0.0);
        tape.backward(loss);
        for (const double g : tape.grad(lv).vec()) REQUIRE(g == 0.0);
    }
    SECTION("out-of-range label throws") {
        LabelMap bad({3, 3});
        bad.fill(7);
        Tape<double> tape;
        REQUIRE_THROWS_AS(tape.softmax_cross_entropy(tape.leaf(logits), bad, 4),
                          std::invalid_argument);
    }
    SECTION("gradient vs finite differences") {
        auto eval = [&]() {
            Tape<double> tape;
            auto loss = tape.softmax_cross_entropy(tape.leaf(logits), y, 4);
            return static_cast<double>(tape.value(loss)[0]);
        };
        Tape<double> tape;
        auto lv = tape.param(logits);
        auto loss = tape.softmax_cross_entropy(lv, y, 4);
        tape.backward(loss);
        const auto& g = tape.grad(lv);
        for (std::size_t i = 0; i < logits.size(); ++i)
            REQUIRE(rel_err(g[i], fd(eval, logits[i], 1e-5)) < 1e-7);
    }
}

TEST_CASE("add, scale, weighted_sum gradients") {
    Rng rng = make_rng(21);
    Tensor<double> a = random_tensor({2, 2, 2}, rng);
    Tensor<double> b = random_tensor({2, 2, 2}, rng);
    check_grad_all(a, [&](Tape<double>& t, Tape<double>::Var av) {
        return t.add(av, t.leaf(b));
    }, rng);
    check_grad_all(a, [](Tape<double>& t, Tape<double>::Var av) { return t.scale(av, -2.5); }, rng);

    Tensor<double> coeffs = random_tensor({8}, rng);
    auto eval = [&]() {
        Tape<double> tape;
        auto loss = tape.weighted_sum(tape.leaf(a), coeffs.reshaped({8}));
        return static_cast<double>(tape.value(loss)[0]);
    };
    Tape<double> tape;
    auto av = tape.param(a);
    auto loss = tape.weighted_sum(av, coeffs.reshaped({8}));
    tape.backward(loss);
    for (std::size_t i = 0; i < a.size(); ++i)
        REQUIRE(rel_err(tape.grad(av)[i], fd(eval, a[i], 1e-5)) < 1e-9);
}

TEST_CASE("backward requires a finite scalar") {
    Tape<double> tape;
    auto v = tape.param(Tensor<double>({2}));
    REQUIRE_THROWS_AS(tape.backward(v), std::invalid_argument);
    Tensor<double> nan_t({1});
    nan_t[0] = std::nan("");
    auto bad = tape.leaf(nan_t);
    REQUIRE_THROWS_AS(tape.backward(bad), std::runtime_error);
}

TEST_CASE("composed graph gradient through conv-relu-pool-resize chain") {
    Rng rng = make_rng(22);
    Tensor<double> x = random_tensor({2, 4, 4}, rng);
    Tensor<double> w = random_tensor({2, 2, 3, 3}, rng);
    Tensor<double> b = random_tensor({2}, rng);
    check_grad_all(x, [&](Tape<double>& t, Tape<double>::Var xv) {
        auto h = t.avgpool2(t.relu(t.conv2d(xv, t.leaf(w), t.leaf(b))));
        return t.resize_bilinear(h, 4, 4);
    }, rng, 1e-6);
}
