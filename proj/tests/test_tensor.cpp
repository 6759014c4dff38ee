#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>

#include "vlalab/rng.hpp"
#include "vlalab/tensor.hpp"

using namespace vlalab;

namespace {

Tensor rnd_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.values) v = rng.uniform(lo, hi);
    return t;
}

bool bits_equal(double a, double b) {
    return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

} // namespace

TEST_CASE("softmax_masked symmetric row") {
    Tape t(false);
    Tensor x = Tensor::row({0.0, 0.0});
    Tensor m = Tensor::row({0.0, 0.0});
    Tensor y = t.softmax_masked(x, m);
    CHECK(y.values[0] == Catch::Approx(0.5));
    CHECK(y.values[1] == Catch::Approx(0.5));
}

TEST_CASE("softmax_masked blocked entries get exactly zero") {
    Tape t(false);
    Tensor x = Tensor::row({5.0, -2.0, 1.0});
    Tensor m = Tensor::row({0.0, kMaskBlocked, 0.0});
    Tensor y = t.softmax_masked(x, m);
    CHECK(y.values[1] == 0.0);
    CHECK(y.values[0] + y.values[2] == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("softmax_masked rejects fully blocked row") {
    Tape t(false);
    Tensor x = Tensor::row({0.0, 0.0});
    Tensor m = Tensor::row({kMaskBlocked, kMaskBlocked});
    CHECK_THROWS_AS(t.softmax_masked(x, m), ShapeError);
}

TEST_CASE("matmul identity") {
    Rng rng(42);
    Tape t(false);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Tensor x = rnd_tensor(rng, {3, 3});
    Tensor y = t.matmul(eye, x);
    for (std::size_t i = 0; i < x.values.size(); ++i) CHECK(y.values[i] == x.values[i]);
}

TEST_CASE("matmul shape mismatch reports dims") {
    Tape t(false);
    CHECK_THROWS_WITH(t.matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                      Catch::Matchers::ContainsSubstring("(2,3)"));
}

TEST_CASE("rmsnorm hand value") {
    Tape t(false);
    Tensor x = Tensor::row({3.0, 4.0});
    Tensor g = Tensor::vec({1.0, 1.0});
    Tensor y = t.rmsnorm(x, g, 1e-6);
    // rms = sqrt((9+16)/2 + 1e-6)
    const double rms = std::sqrt(12.5 + 1e-6);
    CHECK(y.values[0] == Catch::Approx(3.0 / rms).epsilon(1e-12));
    CHECK(y.values[1] == Catch::Approx(4.0 / rms).epsilon(1e-12));
    CHECK(y.values[0] == Catch::Approx(0.8485).margin(5e-5));
    CHECK(y.values[1] == Catch::Approx(1.1314).margin(5e-5));
}

TEST_CASE("backward d(x*x)/dx at 3") {
    Tape t;
    Tensor x = t.leaf(Tensor::vec({3.0}));
    Tensor loss = t.mean(t.mul(x, x));
    t.backward(loss);
    auto g = t.grad(x);
    REQUIRE(g.size() == 1);
    CHECK(g[0] == Catch::Approx(6.0));
}

TEST_CASE("backward mse(y,y) gives zero grads") {
    Rng rng(7);
    Tape t;
    Tensor y = t.leaf(rnd_tensor(rng, {4, 3}));
    Tensor loss = t.mse(y, y);
    t.backward(loss);
    CHECK(loss.scalar() == 0.0);
    for (double g : t.grad(y)) CHECK(g == 0.0);
}

TEST_CASE("cross_entropy gradient is softmax minus onehot") {
    Tape t;
    Tensor logits = t.leaf(Tensor::vec({1.0, 2.0, 3.0}));
    Tensor loss = t.cross_entropy(logits, 2);
    t.backward(loss);
    auto g = t.grad(logits);
    REQUIRE(g.size() == 3);
    // softmax([1,2,3]) computed independently
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double z = e1 + e2 + e3;
    CHECK(g[0] == Catch::Approx(e1 / z).epsilon(1e-10));
    CHECK(g[1] == Catch::Approx(e2 / z).epsilon(1e-10));
    CHECK(g[2] == Catch::Approx(e3 / z - 1.0).epsilon(1e-10));
    CHECK(g[0] == Catch::Approx(0.0900).margin(5e-5));
    CHECK(g[1] == Catch::Approx(0.2447).margin(5e-5));
    CHECK(g[2] == Catch::Approx(-0.3348).margin(5e-5));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape t;
    Tensor x = t.leaf(Tensor::vec({1.0, 2.0}));
    Tensor y = t.mul(x, x);
    CHECK_THROWS_AS(t.backward(y), ShapeError);
}

TEST_CASE("stop_gradient forward identity") {
    Tape t;
    Tensor x = t.leaf(Tensor::vec({1.5, -2.0}));
    Tensor y = t.stop_gradient(x);
    CHECK(y.values[0] == 1.5);
    CHECK(y.values[1] == -2.0);
}

TEST_CASE("stop_gradient blocks one factor of a product") {
    Tape t;
    Tensor x = t.leaf(Tensor::vec({2.0}));
    Tensor loss = t.mean(t.mul(t.stop_gradient(x), x));
    t.backward(loss);
    CHECK(loss.scalar() == Catch::Approx(4.0));
    auto g = t.grad(x);
    REQUIRE(g.size() == 1);
    CHECK(g[0] == Catch::Approx(2.0)); // only the non-sg path contributes
}

TEST_CASE("stop_gradient fully blocked sum") {
    Tape t;
    Tensor x = t.leaf(Tensor::vec({1.0, 2.0, 3.0}));
    Tensor loss = t.mean(t.stop_gradient(x));
    t.backward(loss);
    auto g = t.grad(x);
    CHECK(g.empty()); // unreachable maps to absent-or-zero
}

TEST_CASE("stop_gradient matches FD of the relaxed (frozen-factor) function") {
    Rng rng(11);
    Tensor x0 = rnd_tensor(rng, {4});
    // analytic gradient of mean(sg(x) * x)
    Tape t;
    Tensor x = t.leaf(x0);
    t.backward(t.mean(t.mul(t.stop_gradient(x), x)));
    auto g = t.grad(x);
    REQUIRE(g.size() == 4);
    // FD of the relaxed function y -> mean(c * y) with c frozen at x0
    for (int i = 0; i < 4; ++i) {
        auto relaxed = [&](const Tensor& y) {
            Tape tf(false);
            return tf.mean(tf.mul(x0, y)).scalar();
        };
        Tensor p = x0, m = x0;
        p.values[static_cast<std::size_t>(i)] += 1e-5;
        m.values[static_cast<std::size_t>(i)] -= 1e-5;
        const double fd = (relaxed(p) - relaxed(m)) / 2e-5;
        CHECK(g[static_cast<std::size_t>(i)] == Catch::Approx(fd).margin(1e-7));
    }
}

TEST_CASE("grad_check covers every primitive at random points") {
    Rng rng(1234);
    const double eps = 1e-5;
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor a = rnd_tensor(rng, {3, 4});
        const Tensor b = rnd_tensor(rng, {3, 4});
        const Tensor brow = rnd_tensor(rng, {1, 4});
        const Tensor w = rnd_tensor(rng, {4, 2});
        const Tensor gain = rnd_tensor(rng, {4}, 0.5, 1.5);
        const Tensor weights = rnd_tensor(rng, {3, 4});

        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.mul(t.add(x, b), weights)); },
                         a, eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.mul(t.add(a, x), weights)); },
                         brow, eps) < 1e-5); // broadcast operand
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.mul(t.sub(x, b), weights)); },
                         a, eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.mul(x, b)); }, a, eps) <
              1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.matmul(x, w)); }, a, eps) <
              1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.matmul(a, x)); }, w, eps) <
              1e-5);
        const Tensor cat_w = rnd_tensor(rng, {6, 4});
        CHECK(grad_check(
                  [&](Tape& t, const Tensor& x) { return t.mean(t.mul(t.concat_seq(x, b), cat_w)); },
                  a, eps) < 1e-5);
        CHECK(grad_check(
                  [&](Tape& t, const Tensor& x) { return t.mean(t.mul(t.concat_seq(b, x), cat_w)); },
                  a, eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.slice(x, 1, 3)); }, a, eps) <
              1e-5);
        const Tensor tr_w = rnd_tensor(rng, {4, 3});
        CHECK(grad_check(
                  [&](Tape& t, const Tensor& x) { return t.mean(t.mul(t.transpose(x), tr_w)); }, a,
                  eps) < 1e-5);
        CHECK(grad_check(
                  [&](Tape& t, const Tensor& x) {
                      return t.mean(t.mul(t.embed_lookup({2, 0, 2}, x), weights));
                  },
                  a, eps) < 1e-5);
        Tensor mask = Tensor::zeros({3, 4});
        mask.at(0, 2) = kMaskBlocked;
        mask.at(2, 0) = kMaskBlocked;
        CHECK(grad_check(
                  [&](Tape& t, const Tensor& x) {
                      return t.mean(t.mul(t.softmax_masked(x, mask), weights));
                  },
                  a, eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.rmsnorm(x, gain)); }, a,
                         eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.rmsnorm(a, x)); }, gain,
                         eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.silu(x)); }, a, eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mean(t.scale(x, -2.7)); }, a, eps) <
              1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mse(x, b); }, a, eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.mse(a, x); }, b, eps) < 1e-5);
        CHECK(grad_check([&](Tape& t, const Tensor& x) { return t.cross_entropy(x, {1, 3, 0}); }, a,
                         eps) < 1e-5);
    }
}

TEST_CASE("grad_check of sum of squares") {
    Rng rng(5);
    Tensor x = rnd_tensor(rng, {8});
    const double err =
        grad_check([](Tape& t, const Tensor& v) { return t.scale(t.mean(t.mul(v, v)), 8.0); }, x, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check of cross_entropy after softmax_masked") {
    Rng rng(6);
    Tensor x = rnd_tensor(rng, {2, 5});
    Tensor mask = Tensor::zeros({2, 5});
    mask.at(0, 4) = kMaskBlocked;
    const double err = grad_check(
        [&](Tape& t, const Tensor& v) {
            return t.cross_entropy(t.softmax_masked(v, mask), {1, 2});
        },
        x, 1e-5);
    CHECK(err < 1e-5);
}

TEST_CASE("grad_check rejects bad eps and non-scalar f") {
    Tensor x = Tensor::vec({1.0});
    auto f = [](Tape& t, const Tensor& v) { return t.mean(v); };
    CHECK_THROWS_AS(grad_check(f, x, 1e-8), ShapeError);
    CHECK_THROWS_AS(grad_check(f, x, 1e-2), ShapeError);
    auto vecf = [](Tape& t, const Tensor& v) { return t.mul(v, v); };
    CHECK_THROWS_AS(grad_check(vecf, Tensor::vec({1.0, 2.0}), 1e-5), ShapeError);
}

TEST_CASE("stop_gradient equals differentiating with the subtree constant") {
    // On several random graphs: grad of f(x, sg(h(x))) must match grad of
    // x -> f(x, c) with c frozen at h(x).
    Rng rng(77);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x0 = rnd_tensor(rng, {3, 3});
        Tensor w = rnd_tensor(rng, {3, 3});
        auto h = [&](Tape& t, const Tensor& x) { return t.silu(t.matmul(x, w)); };
        auto f = [&](Tape& t, const Tensor& x, const Tensor& c) {
            return t.mean(t.mul(t.add(x, c), t.sub(x, c)));
        };
        Tape t1;
        Tensor x1 = t1.leaf(x0);
        t1.backward(f(t1, x1, t1.stop_gradient(h(t1, x1))));
        auto g1 = t1.grad(x1);

        Tape tc(false);
        Tensor frozen = h(tc, x0);
        Tape t2;
        Tensor x2 = t2.leaf(x0);
        t2.backward(f(t2, x2, frozen));
        auto g2 = t2.grad(x2);

        REQUIRE(g1.size() == g2.size());
        for (std::size_t i = 0; i < g1.size(); ++i)
            CHECK(g1[i] == Catch::Approx(g2[i]).margin(1e-12));
    }
}

TEST_CASE("concat_seq then slice at the seam recovers both operands") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const int n1 = rng.uniform_int(4); // zero rows allowed
        const int n2 = 1 + rng.uniform_int(4);
        const int d = 1 + rng.uniform_int(5);
        Tensor a = rnd_tensor(rng, {n1, d});
        Tensor b = rnd_tensor(rng, {n2, d});
        Tape t(false);
        Tensor c = t.concat_seq(a, b);
        Tensor a2 = t.slice(c, 0, n1);
        Tensor b2 = t.slice(c, n1, n1 + n2);
        REQUIRE(a2.shape == a.shape);
        REQUIRE(b2.shape == b.shape);
        for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(bits_equal(a2.values[i], a.values[i]));
        for (std::size_t i = 0; i < b.values.size(); ++i) CHECK(bits_equal(b2.values[i], b.values[i]));
    }
}

TEST_CASE("identical seeds produce bit-identical tapes losses and gradients") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tape t;
        Tensor x = t.leaf(rnd_tensor(rng, {4, 4}));
        Tensor w = t.leaf(rnd_tensor(rng, {4, 4}));
        Tensor y = t.silu(t.matmul(x, w));
        Tensor loss = t.mse(y, rnd_tensor(rng, {4, 4}));
        t.backward(loss);
        std::vector<OpKind> kinds;
        for (std::size_t i = 0; i < t.size(); ++i) kinds.push_back(t.kind_of(static_cast<int>(i)));
        auto gx = t.grad(x);
        auto gw = t.grad(w);
        return std::tuple{loss.scalar(), std::vector<double>(gx.begin(), gx.end()),
                          std::vector<double>(gw.begin(), gw.end()), kinds};
    };
    auto [l1, gx1, gw1, k1] = run(314);
    auto [l2, gx2, gw2, k2] = run(314);
    CHECK(bits_equal(l1, l2));
    REQUIRE(k1 == k2);
    REQUIRE(gx1.size() == gx2.size());
    for (std::size_t i = 0; i < gx1.size(); ++i) CHECK(bits_equal(gx1[i], gx2[i]));
    for (std::size_t i = 0; i < gw1.size(); ++i) CHECK(bits_equal(gw1[i], gw2[i]));
}

TEST_CASE("finite outputs on finite inputs across primitives") {
    Rng rng(2024);
    Tape t(false);
    Tensor a = rnd_tensor(rng, {5, 6}, -50.0, 50.0);
    Tensor gain = rnd_tensor(rng, {6}, -2.0, 2.0);
    Tensor mask = Tensor::zeros({5, 6});
    mask.at(1, 1) = kMaskBlocked;
    for (const Tensor& out :
         {t.softmax_masked(a, mask), t.rmsnorm(a, gain), t.silu(a), t.scale(a, 3.0)})
        for (double v : out.values) CHECK(std::isfinite(v));
}

TEST_CASE("reshape shares the tape node") {
    Tape t;
    Tensor x = t.leaf(Tensor::vec({1.0, 2.0, 3.0, 4.0}));
    Tensor m = reshape(x, {2, 2});
    Tensor loss = t.mean(t.matmul(m, m));
    t.backward(loss);
    CHECK(t.grad(x).size() == 4);
    CHECK_THROWS_AS(reshape(x, {3, 2}), ShapeError);
}

TEST_CASE("parameter binding exposes trainable params only") {
    Parameter w{"w", Tensor::vec({1.0, 2.0}), true};
    Parameter frozen{"f", Tensor::vec({3.0, 4.0}), false};
    std::vector<Parameter*> ps{&w, &frozen};
    Tape t;
    {
        ParamBinding bind(t, ps);
        CHECK(w.tensor.node >= 0);
        CHECK(frozen.tensor.node == -1);
        Tensor loss = t.mean(t.mul(t.add(w.tensor, frozen.tensor), w.tensor));
        t.backward(loss);
        CHECK(t.grad(w.tensor).size() == 2);
        CHECK(t.grad(frozen.tensor).empty());
    }
    CHECK(w.tensor.node == -1);
}
