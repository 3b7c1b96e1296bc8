#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "modmoe/ops.hpp"
#include "modmoe/optim.hpp"
#include "modmoe/rng.hpp"
#include "modmoe/tensor.hpp"
#include "testutil.hpp"

using namespace modmoe;
using testutil::gradcheck;
using testutil::rand_weights;

namespace {

TensorD rin(Shape s, Rng& rng, bool requires_grad = true) { return TensorD::randn(std::move(s), rng, 1.0, requires_grad); }

constexpr int kInstances = 12;
constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("rng determinism and substreams") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    auto f1 = c.fork("tokenizer");
    auto f2 = c.fork("tokenizer");
    auto f3 = c.fork("router");
    CHECK(f1.next_u64() == f2.next_u64());
    Rng f1b = Rng(42).fork("tokenizer");
    Rng f3b = Rng(42).fork("router");
    const uint64_t first_f3 = f3.next_u64();
    CHECK(first_f3 != f1b.next_u64());
    CHECK(first_f3 == f3b.next_u64());

    std::vector<int> v1{1, 2, 3, 4, 5, 6, 7}, v2{1, 2, 3, 4, 5, 6, 7};
    Rng s1(7), s2(7);
    s1.shuffle(v1);
    s2.shuffle(v2);
    CHECK(v1 == v2);
}

TEST_CASE("rng lemire bound") {
    Rng r(3);
    for (int i = 0; i < 1000; ++i) {
        CHECK(r.below(17) < 17u);
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("backward requires scalar loss") {
    auto t = TensorF::filled({2, 3}, 1.0f, true);
    CHECK_THROWS_WITH(backward(t), doctest::Contains("must be scalar"));
}

TEST_CASE("grad accumulation across backward calls") {
    Rng rng(11);
    auto x = rin({3, 4}, rng);
    auto w = rand_weights(12, rng);
    auto loss1 = dot_const(x, w);
    backward(loss1);
    auto g1 = x.grad();
    auto loss2 = dot_const(x, w);
    backward(loss2);
    for (size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
}

TEST_CASE("no-grad mode builds no graph") {
    Rng rng(5);
    auto a = rin({2, 2}, rng);
    auto b = rin({2, 2}, rng);
    NoGradGuard guard;
    auto c = matmul(a, b);
    CHECK_FALSE(c.requires_grad());
    CHECK(c.node()->parents.empty());
}

TEST_CASE("grad: matmul") {
    Rng rng(101);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 1 + static_cast<int>(rng.below(4)), k = 1 + static_cast<int>(rng.below(4));
        const int n = 1 + static_cast<int>(rng.below(4));
        auto a = rin({m, k}, rng);
        auto b = rin({k, n}, rng);
        auto w = rand_weights(static_cast<size_t>(m) * n, rng);
        std::vector<TensorD> inputs{a, b};
        CHECK(gradcheck(inputs, [&] { return dot_const(matmul(a, b), w); }) < kTol);
    }
}

TEST_CASE("grad: matmul_nt") {
    Rng rng(102);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 1 + static_cast<int>(rng.below(4)), k = 1 + static_cast<int>(rng.below(4));
        const int n = 1 + static_cast<int>(rng.below(4));
        auto a = rin({m, k}, rng);
        auto b = rin({n, k}, rng);
        auto w = rand_weights(static_cast<size_t>(m) * n, rng);
        std::vector<TensorD> inputs{a, b};
        CHECK(gradcheck(inputs, [&] { return dot_const(matmul_nt(a, b), w); }) < kTol);
    }
}

TEST_CASE("grad: add and scale") {
    Rng rng(103);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 1 + static_cast<int>(rng.below(5)), n = 1 + static_cast<int>(rng.below(5));
        auto a = rin({m, n}, rng);
        auto b = rin({m, n}, rng);
        const double s = rng.uniform() * 3.0 - 1.5;
        auto w = rand_weights(static_cast<size_t>(m) * n, rng);
        std::vector<TensorD> inputs{a, b};
        CHECK(gradcheck(inputs, [&] { return dot_const(scale(add(a, b), s), w); }) < kTol);
    }
}

TEST_CASE("grad: add_rows broadcast") {
    Rng rng(104);
    for (int it = 0; it < kInstances; ++it) {
        const int p = 1 + static_cast<int>(rng.below(3));
        const int reps = 1 + static_cast<int>(rng.below(3));
        const int n = 1 + static_cast<int>(rng.below(5));
        auto a = rin({p * reps, n}, rng);
        auto b = rin({p, n}, rng);
        auto w = rand_weights(static_cast<size_t>(p) * reps * n, rng);
        std::vector<TensorD> inputs{a, b};
        CHECK(gradcheck(inputs, [&] { return dot_const(add_rows(a, b), w); }) < kTol);
    }
}

TEST_CASE("grad: sum and mean") {
    Rng rng(105);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 1 + static_cast<int>(rng.below(5)), n = 1 + static_cast<int>(rng.below(5));
        auto a = rin({m, n}, rng);
        std::vector<TensorD> inputs{a};
        CHECK(gradcheck(inputs, [&] { return sum(a); }) < kTol);
        CHECK(gradcheck(inputs, [&] { return mean(a); }) < kTol);
    }
}

TEST_CASE("grad: embedding_lookup") {
    Rng rng(106);
    for (int it = 0; it < kInstances; ++it) {
        const int v = 3 + static_cast<int>(rng.below(6)), d = 1 + static_cast<int>(rng.below(5));
        const int n = 1 + static_cast<int>(rng.below(6));
        auto table = rin({v, d}, rng);
        std::vector<int32_t> ids(n);
        for (auto& id : ids) id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(v)));
        auto w = rand_weights(static_cast<size_t>(n) * d, rng);
        std::vector<TensorD> inputs{table};
        CHECK(gradcheck(inputs, [&] { return dot_const(embedding_lookup(table, ids), w); }) < kTol);
    }
}

TEST_CASE("grad: slice_rows and slice_cols") {
    Rng rng(107);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 2 + static_cast<int>(rng.below(4)), n = 2 + static_cast<int>(rng.below(4));
        auto a = rin({m, n}, rng);
        const int r0 = static_cast<int>(rng.below(static_cast<uint64_t>(m)));
        const int rc = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(m - r0)));
        const int c0 = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
        const int cc = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(n - c0)));
        auto wr = rand_weights(static_cast<size_t>(rc) * n, rng);
        auto wc = rand_weights(static_cast<size_t>(m) * cc, rng);
        std::vector<TensorD> inputs{a};
        CHECK(gradcheck(inputs, [&] { return dot_const(slice_rows(a, r0, rc), wr); }) < kTol);
        CHECK(gradcheck(inputs, [&] { return dot_const(slice_cols(a, c0, cc), wc); }) < kTol);
    }
}

TEST_CASE("grad: softmax") {
    Rng rng(108);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 1 + static_cast<int>(rng.below(4)), n = 2 + static_cast<int>(rng.below(5));
        auto a = rin({m, n}, rng);
        auto w = rand_weights(static_cast<size_t>(m) * n, rng);
        std::vector<TensorD> inputs{a};
        CHECK(gradcheck(inputs, [&] { return dot_const(softmax(a), w); }) < kTol);
    }
}

TEST_CASE("grad: layer_norm") {
    Rng rng(109);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 1 + static_cast<int>(rng.below(4)), n = 2 + static_cast<int>(rng.below(6));
        auto x = rin({m, n}, rng);
        auto gamma = rin({n}, rng);
        auto beta = rin({n}, rng);
        auto w = rand_weights(static_cast<size_t>(m) * n, rng);
        std::vector<TensorD> inputs{x, gamma, beta};
        CHECK(gradcheck(inputs, [&] { return dot_const(layer_norm(x, gamma, beta), w); }) < kTol);
    }
}

TEST_CASE("grad: gelu") {
    Rng rng(110);
    for (int it = 0; it < kInstances; ++it) {
        const int m = 1 + static_cast<int>(rng.below(4)), n = 1 + static_cast<int>(rng.below(6));
        auto x = rin({m, n}, rng);
        auto w = rand_weights(static_cast<size_t>(m) * n, rng);
        std::vector<TensorD> inputs{x};
        CHECK(gradcheck(inputs, [&] { return dot_const(gelu(x), w); }) < kTol);
    }
}

TEST_CASE("grad: causal attention scores through softmax") {
    Rng rng(111);
    for (int it = 0; it < kInstances; ++it) {
        const int batch = 1 + static_cast<int>(rng.below(2));
        const int heads = 1 + static_cast<int>(rng.below(2));
        const int time = 2 + static_cast<int>(rng.below(3));
        const int dh = 1 + static_cast<int>(rng.below(3));
        auto q = rin({batch * time, heads * dh}, rng);
        auto k = rin({batch * time, heads * dh}, rng);
        auto w = rand_weights(static_cast<size_t>(batch) * heads * time * time, rng);
        std::vector<TensorD> inputs{q, k};
        CHECK(gradcheck(inputs, [&] {
                  return dot_const(softmax(causal_attention_scores(q, k, batch, time, heads)), w);
              }) < kTol);
    }
}

TEST_CASE("grad: attention_apply") {
    Rng rng(112);
    for (int it = 0; it < kInstances; ++it) {
        const int batch = 1 + static_cast<int>(rng.below(2));
        const int heads = 1 + static_cast<int>(rng.below(2));
        const int time = 2 + static_cast<int>(rng.below(3));
        const int dh = 1 + static_cast<int>(rng.below(3));
        // row-stochastic causal probabilities as a direct differentiable input
        auto probs = TensorD::zeros({batch * heads * time, time}, true);
        for (int b = 0; b < batch; ++b)
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < time; ++i) {
                    double* row = probs.value().data() + static_cast<size_t>((b * heads + h) * time + i) * time;
                    double total = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        row[j] = 0.1 + rng.uniform();
                        total += row[j];
                    }
                    for (int j = 0; j <= i; ++j) row[j] /= total;
                }
        auto v = rin({batch * time, heads * dh}, rng);
        auto w = rand_weights(static_cast<size_t>(batch) * time * heads * dh, rng);
        std::vector<TensorD> inputs{probs, v};
        CHECK(gradcheck(inputs, [&] { return dot_const(attention_apply(probs, v, batch, time, heads), w); }) < kTol);
    }
}

TEST_CASE("grad: cross_entropy with masking") {
    Rng rng(113);
    for (int it = 0; it < kInstances; ++it) {
        const int n = 2 + static_cast<int>(rng.below(5)), v = 2 + static_cast<int>(rng.below(6));
        auto logits = rin({n, v}, rng);
        std::vector<int32_t> targets(n);
        for (auto& t : targets) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(v)));
        targets[static_cast<size_t>(rng.below(static_cast<uint64_t>(n - 1)))] = kIgnoreIndex;  // keep >= 1 live target
        std::vector<TensorD> inputs{logits};
        CHECK(gradcheck(inputs, [&] { return cross_entropy(logits, targets); }) < kTol);
    }
}

TEST_CASE("cross_entropy value matches a direct log-softmax oracle") {
    Rng rng(114);
    auto logits = rin({4, 5}, rng, false);
    std::vector<int32_t> targets{1, 4, kIgnoreIndex, 0};
    double want = 0.0;
    int live = 0;
    for (int r = 0; r < 4; ++r) {
        if (targets[r] == kIgnoreIndex) continue;
        const double* row = logits.value().data() + static_cast<size_t>(r) * 5;
        double mx = row[0];
        for (int j = 1; j < 5; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < 5; ++j) denom += std::exp(row[j] - mx);
        want += std::log(denom) + mx - row[targets[r]];
        ++live;
    }
    want /= live;
    CHECK(cross_entropy(logits, targets).item() == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS_WITH(cross_entropy(logits, std::vector<int32_t>{kIgnoreIndex, kIgnoreIndex, kIgnoreIndex, kIgnoreIndex}),
                      doctest::Contains("all positions masked"));
}

TEST_CASE("shape errors name the op") {
    Rng rng(115);
    auto a = rin({2, 3}, rng, false);
    auto b = rin({4, 5}, rng, false);
    CHECK_THROWS_WITH(matmul(a, b), doctest::Contains("matmul"));
    CHECK_THROWS_WITH(add(a, b), doctest::Contains("add"));
    std::vector<int32_t> bad{99};
    CHECK_THROWS_WITH(embedding_lookup(a, bad), doctest::Contains("out of range"));
}

TEST_CASE("forward is bit-deterministic") {
    Rng rng1(77), rng2(77);
    auto a1 = TensorF::randn({16, 16}, rng1, 1.0f, true);
    auto b1 = TensorF::randn({16, 16}, rng1, 1.0f, true);
    auto a2 = TensorF::randn({16, 16}, rng2, 1.0f, true);
    auto b2 = TensorF::randn({16, 16}, rng2, 1.0f, true);
    auto c1 = softmax(matmul(a1, b1));
    auto c2 = softmax(matmul(a2, b2));
    CHECK(c1.value() == c2.value());
    backward(sum(c1));
    backward(sum(c2));
    CHECK(a1.grad() == a2.grad());
}

TEST_CASE("clip_grad_norm scales the global norm") {
    auto p1 = TensorF::filled({2}, 0.0f, true);
    auto p2 = TensorF::filled({2}, 0.0f, true);
    p1.set_name("p1");
    p2.set_name("p2");
    p1.grad() = {3.0f, 0.0f};
    p2.grad() = {0.0f, 4.0f};
    std::vector<TensorF> params{p1, p2};
    const double norm = clip_grad_norm(params, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    double after = 0.0;
    for (const auto& p : params)
        for (float g : p.grad()) after += static_cast<double>(g) * g;
    CHECK(std::sqrt(after) == doctest::Approx(1.0).epsilon(1e-6));

    p1.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_WITH(clip_grad_norm(params, 1.0), doctest::Contains("p1"));
}

TEST_CASE("adamw matches a scalar reference trace") {
    // one parameter, constant gradient: update has a closed form per step
    auto p = TensorF::filled({1}, 1.0f, true);
    AdamWF::Options opt;
    opt.lr = 0.1;
    opt.beta1 = 0.9;
    opt.beta2 = 0.99;
    opt.eps = 1e-8;
    opt.weight_decay = 0.01;
    AdamWF optim({p}, opt);
    double w = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 5; ++t) {
        p.clear_grad();
        p.grad() = {2.0f};
        m = 0.9 * m + 0.1 * 2.0;
        v = 0.99 * v + 0.01 * 4.0;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.99, t));
        w -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8) + 0.1 * 0.01 * w;
        optim.step();
        CHECK(p.item() == doctest::Approx(w).epsilon(1e-5));
    }
}

TEST_CASE("adamw skips parameters with no gradient") {
    auto a = TensorF::filled({2}, 1.0f, true);
    auto b = TensorF::filled({2}, 1.0f, true);
    AdamWF optim({a, b});
    a.grad() = {1.0f, 1.0f};
    optim.step();
    CHECK(b.value() == std::vector<float>{1.0f, 1.0f});
    CHECK(a.value()[0] != 1.0f);
}
