#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include "mmdfer/autodiff.hpp"
#include "mmdfer/rng.hpp"
#include "mmdfer/tensor.hpp"

using namespace mmdfer;

namespace {

Tensor randn(std::vector<int64_t> shape, uint64_t seed, double stddev = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    Rng rng(seed);
    rng.fill_normal(t, stddev);
    return t;
}

// Projects any tensor to a scalar through a fixed non-trainable weight, so
// every op can be checked against central differences of a scalar function.
Val project(Tape& tp, Val x, uint64_t seed = 999) {
    const int64_t n = tp.value(x).numel();
    Val flat = tp.reshape(x, {1, n});
    Val w = tp.leaf(randn({n, 1}, seed, 0.7), false);
    return tp.reshape(tp.linear(flat, w), {1});
}

using Builder = std::function<Val(Tape&, const std::vector<Val>&)>;

void check_grads(const std::vector<Tensor>& inputs, const Builder& build, double tol = 1e-6) {
    Tape tape;
    std::vector<Val> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    Val root = build(tape, leaves);
    REQUIRE(tape.value(root).numel() == 1);
    tape.backward(root);
    std::vector<Tensor> analytic;
    for (Val v : leaves) analytic.push_back(tape.grad(v));

    const double h = 1e-6;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (size_t k = 0; k < inputs[i].data.size(); ++k) {
            auto eval = [&](double delta) {
                std::vector<Tensor> pert = inputs;
                pert[i].data[k] += delta;
                Tape t2;
                std::vector<Val> l2;
                for (const auto& t : pert) l2.push_back(t2.leaf(t, false));
                return t2.value(build(t2, l2)).data[0];
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            const double an = analytic[i].data[k];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            if (err >= tol) {
                std::ostringstream msg;
                msg << "input " << i << " elem " << k << " fd=" << fd << " analytic=" << an;
                FAIL_CHECK(msg.str());
            }
        }
    }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    std::vector<Tensor> in = {randn({3, 4}, 1), randn({3, 4}, 2)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) {
        Val s = tp.add(l[0], l[1]);
        Val d = tp.sub(s, l[1]);
        Val m = tp.mul(d, l[1]);
        Val sc = tp.scale(m, -1.7);
        return project(tp, sc);
    });
}

TEST_CASE("add_n matches finite differences") {
    std::vector<Tensor> in = {randn({2, 3}, 1), randn({2, 3}, 2), randn({2, 3}, 3)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) {
        return project(tp, tp.add_n({l[0], l[1], l[2]}));
    });
}

TEST_CASE("add_bias broadcasts over leading dims") {
    std::vector<Tensor> in = {randn({2, 3, 4}, 1), randn({4}, 2)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) {
        return project(tp, tp.add_bias(l[0], l[1]));
    });
}

TEST_CASE("linear value matches a hand loop") {
    Tensor x = randn({2, 3}, 5);
    Tensor w = randn({3, 4}, 6);
    Tape tp;
    Val y = tp.linear(tp.leaf(x), tp.leaf(w));
    REQUIRE(tp.value(y).shape == std::vector<int64_t>{2, 4});
    for (int64_t r = 0; r < 2; ++r)
        for (int64_t c = 0; c < 4; ++c) {
            double acc = 0.0;
            for (int64_t k = 0; k < 3; ++k) acc += x.at({r, k}) * w.at({k, c});
            CHECK(tp.value(y).at({r, c}) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("linear gradients match finite differences") {
    std::vector<Tensor> in = {randn({2, 5, 3}, 1), randn({3, 4}, 2)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) {
        return project(tp, tp.linear(l[0], l[1]));
    });
}

TEST_CASE("bmm gradients match finite differences") {
    std::vector<Tensor> in = {randn({2, 3, 4}, 1), randn({2, 4, 5}, 2)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) {
        return project(tp, tp.bmm(l[0], l[1]));
    });
    std::vector<Tensor> in_t = {randn({2, 3, 4}, 3), randn({2, 5, 4}, 4)};
    check_grads(in_t, [](Tape& tp, const std::vector<Val>& l) {
        return project(tp, tp.bmm(l[0], l[1], true));
    });
}

TEST_CASE("permute and reshape round trip values and gradients") {
    Tensor x = randn({2, 3, 4}, 7);
    Tape tp;
    Val v = tp.leaf(x);
    Val p = tp.permute(v, {2, 0, 1});
    REQUIRE(tp.value(p).shape == std::vector<int64_t>{4, 2, 3});
    CHECK(tp.value(p).at({3, 1, 2}) == x.at({1, 2, 3}));
    Val back = tp.permute(p, {1, 2, 0});
    for (size_t k = 0; k < x.data.size(); ++k) CHECK(tp.value(back).data[k] == x.data[k]);

    std::vector<Tensor> in = {randn({2, 3, 4}, 8)};
    check_grads(in, [](Tape& tp2, const std::vector<Val>& l) {
        Val p2 = tp2.permute(l[0], {1, 2, 0});
        Val r2 = tp2.reshape(p2, {12, 2});
        return project(tp2, r2);
    });
}

TEST_CASE("gelu matches finite differences and fixed points") {
    Tape tp;
    Val z = tp.gelu(tp.leaf(Tensor::zeros({1})));
    CHECK(tp.value(z).data[0] == 0.0);
    Val big = tp.gelu(tp.leaf(Tensor::full({1}, 10.0)));
    CHECK(tp.value(big).data[0] == doctest::Approx(10.0).epsilon(1e-12));

    std::vector<Tensor> in = {randn({3, 3}, 9)};
    check_grads(in, [](Tape& tp2, const std::vector<Val>& l) { return project(tp2, tp2.gelu(l[0])); });
}

TEST_CASE("layer_norm normalizes rows and matches finite differences") {
    Tensor x = randn({4, 8}, 10, 3.0);
    Tape tp;
    Val y = tp.layer_norm(tp.leaf(x), tp.leaf(Tensor::full({8}, 1.0)), tp.leaf(Tensor::zeros({8})));
    for (int64_t r = 0; r < 4; ++r) {
        double mean = 0.0, var = 0.0;
        for (int64_t c = 0; c < 8; ++c) mean += tp.value(y).at({r, c});
        mean /= 8.0;
        for (int64_t c = 0; c < 8; ++c) {
            double t = tp.value(y).at({r, c}) - mean;
            var += t * t;
        }
        var /= 8.0;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }

    std::vector<Tensor> in = {randn({3, 6}, 11), randn({6}, 12, 0.5), randn({6}, 13, 0.5)};
    check_grads(in, [](Tape& tp2, const std::vector<Val>& l) {
        return project(tp2, tp2.layer_norm(l[0], l[1], l[2]));
    });
}

TEST_CASE("softmax rows sum to one and gradients match") {
    Tape tp;
    Val u = tp.softmax_last(tp.leaf(Tensor::zeros({2, 5})));
    for (size_t k = 0; k < 10; ++k) CHECK(tp.value(u).data[k] == doctest::Approx(0.2).epsilon(1e-12));

    std::vector<Tensor> in = {randn({2, 3, 4}, 14)};
    check_grads(in, [](Tape& tp2, const std::vector<Val>& l) {
        return project(tp2, tp2.softmax_last(l[0]));
    });
}

TEST_CASE("masked softmax zeroes masked columns and is pad invariant") {
    Tensor mask = Tensor::zeros({3, 3});
    mask.at({0, 2}) = -1e9;
    mask.at({1, 2}) = -1e9;
    mask.at({2, 2}) = -1e9;

    Tensor a = randn({2, 3, 3}, 15);
    Tensor b = a;
    b.at({0, 0, 2}) = 55.0;
    b.at({1, 2, 2}) = -3.0;

    Tape tp;
    Val ya = tp.softmax_last_masked(tp.leaf(a), mask);
    Val yb = tp.softmax_last_masked(tp.leaf(b), mask);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t r = 0; r < 3; ++r) {
            CHECK(tp.value(ya).at({i, r, 2}) == 0.0);
            for (int64_t c = 0; c < 3; ++c)
                CHECK(tp.value(ya).at({i, r, c}) == tp.value(yb).at({i, r, c}));
        }

    std::vector<Tensor> in = {randn({2, 3, 3}, 16)};
    check_grads(in, [&](Tape& tp2, const std::vector<Val>& l) {
        return project(tp2, tp2.softmax_last_masked(l[0], mask));
    });
}

TEST_CASE("reduction and selection ops match finite differences") {
    std::vector<Tensor> in = {randn({5, 3}, 17)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) { return project(tp, tp.mean_rows(l[0])); });
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) { return project(tp, tp.row_select(l[0], 3)); });
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) { return project(tp, tp.slice_rows(l[0], 1, 3)); });
}

TEST_CASE("gather accumulates gradients for repeated ids") {
    Tensor table = randn({4, 3}, 18);
    Tape tp;
    Val t = tp.leaf(table, true);
    Val g = tp.gather_rows(t, {2, 2, 0});
    tp.backward(project(tp, g));
    const Tensor& gt = tp.grad(t);
    for (int64_t c = 0; c < 3; ++c) CHECK(gt.at({1, c}) == 0.0);
    CHECK(gt.at({2, 0}) != 0.0);

    std::vector<Tensor> in = {table};
    check_grads(in, [](Tape& tp2, const std::vector<Val>& l) {
        return project(tp2, tp2.gather_rows(l[0], {2, 2, 0, 3}));
    });
}

TEST_CASE("cosine fixed values and gradients") {
    Tape tp;
    Tensor e0 = Tensor::zeros({3});
    e0.data[0] = 2.0;
    Tensor e1 = Tensor::zeros({3});
    e1.data[1] = 5.0;
    CHECK(tp.value(tp.cosine(tp.leaf(e0), tp.leaf(e1))).data[0] == 0.0);
    CHECK(tp.value(tp.cosine(tp.leaf(e0), tp.leaf(e0))).data[0] == doctest::Approx(1.0).epsilon(1e-12));
    Tensor neg = e0;
    for (double& v : neg.data) v = -v;
    CHECK(tp.value(tp.cosine(tp.leaf(e0), tp.leaf(neg))).data[0] == doctest::Approx(-1.0).epsilon(1e-12));

    std::vector<Tensor> in = {randn({6}, 19), randn({6}, 20)};
    check_grads(in, [](Tape& tp2, const std::vector<Val>& l) { return tp2.cosine(l[0], l[1]); });
}

TEST_CASE("stack and max ops match finite differences") {
    std::vector<Tensor> in = {randn({1}, 21), randn({1}, 22), randn({1}, 23)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) {
        Val s = tp.stack_scalars({l[0], l[1], l[2]});
        return project(tp, tp.softmax_last(s));
    });
    std::vector<Tensor> in2 = {randn({5}, 24)};
    check_grads(in2, [](Tape& tp, const std::vector<Val>& l) { return tp.max_entries(l[0]); });
}

TEST_CASE("cross entropy value and gradients") {
    Tape tp;
    Val ce = tp.cross_entropy_logits(tp.leaf(Tensor::zeros({7})), 3);
    CHECK(tp.value(ce).data[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));

    std::vector<Tensor> in = {randn({5}, 25)};
    check_grads(in, [](Tape& tp2, const std::vector<Val>& l) {
        return tp2.cross_entropy_logits(l[0], 2);
    });
}

TEST_CASE("weighted_sum routes gradients to weights and inputs") {
    std::vector<Tensor> in = {randn({3}, 26), randn({4}, 27), randn({4}, 28), randn({4}, 29)};
    check_grads(in, [](Tape& tp, const std::vector<Val>& l) {
        Val w = tp.softmax_last(l[0]);
        return project(tp, tp.weighted_sum(w, {l[1], l[2], l[3]}));
    });
}

TEST_CASE("frozen leaves never receive gradients") {
    Tape tp;
    Val x = tp.leaf(randn({2, 3}, 30), true);
    Val w = tp.leaf(randn({3, 3}, 31), false);
    Val y = tp.linear(x, w);
    CHECK(tp.needs_grad(y));
    tp.backward(project(tp, y));
    CHECK(tp.grad(w).max_abs() == 0.0);
    CHECK(tp.grad(x).max_abs() > 0.0);

    Val a = tp.leaf(randn({2}, 32), false);
    Val b = tp.leaf(randn({2}, 33), false);
    CHECK(!tp.needs_grad(tp.add(a, b)));
}

TEST_CASE("two chained tapes reproduce the single tape gradient") {
    Tensor x = randn({4, 4}, 34);
    Tensor w1 = randn({4, 3}, 35);
    Tensor w2 = randn({3, 2}, 36);

    Tape one;
    Val ox = one.leaf(x, true);
    Val oy = one.linear(one.gelu(one.linear(ox, one.leaf(w1, true))), one.leaf(w2, true));
    one.backward(project(one, oy, 77));

    Tape first;
    Val fx = first.leaf(x, true);
    Val fw1 = first.leaf(w1, true);
    Val fh = first.gelu(first.linear(fx, fw1));

    Tape second;
    Val sh = second.leaf(first.value(fh), true);
    Val sy = second.linear(sh, second.leaf(w2, true));
    second.backward(project(second, sy, 77));

    first.seed(fh, second.grad(sh));
    first.run_backward();

    Tape oneb;
    Val ox1 = oneb.leaf(x, true);
    Val ow1 = oneb.leaf(w1, true);
    oneb.backward(project(oneb, oneb.linear(oneb.gelu(oneb.linear(ox1, ow1)), oneb.leaf(w2, true)), 77));

    for (size_t k = 0; k < x.data.size(); ++k)
        CHECK(first.grad(fx).data[k] == doctest::Approx(oneb.grad(ox1).data[k]).epsilon(1e-12));
    for (size_t k = 0; k < w1.data.size(); ++k)
        CHECK(first.grad(fw1).data[k] == doctest::Approx(oneb.grad(ow1).data[k]).epsilon(1e-12));
}

TEST_CASE("seeding twice accumulates before a single sweep") {
    Tensor x = randn({3}, 40);
    Tape tp;
    Val v = tp.leaf(x, true);
    Val y = tp.scale(v, 2.0);
    Tensor s = Tensor::full({3}, 1.0);
    tp.seed(y, s);
    tp.seed(y, s);
    tp.run_backward();
    for (int k = 0; k < 3; ++k) CHECK(tp.grad(v).data[static_cast<size_t>(k)] == doctest::Approx(4.0));
}

TEST_CASE("shape errors are reported") {
    Tape tp;
    Val a = tp.leaf(Tensor::zeros({2, 3}));
    Val b = tp.leaf(Tensor::zeros({3, 2}));
    CHECK_THROWS_AS(tp.add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(tp.linear(a, a), std::invalid_argument);
    CHECK_THROWS_AS(tp.reshape(a, {4, 4}), std::invalid_argument);
    CHECK_THROWS_AS(tp.cross_entropy_logits(tp.leaf(Tensor::zeros({3})), 5), std::invalid_argument);
}
