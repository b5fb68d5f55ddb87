#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

#include "mmdfer/nn.hpp"

using namespace mmdfer;

namespace {

Tensor randn(std::vector<int64_t> shape, uint64_t seed, double stddev = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    Rng rng(seed);
    rng.fill_normal(t, stddev);
    return t;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// y = x W + b with plain loops, independent of the tape ops.
Tensor matmul_ref(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int64_t rows = x.shape[0], in = x.shape[1], out = w.shape[1];
    Tensor y = Tensor::zeros({rows, out});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < out; ++c) {
            double acc = b.data.empty() ? 0.0 : b.data[static_cast<size_t>(c)];
            for (int64_t k = 0; k < in; ++k) acc += x.at({r, k}) * w.at({k, c});
            y.at({r, c}) = acc;
        }
    return y;
}

Tensor layer_norm_ref(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const int64_t rows = x.shape[0], d = x.shape[1];
    Tensor y = Tensor::zeros(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        double mean = 0.0, var = 0.0;
        for (int64_t c = 0; c < d; ++c) mean += x.at({r, c});
        mean /= static_cast<double>(d);
        for (int64_t c = 0; c < d; ++c) var += (x.at({r, c}) - mean) * (x.at({r, c}) - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        for (int64_t c = 0; c < d; ++c)
            y.at({r, c}) = (x.at({r, c}) - mean) * rstd * gamma.data[static_cast<size_t>(c)] +
                           beta.data[static_cast<size_t>(c)];
    }
    return y;
}

// Finite-difference check of a scalar function of the store's parameters.
void check_param_grads(ParamStore& ps, const std::set<std::string>& trainable,
                       const std::function<Val(TapeBind&)>& build, double tol = 1e-4) {
    Tape tape;
    TapeBind bind(tape, ps, &trainable);
    Val root = build(bind);
    REQUIRE(tape.value(root).numel() == 1);
    tape.backward(root);
    std::map<std::string, Tensor> grads;
    bind.collect_grads(grads);

    const double h = 1e-5;
    for (const auto& name : trainable) {
        REQUIRE(grads.count(name) == 1);
        Tensor& p = ps.get(name);
        for (size_t k = 0; k < p.data.size(); ++k) {
            const double keep = p.data[k];
            auto eval = [&](double delta) {
                p.data[k] = keep + delta;
                Tape t2;
                TapeBind b2(t2, ps, nullptr);
                return t2.value(build(b2)).data[0];
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            p.data[k] = keep;
            const double an = grads.at(name).data[k];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            if (err >= tol) {
                std::ostringstream msg;
                msg << name << "[" << k << "] fd=" << fd << " analytic=" << an;
                FAIL_CHECK(msg.str());
            }
        }
    }
}

Val scalar_probe(Tape& tp, Val x, uint64_t seed) {
    const int64_t n = tp.value(x).numel();
    Val w = tp.leaf(randn({n, 1}, seed, 0.5), false);
    return tp.reshape(tp.linear(tp.reshape(x, {1, n}), w), {1});
}

}  // namespace

TEST_CASE("freshly initialized adapter is the identity") {
    ParamStore ps;
    Rng rng(3);
    init_adapter(ps, "a", 8, 2, rng);
    Tensor x = randn({4, 8}, 5);
    Tape tp;
    TapeBind bind(tp, ps, nullptr);
    Val y = adapter(bind, "a", tp.leaf(x));
    for (size_t k = 0; k < x.data.size(); ++k)
        CHECK(std::abs(tp.value(y).data[k] - x.data[k]) < 1e-12);

    Tape tp0;
    TapeBind bind0(tp0, ps, nullptr);
    Val z = adapter(bind0, "a", tp0.leaf(Tensor::zeros({2, 8})));
    CHECK(tp0.value(z).max_abs() == 0.0);
}

TEST_CASE("trained adapter matches a straight line re-implementation") {
    ParamStore ps;
    Rng rng(7);
    init_adapter(ps, "a", 8, 2, rng);
    Rng mut(11);
    mut.fill_normal(ps.get("a.up.w"), 0.3);
    mut.fill_normal(ps.get("a.up.b"), 0.1);
    mut.fill_normal(ps.get("a.down.b"), 0.1);

    Tensor x = randn({4, 8}, 13);
    Tape tp;
    TapeBind bind(tp, ps, nullptr);
    Val y = adapter(bind, "a", tp.leaf(x));

    Tensor h = matmul_ref(x, ps.get("a.down.w"), ps.get("a.down.b"));
    for (double& v : h.data) v = gelu_ref(v);
    Tensor up = matmul_ref(h, ps.get("a.up.w"), ps.get("a.up.b"));
    for (size_t k = 0; k < x.data.size(); ++k)
        CHECK(tp.value(y).data[k] == doctest::Approx(x.data[k] + up.data[k]).epsilon(1e-12));
}

TEST_CASE("adapter gradients pass finite differences") {
    ParamStore ps;
    Rng rng(17);
    init_adapter(ps, "a", 6, 2, rng);
    Rng mut(19);
    mut.fill_normal(ps.get("a.up.w"), 0.3);
    Tensor x = randn({3, 6}, 23);
    std::set<std::string> trainable{"a.down.w", "a.down.b", "a.up.w", "a.up.b"};
    check_param_grads(ps, trainable, [&](TapeBind& b) {
        Val y = adapter(b, "a", b.tape().leaf(x));
        return scalar_probe(b.tape(), y, 31);
    });
}

TEST_CASE("single position block matches a straight line re-implementation") {
    ParamStore ps;
    Rng rng(29);
    init_transformer_block(ps, "blk", 2, rng);
    Rng mut(31);
    for (const char* n : {"blk.attn.q.b", "blk.attn.k.b", "blk.attn.v.b", "blk.attn.o.b",
                          "blk.mlp.fc1.b", "blk.mlp.fc2.b"})
        mut.fill_normal(ps.get(n), 0.2);
    Tensor x = randn({1, 2}, 37);

    Tape tp;
    TapeBind bind(tp, ps, nullptr);
    Tensor x3 = x;
    x3.shape = {1, 1, 2};
    Val out = transformer_block(bind, "blk", tp.leaf(x3), 1, zero_mask(1));

    Tensor ln1 = layer_norm_ref(x, ps.get("blk.ln1.gamma"), ps.get("blk.ln1.beta"));
    Tensor v = matmul_ref(ln1, ps.get("blk.attn.v.w"), ps.get("blk.attn.v.b"));
    Tensor attn = matmul_ref(v, ps.get("blk.attn.o.w"), ps.get("blk.attn.o.b"));
    Tensor y = x;
    for (size_t k = 0; k < y.data.size(); ++k) y.data[k] += attn.data[k];
    Tensor ln2 = layer_norm_ref(y, ps.get("blk.ln2.gamma"), ps.get("blk.ln2.beta"));
    Tensor m1 = matmul_ref(ln2, ps.get("blk.mlp.fc1.w"), ps.get("blk.mlp.fc1.b"));
    for (double& t : m1.data) t = gelu_ref(t);
    Tensor m2 = matmul_ref(m1, ps.get("blk.mlp.fc2.w"), ps.get("blk.mlp.fc2.b"));
    for (size_t k = 0; k < y.data.size(); ++k) y.data[k] += m2.data[k];

    for (size_t k = 0; k < y.data.size(); ++k)
        CHECK(tp.value(out).data[k] == doctest::Approx(y.data[k]).epsilon(1e-10));
}

TEST_CASE("block preserves shape and mixes convexly") {
    ParamStore ps;
    Rng rng(41);
    init_transformer_block(ps, "blk", 8, rng);
    Tensor x = randn({2, 5, 8}, 43);
    Tape tp;
    TapeBind bind(tp, ps, nullptr);
    Val y = transformer_block(bind, "blk", tp.leaf(x), 2, zero_mask(5));
    CHECK(tp.value(y).shape == x.shape);
    CHECK(tp.value(y).all_finite());

    Tensor same = Tensor::zeros({1, 4, 8});
    Tensor row = randn({8}, 47);
    for (int64_t s = 0; s < 4; ++s)
        for (int64_t c = 0; c < 8; ++c) same.at({0, s, c}) = row.data[static_cast<size_t>(c)];
    Tape tp2;
    TapeBind bind2(tp2, ps, nullptr);
    Val y2 = transformer_block(bind2, "blk", tp2.leaf(same), 2, zero_mask(4));
    for (int64_t s = 1; s < 4; ++s)
        for (int64_t c = 0; c < 8; ++c)
            CHECK(tp2.value(y2).at({0, s, c}) == doctest::Approx(tp2.value(y2).at({0, 0, c})).epsilon(1e-12));
}

TEST_CASE("mask restricted to one key makes every query read that key") {
    ParamStore ps;
    Rng rng(53);
    init_transformer_block(ps, "blk", 6, rng);
    Tensor x = randn({1, 4, 6}, 59);
    Tensor mask = Tensor::zeros({4, 4});
    for (int64_t r = 0; r < 4; ++r)
        for (int64_t c = 1; c < 4; ++c) mask.at({r, c}) = -1e9;

    Tape tp;
    TapeBind bind(tp, ps, nullptr);
    Val ln = layer_norm_p(bind, "blk.ln1", tp.leaf(x));
    Val a = attention(bind, "blk", ln, 2, mask);
    for (int64_t s = 1; s < 4; ++s)
        for (int64_t c = 0; c < 6; ++c)
            CHECK(tp.value(a).at({0, s, c}) == doctest::Approx(tp.value(a).at({0, 0, c})).epsilon(1e-12));
}

TEST_CASE("block gradients pass finite differences") {
    ParamStore ps;
    Rng rng(61);
    init_transformer_block(ps, "blk", 4, rng);
    Tensor x = randn({2, 3, 4}, 67, 0.5);
    std::set<std::string> trainable;
    for (const auto& n : ps.names()) trainable.insert(n);
    check_param_grads(ps, trainable, [&](TapeBind& b) {
        Val y = transformer_block(b, "blk", b.tape().leaf(x, true), 2, zero_mask(3));
        return scalar_probe(b.tape(), y, 71);
    });
}

TEST_CASE("patchify geometry and identity projection") {
    CHECK(patchify(Tensor::zeros({2, 32, 32, 3}), 8).shape == std::vector<int64_t>{2 * 16, 192});
    CHECK(patchify(Tensor::zeros({1, 224, 224, 3}), 16).shape == std::vector<int64_t>{196, 768});
    CHECK_THROWS(patchify(Tensor::zeros({1, 30, 32, 3}), 8));

    Tensor frames = randn({2, 4, 4, 3}, 73);
    Tensor p = patchify(frames, 2);
    REQUIRE(p.shape == std::vector<int64_t>{2 * 4, 12});
    CHECK(p.at({0, 0}) == frames.at({0, 0, 0, 0}));
    CHECK(p.at({0, 3}) == frames.at({0, 0, 1, 0}));
    CHECK(p.at({0, 6}) == frames.at({0, 1, 0, 0}));
    CHECK(p.at({1, 0}) == frames.at({0, 0, 2, 0}));
    CHECK(p.at({4, 2}) == frames.at({1, 0, 0, 2}));

    Tensor eye = Tensor::zeros({12, 12});
    for (int64_t i = 0; i < 12; ++i) eye.at({i, i}) = 1.0;
    Tape tp;
    Val proj = tp.linear(tp.leaf(p), tp.leaf(eye));
    for (size_t k = 0; k < p.data.size(); ++k) CHECK(tp.value(proj).data[k] == p.data[k]);
}

TEST_CASE("one hot maps and channel broadcast") {
    IntTensor ids;
    ids.shape = {1, 2, 2};
    ids.data = {0, 2, 1, 0};
    Tensor oh = one_hot_maps(ids, 3);
    REQUIRE(oh.shape == std::vector<int64_t>{1, 2, 2, 3});
    CHECK(oh.at({0, 0, 0, 0}) == 1.0);
    CHECK(oh.at({0, 0, 1, 2}) == 1.0);
    CHECK(oh.at({0, 1, 0, 1}) == 1.0);
    CHECK(oh.at({0, 0, 0, 1}) == 0.0);

    ids.data[1] = 3;
    CHECK_THROWS(one_hot_maps(ids, 3));
    ids.data[1] = -1;
    CHECK_THROWS(one_hot_maps(ids, 3));

    Tensor x = randn({1, 2, 2}, 79);
    Tensor b = broadcast_channels(x, 3);
    REQUIRE(b.shape == std::vector<int64_t>{1, 2, 2, 3});
    for (int64_t c = 0; c < 3; ++c) CHECK(b.at({0, 1, 0, c}) == x.at({0, 1, 0}));
}

TEST_CASE("tape bind caches leaves and collects only trainable grads") {
    ParamStore ps;
    Rng rng(83);
    init_linear(ps, "t", 3, 3, rng, 0.1);
    init_linear(ps, "f", 3, 3, rng, 0.1);
    std::set<std::string> trainable{"t.w", "t.b"};

    Tape tp;
    TapeBind bind(tp, ps, &trainable);
    Val a = bind.param("t.w");
    Val b = bind.param("t.w");
    CHECK(a.i == b.i);

    Tensor x = randn({2, 3}, 89);
    Val y = linear_p(bind, "f", linear_p(bind, "t", tp.leaf(x)));
    tp.backward(scalar_probe(tp, y, 97));
    std::map<std::string, Tensor> grads;
    bind.collect_grads(grads);
    CHECK(grads.size() == 2);
    CHECK(grads.count("t.w") == 1);
    CHECK(grads.count("f.w") == 0);
    CHECK(grads.at("t.w").max_abs() > 0.0);
}

TEST_CASE("checkpoint round trip is bitwise and validates") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "mmdfer_nn_test";
    fs::create_directories(dir);

    ParamStore ps;
    Rng rng(101);
    init_transformer_block(ps, "blk", 4, rng);
    init_adapter(ps, "ad", 4, 2, rng);
    nlohmann::json extra{{"purpose", "test"}, {"width", 4}};
    save_checkpoint(dir / "ck.fckc", ps, extra);

    ParamStore fresh;
    nlohmann::json header = load_checkpoint(dir / "ck.fckc", fresh);
    CHECK(header.at("purpose") == "test");
    CHECK(fresh.names().size() == ps.names().size());
    for (const auto& n : ps.names()) {
        const Tensor& a = ps.get(n);
        const Tensor& b = fresh.get(n);
        REQUIRE(a.same_shape(b));
        for (size_t k = 0; k < a.data.size(); ++k) CHECK(a.data[k] == b.data[k]);
    }

    ParamStore mismatched;
    mismatched.add("blk.ln1.gamma", Tensor::zeros({9}));
    CHECK_THROWS(load_checkpoint(dir / "ck.fckc", mismatched));
    CHECK_THROWS(load_checkpoint(dir / "missing.fckc", fresh));
}
