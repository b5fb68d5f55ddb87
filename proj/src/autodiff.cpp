#include "mmdfer/autodiff.hpp"

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mmdfer {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("tape: " + msg);
}

std::vector<int64_t> permuted_shape(const std::vector<int64_t>& shape, const std::vector<int64_t>& perm) {
    std::vector<int64_t> out(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out[i] = shape[static_cast<size_t>(perm[i])];
    return out;
}

std::vector<int64_t> row_major_strides(const std::vector<int64_t>& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
    return s;
}

// out[j] = in at the source position of j under `perm` (out axis k reads
// in axis perm[k]).
void permute_into(const Tensor& in, const std::vector<int64_t>& perm, Tensor& out) {
    const auto in_strides = row_major_strides(in.shape);
    const auto out_shape = out.shape;
    const size_t rank = perm.size();
    std::vector<int64_t> idx(rank, 0);
    const int64_t n = in.numel();
    for (int64_t j = 0; j < n; ++j) {
        int64_t src = 0;
        for (size_t k = 0; k < rank; ++k) src += idx[k] * in_strides[static_cast<size_t>(perm[k])];
        out.data[static_cast<size_t>(j)] = in.data[static_cast<size_t>(src)];
        for (int k = static_cast<int>(rank) - 1; k >= 0; --k) {
            if (++idx[static_cast<size_t>(k)] < out_shape[static_cast<size_t>(k)]) break;
            idx[static_cast<size_t>(k)] = 0;
        }
    }
}

double gelu_val(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

double gelu_grad(double x) {
    const double kInvSqrt2Pi = 0.39894228040143267794;
    return 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

}  // namespace

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

bool Tape::any_needs_grad(const std::vector<int>& in) const {
    for (int i : in)
        if (nodes_[static_cast<size_t>(i)].needs_grad) return true;
    return false;
}

void Tape::check(Val v) const {
    require(v.i >= 0 && v.i < static_cast<int>(nodes_.size()), "invalid value handle");
}

const Tensor& Tape::value(Val v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.i)].value;
}

bool Tape::needs_grad(Val v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.i)].needs_grad;
}

const Tensor& Tape::grad(Val v) {
    check(v);
    Node& n = nodes_[static_cast<size_t>(v.i)];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

Val Tape::leaf(Tensor t, bool needs_grad) {
    Node n;
    n.op = Op::Leaf;
    n.needs_grad = needs_grad;
    n.value = std::move(t);
    return {push(std::move(n))};
}

Val Tape::add(Val a, Val b) {
    check(a);
    check(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Node n;
    n.op = Op::Add;
    n.in = {a.i, b.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = ta;
    for (size_t k = 0; k < n.value.data.size(); ++k) n.value.data[k] += tb.data[k];
    return {push(std::move(n))};
}

Val Tape::add_n(const std::vector<Val>& xs) {
    require(!xs.empty(), "add_n: empty input list");
    Node n;
    n.op = Op::AddN;
    for (Val v : xs) {
        check(v);
        n.in.push_back(v.i);
    }
    n.value = value(xs[0]);
    for (size_t j = 1; j < xs.size(); ++j) {
        const Tensor& t = value(xs[j]);
        require(t.same_shape(n.value), "add_n: shape mismatch");
        for (size_t k = 0; k < n.value.data.size(); ++k) n.value.data[k] += t.data[k];
    }
    n.needs_grad = any_needs_grad(n.in);
    return {push(std::move(n))};
}

Val Tape::sub(Val a, Val b) {
    check(a);
    check(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.in = {a.i, b.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = ta;
    for (size_t k = 0; k < n.value.data.size(); ++k) n.value.data[k] -= tb.data[k];
    return {push(std::move(n))};
}

Val Tape::mul(Val a, Val b) {
    check(a);
    check(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "mul: shape mismatch");
    Node n;
    n.op = Op::Mul;
    n.in = {a.i, b.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = ta;
    for (size_t k = 0; k < n.value.data.size(); ++k) n.value.data[k] *= tb.data[k];
    return {push(std::move(n))};
}

Val Tape::scale(Val a, double c) {
    check(a);
    Node n;
    n.op = Op::Scale;
    n.in = {a.i};
    n.daux = {c};
    n.needs_grad = any_needs_grad(n.in);
    n.value = value(a);
    for (double& v : n.value.data) v *= c;
    return {push(std::move(n))};
}

Val Tape::add_bias(Val x, Val bias) {
    check(x);
    check(bias);
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    require(tb.rank() == 1, "add_bias: bias must be rank 1");
    require(tx.rank() >= 1 && tx.shape.back() == tb.shape[0], "add_bias: trailing dim mismatch");
    Node n;
    n.op = Op::AddBias;
    n.in = {x.i, bias.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = tx;
    const int64_t cols = tb.shape[0];
    const int64_t rows = tx.numel() / cols;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) n.value.data[static_cast<size_t>(r * cols + c)] += tb.data[static_cast<size_t>(c)];
    return {push(std::move(n))};
}

Val Tape::linear(Val x, Val w) {
    check(x);
    check(w);
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    require(tw.rank() == 2, "linear: weight must be rank 2");
    require(tx.rank() >= 1 && tx.shape.back() == tw.shape[0],
            "linear: inner dim mismatch " + shape_str(tx.shape) + " vs " + shape_str(tw.shape));
    const int64_t in = tw.shape[0];
    const int64_t out = tw.shape[1];
    const int64_t rows = tx.numel() / in;
    Node n;
    n.op = Op::Linear;
    n.in = {x.i, w.i};
    n.needs_grad = any_needs_grad(n.in);
    std::vector<int64_t> oshape(tx.shape);
    oshape.back() = out;
    n.value = Tensor::zeros(oshape);
    MapConst X(tx.data.data(), rows, in);
    MapConst W(tw.data.data(), in, out);
    MapMat Y(n.value.data.data(), rows, out);
    Y.noalias() = X * W;
    return {push(std::move(n))};
}

Val Tape::bmm(Val a, Val b, bool transpose_b) {
    check(a);
    check(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.rank() == 3 && tb.rank() == 3, "bmm: operands must be rank 3");
    require(ta.shape[0] == tb.shape[0], "bmm: batch dim mismatch");
    const int64_t B = ta.shape[0], M = ta.shape[1], K = ta.shape[2];
    const int64_t N = transpose_b ? tb.shape[1] : tb.shape[2];
    const int64_t Kb = transpose_b ? tb.shape[2] : tb.shape[1];
    require(Kb == K, "bmm: inner dim mismatch");
    Node n;
    n.op = Op::Bmm;
    n.in = {a.i, b.i};
    n.iaux = {transpose_b ? 1 : 0};
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros({B, M, N});
    for (int64_t i = 0; i < B; ++i) {
        MapConst A(ta.data.data() + i * M * K, M, K);
        MapMat Y(n.value.data.data() + i * M * N, M, N);
        if (transpose_b) {
            MapConst Bm(tb.data.data() + i * N * K, N, K);
            Y.noalias() = A * Bm.transpose();
        } else {
            MapConst Bm(tb.data.data() + i * K * N, K, N);
            Y.noalias() = A * Bm;
        }
    }
    return {push(std::move(n))};
}

Val Tape::permute(Val x, const std::vector<int64_t>& perm) {
    check(x);
    const Tensor& tx = value(x);
    require(perm.size() == tx.shape.size(), "permute: rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (int64_t p : perm) {
        require(p >= 0 && p < static_cast<int64_t>(perm.size()) && !seen[static_cast<size_t>(p)],
                "permute: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    Node n;
    n.op = Op::Permute;
    n.in = {x.i};
    n.iaux.assign(perm.begin(), perm.end());
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros(permuted_shape(tx.shape, perm));
    permute_into(tx, perm, n.value);
    return {push(std::move(n))};
}

Val Tape::reshape(Val x, const std::vector<int64_t>& shape) {
    check(x);
    const Tensor& tx = value(x);
    require(shape_numel(shape) == tx.numel(), "reshape: element count mismatch " + shape_str(tx.shape) + " -> " + shape_str(shape));
    Node n;
    n.op = Op::Reshape;
    n.in = {x.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = tx;
    n.value.shape = shape;
    return {push(std::move(n))};
}

Val Tape::gelu(Val x) {
    check(x);
    Node n;
    n.op = Op::Gelu;
    n.in = {x.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = value(x);
    for (double& v : n.value.data) v = gelu_val(v);
    return {push(std::move(n))};
}

Val Tape::layer_norm(Val x, Val gamma, Val beta, double eps) {
    check(x);
    check(gamma);
    check(beta);
    const Tensor& tx = value(x);
    const Tensor& tg = value(gamma);
    const Tensor& tb = value(beta);
    require(tx.rank() >= 1, "layer_norm: input must have rank >= 1");
    const int64_t d = tx.shape.back();
    require(tg.rank() == 1 && tg.shape[0] == d, "layer_norm: gamma dim mismatch");
    require(tb.rank() == 1 && tb.shape[0] == d, "layer_norm: beta dim mismatch");
    const int64_t rows = tx.numel() / d;
    Node n;
    n.op = Op::LayerNorm;
    n.in = {x.i, gamma.i, beta.i};
    n.daux = {eps};
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros(tx.shape);
    n.taux = Tensor::zeros({rows, 2});
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = tx.data.data() + r * d;
        double mean = 0.0;
        for (int64_t c = 0; c < d; ++c) mean += row[c];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            const double t = row[c] - mean;
            var += t * t;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        n.taux.data[static_cast<size_t>(2 * r)] = mean;
        n.taux.data[static_cast<size_t>(2 * r + 1)] = rstd;
        double* out = n.value.data.data() + r * d;
        for (int64_t c = 0; c < d; ++c)
            out[c] = (row[c] - mean) * rstd * tg.data[static_cast<size_t>(c)] + tb.data[static_cast<size_t>(c)];
    }
    return {push(std::move(n))};
}

Val Tape::softmax_last(Val x) {
    Tensor no_mask;
    return softmax_last_masked(x, no_mask);
}

Val Tape::softmax_last_masked(Val x, const Tensor& mask) {
    check(x);
    const Tensor& tx = value(x);
    require(tx.rank() >= 1, "softmax: input must have rank >= 1");
    const int64_t d = tx.shape.back();
    const int64_t rows = tx.numel() / d;
    int64_t mask_rows = 0;
    if (!mask.data.empty()) {
        require(mask.rank() == 2 && mask.shape[1] == d, "softmax: mask must be [Rm, n]");
        mask_rows = mask.shape[0];
        require(rows % mask_rows == 0, "softmax: mask rows must divide input rows");
    }
    Node n;
    n.op = Op::SoftmaxLast;
    n.in = {x.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros(tx.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = tx.data.data() + r * d;
        const double* mrow = mask_rows ? mask.data.data() + (r % mask_rows) * d : nullptr;
        double mx = -1e300;
        for (int64_t c = 0; c < d; ++c) {
            const double v = row[c] + (mrow ? mrow[c] : 0.0);
            if (v > mx) mx = v;
        }
        double sum = 0.0;
        double* out = n.value.data.data() + r * d;
        for (int64_t c = 0; c < d; ++c) {
            const double v = std::exp(row[c] + (mrow ? mrow[c] : 0.0) - mx);
            out[c] = v;
            sum += v;
        }
        for (int64_t c = 0; c < d; ++c) out[c] /= sum;
    }
    return {push(std::move(n))};
}

Val Tape::mean_rows(Val x) {
    check(x);
    const Tensor& tx = value(x);
    require(tx.rank() == 2, "mean_rows: input must be rank 2");
    const int64_t N = tx.shape[0], d = tx.shape[1];
    Node n;
    n.op = Op::MeanRows;
    n.in = {x.i};
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros({d});
    for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < d; ++c) n.value.data[static_cast<size_t>(c)] += tx.data[static_cast<size_t>(r * d + c)];
    for (double& v : n.value.data) v /= static_cast<double>(N);
    return {push(std::move(n))};
}

Val Tape::row_select(Val x, int64_t row) {
    check(x);
    const Tensor& tx = value(x);
    require(tx.rank() == 2, "row_select: input must be rank 2");
    require(row >= 0 && row < tx.shape[0], "row_select: row out of range");
    const int64_t d = tx.shape[1];
    Node n;
    n.op = Op::RowSelect;
    n.in = {x.i};
    n.iaux = {row};
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros({d});
    for (int64_t c = 0; c < d; ++c) n.value.data[static_cast<size_t>(c)] = tx.data[static_cast<size_t>(row * d + c)];
    return {push(std::move(n))};
}

Val Tape::slice_rows(Val x, int64_t start, int64_t len) {
    check(x);
    const Tensor& tx = value(x);
    require(tx.rank() == 2, "slice_rows: input must be rank 2");
    require(start >= 0 && len >= 0 && start + len <= tx.shape[0], "slice_rows: range out of bounds");
    const int64_t d = tx.shape[1];
    Node n;
    n.op = Op::SliceRows;
    n.in = {x.i};
    n.iaux = {start, len};
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros({len, d});
    std::copy(tx.data.begin() + start * d, tx.data.begin() + (start + len) * d, n.value.data.begin());
    return {push(std::move(n))};
}

Val Tape::gather_rows(Val table, const std::vector<int64_t>& ids) {
    check(table);
    const Tensor& tt = value(table);
    require(tt.rank() == 2, "gather_rows: table must be rank 2");
    const int64_t V = tt.shape[0], d = tt.shape[1];
    Node n;
    n.op = Op::GatherRows;
    n.in = {table.i};
    n.iaux.assign(ids.begin(), ids.end());
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros({static_cast<int64_t>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r) {
        require(ids[r] >= 0 && ids[r] < V, "gather_rows: id out of range");
        std::copy(tt.data.begin() + ids[r] * d, tt.data.begin() + (ids[r] + 1) * d, n.value.data.begin() + static_cast<int64_t>(r) * d);
    }
    return {push(std::move(n))};
}

Val Tape::cosine(Val a, Val b) {
    check(a);
    check(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.numel() == tb.numel(), "cosine: size mismatch");
    Node n;
    n.op = Op::Cosine;
    n.in = {a.i, b.i};
    n.needs_grad = any_needs_grad(n.in);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t k = 0; k < ta.data.size(); ++k) {
        dot += ta.data[k] * tb.data[k];
        na += ta.data[k] * ta.data[k];
        nb += tb.data[k] * tb.data[k];
    }
    const double denom = std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
    n.value = Tensor::zeros({1});
    n.value.data[0] = dot / denom;
    return {push(std::move(n))};
}

Val Tape::stack_scalars(const std::vector<Val>& xs) {
    require(!xs.empty(), "stack_scalars: empty input list");
    Node n;
    n.op = Op::StackScalars;
    n.value = Tensor::zeros({static_cast<int64_t>(xs.size())});
    for (size_t j = 0; j < xs.size(); ++j) {
        check(xs[j]);
        require(value(xs[j]).numel() == 1, "stack_scalars: inputs must be scalars");
        n.in.push_back(xs[j].i);
        n.value.data[j] = value(xs[j]).data[0];
    }
    n.needs_grad = any_needs_grad(n.in);
    return {push(std::move(n))};
}

Val Tape::cross_entropy_logits(Val logits, int64_t target) {
    check(logits);
    const Tensor& tl = value(logits);
    require(tl.rank() == 1, "cross_entropy_logits: logits must be rank 1");
    const int64_t k = tl.shape[0];
    require(target >= 0 && target < k, "cross_entropy_logits: target out of range");
    Node n;
    n.op = Op::CrossEntropyLogits;
    n.in = {logits.i};
    n.iaux = {target};
    n.needs_grad = any_needs_grad(n.in);
    double mx = -1e300;
    for (double v : tl.data) mx = std::max(mx, v);
    double sum = 0.0;
    n.taux = Tensor::zeros({k});
    for (int64_t c = 0; c < k; ++c) {
        const double e = std::exp(tl.data[static_cast<size_t>(c)] - mx);
        n.taux.data[static_cast<size_t>(c)] = e;
        sum += e;
    }
    for (double& v : n.taux.data) v /= sum;
    n.value = Tensor::zeros({1});
    n.value.data[0] = std::log(sum) + mx - tl.data[static_cast<size_t>(target)];
    return {push(std::move(n))};
}

Val Tape::weighted_sum(Val w, const std::vector<Val>& xs) {
    check(w);
    const Tensor& tw = value(w);
    require(tw.rank() == 1 && tw.shape[0] == static_cast<int64_t>(xs.size()),
            "weighted_sum: weight length must match input count");
    require(!xs.empty(), "weighted_sum: empty input list");
    Node n;
    n.op = Op::WeightedSum;
    n.in.push_back(w.i);
    for (Val v : xs) {
        check(v);
        require(value(v).same_shape(value(xs[0])), "weighted_sum: shape mismatch");
        n.in.push_back(v.i);
    }
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros(value(xs[0]).shape);
    for (size_t j = 0; j < xs.size(); ++j) {
        const Tensor& t = value(xs[j]);
        const double wj = tw.data[j];
        for (size_t k = 0; k < t.data.size(); ++k) n.value.data[k] += wj * t.data[k];
    }
    return {push(std::move(n))};
}

Val Tape::max_entries(Val x) {
    check(x);
    const Tensor& tx = value(x);
    require(tx.rank() == 1 && tx.shape[0] >= 1, "max_entries: input must be non-empty rank 1");
    int64_t arg = 0;
    for (int64_t c = 1; c < tx.shape[0]; ++c)
        if (tx.data[static_cast<size_t>(c)] > tx.data[static_cast<size_t>(arg)]) arg = c;
    Node n;
    n.op = Op::MaxEntries;
    n.in = {x.i};
    n.iaux = {arg};
    n.needs_grad = any_needs_grad(n.in);
    n.value = Tensor::zeros({1});
    n.value.data[0] = tx.data[static_cast<size_t>(arg)];
    return {push(std::move(n))};
}

void Tape::acc(int i, const double* g, size_t cnt) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad) return;
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    assert(n.grad.data.size() == cnt);
    for (size_t k = 0; k < cnt; ++k) n.grad.data[k] += g[k];
}

double* Tape::grad_buf(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad) return nullptr;
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad.data.data();
}

void Tape::seed(Val v, const Tensor& cotangent) {
    check(v);
    require(cotangent.same_shape(nodes_[static_cast<size_t>(v.i)].value), "seed: cotangent shape mismatch");
    acc(v.i, cotangent.data.data(), cotangent.data.size());
}

void Tape::backward(Val root) {
    check(root);
    require(value(root).numel() == 1, "backward: root must be a scalar");
    Tensor one = Tensor::zeros(value(root).shape);
    one.data[0] = 1.0;
    seed(root, one);
    run_backward();
}

void Tape::run_backward() {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) backward_node(i);
}

void Tape::backward_node(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad || n.grad.data.empty()) return;
    const Tensor& g = n.grad;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add:
            acc(n.in[0], g.data.data(), g.data.size());
            acc(n.in[1], g.data.data(), g.data.size());
            break;
        case Op::AddN:
            for (int in : n.in) acc(in, g.data.data(), g.data.size());
            break;
        case Op::Sub: {
            acc(n.in[0], g.data.data(), g.data.size());
            if (double* gb = grad_buf(n.in[1]))
                for (size_t k = 0; k < g.data.size(); ++k) gb[k] -= g.data[k];
            break;
        }
        case Op::Mul: {
            const Tensor& a = nodes_[static_cast<size_t>(n.in[0])].value;
            const Tensor& b = nodes_[static_cast<size_t>(n.in[1])].value;
            if (double* ga = grad_buf(n.in[0]))
                for (size_t k = 0; k < g.data.size(); ++k) ga[k] += b.data[k] * g.data[k];
            if (double* gb = grad_buf(n.in[1]))
                for (size_t k = 0; k < g.data.size(); ++k) gb[k] += a.data[k] * g.data[k];
            break;
        }
        case Op::Scale: {
            const double c = n.daux[0];
            if (double* ga = grad_buf(n.in[0]))
                for (size_t k = 0; k < g.data.size(); ++k) ga[k] += c * g.data[k];
            break;
        }
        case Op::AddBias: {
            acc(n.in[0], g.data.data(), g.data.size());
            if (double* gb = grad_buf(n.in[1])) {
                const int64_t cols = nodes_[static_cast<size_t>(n.in[1])].value.shape[0];
                const int64_t rows = g.numel() / cols;
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c) gb[c] += g.data[static_cast<size_t>(r * cols + c)];
            }
            break;
        }
        case Op::Linear: {
            const Tensor& tx = nodes_[static_cast<size_t>(n.in[0])].value;
            const Tensor& tw = nodes_[static_cast<size_t>(n.in[1])].value;
            const int64_t in = tw.shape[0], out = tw.shape[1];
            const int64_t rows = tx.numel() / in;
            MapConst G(g.data.data(), rows, out);
            if (double* gx = grad_buf(n.in[0])) {
                MapConst W(tw.data.data(), in, out);
                MapMat GX(gx, rows, in);
                GX.noalias() += G * W.transpose();
            }
            if (double* gw = grad_buf(n.in[1])) {
                MapConst X(tx.data.data(), rows, in);
                MapMat GW(gw, in, out);
                GW.noalias() += X.transpose() * G;
            }
            break;
        }
        case Op::Bmm: {
            const Tensor& ta = nodes_[static_cast<size_t>(n.in[0])].value;
            const Tensor& tb = nodes_[static_cast<size_t>(n.in[1])].value;
            const bool tr = n.iaux[0] != 0;
            const int64_t B = ta.shape[0], M = ta.shape[1], K = ta.shape[2];
            const int64_t N = n.value.shape[2];
            double* ga = grad_buf(n.in[0]);
            double* gb = grad_buf(n.in[1]);
            for (int64_t b = 0; b < B; ++b) {
                MapConst G(g.data.data() + b * M * N, M, N);
                MapConst A(ta.data.data() + b * M * K, M, K);
                if (tr) {
                    MapConst Bm(tb.data.data() + b * N * K, N, K);
                    if (ga) {
                        MapMat GA(ga + b * M * K, M, K);
                        GA.noalias() += G * Bm;
                    }
                    if (gb) {
                        MapMat GB(gb + b * N * K, N, K);
                        GB.noalias() += G.transpose() * A;
                    }
                } else {
                    MapConst Bm(tb.data.data() + b * K * N, K, N);
                    if (ga) {
                        MapMat GA(ga + b * M * K, M, K);
                        GA.noalias() += G * Bm.transpose();
                    }
                    if (gb) {
                        MapMat GB(gb + b * K * N, K, N);
                        GB.noalias() += A.transpose() * G;
                    }
                }
            }
            break;
        }
        case Op::Permute: {
            if (!nodes_[static_cast<size_t>(n.in[0])].needs_grad) break;
            std::vector<int64_t> inv(n.iaux.size());
            for (size_t k = 0; k < n.iaux.size(); ++k) inv[static_cast<size_t>(n.iaux[k])] = static_cast<int64_t>(k);
            Tensor gin = Tensor::zeros(nodes_[static_cast<size_t>(n.in[0])].value.shape);
            permute_into(g, inv, gin);
            acc(n.in[0], gin.data.data(), gin.data.size());
            break;
        }
        case Op::Reshape:
            acc(n.in[0], g.data.data(), g.data.size());
            break;
        case Op::Gelu: {
            const Tensor& tx = nodes_[static_cast<size_t>(n.in[0])].value;
            if (double* gx = grad_buf(n.in[0]))
                for (size_t k = 0; k < g.data.size(); ++k) gx[k] += gelu_grad(tx.data[k]) * g.data[k];
            break;
        }
        case Op::LayerNorm: {
            const Tensor& tx = nodes_[static_cast<size_t>(n.in[0])].value;
            const Tensor& tg = nodes_[static_cast<size_t>(n.in[1])].value;
            const int64_t d = tx.shape.back();
            const int64_t rows = tx.numel() / d;
            double* gx = grad_buf(n.in[0]);
            double* gg = grad_buf(n.in[1]);
            double* gb = grad_buf(n.in[2]);
            for (int64_t r = 0; r < rows; ++r) {
                const double mean = n.taux.data[static_cast<size_t>(2 * r)];
                const double rstd = n.taux.data[static_cast<size_t>(2 * r + 1)];
                const double* xrow = tx.data.data() + r * d;
                const double* grow = g.data.data() + r * d;
                if (gg || gb) {
                    for (int64_t c = 0; c < d; ++c) {
                        const double xhat = (xrow[c] - mean) * rstd;
                        if (gg) gg[c] += grow[c] * xhat;
                        if (gb) gb[c] += grow[c];
                    }
                }
                if (gx) {
                    double s1 = 0.0, s2 = 0.0;
                    for (int64_t c = 0; c < d; ++c) {
                        const double xhat = (xrow[c] - mean) * rstd;
                        const double gy = grow[c] * tg.data[static_cast<size_t>(c)];
                        s1 += gy;
                        s2 += gy * xhat;
                    }
                    s1 /= static_cast<double>(d);
                    s2 /= static_cast<double>(d);
                    double* gxrow = gx + r * d;
                    for (int64_t c = 0; c < d; ++c) {
                        const double xhat = (xrow[c] - mean) * rstd;
                        const double gy = grow[c] * tg.data[static_cast<size_t>(c)];
                        gxrow[c] += rstd * (gy - s1 - xhat * s2);
                    }
                }
            }
            break;
        }
        case Op::SoftmaxLast: {
            if (double* gx = grad_buf(n.in[0])) {
                const int64_t d = n.value.shape.back();
                const int64_t rows = n.value.numel() / d;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* y = n.value.data.data() + r * d;
                    const double* grow = g.data.data() + r * d;
                    double dot = 0.0;
                    for (int64_t c = 0; c < d; ++c) dot += y[c] * grow[c];
                    double* gxrow = gx + r * d;
                    for (int64_t c = 0; c < d; ++c) gxrow[c] += y[c] * (grow[c] - dot);
                }
            }
            break;
        }
        case Op::MeanRows: {
            if (double* gx = grad_buf(n.in[0])) {
                const Tensor& tx = nodes_[static_cast<size_t>(n.in[0])].value;
                const int64_t N = tx.shape[0], d = tx.shape[1];
                const double inv = 1.0 / static_cast<double>(N);
                for (int64_t r = 0; r < N; ++r)
                    for (int64_t c = 0; c < d; ++c) gx[r * d + c] += g.data[static_cast<size_t>(c)] * inv;
            }
            break;
        }
        case Op::RowSelect: {
            if (double* gx = grad_buf(n.in[0])) {
                const int64_t d = n.value.shape[0];
                const int64_t row = n.iaux[0];
                for (int64_t c = 0; c < d; ++c) gx[row * d + c] += g.data[static_cast<size_t>(c)];
            }
            break;
        }
        case Op::SliceRows: {
            if (double* gx = grad_buf(n.in[0])) {
                const int64_t d = n.value.shape[1];
                const int64_t start = n.iaux[0], len = n.iaux[1];
                for (int64_t r = 0; r < len; ++r)
                    for (int64_t c = 0; c < d; ++c) gx[(start + r) * d + c] += g.data[static_cast<size_t>(r * d + c)];
            }
            break;
        }
        case Op::GatherRows: {
            if (double* gt = grad_buf(n.in[0])) {
                const int64_t d = n.value.shape[1];
                for (size_t r = 0; r < n.iaux.size(); ++r)
                    for (int64_t c = 0; c < d; ++c)
                        gt[n.iaux[r] * d + c] += g.data[static_cast<size_t>(static_cast<int64_t>(r) * d + c)];
            }
            break;
        }
        case Op::Cosine: {
            const Tensor& ta = nodes_[static_cast<size_t>(n.in[0])].value;
            const Tensor& tb = nodes_[static_cast<size_t>(n.in[1])].value;
            double dot = 0.0, na2 = 0.0, nb2 = 0.0;
            for (size_t k = 0; k < ta.data.size(); ++k) {
                dot += ta.data[k] * tb.data[k];
                na2 += ta.data[k] * ta.data[k];
                nb2 += tb.data[k] * tb.data[k];
            }
            const double na = std::sqrt(na2), nb = std::sqrt(nb2);
            const double denom = std::max(na * nb, 1e-12);
            const double c = dot / denom;
            const double gs = g.data[0];
            if (double* ga = grad_buf(n.in[0])) {
                const double ia2 = 1.0 / std::max(na2, 1e-12);
                for (size_t k = 0; k < ta.data.size(); ++k) ga[k] += gs * (tb.data[k] / denom - c * ta.data[k] * ia2);
            }
            if (double* gb = grad_buf(n.in[1])) {
                const double ib2 = 1.0 / std::max(nb2, 1e-12);
                for (size_t k = 0; k < tb.data.size(); ++k) gb[k] += gs * (ta.data[k] / denom - c * tb.data[k] * ib2);
            }
            break;
        }
        case Op::StackScalars:
            for (size_t j = 0; j < n.in.size(); ++j) acc(n.in[j], g.data.data() + j, 1);
            break;
        case Op::CrossEntropyLogits: {
            if (double* gl = grad_buf(n.in[0])) {
                const int64_t k = n.taux.shape[0];
                const int64_t t = n.iaux[0];
                const double gs = g.data[0];
                for (int64_t c = 0; c < k; ++c)
                    gl[c] += gs * (n.taux.data[static_cast<size_t>(c)] - (c == t ? 1.0 : 0.0));
            }
            break;
        }
        case Op::WeightedSum: {
            const Tensor& tw = nodes_[static_cast<size_t>(n.in[0])].value;
            double* gw = grad_buf(n.in[0]);
            for (size_t j = 1; j < n.in.size(); ++j) {
                const Tensor& xj = nodes_[static_cast<size_t>(n.in[j])].value;
                if (double* gx = grad_buf(n.in[j])) {
                    const double wj = tw.data[j - 1];
                    for (size_t k = 0; k < g.data.size(); ++k) gx[k] += wj * g.data[k];
                }
                if (gw) {
                    double dot = 0.0;
                    for (size_t k = 0; k < g.data.size(); ++k) dot += xj.data[k] * g.data[k];
                    gw[j - 1] += dot;
                }
            }
            break;
        }
        case Op::MaxEntries: {
            if (double* gx = grad_buf(n.in[0])) gx[n.iaux[0]] += g.data[0];
            break;
        }
    }
}

}  // namespace mmdfer
