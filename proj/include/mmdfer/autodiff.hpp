#pragma once

#include <cstdint>
#include <vector>

#include "mmdfer/tensor.hpp"

namespace mmdfer {

// Handle into a Tape. Default-constructed handles are invalid.
struct Val {
    int i = -1;
    bool valid() const { return i >= 0; }
};

// Reverse-mode tape. Values are double tensors; gradients are accumulated
// into nodes flagged needs_grad and into everything upstream of them.
// Frozen weights (needs_grad == false) never get a gradient buffer and the
// corresponding dW GEMMs are skipped entirely.
class Tape {
   public:
    Val leaf(Tensor t, bool needs_grad = false);

    Val add(Val a, Val b);
    Val add_n(const std::vector<Val>& xs);
    Val sub(Val a, Val b);
    Val mul(Val a, Val b);
    Val scale(Val a, double c);

    // x: [..., n], bias: [n], broadcast over leading dims.
    Val add_bias(Val x, Val bias);

    // x: [..., in], w: [in, out] -> [..., out]. Leading dims are flattened
    // into one GEMM.
    Val linear(Val x, Val w);

    // a: [B, M, K], b: [B, K, N] -> [B, M, N]. With transpose_b, b is
    // [B, N, K].
    Val bmm(Val a, Val b, bool transpose_b = false);

    Val permute(Val x, const std::vector<int64_t>& perm);
    Val reshape(Val x, const std::vector<int64_t>& shape);

    Val gelu(Val x);

    // Normalizes the last dim. gamma/beta: [n]. eps matches the usual
    // transformer default.
    Val layer_norm(Val x, Val gamma, Val beta, double eps = 1e-5);

    // Softmax over the last dim. The masked variant adds `mask` (rank 2,
    // [Rm, n]) to the logits before the softmax; rows of x cycle through
    // mask rows, so an [S, S] mask broadcasts over batch and head dims of
    // an [..., S, S] score tensor.
    Val softmax_last(Val x);
    Val softmax_last_masked(Val x, const Tensor& mask);

    // x: [N, d] -> [d], arithmetic mean over rows.
    Val mean_rows(Val x);

    // x: [N, d] -> [d], picks one row.
    Val row_select(Val x, int64_t row);

    // x: [N, d] -> [len, d].
    Val slice_rows(Val x, int64_t start, int64_t len);

    // table: [V, d], ids index rows -> [|ids|, d].
    Val gather_rows(Val table, const std::vector<int64_t>& ids);

    // Cosine similarity of two same-shaped tensors, flattened -> [1].
    // Norm product is clamped below at 1e-12.
    Val cosine(Val a, Val b);

    // k scalar nodes -> [k].
    Val stack_scalars(const std::vector<Val>& xs);

    // logits: [k], target in [0, k) -> [1].
    Val cross_entropy_logits(Val logits, int64_t target);

    // w: [k], xs: k same-shaped tensors -> sum_i w[i] * xs[i].
    Val weighted_sum(Val w, const std::vector<Val>& xs);

    // x: [N] -> [1], max entry; gradient routes to the argmax.
    Val max_entries(Val x);

    const Tensor& value(Val v) const;
    bool needs_grad(Val v) const;

    // Gradient of v after a backward pass. Returns an all-zero tensor of
    // v's shape if nothing reached it.
    const Tensor& grad(Val v);

    // Scalar-rooted backward: seeds 1 at root and sweeps the whole tape.
    void backward(Val root);

    // Manual seeding, for chaining tapes: accumulate cotangents with seed()
    // (possibly many times), then sweep once with run_backward().
    void seed(Val v, const Tensor& cotangent);
    void run_backward();

    size_t size() const { return nodes_.size(); }

   private:
    enum class Op {
        Leaf,
        Add,
        AddN,
        Sub,
        Mul,
        Scale,
        AddBias,
        Linear,
        Bmm,
        Permute,
        Reshape,
        Gelu,
        LayerNorm,
        SoftmaxLast,
        MeanRows,
        RowSelect,
        SliceRows,
        GatherRows,
        Cosine,
        StackScalars,
        CrossEntropyLogits,
        WeightedSum,
        MaxEntries,
    };

    struct Node {
        Op op;
        bool needs_grad = false;
        Tensor value;
        Tensor grad;  // allocated on first accumulation
        std::vector<int> in;
        std::vector<int64_t> iaux;
        std::vector<double> daux;
        Tensor taux;
    };

    std::vector<Node> nodes_;

    int push(Node n);
    bool any_needs_grad(const std::vector<int>& in) const;
    void acc(int i, const double* g, size_t n);
    double* grad_buf(int i);  // nullptr if the node does not need grads
    void backward_node(int i);
    void check(Val v) const;
};

}  // namespace mmdfer
