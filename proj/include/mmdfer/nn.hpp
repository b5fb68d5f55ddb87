#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mmdfer/autodiff.hpp"
#include "mmdfer/rng.hpp"
#include "mmdfer/tensor.hpp"

#include <json.hpp>

namespace mmdfer {

// Named parameter bag with stable insertion order.
class ParamStore {
   public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    int64_t total_params() const;
    int64_t count_matching(const std::set<std::string>& names) const;

   private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor> params_;
};

// Binds store parameters onto one tape, creating each leaf at most once so
// repeated uses (shared towers, weight reuse) hit the same node. Parameters
// in `trainable` get gradient buffers; everything else stays frozen.
class TapeBind {
   public:
    TapeBind(Tape& tape, const ParamStore& store, const std::set<std::string>* trainable)
        : tape_(tape), store_(store), trainable_(trainable) {}

    Val param(const std::string& name);
    Tape& tape() { return tape_; }

    // Adds d(loss)/d(param) into `out` for every trainable parameter bound
    // on this tape. Call after a backward sweep.
    void collect_grads(std::map<std::string, Tensor>& out) const;

   private:
    Tape& tape_;
    const ParamStore& store_;
    const std::set<std::string>* trainable_;
    std::map<std::string, Val> bound_;
};

// Attention mask for a padded sequence: [S, S], zero where the key column
// is a real token, -1e9 where it is padding.
Tensor padding_mask(int64_t seq_len, int64_t valid_len);
Tensor zero_mask(int64_t seq_len);

// prefix + {"w", "b"}; bias zero, weight N(0, stddev^2). zero_weight makes
// the whole map start as the zero function.
void init_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
                 double stddev, bool zero_weight = false);
Val linear_p(TapeBind& b, const std::string& prefix, Val x);

void init_layer_norm(ParamStore& ps, const std::string& prefix, int64_t d);
Val layer_norm_p(TapeBind& b, const std::string& prefix, Val x);

// Bottleneck module with an internal residual: x + up(gelu(down(x))).
// The up projection starts at zero, so a freshly initialized adapter is
// exactly the identity.
void init_adapter(ParamStore& ps, const std::string& prefix, int64_t d, int64_t r, Rng& rng);
Val adapter(TapeBind& b, const std::string& prefix, Val x);

// Pre-norm transformer encoder block on [B, S, d]:
//   y = x + Attn(LN1(x)),  out = y + MLP(LN2(y)).
void init_transformer_block(ParamStore& ps, const std::string& prefix, int64_t d, Rng& rng);
Val transformer_block(TapeBind& b, const std::string& prefix, Val x, int64_t heads, const Tensor& mask);

// Pieces of the block, for reuse outside the standard residual wiring.
Val attention(TapeBind& b, const std::string& prefix, Val x_ln, int64_t heads, const Tensor& mask);
Val mlp(TapeBind& b, const std::string& prefix, Val x_ln);

// frames: [T, H, W, C] -> [T*M, P*P*C] with M = (H/P)*(W/P); patches in
// row-major grid order, each flattened as [py][px][c].
Tensor patchify(const Tensor& frames, int64_t P);

// ids: [T, H, W] -> [T, H, W, R] one-hot planes.
Tensor one_hot_maps(const IntTensor& ids, int64_t R);

// x: [T, H, W] -> [T, H, W, C], value replicated across channels.
Tensor broadcast_channels(const Tensor& x, int64_t C);

// Checkpoints: "FCKC" magic, u64 header length, JSON header (caller extras
// plus the parameter manifest), then each tensor's payload in manifest
// order as little-endian f64.
void save_checkpoint(const std::filesystem::path& p, const ParamStore& ps, const nlohmann::json& extra);
nlohmann::json load_checkpoint(const std::filesystem::path& p, ParamStore& ps);

}  // namespace mmdfer
