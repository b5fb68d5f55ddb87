#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdfer/nn.hpp"
#include "mmdfer/tensor.hpp"
#include "mmdfer/textproc.hpp"

namespace mmdfer {

struct ModelConfig {
    int64_t d = 32;
    int64_t heads = 4;
    int64_t r = 8;
    int64_t depth = 2;
    int64_t e = 32;
    int64_t P = 8;

    int64_t T = 4;
    int64_t H = 32;
    int64_t W = 32;
    int64_t C = 3;
    int64_t R = 5;

    int64_t num_classes = 7;
    int64_t vocab_size = 0;  // set from the vocabulary at init
    int64_t label_max_len = kLabelMaxLen;
    int64_t desc_max_len = kDescMaxLen;

    double s = 0.5;
    std::string negation = "no";
    bool adapters_enabled = true;
    bool share_pn_head = true;

    int64_t patches() const { return (H / P) * (W / P); }
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Class-name embeddings from the positive and negative template branches;
// row i of both corresponds to class i. Tape nodes shaped [N, e].
struct PNVals {
    Val pos;
    Val neg;
};

// Four towers over one parameter store: a class-name text tower with
// separate positive/negative adapter stacks sharing its frozen blocks, a
// video tower with a temporal pass then a spatial pass per block plus a
// scaled parallel adapter branch, one shared tower for parsing and
// landmark maps, and a long-context tower for descriptions. Adapter and
// head parameters train; everything else stays frozen.
class Model {
   public:
    ModelConfig config;
    Vocabulary vocab;
    ParamStore store;
    std::set<std::string> trainable;

    static Model init(const ModelConfig& cfg, const Vocabulary& vocab, uint64_t seed);

    TapeBind bind(Tape& tape) const { return TapeBind(tape, store, &trainable); }

    PNVals encode_labels(TapeBind& b, const std::vector<TokenSequence>& pos,
                         const std::vector<TokenSequence>& neg) const;
    // frames: B tensors shaped [T, H, W, C] -> [B, e].
    Val encode_video(TapeBind& b, const std::vector<Tensor>& frames) const;
    // maps: B tensors shaped [T, H, W] -> [B, e] each.
    Val encode_parsing(TapeBind& b, const std::vector<IntTensor>& maps) const;
    Val encode_landmarks(TapeBind& b, const std::vector<Tensor>& maps) const;
    // tokens at desc_max_len -> [B, e].
    Val encode_description(TapeBind& b, const std::vector<TokenSequence>& tokens) const;

    // PN token sequences for every class name, in class order.
    std::pair<std::vector<TokenSequence>, std::vector<TokenSequence>> label_tokens(
        const std::vector<std::string>& class_names) const;
};

// Self-attention mask enforcing left-to-right visibility.
Tensor causal_mask(int64_t seq_len);

// A name trains iff it belongs to an adapter or a projection head.
bool is_trainable_name(const std::string& name);
std::set<std::string> trainable_partition(const ParamStore& store);

struct ParamCounts {
    int64_t total = 0;
    int64_t trainable = 0;
    double trainable_fraction() const;
};

// Closed-form parameter arithmetic; matches Model::init exactly.
ParamCounts count_params(const ModelConfig& cfg);

// Backbone-scale configuration used only for the tunable-budget report.
ModelConfig reference_scale_config();

void save_model(const std::filesystem::path& p, const Model& m,
                nlohmann::json extra = nlohmann::json::object());
Model load_model(const std::filesystem::path& p, nlohmann::json* header_out = nullptr);

}  // namespace mmdfer
