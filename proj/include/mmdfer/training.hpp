#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdfer/corpus.hpp"
#include "mmdfer/encoders.hpp"
#include "mmdfer/fusion.hpp"

namespace mmdfer {

struct TrainConfig {
    int64_t epochs = 30;
    int64_t batch_size = 16;
    double learning_rate = 3e-4;
    double momentum = 0.9;
    double clip_norm = 1.0;  // global gradient-norm ceiling; 0 disables
    double tau = 0.01;
    double s = 0.5;
    std::string negation_word = "no";
    std::string weighting_mode = "adaptive";  // "adaptive" or "fixed:<w_v>"
    uint64_t seed = 0;
    std::vector<std::string> modalities = {"v", "p", "l", "f"};
    bool adapters_enabled = true;
    bool differentiable_weights = false;
    bool batch_avg_weights = false;
    bool early_stop = true;
    double early_stop_accuracy = 0.995;
    int64_t early_stop_patience = 2;

    bool fixed_mode() const;
    double fixed_wv() const;  // only meaningful in fixed mode
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

double cross_entropy(const std::vector<double>& probs, int64_t label);

// Loss ingredients for one sample. modality_probs and weights are aligned
// with the caller's modality order; weights must lie on the open simplex
// (a single modality necessarily carries weight one).
struct SampleTerms {
    std::vector<double> fused_probs;
    std::vector<std::vector<double>> modality_probs;
    std::vector<double> weights;
};

// Batch mean of: fused cross-entropy plus weight-scaled per-modality
// cross-entropies.
double multi_modal_loss(const std::vector<SampleTerms>& batch, const std::vector<int64_t>& labels);

struct SgdState {
    std::map<std::string, Tensor> velocity;
};

// Scales every gradient by max_norm / ||g|| when the global L2 norm
// exceeds max_norm; returns the pre-clip norm. max_norm <= 0 is a no-op.
double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm);

// Classic momentum: u = momentum * u + g; p -= lr * u. Only trainable
// parameters may appear in grads.
void sgd_step(ParamStore& store, const std::set<std::string>& trainable,
              const std::map<std::string, Tensor>& grads, SgdState& state, double lr,
              double momentum);

// Reserved tokens, class-name template words, then first-appearance words
// of the train-split descriptions.
Vocabulary corpus_vocabulary(const DatasetManifest& manifest, const std::string& negation_word);

std::string config_fingerprint(const ModelConfig& arch, const TrainConfig& cfg);

struct TrainResult {
    Model model;
    std::vector<nlohmann::json> epochs;  // one JSON entry per completed epoch
    nlohmann::json summary;
    std::string fingerprint;
};

// Supervised loop over the manifest's train split. Architecture dims
// (T, H, W, C, R, classes) come from the corpus; s, negation and the
// adapter switch come from the train config. Deterministic in cfg.seed.
// checkpoint_path and log_path may be empty to skip writing.
TrainResult train(const DatasetManifest& manifest, const ModelConfig& arch, const TrainConfig& cfg,
                  const std::filesystem::path& checkpoint_path = {},
                  const std::filesystem::path& log_path = {});

}  // namespace mmdfer
