#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdfer/corpus.hpp"
#include "mmdfer/encoders.hpp"
#include "mmdfer/training.hpp"

namespace mmdfer {

// Rows are true classes, columns are predictions.
struct ConfusionMatrix {
    int64_t n = 0;
    std::vector<int64_t> counts;  // row-major [n, n]

    int64_t at(int64_t row, int64_t col) const;
    int64_t row_total(int64_t row) const;
    int64_t total() const;
    int64_t trace() const;
    nlohmann::json to_json() const;
    static ConfusionMatrix from_json(const nlohmann::json& j);
};

ConfusionMatrix confusion(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels,
                          int64_t n);

// Unweighted average recall: mean over per-class recalls, as a percentage.
// Every class must have at least one sample.
double uar(const ConfusionMatrix& cm);

// Weighted average recall: overall accuracy, as a percentage.
double war(const ConfusionMatrix& cm);

struct EvalOptions {
    std::string split = "test";
    std::string mode = "pn_diff";  // or "pos_only"
    std::vector<std::string> modalities = {"v", "p", "l", "f"};
    std::string weighting_mode = "adaptive";
    double tau = 0.01;
    int64_t batch_size = 16;

    void validate() const;
    static EvalOptions from_train_config(const TrainConfig& cfg);
};

struct EvalReport {
    double uar = 0.0;
    double war = 0.0;
    std::vector<double> per_class_accuracy;  // percent, indexed by class
    ConfusionMatrix confusion;
    std::map<std::string, double> mean_weights;
    // Mean similarity of each true class's fused representation against its
    // own positive and negative descriptors.
    std::vector<double> class_mean_pos;
    std::vector<double> class_mean_neg;
    std::vector<std::string> class_names;
    std::string mode;
    std::string split;
    std::string fingerprint;
    int64_t samples = 0;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

// Full forward over one split: encoders, PN similarity, weighted fusion,
// temperature softmax. Never touches parameters.
EvalReport evaluate(const Model& model, const DatasetManifest& manifest, const EvalOptions& opts,
                    const std::string& fingerprint = "");

// Loads a checkpoint, cross-checks it against the manifest, and evaluates
// with the options the checkpoint was trained under (split/mode overridable).
EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const DatasetManifest& manifest, const std::string& split,
                               const std::string& mode);

struct ZeroShotConfig {
    int64_t epochs = 24;  // 0 keeps the model at init (chance control)
    int64_t batch_size = 16;
    double learning_rate = 2e-3;
    double momentum = 0.9;
    double clip_norm = 1.0;  // global gradient-norm ceiling; 0 disables
    double tau = 0.07;       // contrastive temperature
    double eval_tau = 0.01;  // classification temperature on the target corpus
    std::string mode = "pn_diff";
    std::string weighting_mode = "adaptive";
    std::string negation_word = "no";
    double s = 0.5;
    bool adapters_enabled = true;
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ZeroShotConfig from_json(const nlohmann::json& j);
};

// Caption-supervised pretraining on corpus A, then classification of every
// sample in corpus B through PN descriptors built from B's class names.
// A and B must share a generative family but have disjoint class names.
EvalReport zero_shot(const DatasetManifest& pretrain, const DatasetManifest& target,
                     const ModelConfig& arch, const ZeroShotConfig& cfg);

struct AblationCell {
    std::string cell_id;
    std::string config_delta;
    TrainConfig cfg;
};

struct AblationRow {
    std::string cell_id;
    std::string config_delta;
    double uar = 0.0;
    double war = 0.0;
    std::vector<double> per_class_accuracy;
};

// The default comparison grid: modality subsets, adapters on/off, negation
// words, video scaling factors, and the fusion weight sweep.
std::vector<AblationCell> ablation_grid(const TrainConfig& base);

// Trains and evaluates every cell (optionally across worker threads) and
// writes <out_dir>/ablation_<fingerprint>.csv plus a weight-sweep SVG.
// Returns the rows in grid order.
std::vector<AblationRow> ablation_suite(const DatasetManifest& manifest, const ModelConfig& arch,
                                        const TrainConfig& base, const std::filesystem::path& out_dir,
                                        int64_t jobs = 1);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::vector<AblationRow> parse_ablation_csv(const std::string& csv);

// Figure emission: WAR against the fixed video weight, with the adaptive
// result as a reference line.
std::string weight_sweep_svg(const std::vector<AblationRow>& rows);

// Per-class accuracy bars for a single report.
std::string class_accuracy_svg(const EvalReport& report);

// Human-readable summary of a report, as markdown.
std::string render_report_markdown(const EvalReport& report);

}  // namespace mmdfer
