#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdfer/autodiff.hpp"
#include "mmdfer/tensor.hpp"

namespace mmdfer {

// Per-class similarities of one representation against the positive and
// negative class-name embeddings; diff = pos - neg drives classification.
struct PNSim {
    std::vector<double> pos;
    std::vector<double> neg;
    std::vector<double> diff;
    nlohmann::json to_json() const;
};

// x: [e]; c_pos, c_neg: [N, e]. Cosine per class; zero-norm vectors have
// no defined direction and are rejected.
PNSim pn_similarity(const Tensor& x, const Tensor& c_pos, const Tensor& c_neg);

struct SimilarityTable {
    std::vector<std::string> modalities;   // canonical order, e.g. v, p, l, f
    std::map<std::string, PNSim> sims;
    std::vector<double> fused;             // diff sims of the fused representation
    nlohmann::json to_json() const;
};

// Softmax over per-modality best-class similarities: each modality
// contributes its max diff entry, so the modality most confident about
// some class dominates the blend.
struct FusionWeights {
    std::vector<std::string> modalities;
    std::vector<double> w;                 // aligned with modalities; sums to 1
    double at(const std::string& name) const;
    nlohmann::json to_json() const;
};

FusionWeights modality_weights(const SimilarityTable& table);

// embs aligned with w.modalities; convex combination of the embeddings.
Tensor fuse(const std::vector<Tensor>& embs, const FusionWeights& w);

struct Classification {
    std::vector<double> probs;
    int64_t predicted = 0;
};

// probs = softmax(sims / tau); ties go to the lowest class index.
Classification classify(const std::vector<double>& sims, double tau);

// Tape-side counterparts used inside training graphs. emb: [e] node;
// c_pos/c_neg: [N, e] nodes. Returns the [N] diff-similarity vector.
Val pn_sim_t(Tape& t, Val emb, Val c_pos, Val c_neg);

// sim_vecs: one [N] node per modality. Differentiable mode routes
// gradients through the max and the softmax; otherwise the weights are
// computed from current values and enter the graph as constants.
Val modality_weights_t(Tape& t, const std::vector<Val>& sim_vecs, bool differentiable);

Val fuse_t(Tape& t, Val w, const std::vector<Val>& embs);

Val class_logits_t(Tape& t, Val sims, double tau);

}  // namespace mmdfer
