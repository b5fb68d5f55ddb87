#include "mmdfer/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmdfer {

namespace {

double norm(const double* x, int64_t n) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += x[i] * x[i];
    return std::sqrt(s);
}

std::vector<double> softmax(const std::vector<double>& x) {
    const double mx = *std::max_element(x.begin(), x.end());
    std::vector<double> out(x.size());
    double z = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

}  // namespace

nlohmann::json PNSim::to_json() const { return {{"pos", pos}, {"neg", neg}, {"diff", diff}}; }

PNSim pn_similarity(const Tensor& x, const Tensor& c_pos, const Tensor& c_neg) {
    if (x.rank() != 1) throw std::invalid_argument("pn_similarity: representation must be rank 1");
    if (c_pos.rank() != 2 || c_neg.rank() != 2 || c_pos.shape != c_neg.shape)
        throw std::invalid_argument("pn_similarity: class tables must be [N, e] and same-shaped");
    const int64_t N = c_pos.shape[0];
    const int64_t e = c_pos.shape[1];
    if (x.shape[0] != e)
        throw std::invalid_argument("pn_similarity: width " + std::to_string(x.shape[0]) +
                                    " does not match class table width " + std::to_string(e));
    const double nx = norm(x.data.data(), e);
    if (nx == 0.0) throw std::invalid_argument("pn_similarity: zero-norm representation");

    PNSim out;
    out.pos.resize(static_cast<size_t>(N));
    out.neg.resize(static_cast<size_t>(N));
    out.diff.resize(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) {
        const double* rp = c_pos.data.data() + i * e;
        const double* rn = c_neg.data.data() + i * e;
        const double np = norm(rp, e);
        const double nn = norm(rn, e);
        if (np == 0.0 || nn == 0.0)
            throw std::invalid_argument("pn_similarity: zero-norm class embedding at row " +
                                        std::to_string(i));
        double dp = 0.0, dn = 0.0;
        for (int64_t j = 0; j < e; ++j) {
            dp += x.data[static_cast<size_t>(j)] * rp[j];
            dn += x.data[static_cast<size_t>(j)] * rn[j];
        }
        out.pos[static_cast<size_t>(i)] = dp / (nx * np);
        out.neg[static_cast<size_t>(i)] = dn / (nx * nn);
        out.diff[static_cast<size_t>(i)] =
            out.pos[static_cast<size_t>(i)] - out.neg[static_cast<size_t>(i)];
    }
    return out;
}

nlohmann::json SimilarityTable::to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& m : modalities) per[m] = sims.at(m).to_json();
    return {{"modalities", modalities}, {"sims", per}, {"fused", fused}};
}

double FusionWeights::at(const std::string& name) const {
    for (size_t i = 0; i < modalities.size(); ++i)
        if (modalities[i] == name) return w[i];
    throw std::invalid_argument("fusion weights: unknown modality " + name);
}

nlohmann::json FusionWeights::to_json() const {
    nlohmann::json out = nlohmann::json::object();
    for (size_t i = 0; i < modalities.size(); ++i) out[modalities[i]] = w[i];
    return out;
}

FusionWeights modality_weights(const SimilarityTable& table) {
    if (table.modalities.empty()) throw std::invalid_argument("modality_weights: empty table");
    std::vector<double> best;
    for (const auto& m : table.modalities) {
        auto it = table.sims.find(m);
        if (it == table.sims.end() || it->second.diff.empty())
            throw std::invalid_argument("modality_weights: missing similarities for " + m);
        for (double s : it->second.diff)
            if (!std::isfinite(s))
                throw std::invalid_argument("modality_weights: non-finite similarity for " + m);
        best.push_back(*std::max_element(it->second.diff.begin(), it->second.diff.end()));
    }
    FusionWeights out;
    out.modalities = table.modalities;
    out.w = softmax(best);
    return out;
}

Tensor fuse(const std::vector<Tensor>& embs, const FusionWeights& w) {
    if (embs.size() != w.w.size())
        throw std::invalid_argument("fuse: " + std::to_string(embs.size()) + " embeddings for " +
                                    std::to_string(w.w.size()) + " weights");
    if (embs.empty()) throw std::invalid_argument("fuse: nothing to fuse");
    Tensor out = Tensor::zeros(embs[0].shape);
    for (size_t m = 0; m < embs.size(); ++m) {
        if (embs[m].shape != out.shape)
            throw std::invalid_argument("fuse: embedding width mismatch at " + w.modalities[m]);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += w.w[m] * embs[m].data[i];
    }
    return out;
}

Classification classify(const std::vector<double>& sims, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("classify: temperature must be positive");
    if (sims.empty()) throw std::invalid_argument("classify: no similarities");
    for (double s : sims)
        if (!std::isfinite(s)) throw std::invalid_argument("classify: non-finite similarity");
    std::vector<double> scaled(sims);
    for (double& s : scaled) s /= tau;
    Classification out;
    out.probs = softmax(scaled);
    out.predicted = 0;
    for (size_t i = 1; i < out.probs.size(); ++i)
        if (out.probs[i] > out.probs[static_cast<size_t>(out.predicted)])
            out.predicted = static_cast<int64_t>(i);
    return out;
}

Val pn_sim_t(Tape& t, Val emb, Val c_pos, Val c_neg) {
    const int64_t N = t.value(c_pos).shape[0];
    std::vector<Val> diffs;
    diffs.reserve(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) {
        Val sp = t.cosine(emb, t.row_select(c_pos, i));
        Val sn = t.cosine(emb, t.row_select(c_neg, i));
        diffs.push_back(t.sub(sp, sn));
    }
    return t.stack_scalars(diffs);
}

Val modality_weights_t(Tape& t, const std::vector<Val>& sim_vecs, bool differentiable) {
    if (sim_vecs.empty()) throw std::invalid_argument("modality_weights: empty table");
    if (differentiable) {
        std::vector<Val> best;
        for (Val v : sim_vecs) best.push_back(t.max_entries(v));
        return t.softmax_last(t.stack_scalars(best));
    }
    std::vector<double> best;
    for (Val v : sim_vecs) {
        const Tensor& tv = t.value(v);
        best.push_back(*std::max_element(tv.data.begin(), tv.data.end()));
    }
    Tensor w({static_cast<int64_t>(best.size())});
    w.data = softmax(best);
    return t.leaf(std::move(w));
}

Val fuse_t(Tape& t, Val w, const std::vector<Val>& embs) { return t.weighted_sum(w, embs); }

Val class_logits_t(Tape& t, Val sims, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("classify: temperature must be positive");
    return t.scale(sims, 1.0 / tau);
}

}  // namespace mmdfer
