#include "mmdfer/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <stdexcept>
#include <thread>

#include "mmdfer/fusion.hpp"

namespace mmdfer {

namespace {

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

}  // namespace

int64_t ConfusionMatrix::at(int64_t row, int64_t col) const {
    if (row < 0 || row >= n || col < 0 || col >= n)
        throw std::invalid_argument("confusion: index out of range");
    return counts[static_cast<size_t>(row * n + col)];
}

int64_t ConfusionMatrix::row_total(int64_t row) const {
    int64_t sum = 0;
    for (int64_t c = 0; c < n; ++c) sum += at(row, c);
    return sum;
}

int64_t ConfusionMatrix::total() const {
    int64_t sum = 0;
    for (int64_t v : counts) sum += v;
    return sum;
}

int64_t ConfusionMatrix::trace() const {
    int64_t sum = 0;
    for (int64_t k = 0; k < n; ++k) sum += at(k, k);
    return sum;
}

nlohmann::json ConfusionMatrix::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (int64_t r = 0; r < n; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int64_t c = 0; c < n; ++c) row.push_back(at(r, c));
        rows.push_back(row);
    }
    return {{"n", n}, {"counts", rows}};
}

ConfusionMatrix ConfusionMatrix::from_json(const nlohmann::json& j) {
    ConfusionMatrix cm;
    cm.n = j.at("n").get<int64_t>();
    for (const auto& row : j.at("counts"))
        for (const auto& v : row) cm.counts.push_back(v.get<int64_t>());
    if (static_cast<int64_t>(cm.counts.size()) != cm.n * cm.n)
        throw std::invalid_argument("confusion: malformed count grid");
    return cm;
}

ConfusionMatrix confusion(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels,
                          int64_t n) {
    if (preds.size() != labels.size())
        throw std::invalid_argument("confusion: prediction and label counts differ");
    if (n < 1) throw std::invalid_argument("confusion: need at least one class");
    ConfusionMatrix cm;
    cm.n = n;
    cm.counts.assign(static_cast<size_t>(n * n), 0);
    for (size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= n)
            throw std::invalid_argument("confusion: label " + std::to_string(labels[i]) +
                                        " out of range");
        if (preds[i] < 0 || preds[i] >= n)
            throw std::invalid_argument("confusion: prediction " + std::to_string(preds[i]) +
                                        " out of range");
        cm.counts[static_cast<size_t>(labels[i] * n + preds[i])] += 1;
    }
    return cm;
}

double uar(const ConfusionMatrix& cm) {
    if (cm.n < 1) throw std::invalid_argument("uar: empty matrix");
    double sum = 0.0;
    for (int64_t k = 0; k < cm.n; ++k) {
        const int64_t row = cm.row_total(k);
        if (row == 0)
            throw std::invalid_argument("uar: class " + std::to_string(k) + " has no samples");
        sum += static_cast<double>(cm.at(k, k)) / static_cast<double>(row);
    }
    return 100.0 * sum / static_cast<double>(cm.n);
}

double war(const ConfusionMatrix& cm) {
    const int64_t total = cm.total();
    if (total == 0) throw std::invalid_argument("war: no samples");
    return 100.0 * static_cast<double>(cm.trace()) / static_cast<double>(total);
}

void EvalOptions::validate() const {
    if (split.empty()) throw std::invalid_argument("eval options: split is empty");
    if (mode != "pn_diff" && mode != "pos_only")
        throw std::invalid_argument("eval options: mode must be pn_diff or pos_only");
    if (modalities.empty()) throw std::invalid_argument("eval options: modalities must be non-empty");
    for (const auto& m : modalities)
        if (m != "v" && m != "p" && m != "l" && m != "f")
            throw std::invalid_argument("eval options: unknown modality " + m);
    if (weighting_mode != "adaptive" && weighting_mode.rfind("fixed:", 0) != 0)
        throw std::invalid_argument("eval options: weighting_mode must be adaptive or fixed:<w_v>");
    if (!(tau > 0.0)) throw std::invalid_argument("eval options: tau must be positive");
    if (batch_size < 1) throw std::invalid_argument("eval options: batch_size must be at least 1");
}

EvalOptions EvalOptions::from_train_config(const TrainConfig& cfg) {
    EvalOptions o;
    o.modalities = cfg.modalities;
    o.weighting_mode = cfg.weighting_mode;
    o.tau = cfg.tau;
    o.batch_size = cfg.batch_size;
    return o;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json w = nlohmann::json::object();
    for (const auto& [m, v] : mean_weights) w[m] = v;
    return {{"uar", uar},
            {"war", war},
            {"per_class_accuracy", per_class_accuracy},
            {"confusion", confusion.to_json()},
            {"mean_weights", w},
            {"class_mean_pos", class_mean_pos},
            {"class_mean_neg", class_mean_neg},
            {"class_names", class_names},
            {"mode", mode},
            {"split", split},
            {"fingerprint", fingerprint},
            {"samples", samples}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.uar = j.at("uar").get<double>();
    r.war = j.at("war").get<double>();
    r.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
    r.confusion = ConfusionMatrix::from_json(j.at("confusion"));
    for (const auto& [m, v] : j.at("mean_weights").items()) r.mean_weights[m] = v.get<double>();
    r.class_mean_pos = j.at("class_mean_pos").get<std::vector<double>>();
    r.class_mean_neg = j.at("class_mean_neg").get<std::vector<double>>();
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.mode = j.at("mode").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.samples = j.at("samples").get<int64_t>();
    return r;
}

namespace {

Tensor tensor_row(const Tensor& t, int64_t row) {
    const int64_t width = t.shape[1];
    Tensor out({width});
    std::copy(t.data.begin() + row * width, t.data.begin() + (row + 1) * width, out.data.begin());
    return out;
}

std::vector<double> fixed_weight_values(const std::vector<std::string>& modalities, double wv) {
    const size_t k = modalities.size();
    std::vector<double> w(k);
    for (size_t i = 0; i < k; ++i)
        w[i] = modalities[i] == "v" ? (k == 1 ? 1.0 : wv)
                                    : (1.0 - wv) / static_cast<double>(k - 1);
    return w;
}

// Which tower supplies the class descriptor embeddings.
enum class PnSource { kLabelTower, kDescTower };

struct ClassifyOutcome {
    std::vector<int64_t> preds;
    std::vector<int64_t> labels;
    std::map<std::string, double> weight_sum;
    std::vector<double> pos_sum;
    std::vector<double> neg_sum;
    std::vector<int64_t> class_count;
};

ClassifyOutcome classify_entries(const Model& model, const DatasetManifest& manifest,
                                 const std::vector<ManifestEntry>& entries,
                                 const std::vector<std::string>& pn_class_names,
                                 PnSource pn_source, const std::vector<std::string>& modalities,
                                 const std::string& weighting_mode, double tau,
                                 const std::string& mode, int64_t batch_size) {
    const int64_t N = static_cast<int64_t>(pn_class_names.size());
    const bool use_v = std::count(modalities.begin(), modalities.end(), "v") > 0;
    const bool use_p = std::count(modalities.begin(), modalities.end(), "p") > 0;
    const bool use_l = std::count(modalities.begin(), modalities.end(), "l") > 0;
    const bool use_f = std::count(modalities.begin(), modalities.end(), "f") > 0;
    const bool fixed = weighting_mode.rfind("fixed:", 0) == 0;
    std::vector<double> fixed_w;
    if (fixed) {
        const double wv = std::stod(weighting_mode.substr(6));
        if (!(wv > 0.0 && wv < 1.0))
            throw std::invalid_argument("evaluate: fixed w_v must be in (0, 1)");
        if (!use_v) throw std::invalid_argument("evaluate: fixed weighting needs the video modality");
        fixed_w = fixed_weight_values(modalities, wv);
    }

    auto [pos_texts, neg_texts] = expand_pn_templates(pn_class_names, model.config.negation);
    std::vector<TokenSequence> pos_seqs, neg_seqs;
    int64_t prompts_per_class = 1;
    if (pn_source == PnSource::kDescTower) {
        // Positives are an ensemble of caption-style prompts; the encoder was
        // aligned against captions, so these sit in its trained distribution.
        for (const auto& name : pn_class_names) {
            const std::vector<std::string> prompts = caption_prompts(name);
            prompts_per_class = static_cast<int64_t>(prompts.size());
            for (const auto& t : prompts)
                pos_seqs.push_back(tokenize(t, model.vocab, model.config.desc_max_len));
        }
        for (const auto& t : neg_texts)
            neg_seqs.push_back(tokenize(t, model.vocab, model.config.desc_max_len));
    } else {
        std::tie(pos_seqs, neg_seqs) = model.label_tokens(pn_class_names);
    }

    ClassifyOutcome out;
    out.pos_sum.assign(static_cast<size_t>(N), 0.0);
    out.neg_sum.assign(static_cast<size_t>(N), 0.0);
    out.class_count.assign(static_cast<size_t>(N), 0);

    const int64_t S = static_cast<int64_t>(entries.size());
    for (int64_t start = 0; start < S; start += batch_size) {
        const int64_t stop = std::min(S, start + batch_size);
        const int64_t B = stop - start;

        std::vector<SampleRecord> recs;
        recs.reserve(static_cast<size_t>(B));
        for (int64_t i = start; i < stop; ++i)
            recs.push_back(load_sample(manifest, entries[static_cast<size_t>(i)].sample_id));

        Tape tape;
        TapeBind bind = model.bind(tape);
        Tensor c_pos, c_neg;
        if (pn_source == PnSource::kDescTower) {
            const Tensor flat = tape.value(model.encode_description(bind, pos_seqs));
            const int64_t e = model.config.e;
            c_pos = Tensor::zeros({N, e});
            for (int64_t k = 0; k < N; ++k)
                for (int64_t q = 0; q < prompts_per_class; ++q)
                    for (int64_t j = 0; j < e; ++j)
                        c_pos.data[static_cast<size_t>(k * e + j)] +=
                            flat.data[static_cast<size_t>((k * prompts_per_class + q) * e + j)] /
                            static_cast<double>(prompts_per_class);
            c_neg = tape.value(model.encode_description(bind, neg_seqs));
        } else {
            PNVals pn = model.encode_labels(bind, pos_seqs, neg_seqs);
            c_pos = tape.value(pn.pos);
            c_neg = tape.value(pn.neg);
        }

        std::map<std::string, Tensor> embs;
        if (use_v) {
            std::vector<Tensor> frames;
            for (const auto& r : recs) frames.push_back(r.frames);
            embs["v"] = tape.value(model.encode_video(bind, frames));
        }
        if (use_p) {
            std::vector<IntTensor> maps;
            for (const auto& r : recs) maps.push_back(r.parsing_map);
            embs["p"] = tape.value(model.encode_parsing(bind, maps));
        }
        if (use_l) {
            std::vector<Tensor> maps;
            for (const auto& r : recs) maps.push_back(r.landmark_map);
            embs["l"] = tape.value(model.encode_landmarks(bind, maps));
        }
        if (use_f) {
            std::vector<TokenSequence> seqs;
            for (const auto& r : recs)
                seqs.push_back(tokenize(r.description, model.vocab, model.config.desc_max_len));
            embs["f"] = tape.value(model.encode_description(bind, seqs));
        }

        for (int64_t b = 0; b < B; ++b) {
            SimilarityTable table;
            table.modalities = modalities;
            std::vector<Tensor> rows;
            for (const auto& m : modalities) {
                Tensor row = tensor_row(embs.at(m), b);
                table.sims[m] = pn_similarity(row, c_pos, c_neg);
                rows.push_back(std::move(row));
            }
            FusionWeights weights;
            if (fixed) {
                weights.modalities = modalities;
                weights.w = fixed_w;
            } else {
                weights = modality_weights(table);
            }
            Tensor fused = fuse(rows, weights);
            PNSim fused_pn = pn_similarity(fused, c_pos, c_neg);
            const std::vector<double>& sims = mode == "pos_only" ? fused_pn.pos : fused_pn.diff;
            Classification cls = classify(sims, tau);

            const int64_t y = recs[static_cast<size_t>(b)].class_id;
            if (y < 0 || y >= N)
                throw std::invalid_argument("evaluate: label " + std::to_string(y) + " out of range");
            out.preds.push_back(cls.predicted);
            out.labels.push_back(y);
            for (size_t m = 0; m < modalities.size(); ++m)
                out.weight_sum[modalities[m]] += weights.w[m];
            out.pos_sum[static_cast<size_t>(y)] += fused_pn.pos[static_cast<size_t>(y)];
            out.neg_sum[static_cast<size_t>(y)] += fused_pn.neg[static_cast<size_t>(y)];
            out.class_count[static_cast<size_t>(y)] += 1;
        }
    }
    return out;
}

EvalReport report_from_outcome(const ClassifyOutcome& out, const std::vector<std::string>& names,
                               const std::string& mode, const std::string& split,
                               const std::string& fingerprint) {
    const int64_t N = static_cast<int64_t>(names.size());
    EvalReport r;
    r.confusion = confusion(out.preds, out.labels, N);
    r.war = war(r.confusion);
    for (int64_t k = 0; k < N; ++k) {
        const int64_t row = r.confusion.row_total(k);
        if (row == 0)
            throw std::invalid_argument("evaluate: class " + std::to_string(k) +
                                        " has no samples in the evaluated split");
        r.per_class_accuracy.push_back(100.0 * static_cast<double>(r.confusion.at(k, k)) /
                                       static_cast<double>(row));
        const double cnt = static_cast<double>(out.class_count[static_cast<size_t>(k)]);
        r.class_mean_pos.push_back(out.pos_sum[static_cast<size_t>(k)] / cnt);
        r.class_mean_neg.push_back(out.neg_sum[static_cast<size_t>(k)] / cnt);
    }
    r.uar = uar(r.confusion);
    const double total = static_cast<double>(out.preds.size());
    for (const auto& [m, sum] : out.weight_sum) r.mean_weights[m] = sum / total;
    r.class_names = names;
    r.mode = mode;
    r.split = split;
    r.fingerprint = fingerprint;
    r.samples = static_cast<int64_t>(out.preds.size());
    return r;
}

}  // namespace

EvalReport evaluate(const Model& model, const DatasetManifest& manifest, const EvalOptions& opts,
                    const std::string& fingerprint) {
    opts.validate();
    const auto entries = manifest.entries_for_split(opts.split);
    if (entries.empty())
        throw std::invalid_argument("evaluate: split " + opts.split + " is empty");
    if (model.config.num_classes != static_cast<int64_t>(manifest.class_names.size()))
        throw std::runtime_error("architecture mismatch: model expects " +
                                 std::to_string(model.config.num_classes) + " classes, corpus has " +
                                 std::to_string(manifest.class_names.size()));
    ClassifyOutcome out = classify_entries(model, manifest, entries, manifest.class_names,
                                           PnSource::kLabelTower, opts.modalities,
                                           opts.weighting_mode, opts.tau, opts.mode,
                                           opts.batch_size);
    return report_from_outcome(out, manifest.class_names, opts.mode, opts.split, fingerprint);
}

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const DatasetManifest& manifest, const std::string& split,
                               const std::string& mode) {
    nlohmann::json header;
    Model model = load_model(checkpoint, &header);

    for (const char* field : {"T", "H", "W", "C", "R"}) {
        const int64_t have = model.config.to_json().at(field).get<int64_t>();
        const int64_t want = manifest.config.to_json().at(field).get<int64_t>();
        if (have != want)
            throw std::runtime_error("architecture mismatch: checkpoint " + std::string(field) +
                                     "=" + std::to_string(have) + ", corpus has " +
                                     std::to_string(want));
    }
    if (header.contains("class_names") &&
        header.at("class_names").get<std::vector<std::string>>() != manifest.class_names)
        throw std::runtime_error("architecture mismatch: checkpoint class names differ from corpus");

    EvalOptions opts;
    if (header.contains("train_config"))
        opts = EvalOptions::from_train_config(TrainConfig::from_json(header.at("train_config")));
    opts.split = split;
    opts.mode = mode;

    std::string fingerprint = header.value("fingerprint", "");
    if (fingerprint.empty()) {
        const std::string dump = model.config.to_json().dump();
        fingerprint = hash_hex(fnv1a64(dump.data(), dump.size()));
    }
    return evaluate(model, manifest, opts, fingerprint);
}

void ZeroShotConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("zero-shot config: epochs must be non-negative");
    if (batch_size < 2)
        throw std::invalid_argument("zero-shot config: contrastive batches need at least 2 samples");
    if (!(learning_rate > 0.0))
        throw std::invalid_argument("zero-shot config: learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("zero-shot config: momentum must be in [0, 1)");
    if (!(clip_norm >= 0.0))
        throw std::invalid_argument("zero-shot config: clip_norm must be non-negative");
    if (!(tau > 0.0)) throw std::invalid_argument("zero-shot config: tau must be positive");
    if (!(eval_tau > 0.0)) throw std::invalid_argument("zero-shot config: eval_tau must be positive");
    if (mode != "pn_diff" && mode != "pos_only")
        throw std::invalid_argument("zero-shot config: mode must be pn_diff or pos_only");
    if (weighting_mode != "adaptive" && weighting_mode.rfind("fixed:", 0) != 0)
        throw std::invalid_argument("zero-shot config: weighting_mode must be adaptive or fixed:<w_v>");
    if (negation_word.empty()) throw std::invalid_argument("zero-shot config: negation word is empty");
    if (!(s >= 0.0)) throw std::invalid_argument("zero-shot config: s must be non-negative");
}

nlohmann::json ZeroShotConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"momentum", momentum},
            {"clip_norm", clip_norm},
            {"tau", tau},
            {"eval_tau", eval_tau},
            {"mode", mode},
            {"weighting_mode", weighting_mode},
            {"negation_word", negation_word},
            {"s", s},
            {"adapters_enabled", adapters_enabled},
            {"seed", seed}};
}

ZeroShotConfig ZeroShotConfig::from_json(const nlohmann::json& j) {
    ZeroShotConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.tau = j.value("tau", c.tau);
    c.eval_tau = j.value("eval_tau", c.eval_tau);
    c.mode = j.value("mode", c.mode);
    c.weighting_mode = j.value("weighting_mode", c.weighting_mode);
    c.negation_word = j.value("negation_word", c.negation_word);
    c.s = j.value("s", c.s);
    c.adapters_enabled = j.value("adapters_enabled", c.adapters_enabled);
    c.seed = j.value("seed", c.seed);
    return c;
}

EvalReport zero_shot(const DatasetManifest& pretrain, const DatasetManifest& target,
                     const ModelConfig& arch_in, const ZeroShotConfig& cfg) {
    cfg.validate();
    for (const auto& name : target.class_names)
        if (std::count(pretrain.class_names.begin(), pretrain.class_names.end(), name) > 0)
            throw std::invalid_argument("zero_shot: corpora share the class name \"" + name +
                                        "\"; the protocol needs disjoint label sets");
    for (const char* field : {"T", "H", "W", "C", "R"}) {
        const int64_t a = pretrain.config.to_json().at(field).get<int64_t>();
        const int64_t b = target.config.to_json().at(field).get<int64_t>();
        if (a != b)
            throw std::runtime_error("architecture mismatch: corpora differ in " +
                                     std::string(field));
    }
    const auto train_entries = pretrain.entries_for_split("train");
    if (train_entries.empty())
        throw std::invalid_argument("zero_shot: pretraining corpus has an empty train split");

    Vocabulary vocab = corpus_vocabulary(pretrain, cfg.negation_word);
    ModelConfig arch = arch_in;
    arch.T = pretrain.config.T;
    arch.H = pretrain.config.H;
    arch.W = pretrain.config.W;
    arch.C = pretrain.config.C;
    arch.R = pretrain.config.R;
    arch.num_classes = static_cast<int64_t>(pretrain.class_names.size());
    arch.s = cfg.s;
    arch.negation = cfg.negation_word;
    arch.adapters_enabled = cfg.adapters_enabled;
    Model model = Model::init(arch, vocab, cfg.seed);

    struct Loaded {
        Tensor frames;
        IntTensor parsing;
        Tensor landmarks;
        TokenSequence caption;
    };
    std::vector<Loaded> data;
    data.reserve(train_entries.size());
    for (const auto& e : train_entries) {
        SampleRecord rec = load_sample(pretrain, e.sample_id);
        data.push_back({std::move(rec.frames), std::move(rec.parsing_map),
                        std::move(rec.landmark_map),
                        tokenize(rec.description, vocab, arch.desc_max_len)});
    }
    const int64_t n = static_cast<int64_t>(data.size());

    auto [pos_tokens, neg_tokens] = model.label_tokens(pretrain.class_names);
    const std::vector<std::string> fused_mods{"v", "p", "l"};

    SgdState sgd;
    Rng shuffle_root(cfg.seed);
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng sh = shuffle_root.substream("shuffle-epoch-" + std::to_string(epoch));
        for (int64_t i = n; i > 1; --i)
            std::swap(order[static_cast<size_t>(i - 1)],
                      order[static_cast<size_t>(sh.uniform_int(i))]);

        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            const int64_t stop = std::min(n, start + cfg.batch_size);
            const int64_t B = stop - start;
            if (B < 2) continue;  // a contrastive pair needs company

            Tape tape;
            TapeBind bind = model.bind(tape);
            PNVals pn = model.encode_labels(bind, pos_tokens, neg_tokens);

            std::vector<Tensor> frames;
            std::vector<IntTensor> parsing;
            std::vector<Tensor> landmarks;
            std::vector<TokenSequence> captions;
            for (int64_t i = start; i < stop; ++i) {
                const Loaded& d = data[static_cast<size_t>(order[static_cast<size_t>(i)])];
                frames.push_back(d.frames);
                parsing.push_back(d.parsing);
                landmarks.push_back(d.landmarks);
                captions.push_back(d.caption);
            }
            std::map<std::string, Val> embs;
            embs["v"] = model.encode_video(bind, frames);
            embs["p"] = model.encode_parsing(bind, parsing);
            embs["l"] = model.encode_landmarks(bind, landmarks);
            Val caps = model.encode_description(bind, captions);

            std::vector<Val> fused(static_cast<size_t>(B));
            std::vector<Val> cap_rows(static_cast<size_t>(B));
            for (int64_t b = 0; b < B; ++b) {
                std::vector<Val> rows;
                std::vector<Val> sims;
                for (const auto& m : fused_mods) {
                    Val row = tape.row_select(embs.at(m), b);
                    rows.push_back(row);
                    sims.push_back(pn_sim_t(tape, row, pn.pos, pn.neg));
                }
                Val w = modality_weights_t(tape, sims, false);
                fused[static_cast<size_t>(b)] = fuse_t(tape, w, rows);
                cap_rows[static_cast<size_t>(b)] = tape.row_select(caps, b);
            }

            std::vector<std::vector<Val>> cos(static_cast<size_t>(B),
                                              std::vector<Val>(static_cast<size_t>(B)));
            for (int64_t i = 0; i < B; ++i)
                for (int64_t j = 0; j < B; ++j)
                    cos[static_cast<size_t>(i)][static_cast<size_t>(j)] = tape.cosine(
                        fused[static_cast<size_t>(i)], cap_rows[static_cast<size_t>(j)]);

            std::vector<Val> losses;
            for (int64_t i = 0; i < B; ++i) {
                Val row = tape.scale(tape.stack_scalars(cos[static_cast<size_t>(i)]), 1.0 / cfg.tau);
                losses.push_back(tape.cross_entropy_logits(row, i));
            }
            for (int64_t j = 0; j < B; ++j) {
                std::vector<Val> col;
                for (int64_t i = 0; i < B; ++i)
                    col.push_back(cos[static_cast<size_t>(i)][static_cast<size_t>(j)]);
                Val colv = tape.scale(tape.stack_scalars(col), 1.0 / cfg.tau);
                losses.push_back(tape.cross_entropy_logits(colv, j));
            }
            Val loss = tape.scale(tape.add_n(losses), 1.0 / (2.0 * static_cast<double>(B)));
            if (!std::isfinite(tape.value(loss).data[0]))
                throw std::runtime_error("zero_shot: non-finite contrastive loss at epoch " +
                                         std::to_string(epoch));
            tape.backward(loss);
            std::map<std::string, Tensor> grads;
            bind.collect_grads(grads);
            clip_gradients(grads, cfg.clip_norm);
            sgd_step(model.store, model.trainable, grads, sgd, cfg.learning_rate, cfg.momentum);
        }
    }

    const nlohmann::json fp_src{{"arch", model.config.to_json()},
                                {"zero_shot", cfg.to_json()},
                                {"pretrain_corpus", pretrain.corpus_name},
                                {"target_corpus", target.corpus_name}};
    const std::string dump = fp_src.dump();
    const std::string fingerprint = hash_hex(fnv1a64(dump.data(), dump.size()));

    ClassifyOutcome out = classify_entries(model, target, target.samples, target.class_names,
                                           PnSource::kDescTower, fused_mods, cfg.weighting_mode,
                                           cfg.eval_tau, cfg.mode, cfg.batch_size);
    return report_from_outcome(out, target.class_names, cfg.mode, "all", fingerprint);
}

std::vector<AblationCell> ablation_grid(const TrainConfig& base) {
    base.validate();
    std::vector<AblationCell> cells;
    auto push = [&](std::string id, std::string delta, TrainConfig cfg) {
        cfg.validate();
        cells.push_back({std::move(id), std::move(delta), std::move(cfg)});
    };

    const std::vector<std::vector<std::string>> subsets{
        {"v"}, {"v", "p"}, {"v", "l"}, {"v", "p", "l"}, {"v", "f"}, {"v", "p", "l", "f"}};
    for (const auto& mods : subsets) {
        TrainConfig c = base;
        c.modalities = mods;
        std::string tag;
        for (const auto& m : mods) tag += m;
        std::string delta = "modalities=";
        for (size_t i = 0; i < mods.size(); ++i) delta += (i ? "+" : "") + mods[i];
        push("mod_" + tag, delta, c);
    }
    for (bool on : {true, false}) {
        TrainConfig c = base;
        c.adapters_enabled = on;
        push(on ? "adapters_on" : "adapters_off", std::string("adapters=") + (on ? "on" : "off"), c);
    }
    for (const char* word : {"no", "less"}) {
        TrainConfig c = base;
        c.negation_word = word;
        push(std::string("negation_") + word, std::string("negation=") + word, c);
    }
    for (double s : {0.3, 0.5, 0.7}) {
        TrainConfig c = base;
        c.s = s;
        push("s_" + fmt(s, 1), "s=" + fmt(s, 1), c);
    }
    {
        TrainConfig c = base;
        c.weighting_mode = "adaptive";
        push("weight_adaptive", "weighting=adaptive", c);
    }
    for (int i = 1; i <= 9; ++i) {
        const double wv = static_cast<double>(i) / 10.0;
        TrainConfig c = base;
        c.weighting_mode = "fixed:" + fmt(wv, 1);
        push("weight_fixed_" + fmt(wv, 1), "weighting=fixed:" + fmt(wv, 1), c);
    }
    return cells;
}

std::vector<AblationRow> ablation_suite(const DatasetManifest& manifest, const ModelConfig& arch,
                                        const TrainConfig& base,
                                        const std::filesystem::path& out_dir, int64_t jobs) {
    if (jobs < 1) throw std::invalid_argument("ablation_suite: jobs must be at least 1");
    const std::vector<AblationCell> cells = ablation_grid(base);
    std::vector<AblationRow> rows(cells.size());

    std::atomic<size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                const AblationCell& cell = cells[i];
                TrainResult tr = train(manifest, arch, cell.cfg);
                EvalOptions opts = EvalOptions::from_train_config(cell.cfg);
                EvalReport rep = evaluate(tr.model, manifest, opts, tr.fingerprint);
                rows[i] = {cell.cell_id, cell.config_delta, rep.uar, rep.war,
                           rep.per_class_accuracy};
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mu);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const size_t workers = static_cast<size_t>(std::min<int64_t>(jobs, static_cast<int64_t>(cells.size())));
    for (size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    const std::string fingerprint = config_fingerprint(arch, base);
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream f(out_dir / ("ablation_" + fingerprint + ".csv"), std::ios::binary);
        if (!f) throw std::runtime_error("ablation_suite: cannot write CSV in " + out_dir.string());
        f << ablation_csv(rows);
    }
    {
        std::ofstream f(out_dir / ("weight_sweep_" + fingerprint + ".svg"), std::ios::binary);
        if (!f) throw std::runtime_error("ablation_suite: cannot write SVG in " + out_dir.string());
        f << weight_sweep_svg(rows);
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    size_t classes = 0;
    for (const auto& r : rows) classes = std::max(classes, r.per_class_accuracy.size());
    std::string out = "cell_id,config_delta,uar,war";
    for (size_t k = 0; k < classes; ++k) out += ",pc_" + std::to_string(k);
    out += "\n";
    for (const auto& r : rows) {
        out += r.cell_id + "," + r.config_delta + "," + fmt(r.uar) + "," + fmt(r.war);
        for (size_t k = 0; k < classes; ++k)
            out += "," + (k < r.per_class_accuracy.size() ? fmt(r.per_class_accuracy[k]) : "");
        out += "\n";
    }
    return out;
}

std::vector<AblationRow> parse_ablation_csv(const std::string& csv) {
    std::vector<AblationRow> rows;
    size_t pos = 0;
    bool header = true;
    while (pos < csv.size()) {
        size_t eol = csv.find('\n', pos);
        if (eol == std::string::npos) eol = csv.size();
        const std::string line = csv.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        if (header) {
            if (line.rfind("cell_id,", 0) != 0)
                throw std::invalid_argument("parse_ablation_csv: unexpected header " + line);
            header = false;
            continue;
        }
        std::vector<std::string> fields;
        size_t f = 0;
        while (true) {
            size_t comma = line.find(',', f);
            if (comma == std::string::npos) {
                fields.push_back(line.substr(f));
                break;
            }
            fields.push_back(line.substr(f, comma - f));
            f = comma + 1;
        }
        if (fields.size() < 4)
            throw std::invalid_argument("parse_ablation_csv: short row " + line);
        AblationRow row;
        row.cell_id = fields[0];
        row.config_delta = fields[1];
        row.uar = std::stod(fields[2]);
        row.war = std::stod(fields[3]);
        for (size_t k = 4; k < fields.size(); ++k)
            if (!fields[k].empty()) row.per_class_accuracy.push_back(std::stod(fields[k]));
        rows.push_back(std::move(row));
    }
    if (header) throw std::invalid_argument("parse_ablation_csv: empty input");
    return rows;
}

namespace {

constexpr double kSvgW = 640.0;
constexpr double kSvgH = 400.0;
constexpr double kMargin = 56.0;

double svg_x(double frac) { return kMargin + frac * (kSvgW - 2 * kMargin); }
double svg_y(double percent) { return kSvgH - kMargin - percent / 100.0 * (kSvgH - 2 * kMargin); }

std::string svg_header(const std::string& title) {
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(kSvgW, 0) +
                    "\" height=\"" + fmt(kSvgH, 0) + "\" viewBox=\"0 0 " + fmt(kSvgW, 0) + " " +
                    fmt(kSvgH, 0) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + fmt(kSvgW / 2, 1) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
         "font-family=\"sans-serif\">" + title + "</text>\n";
    // axes
    s += "<line x1=\"" + fmt(kMargin, 1) + "\" y1=\"" + fmt(kSvgH - kMargin, 1) + "\" x2=\"" +
         fmt(kSvgW - kMargin, 1) + "\" y2=\"" + fmt(kSvgH - kMargin, 1) +
         "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + fmt(kMargin, 1) + "\" y1=\"" + fmt(kMargin, 1) + "\" x2=\"" +
         fmt(kMargin, 1) + "\" y2=\"" + fmt(kSvgH - kMargin, 1) + "\" stroke=\"black\"/>\n";
    for (int p = 0; p <= 100; p += 20) {
        s += "<text x=\"" + fmt(kMargin - 8, 1) + "\" y=\"" + fmt(svg_y(p) + 4, 1) +
             "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" +
             std::to_string(p) + "</text>\n";
        s += "<line x1=\"" + fmt(kMargin - 4, 1) + "\" y1=\"" + fmt(svg_y(p), 1) + "\" x2=\"" +
             fmt(kMargin, 1) + "\" y2=\"" + fmt(svg_y(p), 1) + "\" stroke=\"black\"/>\n";
    }
    return s;
}

}  // namespace

std::string weight_sweep_svg(const std::vector<AblationRow>& rows) {
    std::vector<std::pair<double, double>> sweep;  // (w_v, war)
    double adaptive_war = -1.0;
    for (const auto& r : rows) {
        if (r.cell_id.rfind("weight_fixed_", 0) == 0)
            sweep.emplace_back(std::stod(r.cell_id.substr(13)), r.war);
        else if (r.cell_id == "weight_adaptive")
            adaptive_war = r.war;
    }
    std::sort(sweep.begin(), sweep.end());

    std::string s = svg_header("WAR against fixed video weight");
    auto x_of = [](double wv) { return svg_x((wv - 0.1) / 0.8); };
    for (const auto& [wv, _] : sweep) {
        s += "<text x=\"" + fmt(x_of(wv), 1) + "\" y=\"" + fmt(kSvgH - kMargin + 18, 1) +
             "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" + fmt(wv, 1) +
             "</text>\n";
    }
    if (!sweep.empty()) {
        std::string pts;
        for (const auto& [wv, w] : sweep) pts += fmt(x_of(wv), 1) + "," + fmt(svg_y(w), 1) + " ";
        s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\"/>\n";
        for (const auto& [wv, w] : sweep)
            s += "<circle cx=\"" + fmt(x_of(wv), 1) + "\" cy=\"" + fmt(svg_y(w), 1) +
                 "\" r=\"3.5\" fill=\"#1f6fb2\"/>\n";
    }
    if (adaptive_war >= 0.0) {
        s += "<line x1=\"" + fmt(kMargin, 1) + "\" y1=\"" + fmt(svg_y(adaptive_war), 1) +
             "\" x2=\"" + fmt(kSvgW - kMargin, 1) + "\" y2=\"" + fmt(svg_y(adaptive_war), 1) +
             "\" stroke=\"#b23b1f\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n";
        s += "<text x=\"" + fmt(kSvgW - kMargin, 1) + "\" y=\"" +
             fmt(svg_y(adaptive_war) - 6, 1) +
             "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\" "
             "fill=\"#b23b1f\">adaptive " + fmt(adaptive_war, 2) + "</text>\n";
    }
    s += "<text x=\"" + fmt(kSvgW / 2, 1) + "\" y=\"" + fmt(kSvgH - 12, 1) +
         "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">fixed video weight"
         "</text>\n";
    s += "</svg>\n";
    return s;
}

std::string class_accuracy_svg(const EvalReport& report) {
    const size_t N = report.per_class_accuracy.size();
    std::string s = svg_header("Accuracy of each class");
    const double span = kSvgW - 2 * kMargin;
    const double slot = span / static_cast<double>(N == 0 ? 1 : N);
    const double bar = slot * 0.7;
    for (size_t k = 0; k < N; ++k) {
        const double acc = report.per_class_accuracy[k];
        const double x = kMargin + slot * static_cast<double>(k) + (slot - bar) / 2.0;
        const double y = svg_y(acc);
        s += "<rect x=\"" + fmt(x, 1) + "\" y=\"" + fmt(y, 1) + "\" width=\"" + fmt(bar, 1) +
             "\" height=\"" + fmt(kSvgH - kMargin - y, 1) + "\" fill=\"#1f6fb2\"/>\n";
        const std::string name = k < report.class_names.size() ? report.class_names[k]
                                                               : std::to_string(k);
        s += "<text x=\"" + fmt(x + bar / 2, 1) + "\" y=\"" + fmt(kSvgH - kMargin + 16, 1) +
             "\" text-anchor=\"middle\" font-size=\"9\" font-family=\"sans-serif\">" + name +
             "</text>\n";
        s += "<text x=\"" + fmt(x + bar / 2, 1) + "\" y=\"" + fmt(y - 4, 1) +
             "\" text-anchor=\"middle\" font-size=\"10\" font-family=\"sans-serif\">" +
             fmt(acc, 1) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

std::string render_report_markdown(const EvalReport& report) {
    std::string md = "# Evaluation report\n\n";
    md += "- fingerprint: `" + report.fingerprint + "`\n";
    md += "- split: " + report.split + ", mode: " + report.mode + ", samples: " +
          std::to_string(report.samples) + "\n";
    md += "- UAR: **" + fmt(report.uar, 2) + "**, WAR: **" + fmt(report.war, 2) + "**\n\n";

    md += "## Per-class results\n\n";
    md += "| class | accuracy | mean pos sim | mean neg sim |\n";
    md += "|---|---|---|---|\n";
    for (size_t k = 0; k < report.per_class_accuracy.size(); ++k) {
        const std::string name =
            k < report.class_names.size() ? report.class_names[k] : std::to_string(k);
        md += "| " + name + " | " + fmt(report.per_class_accuracy[k], 2) + " | " +
              fmt(report.class_mean_pos[k], 4) + " | " + fmt(report.class_mean_neg[k], 4) + " |\n";
    }

    md += "\n## Mean fusion weights\n\n";
    md += "| modality | weight |\n|---|---|\n";
    for (const auto& [m, w] : report.mean_weights) md += "| " + m + " | " + fmt(w, 4) + " |\n";

    md += "\n## Confusion matrix\n\n";
    md += "| true \\ pred |";
    for (int64_t c = 0; c < report.confusion.n; ++c)
        md += " " + std::to_string(c) + " |";
    md += "\n|---|";
    for (int64_t c = 0; c < report.confusion.n; ++c) md += "---|";
    md += "\n";
    for (int64_t r = 0; r < report.confusion.n; ++r) {
        md += "| " + std::to_string(r) + " |";
        for (int64_t c = 0; c < report.confusion.n; ++c)
            md += " " + std::to_string(report.confusion.at(r, c)) + " |";
        md += "\n";
    }
    return md;
}

}  // namespace mmdfer
