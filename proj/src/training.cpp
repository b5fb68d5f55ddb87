#include "mmdfer/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace mmdfer {

namespace {

const std::vector<std::string> kAllModalities{"v", "p", "l", "f"};

void validate_modalities(const std::vector<std::string>& mods) {
    if (mods.empty()) throw std::invalid_argument("train config: modalities must be non-empty");
    std::set<std::string> seen;
    for (const auto& m : mods) {
        if (std::find(kAllModalities.begin(), kAllModalities.end(), m) == kAllModalities.end())
            throw std::invalid_argument("train config: unknown modality " + m);
        if (!seen.insert(m).second)
            throw std::invalid_argument("train config: duplicate modality " + m);
    }
}

}  // namespace

bool TrainConfig::fixed_mode() const { return weighting_mode.rfind("fixed:", 0) == 0; }

double TrainConfig::fixed_wv() const {
    if (!fixed_mode())
        throw std::logic_error("weighting mode " + weighting_mode + " carries no fixed weight");
    return std::stod(weighting_mode.substr(6));
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be at least 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("train config: momentum must be in [0, 1)");
    if (!(clip_norm >= 0.0))
        throw std::invalid_argument("train config: clip_norm must be non-negative");
    if (!(tau > 0.0)) throw std::invalid_argument("train config: tau must be positive");
    if (!(s >= 0.0)) throw std::invalid_argument("train config: s must be non-negative");
    if (negation_word.empty()) throw std::invalid_argument("train config: negation word is empty");
    validate_modalities(modalities);
    if (weighting_mode != "adaptive") {
        if (!fixed_mode())
            throw std::invalid_argument("train config: weighting_mode must be adaptive or fixed:<w_v>");
        double wv = 0.0;
        try {
            wv = fixed_wv();
        } catch (const std::exception&) {
            throw std::invalid_argument("train config: cannot parse fixed weight in " + weighting_mode);
        }
        if (!(wv > 0.0 && wv < 1.0))
            throw std::invalid_argument("train config: fixed w_v must be in (0, 1)");
        if (std::find(modalities.begin(), modalities.end(), "v") == modalities.end())
            throw std::invalid_argument("train config: fixed weighting needs the video modality");
    }
    if (early_stop_patience < 1)
        throw std::invalid_argument("train config: early_stop_patience must be at least 1");
    if (!(early_stop_accuracy > 0.0 && early_stop_accuracy <= 1.0))
        throw std::invalid_argument("train config: early_stop_accuracy must be in (0, 1]");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"momentum", momentum},
            {"clip_norm", clip_norm},
            {"tau", tau},
            {"s", s},
            {"negation_word", negation_word},
            {"weighting_mode", weighting_mode},
            {"seed", seed},
            {"modalities", modalities},
            {"adapters_enabled", adapters_enabled},
            {"differentiable_weights", differentiable_weights},
            {"batch_avg_weights", batch_avg_weights},
            {"early_stop", early_stop},
            {"early_stop_accuracy", early_stop_accuracy},
            {"early_stop_patience", early_stop_patience}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.tau = j.value("tau", c.tau);
    c.s = j.value("s", c.s);
    c.negation_word = j.value("negation_word", c.negation_word);
    c.weighting_mode = j.value("weighting_mode", c.weighting_mode);
    c.seed = j.value("seed", c.seed);
    c.modalities = j.value("modalities", c.modalities);
    c.adapters_enabled = j.value("adapters_enabled", c.adapters_enabled);
    c.differentiable_weights = j.value("differentiable_weights", c.differentiable_weights);
    c.batch_avg_weights = j.value("batch_avg_weights", c.batch_avg_weights);
    c.early_stop = j.value("early_stop", c.early_stop);
    c.early_stop_accuracy = j.value("early_stop_accuracy", c.early_stop_accuracy);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    return c;
}

double cross_entropy(const std::vector<double>& probs, int64_t label) {
    if (label < 0 || label >= static_cast<int64_t>(probs.size()))
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(probs.size()) + " classes");
    const double p = probs[static_cast<size_t>(label)];
    if (!(p > 0.0)) return 700.0;  // -log of a denormal-or-zero probability, capped
    return -std::log(p);
}

double multi_modal_loss(const std::vector<SampleTerms>& batch, const std::vector<int64_t>& labels) {
    if (batch.empty()) throw std::invalid_argument("multi_modal_loss: empty batch");
    if (batch.size() != labels.size())
        throw std::invalid_argument("multi_modal_loss: batch and label counts differ");
    double total = 0.0;
    for (size_t b = 0; b < batch.size(); ++b) {
        const SampleTerms& t = batch[b];
        if (t.modality_probs.size() != t.weights.size())
            throw std::invalid_argument("multi_modal_loss: weights misaligned with modalities");
        double wsum = 0.0;
        for (double w : t.weights) {
            const bool single = t.weights.size() == 1;
            if (!(w > 0.0) || (!single && !(w < 1.0)) || (single && std::abs(w - 1.0) > 1e-9))
                throw std::invalid_argument("multi_modal_loss: weights must lie on the open simplex");
            wsum += w;
        }
        if (std::abs(wsum - 1.0) > 1e-9)
            throw std::invalid_argument("multi_modal_loss: weights must sum to one");
        double loss = cross_entropy(t.fused_probs, labels[b]);
        for (size_t m = 0; m < t.weights.size(); ++m)
            loss += t.weights[m] * cross_entropy(t.modality_probs[m], labels[b]);
        total += loss;
    }
    return total / static_cast<double>(batch.size());
}

double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double v : g.data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& [name, g] : grads)
            for (double& v : g.data) v *= scale;
    }
    return norm;
}

void sgd_step(ParamStore& store, const std::set<std::string>& trainable,
              const std::map<std::string, Tensor>& grads, SgdState& state, double lr,
              double momentum) {
    for (const auto& [name, g] : grads) {
        if (trainable.count(name) == 0)
            throw std::invalid_argument("sgd_step: gradient for frozen parameter " + name);
        if (!g.all_finite())
            throw std::runtime_error("sgd_step: non-finite gradient for parameter " + name);
        Tensor& p = store.get(name);
        if (!p.same_shape(g))
            throw std::invalid_argument("sgd_step: gradient shape mismatch for " + name);
        auto it = state.velocity.find(name);
        if (it == state.velocity.end())
            it = state.velocity.emplace(name, Tensor::zeros(p.shape)).first;
        Tensor& u = it->second;
        for (size_t i = 0; i < p.data.size(); ++i) {
            u.data[i] = momentum * u.data[i] + g.data[i];
            p.data[i] -= lr * u.data[i];
        }
    }
}

Vocabulary corpus_vocabulary(const DatasetManifest& manifest, const std::string& negation_word) {
    std::vector<std::string> texts;
    auto [pos, neg] = expand_pn_templates(manifest.class_names, negation_word);
    texts.insert(texts.end(), pos.begin(), pos.end());
    texts.insert(texts.end(), neg.begin(), neg.end());
    for (const auto& e : manifest.entries_for_split("train"))
        texts.push_back(load_sample(manifest, e.sample_id).description);
    return build_vocab(texts);
}

std::string config_fingerprint(const ModelConfig& arch, const TrainConfig& cfg) {
    const std::string dump =
        nlohmann::json{{"arch", arch.to_json()}, {"train", cfg.to_json()}}.dump();
    return hash_hex(fnv1a64(dump.data(), dump.size()));
}

namespace {

struct LoadedSample {
    Tensor frames;
    IntTensor parsing;
    Tensor landmarks;
    TokenSequence desc;
    int64_t label = 0;
};

struct BatchOutcome {
    double loss_sum = 0.0;
    double ce_fused_sum = 0.0;
    std::map<std::string, double> ce_sum;
    std::map<std::string, double> weight_sum;
    double grad_norm_sum = 0.0;
    int64_t batches = 0;
    int64_t correct = 0;
};

std::vector<double> fixed_weights(const TrainConfig& cfg) {
    const double wv = cfg.fixed_wv();
    const size_t k = cfg.modalities.size();
    std::vector<double> w(k);
    for (size_t i = 0; i < k; ++i)
        w[i] = cfg.modalities[i] == "v"
                   ? (k == 1 ? 1.0 : wv)
                   : (1.0 - wv) / static_cast<double>(k - 1);
    return w;
}

}  // namespace

TrainResult train(const DatasetManifest& manifest, const ModelConfig& arch_in,
                  const TrainConfig& cfg, const std::filesystem::path& checkpoint_path,
                  const std::filesystem::path& log_path) {
    cfg.validate();
    const auto entries = manifest.entries_for_split("train");
    if (entries.empty()) throw std::invalid_argument("train: manifest has an empty train split");

    Vocabulary vocab = corpus_vocabulary(manifest, cfg.negation_word);

    ModelConfig arch = arch_in;
    arch.T = manifest.config.T;
    arch.H = manifest.config.H;
    arch.W = manifest.config.W;
    arch.C = manifest.config.C;
    arch.R = manifest.config.R;
    arch.num_classes = static_cast<int64_t>(manifest.class_names.size());
    arch.s = cfg.s;
    arch.negation = cfg.negation_word;
    arch.adapters_enabled = cfg.adapters_enabled;

    Model model = Model::init(arch, vocab, cfg.seed);
    const std::string fingerprint = config_fingerprint(model.config, cfg);

    const bool use_v = std::find(cfg.modalities.begin(), cfg.modalities.end(), "v") != cfg.modalities.end();
    const bool use_p = std::find(cfg.modalities.begin(), cfg.modalities.end(), "p") != cfg.modalities.end();
    const bool use_l = std::find(cfg.modalities.begin(), cfg.modalities.end(), "l") != cfg.modalities.end();
    const bool use_f = std::find(cfg.modalities.begin(), cfg.modalities.end(), "f") != cfg.modalities.end();

    std::vector<LoadedSample> data;
    data.reserve(entries.size());
    for (const auto& e : entries) {
        SampleRecord rec = load_sample(manifest, e.sample_id);
        LoadedSample s;
        if (use_v) s.frames = std::move(rec.frames);
        if (use_p) s.parsing = std::move(rec.parsing_map);
        if (use_l) s.landmarks = std::move(rec.landmark_map);
        if (use_f) s.desc = tokenize(rec.description, vocab, model.config.desc_max_len);
        s.label = rec.class_id;
        data.push_back(std::move(s));
    }
    const int64_t n = static_cast<int64_t>(data.size());
    const int64_t N = model.config.num_classes;

    auto [pos_tokens, neg_tokens] = model.label_tokens(manifest.class_names);

    SgdState sgd;
    Rng shuffle_root(cfg.seed);
    std::vector<nlohmann::json> log_entries;
    std::set<std::string> covered;  // trainable params with a nonzero grad in epoch 1
    int64_t epochs_run = 0;
    int64_t hot_streak = 0;

    auto run_batch = [&](const std::vector<int64_t>& idx, bool first_epoch) {
        const int64_t B = static_cast<int64_t>(idx.size());
        Tape tape;
        TapeBind bind = model.bind(tape);
        PNVals pn = model.encode_labels(bind, pos_tokens, neg_tokens);

        std::map<std::string, Val> embs;
        if (use_v) {
            std::vector<Tensor> frames;
            for (int64_t i : idx) frames.push_back(data[static_cast<size_t>(i)].frames);
            embs["v"] = model.encode_video(bind, frames);
        }
        if (use_p) {
            std::vector<IntTensor> maps;
            for (int64_t i : idx) maps.push_back(data[static_cast<size_t>(i)].parsing);
            embs["p"] = model.encode_parsing(bind, maps);
        }
        if (use_l) {
            std::vector<Tensor> maps;
            for (int64_t i : idx) maps.push_back(data[static_cast<size_t>(i)].landmarks);
            embs["l"] = model.encode_landmarks(bind, maps);
        }
        if (use_f) {
            std::vector<TokenSequence> seqs;
            for (int64_t i : idx) seqs.push_back(data[static_cast<size_t>(i)].desc);
            embs["f"] = model.encode_description(bind, seqs);
        }

        const size_t k = cfg.modalities.size();
        std::vector<std::vector<Val>> rows(static_cast<size_t>(B));
        std::vector<std::vector<Val>> sims(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b) {
            for (const auto& m : cfg.modalities) {
                Val row = tape.row_select(embs.at(m), b);
                rows[static_cast<size_t>(b)].push_back(row);
                sims[static_cast<size_t>(b)].push_back(pn_sim_t(tape, row, pn.pos, pn.neg));
            }
        }

        // One weights node per sample; fixed and batch-averaged modes
        // share a single node across the batch.
        std::vector<Val> weight_nodes(static_cast<size_t>(B));
        if (cfg.fixed_mode()) {
            Tensor w({static_cast<int64_t>(k)});
            w.data = fixed_weights(cfg);
            Val shared = tape.leaf(std::move(w));
            for (auto& wn : weight_nodes) wn = shared;
        } else if (cfg.batch_avg_weights) {
            Val shared;
            if (cfg.differentiable_weights) {
                std::vector<Val> per;
                for (int64_t b = 0; b < B; ++b)
                    per.push_back(modality_weights_t(tape, sims[static_cast<size_t>(b)], true));
                shared = tape.scale(tape.add_n(per), 1.0 / static_cast<double>(B));
            } else {
                Tensor w = Tensor::zeros({static_cast<int64_t>(k)});
                for (int64_t b = 0; b < B; ++b) {
                    Val one = modality_weights_t(tape, sims[static_cast<size_t>(b)], false);
                    const Tensor& tv = tape.value(one);
                    for (size_t i = 0; i < tv.data.size(); ++i) w.data[i] += tv.data[i];
                }
                for (double& v : w.data) v /= static_cast<double>(B);
                shared = tape.leaf(std::move(w));
            }
            for (auto& wn : weight_nodes) wn = shared;
        } else {
            for (int64_t b = 0; b < B; ++b)
                weight_nodes[static_cast<size_t>(b)] =
                    modality_weights_t(tape, sims[static_cast<size_t>(b)], cfg.differentiable_weights);
        }

        BatchOutcome out;
        std::vector<Val> sample_losses;
        for (int64_t b = 0; b < B; ++b) {
            const int64_t y = data[static_cast<size_t>(idx[static_cast<size_t>(b)])].label;
            if (y < 0 || y >= N)
                throw std::invalid_argument("train: label " + std::to_string(y) + " out of range");
            Val w = weight_nodes[static_cast<size_t>(b)];
            Val fused = fuse_t(tape, w, rows[static_cast<size_t>(b)]);
            Val fused_sims = pn_sim_t(tape, fused, pn.pos, pn.neg);
            Val ce_f = tape.cross_entropy_logits(class_logits_t(tape, fused_sims, cfg.tau), y);

            // copy: creating nodes below may reallocate the tape's storage
            const std::vector<double> wv = tape.value(w).data;
            std::vector<Val> terms{ce_f};
            for (size_t m = 0; m < k; ++m) {
                Val ce_m = tape.cross_entropy_logits(
                    class_logits_t(tape, sims[static_cast<size_t>(b)][m], cfg.tau), y);
                terms.push_back(tape.scale(ce_m, wv[m]));
                out.ce_sum[cfg.modalities[m]] += tape.value(ce_m).data[0];
                out.weight_sum[cfg.modalities[m]] += wv[m];
            }
            Val loss_b = tape.add_n(terms);
            sample_losses.push_back(loss_b);
            out.loss_sum += tape.value(loss_b).data[0];
            out.ce_fused_sum += tape.value(ce_f).data[0];

            const Tensor& fs = tape.value(fused_sims);
            int64_t pred = 0;
            for (int64_t i = 1; i < N; ++i)
                if (fs.data[static_cast<size_t>(i)] > fs.data[static_cast<size_t>(pred)]) pred = i;
            if (pred == y) ++out.correct;
        }

        Val batch_loss = tape.scale(tape.add_n(sample_losses), 1.0 / static_cast<double>(B));
        tape.backward(batch_loss);
        std::map<std::string, Tensor> grads;
        bind.collect_grads(grads);
        if (first_epoch)
            for (const auto& [name, g] : grads)
                if (g.max_abs() > 0.0) covered.insert(name);
        out.grad_norm_sum = clip_gradients(grads, cfg.clip_norm);
        out.batches = 1;
        sgd_step(model.store, model.trainable, grads, sgd, cfg.learning_rate, cfg.momentum);
        return out;
    };

    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng sh = shuffle_root.substream("shuffle-epoch-" + std::to_string(epoch));
        for (int64_t i = n; i > 1; --i)
            std::swap(order[static_cast<size_t>(i - 1)], order[static_cast<size_t>(sh.uniform_int(i))]);

        BatchOutcome epoch_out;
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            const int64_t stop = std::min(n, start + cfg.batch_size);
            std::vector<int64_t> idx(order.begin() + start, order.begin() + stop);
            BatchOutcome out = run_batch(idx, epoch == 1);
            epoch_out.loss_sum += out.loss_sum;
            epoch_out.ce_fused_sum += out.ce_fused_sum;
            epoch_out.correct += out.correct;
            epoch_out.grad_norm_sum += out.grad_norm_sum;
            epoch_out.batches += out.batches;
            for (const auto& [m, v] : out.ce_sum) epoch_out.ce_sum[m] += v;
            for (const auto& [m, v] : out.weight_sum) epoch_out.weight_sum[m] += v;
        }
        ++epochs_run;

        const double dn = static_cast<double>(n);
        nlohmann::json ce = nlohmann::json::object();
        nlohmann::json wmean = nlohmann::json::object();
        for (const auto& m : cfg.modalities) {
            ce[m] = epoch_out.ce_sum[m] / dn;
            wmean[m] = epoch_out.weight_sum[m] / dn;
        }
        const double acc = static_cast<double>(epoch_out.correct) / dn;
        nlohmann::json entry{{"epoch", epoch},
                             {"loss", epoch_out.loss_sum / dn},
                             {"ce_fused", epoch_out.ce_fused_sum / dn},
                             {"ce_modality", ce},
                             {"mean_weights", wmean},
                             {"mean_grad_norm",
                              epoch_out.grad_norm_sum / static_cast<double>(epoch_out.batches)},
                             {"train_accuracy", acc}};
        if (!std::isfinite(epoch_out.loss_sum))
            throw std::runtime_error("train: non-finite epoch loss at epoch " + std::to_string(epoch));
        if (epoch == 1) {
            std::vector<std::string> missing;
            for (const auto& name : model.trainable)
                if (covered.count(name) == 0) missing.push_back(name);
            entry["grad_coverage"] = {{"covered", static_cast<int64_t>(covered.size())},
                                      {"trainable", static_cast<int64_t>(model.trainable.size())},
                                      {"missing", missing}};
        }
        log_entries.push_back(std::move(entry));

        hot_streak = acc >= cfg.early_stop_accuracy ? hot_streak + 1 : 0;
        if (cfg.early_stop && hot_streak >= cfg.early_stop_patience) break;
    }

    TrainResult result{std::move(model), std::move(log_entries), {}, fingerprint};
    result.summary = {{"fingerprint", fingerprint},
                      {"epochs_run", epochs_run},
                      {"samples", n},
                      {"trainable_params", result.model.store.count_matching(result.model.trainable)},
                      {"total_params", result.model.store.total_params()},
                      {"checkpoint", checkpoint_path.string()}};

    if (!checkpoint_path.empty()) {
        save_model(checkpoint_path, result.model,
                   {{"train_config", cfg.to_json()},
                    {"fingerprint", fingerprint},
                    {"epochs_run", epochs_run},
                    {"class_names", manifest.class_names}});
    }
    if (!log_path.empty()) {
        std::ofstream f(log_path, std::ios::binary);
        if (!f) throw std::runtime_error("train: cannot write log " + log_path.string());
        nlohmann::json head = result.summary;
        head["type"] = "run";
        head["train_config"] = cfg.to_json();
        f << head.dump() << "\n";
        for (const auto& e : result.epochs) {
            nlohmann::json line = e;
            line["type"] = "epoch";
            f << line.dump() << "\n";
        }
    }
    return result;
}

}  // namespace mmdfer
