#include "mmdfer/encoders.hpp"

#include <cstring>
#include <stdexcept>

namespace mmdfer {

namespace {

struct TextTower {
    std::string embed;     // word-embedding table
    std::string pos;       // positional table
    std::string block;     // block prefix, index appended
    std::string adapter;   // adapter prefix, index appended
    std::string head;      // projection prefix
    int64_t max_len;
};

struct FrameTower {
    std::string patch;
    std::string pos_spatial;
    std::string pos_temporal;
    std::string block;
    std::string adapter;
};

int64_t linear_params(int64_t in, int64_t out) { return in * out + out; }

int64_t block_params(int64_t d) {
    return 2 * d + 4 * linear_params(d, d) + 2 * d + linear_params(d, 4 * d) + linear_params(4 * d, d);
}

int64_t adapter_params(int64_t d, int64_t r) { return linear_params(d, r) + linear_params(r, d); }

}  // namespace

void ModelConfig::validate() const {
    if (d < 1 || heads < 1 || r < 1 || depth < 1 || e < 1 || P < 1)
        throw std::invalid_argument("model config: widths and depth must be at least 1");
    if (d % heads != 0) throw std::invalid_argument("model config: heads must divide d");
    if (H % P != 0 || W % P != 0)
        throw std::invalid_argument("model config: patch size must divide H and W");
    if (T < 1 || C < 1 || R < 1) throw std::invalid_argument("model config: T, C, R must be at least 1");
    if (num_classes < 2) throw std::invalid_argument("model config: need at least 2 classes");
    if (label_max_len < 3 || desc_max_len < 3)
        throw std::invalid_argument("model config: token lengths must be at least 3");
    if (negation.empty()) throw std::invalid_argument("model config: negation word must be non-empty");
    if (!(s >= 0.0)) throw std::invalid_argument("model config: branch scale must be non-negative");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"d", d},
            {"heads", heads},
            {"r", r},
            {"depth", depth},
            {"e", e},
            {"P", P},
            {"T", T},
            {"H", H},
            {"W", W},
            {"C", C},
            {"R", R},
            {"num_classes", num_classes},
            {"vocab_size", vocab_size},
            {"label_max_len", label_max_len},
            {"desc_max_len", desc_max_len},
            {"s", s},
            {"negation", negation},
            {"adapters_enabled", adapters_enabled},
            {"share_pn_head", share_pn_head}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.r = j.value("r", c.r);
    c.depth = j.value("depth", c.depth);
    c.e = j.value("e", c.e);
    c.P = j.value("P", c.P);
    c.T = j.value("T", c.T);
    c.H = j.value("H", c.H);
    c.W = j.value("W", c.W);
    c.C = j.value("C", c.C);
    c.R = j.value("R", c.R);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.label_max_len = j.value("label_max_len", c.label_max_len);
    c.desc_max_len = j.value("desc_max_len", c.desc_max_len);
    c.s = j.value("s", c.s);
    c.negation = j.value("negation", c.negation);
    c.adapters_enabled = j.value("adapters_enabled", c.adapters_enabled);
    c.share_pn_head = j.value("share_pn_head", c.share_pn_head);
    return c;
}

Tensor causal_mask(int64_t seq_len) {
    Tensor m = Tensor::zeros({seq_len, seq_len});
    for (int64_t i = 0; i < seq_len; ++i)
        for (int64_t j = i + 1; j < seq_len; ++j) m.at({i, j}) = -1e9;
    return m;
}

bool is_trainable_name(const std::string& name) {
    return name.find("adapter") != std::string::npos || name.rfind("head.", 0) == 0;
}

std::set<std::string> trainable_partition(const ParamStore& store) {
    std::set<std::string> out;
    for (const auto& n : store.names())
        if (is_trainable_name(n)) out.insert(n);
    return out;
}

double ParamCounts::trainable_fraction() const {
    return total > 0 ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0;
}

Model Model::init(const ModelConfig& cfg_in, const Vocabulary& vocab, uint64_t seed) {
    ModelConfig cfg = cfg_in;
    cfg.vocab_size = vocab.size();
    cfg.validate();

    Model m;
    m.config = cfg;
    m.vocab = vocab;
    Rng rng(seed);
    const double sd = 0.02;
    ParamStore& ps = m.store;
    const int64_t d = cfg.d;

    auto embed_table = [&](const std::string& name, int64_t rows) {
        Tensor t({rows, d});
        rng.fill_normal(t, sd);
        ps.add(name, std::move(t));
    };

    embed_table("label.embed.word", cfg.vocab_size);
    embed_table("label.pos", cfg.label_max_len);
    for (int64_t j = 0; j < cfg.depth; ++j)
        init_transformer_block(ps, "label.block" + std::to_string(j), d, rng);
    for (int64_t j = 0; j < cfg.depth; ++j) {
        const auto pj = "label.pos_adapter" + std::to_string(j);
        const auto nj = "label.neg_adapter" + std::to_string(j);
        init_adapter(ps, pj, d, cfg.r, rng);
        init_adapter(ps, nj, d, cfg.r, rng);
        // The two stacks start from the same point so that untrained
        // positive and negative embeddings differ only through the
        // negation token.
        ps.get(nj + ".down.w").data = ps.get(pj + ".down.w").data;
    }
    init_linear(ps, "head.t", d, cfg.e, rng, sd);
    if (!cfg.share_pn_head) init_linear(ps, "head.tn", d, cfg.e, rng, sd);

    embed_table("desc.embed.word", cfg.vocab_size);
    embed_table("desc.pos", cfg.desc_max_len);
    for (int64_t j = 0; j < cfg.depth; ++j)
        init_transformer_block(ps, "desc.block" + std::to_string(j), d, rng);
    for (int64_t j = 0; j < cfg.depth; ++j)
        init_adapter(ps, "desc.adapter" + std::to_string(j), d, cfg.r, rng);
    init_linear(ps, "head.f", d, cfg.e, rng, sd);

    const int64_t M = cfg.patches();
    init_linear(ps, "video.patch", cfg.P * cfg.P * cfg.C, d, rng, sd);
    embed_table("video.pos.spatial", M);
    embed_table("video.pos.temporal", cfg.T);
    for (int64_t j = 0; j < cfg.depth; ++j)
        init_transformer_block(ps, "video.block" + std::to_string(j), d, rng);
    for (int64_t j = 0; j < cfg.depth; ++j)
        init_adapter(ps, "video.adapter" + std::to_string(j), d, cfg.r, rng);
    init_linear(ps, "head.v", d, cfg.e, rng, sd);

    init_linear(ps, "face.patch", cfg.P * cfg.P * cfg.R, d, rng, sd);
    embed_table("face.pos.spatial", M);
    embed_table("face.pos.temporal", cfg.T);
    for (int64_t j = 0; j < cfg.depth; ++j)
        init_transformer_block(ps, "face.block" + std::to_string(j), d, rng);
    for (int64_t j = 0; j < cfg.depth; ++j)
        init_adapter(ps, "face.adapter" + std::to_string(j), d, cfg.r, rng);
    init_linear(ps, "head.p", d, cfg.e, rng, sd);
    init_linear(ps, "head.l", d, cfg.e, rng, sd);

    m.trainable = trainable_partition(ps);
    return m;
}

namespace {

// Shared text-tower forward: embed + positions, adapter/block stack under a
// causal mask, then the hidden state at each sequence's terminal token.
Val text_forward(const ModelConfig& cfg, TapeBind& b, const TextTower& tower,
                 const std::vector<TokenSequence>& seqs) {
    if (seqs.empty()) throw std::invalid_argument("text encoder: empty batch");
    const int64_t B = static_cast<int64_t>(seqs.size());
    const int64_t S = tower.max_len;
    const int64_t d = cfg.d;
    Tape& tape = b.tape();

    std::vector<int64_t> flat_ids;
    flat_ids.reserve(static_cast<size_t>(B * S));
    std::vector<int64_t> terminal_rows;
    terminal_rows.reserve(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
        const TokenSequence& s = seqs[static_cast<size_t>(i)];
        if (static_cast<int64_t>(s.ids.size()) != S)
            throw std::invalid_argument("text encoder: sequence length " +
                                        std::to_string(s.ids.size()) + " does not match " +
                                        std::to_string(S));
        if (s.terminal_pos < 0 || s.terminal_pos >= S)
            throw std::invalid_argument("text encoder: terminal_pos out of range");
        for (int32_t id : s.ids) flat_ids.push_back(id);
        terminal_rows.push_back(i * S + s.terminal_pos);
    }

    Val table = b.param(tower.embed);
    Val x = tape.gather_rows(table, flat_ids);                    // [B*S, d]
    Val pos_flat = tape.reshape(b.param(tower.pos), {S * d});
    x = tape.add_bias(tape.reshape(x, {B, S * d}), pos_flat);
    x = tape.reshape(x, {B, S, d});

    const Tensor mask = causal_mask(S);
    for (int64_t j = 0; j < cfg.depth; ++j) {
        if (cfg.adapters_enabled) x = adapter(b, tower.adapter + std::to_string(j), x);
        x = transformer_block(b, tower.block + std::to_string(j), x, cfg.heads, mask);
    }

    Val terminal = tape.gather_rows(tape.reshape(x, {B * S, d}), terminal_rows);  // [B, d]
    return linear_p(b, tower.head, terminal);
}

// Shared frame-tower forward over pre-patchified inputs [B*T*M, P*P*Cin].
// Each block runs a temporal pass then a spatial pass through the same
// frozen weights and adapter, then adds the parallel branch:
//   z = z_spa + MLP(LN2(z_spa)) + s * A(LN2(z_spa)).
Val frame_forward(const ModelConfig& cfg, TapeBind& b, const FrameTower& tower, Tensor patches,
                  int64_t B, const std::string& head) {
    Tape& tape = b.tape();
    const int64_t d = cfg.d;
    const int64_t T = cfg.T;
    const int64_t M = cfg.patches();

    Val x = linear_p(b, tower.patch, tape.leaf(std::move(patches)));  // [B*T*M, d]
    Val pos_s = tape.reshape(b.param(tower.pos_spatial), {M * d});
    x = tape.add_bias(tape.reshape(x, {B * T, M * d}), pos_s);
    Val pos_t = tape.reshape(b.param(tower.pos_temporal), {T * d});
    x = tape.permute(tape.reshape(x, {B, T, M, d}), {0, 2, 1, 3});    // [B, M, T, d]
    x = tape.add_bias(tape.reshape(x, {B * M, T * d}), pos_t);
    x = tape.reshape(x, {B, M, T, d});

    const Tensor mask_t = zero_mask(T);
    const Tensor mask_s = zero_mask(M);
    Val z;
    for (int64_t j = 0; j < cfg.depth; ++j) {
        const std::string block = tower.block + std::to_string(j);
        const std::string adpt = tower.adapter + std::to_string(j);

        Val xt = tape.reshape(x, {B * M, T, d});
        if (cfg.adapters_enabled) xt = adapter(b, adpt, xt);
        xt = transformer_block(b, block, xt, cfg.heads, mask_t);

        Val xs = tape.reshape(tape.permute(tape.reshape(xt, {B, M, T, d}), {0, 2, 1, 3}),
                              {B * T, M, d});
        if (cfg.adapters_enabled) xs = adapter(b, adpt, xs);
        Val z_spa = transformer_block(b, block, xs, cfg.heads, mask_s);

        Val u = layer_norm_p(b, block + ".ln2", z_spa);
        std::vector<Val> terms{z_spa, mlp(b, block, u)};
        if (cfg.adapters_enabled && cfg.s != 0.0)
            terms.push_back(tape.scale(adapter(b, adpt, u), cfg.s));
        z = tape.add_n(terms);                                        // [B*T, M, d]

        x = tape.permute(tape.reshape(z, {B, T, M, d}), {0, 2, 1, 3});
    }

    Val tokens = tape.reshape(z, {B, T * M, d});
    Val ones = tape.leaf(Tensor::full({B, 1, T * M}, 1.0 / static_cast<double>(T * M)));
    Val pooled = tape.reshape(tape.bmm(ones, tokens), {B, d});
    return linear_p(b, head, pooled);
}

Tensor stack_patches(const ModelConfig& cfg, const std::vector<Tensor>& per_sample, int64_t Cin,
                     int64_t P) {
    const int64_t B = static_cast<int64_t>(per_sample.size());
    const int64_t rows = cfg.T * cfg.patches();
    const int64_t cols = P * P * Cin;
    Tensor out({B * rows, cols});
    for (int64_t i = 0; i < B; ++i) {
        const Tensor& p = per_sample[static_cast<size_t>(i)];
        std::memcpy(out.data.data() + static_cast<size_t>(i * rows * cols), p.data.data(),
                    sizeof(double) * static_cast<size_t>(rows * cols));
    }
    return out;
}

}  // namespace

PNVals Model::encode_labels(TapeBind& b, const std::vector<TokenSequence>& pos,
                            const std::vector<TokenSequence>& neg) const {
    if (pos.size() != neg.size())
        throw std::invalid_argument("encode_labels: positive and negative batches differ in size");
    TextTower pos_tower{"label.embed.word", "label.pos", "label.block", "label.pos_adapter",
                        "head.t", config.label_max_len};
    TextTower neg_tower = pos_tower;
    neg_tower.adapter = "label.neg_adapter";
    if (!config.share_pn_head) neg_tower.head = "head.tn";
    return {text_forward(config, b, pos_tower, pos), text_forward(config, b, neg_tower, neg)};
}

Val Model::encode_description(TapeBind& b, const std::vector<TokenSequence>& tokens) const {
    TextTower tower{"desc.embed.word", "desc.pos", "desc.block", "desc.adapter", "head.f",
                    config.desc_max_len};
    return text_forward(config, b, tower, tokens);
}

Val Model::encode_video(TapeBind& b, const std::vector<Tensor>& frames) const {
    if (frames.empty()) throw std::invalid_argument("encode_video: empty batch");
    const std::vector<int64_t> want{config.T, config.H, config.W, config.C};
    std::vector<Tensor> per_sample;
    per_sample.reserve(frames.size());
    for (const Tensor& f : frames) {
        if (f.shape != want)
            throw std::invalid_argument("encode_video: frames shaped " + shape_str(f.shape) +
                                        ", expected " + shape_str(want));
        per_sample.push_back(patchify(f, config.P));
    }
    FrameTower tower{"video.patch", "video.pos.spatial", "video.pos.temporal", "video.block",
                     "video.adapter"};
    return frame_forward(config, b, tower,
                         stack_patches(config, per_sample, config.C, config.P),
                         static_cast<int64_t>(frames.size()), "head.v");
}

Val Model::encode_parsing(TapeBind& b, const std::vector<IntTensor>& maps) const {
    if (maps.empty()) throw std::invalid_argument("encode_parsing: empty batch");
    std::vector<Tensor> per_sample;
    per_sample.reserve(maps.size());
    for (const IntTensor& m : maps)
        per_sample.push_back(patchify(one_hot_maps(m, config.R), config.P));
    FrameTower tower{"face.patch", "face.pos.spatial", "face.pos.temporal", "face.block",
                     "face.adapter"};
    return frame_forward(config, b, tower,
                         stack_patches(config, per_sample, config.R, config.P),
                         static_cast<int64_t>(maps.size()), "head.p");
}

Val Model::encode_landmarks(TapeBind& b, const std::vector<Tensor>& maps) const {
    if (maps.empty()) throw std::invalid_argument("encode_landmarks: empty batch");
    std::vector<Tensor> per_sample;
    per_sample.reserve(maps.size());
    for (const Tensor& m : maps)
        per_sample.push_back(patchify(broadcast_channels(m, config.R), config.P));
    FrameTower tower{"face.patch", "face.pos.spatial", "face.pos.temporal", "face.block",
                     "face.adapter"};
    return frame_forward(config, b, tower,
                         stack_patches(config, per_sample, config.R, config.P),
                         static_cast<int64_t>(maps.size()), "head.l");
}

std::pair<std::vector<TokenSequence>, std::vector<TokenSequence>> Model::label_tokens(
    const std::vector<std::string>& class_names) const {
    auto [pos_texts, neg_texts] = expand_pn_templates(class_names, config.negation);
    std::vector<TokenSequence> pos;
    std::vector<TokenSequence> neg;
    for (size_t i = 0; i < class_names.size(); ++i) {
        pos.push_back(tokenize(pos_texts[i], vocab, config.label_max_len));
        neg.push_back(tokenize(neg_texts[i], vocab, config.label_max_len));
    }
    return {std::move(pos), std::move(neg)};
}

ParamCounts count_params(const ModelConfig& cfg) {
    const int64_t d = cfg.d;
    const int64_t M = cfg.patches();
    ParamCounts c;

    auto frozen = [&](int64_t n) { c.total += n; };
    auto train = [&](int64_t n) {
        c.total += n;
        c.trainable += n;
    };

    frozen(cfg.vocab_size * d + cfg.label_max_len * d + cfg.depth * block_params(d));
    train(2 * cfg.depth * adapter_params(d, cfg.r));
    train(linear_params(d, cfg.e));
    if (!cfg.share_pn_head) train(linear_params(d, cfg.e));

    frozen(cfg.vocab_size * d + cfg.desc_max_len * d + cfg.depth * block_params(d));
    train(cfg.depth * adapter_params(d, cfg.r));
    train(linear_params(d, cfg.e));

    frozen(linear_params(cfg.P * cfg.P * cfg.C, d) + (M + cfg.T) * d + cfg.depth * block_params(d));
    train(cfg.depth * adapter_params(d, cfg.r));
    train(linear_params(d, cfg.e));

    frozen(linear_params(cfg.P * cfg.P * cfg.R, d) + (M + cfg.T) * d + cfg.depth * block_params(d));
    train(cfg.depth * adapter_params(d, cfg.r));
    train(2 * linear_params(d, cfg.e));

    return c;
}

ModelConfig reference_scale_config() {
    ModelConfig c;
    c.d = 512;
    c.heads = 8;
    c.r = 64;
    c.depth = 12;
    c.e = 512;
    c.P = 16;
    c.T = 16;
    c.H = 224;
    c.W = 224;
    c.C = 3;
    c.R = 10;
    c.vocab_size = 49408;
    c.label_max_len = 77;
    c.desc_max_len = 248;
    return c;
}

void save_model(const std::filesystem::path& p, const Model& m, nlohmann::json extra) {
    extra["model_config"] = m.config.to_json();
    extra["vocab"] = m.vocab.to_json();
    extra["trainable"] = std::vector<std::string>(m.trainable.begin(), m.trainable.end());
    save_checkpoint(p, m.store, extra);
}

Model load_model(const std::filesystem::path& p, nlohmann::json* header_out) {
    ParamStore loaded;
    nlohmann::json header = load_checkpoint(p, loaded);
    if (!header.contains("model_config") || !header.contains("vocab"))
        throw std::runtime_error("checkpoint " + p.string() + " lacks a model header");

    Model m = Model::init(ModelConfig::from_json(header["model_config"]),
                          Vocabulary::from_json(header["vocab"]), 0);
    for (const auto& name : m.store.names()) {
        if (!loaded.has(name))
            throw std::runtime_error("checkpoint " + p.string() + " is missing parameter " + name);
        const Tensor& src = loaded.get(name);
        Tensor& dst = m.store.get(name);
        if (src.shape != dst.shape)
            throw std::runtime_error("checkpoint " + p.string() + " parameter " + name +
                                     " has shape " + shape_str(src.shape) + ", expected " +
                                     shape_str(dst.shape));
        dst.data = src.data;
    }
    for (const auto& name : loaded.names())
        if (!m.store.has(name))
            throw std::runtime_error("checkpoint " + p.string() + " has unknown parameter " + name);
    if (header_out) *header_out = header;
    return m;
}

}  // namespace mmdfer
