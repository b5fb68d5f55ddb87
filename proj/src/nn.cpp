#include "mmdfer/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mmdfer {

namespace {

void put_u64_le(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    order_.push_back(name);
    return params_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
}

int64_t ParamStore::count_matching(const std::set<std::string>& names) const {
    int64_t n = 0;
    for (const auto& name : names) n += get(name).numel();
    return n;
}

Val TapeBind::param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool train = trainable_ != nullptr && trainable_->count(name) != 0;
    Val v = tape_.leaf(store_.get(name), train);
    bound_.emplace(name, v);
    return v;
}

void TapeBind::collect_grads(std::map<std::string, Tensor>& out) const {
    for (const auto& [name, val] : bound_) {
        if (trainable_ == nullptr || trainable_->count(name) == 0) continue;
        const Tensor& g = tape_.grad(val);
        auto it = out.find(name);
        if (it == out.end()) {
            out.emplace(name, g);
        } else {
            for (size_t k = 0; k < g.data.size(); ++k) it->second.data[k] += g.data[k];
        }
    }
}

Tensor padding_mask(int64_t seq_len, int64_t valid_len) {
    Tensor m = Tensor::zeros({seq_len, seq_len});
    for (int64_t r = 0; r < seq_len; ++r)
        for (int64_t c = valid_len; c < seq_len; ++c) m.at({r, c}) = -1e9;
    return m;
}

Tensor zero_mask(int64_t seq_len) { return Tensor::zeros({seq_len, seq_len}); }

void init_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
                 double stddev, bool zero_weight) {
    Tensor w = Tensor::zeros({in, out});
    if (!zero_weight) rng.fill_normal(w, stddev);
    ps.add(prefix + ".w", std::move(w));
    ps.add(prefix + ".b", Tensor::zeros({out}));
}

Val linear_p(TapeBind& b, const std::string& prefix, Val x) {
    return b.tape().add_bias(b.tape().linear(x, b.param(prefix + ".w")), b.param(prefix + ".b"));
}

void init_layer_norm(ParamStore& ps, const std::string& prefix, int64_t d) {
    ps.add(prefix + ".gamma", Tensor::full({d}, 1.0));
    ps.add(prefix + ".beta", Tensor::zeros({d}));
}

Val layer_norm_p(TapeBind& b, const std::string& prefix, Val x) {
    return b.tape().layer_norm(x, b.param(prefix + ".gamma"), b.param(prefix + ".beta"));
}

void init_adapter(ParamStore& ps, const std::string& prefix, int64_t d, int64_t r, Rng& rng) {
    init_linear(ps, prefix + ".down", d, r, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    init_linear(ps, prefix + ".up", r, d, rng, 0.0, true);
}

Val adapter(TapeBind& b, const std::string& prefix, Val x) {
    Tape& tp = b.tape();
    Val h = tp.gelu(linear_p(b, prefix + ".down", x));
    return tp.add(x, linear_p(b, prefix + ".up", h));
}

void init_transformer_block(ParamStore& ps, const std::string& prefix, int64_t d, Rng& rng) {
    const double s = 0.02;
    init_layer_norm(ps, prefix + ".ln1", d);
    init_linear(ps, prefix + ".attn.q", d, d, rng, s);
    init_linear(ps, prefix + ".attn.k", d, d, rng, s);
    init_linear(ps, prefix + ".attn.v", d, d, rng, s);
    init_linear(ps, prefix + ".attn.o", d, d, rng, s);
    init_layer_norm(ps, prefix + ".ln2", d);
    init_linear(ps, prefix + ".mlp.fc1", d, 4 * d, rng, s);
    init_linear(ps, prefix + ".mlp.fc2", 4 * d, d, rng, s);
}

Val attention(TapeBind& b, const std::string& prefix, Val x_ln, int64_t heads, const Tensor& mask) {
    Tape& tp = b.tape();
    const auto& shape = tp.value(x_ln).shape;
    if (shape.size() != 3) throw std::invalid_argument("attention: input must be [B, S, d]");
    const int64_t B = shape[0], S = shape[1], d = shape[2];
    if (d % heads != 0) throw std::invalid_argument("attention: head count must divide width");
    const int64_t dh = d / heads;

    auto split = [&](Val v) {
        Val r = tp.reshape(v, {B, S, heads, dh});
        Val p = tp.permute(r, {0, 2, 1, 3});
        return tp.reshape(p, {B * heads, S, dh});
    };

    Val q = split(linear_p(b, prefix + ".attn.q", x_ln));
    Val k = split(linear_p(b, prefix + ".attn.k", x_ln));
    Val v = split(linear_p(b, prefix + ".attn.v", x_ln));

    Val scores = tp.scale(tp.bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    Val probs = tp.softmax_last_masked(scores, mask);
    Val ctx = tp.bmm(probs, v);

    Val merged = tp.reshape(tp.permute(tp.reshape(ctx, {B, heads, S, dh}), {0, 2, 1, 3}), {B, S, d});
    return linear_p(b, prefix + ".attn.o", merged);
}

Val mlp(TapeBind& b, const std::string& prefix, Val x_ln) {
    Tape& tp = b.tape();
    return linear_p(b, prefix + ".mlp.fc2", tp.gelu(linear_p(b, prefix + ".mlp.fc1", x_ln)));
}

Val transformer_block(TapeBind& b, const std::string& prefix, Val x, int64_t heads, const Tensor& mask) {
    Tape& tp = b.tape();
    Val y = tp.add(x, attention(b, prefix, layer_norm_p(b, prefix + ".ln1", x), heads, mask));
    return tp.add(y, mlp(b, prefix, layer_norm_p(b, prefix + ".ln2", y)));
}

Tensor patchify(const Tensor& frames, int64_t P) {
    if (frames.rank() != 4) throw std::invalid_argument("patchify: frames must be [T, H, W, C]");
    const int64_t T = frames.shape[0], H = frames.shape[1], W = frames.shape[2], C = frames.shape[3];
    if (P <= 0 || H % P != 0 || W % P != 0)
        throw std::invalid_argument("patchify: patch size " + std::to_string(P) +
                                    " must divide spatial dims " + shape_str(frames.shape));
    const int64_t gh = H / P, gw = W / P;
    const int64_t M = gh * gw;
    Tensor out = Tensor::zeros({T * M, P * P * C});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
                double* dst = out.data.data() + ((t * M + gy * gw + gx) * P * P * C);
                for (int64_t py = 0; py < P; ++py) {
                    const double* src = frames.data.data() + (((t * H + gy * P + py) * W + gx * P) * C);
                    std::copy(src, src + P * C, dst + py * P * C);
                }
            }
    return out;
}

Tensor one_hot_maps(const IntTensor& ids, int64_t R) {
    if (ids.shape.size() != 3) throw std::invalid_argument("one_hot_maps: ids must be [T, H, W]");
    Tensor out = Tensor::zeros({ids.shape[0], ids.shape[1], ids.shape[2], R});
    for (size_t i = 0; i < ids.data.size(); ++i) {
        const int32_t v = ids.data[i];
        if (v < 0 || v >= R)
            throw std::invalid_argument("one_hot_maps: region id " + std::to_string(v) +
                                        " out of range [0, " + std::to_string(R) + ")");
        out.data[i * static_cast<size_t>(R) + static_cast<size_t>(v)] = 1.0;
    }
    return out;
}

Tensor broadcast_channels(const Tensor& x, int64_t C) {
    if (x.rank() != 3) throw std::invalid_argument("broadcast_channels: input must be [T, H, W]");
    Tensor out = Tensor::zeros({x.shape[0], x.shape[1], x.shape[2], C});
    for (size_t i = 0; i < x.data.size(); ++i)
        for (int64_t c = 0; c < C; ++c) out.data[i * static_cast<size_t>(C) + static_cast<size_t>(c)] = x.data[i];
    return out;
}

void save_checkpoint(const std::filesystem::path& p, const ParamStore& ps, const nlohmann::json& extra) {
    nlohmann::json header = extra;
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& name : ps.names()) {
        const Tensor& t = ps.get(name);
        manifest.push_back({{"name", name}, {"dtype", "f64"}, {"shape", t.shape}});
    }
    header["params"] = std::move(manifest);
    const std::string h = header.dump();

    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + p.string());
    f.write("FCKC", 4);
    put_u64_le(f, h.size());
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& name : ps.names()) {
        const Tensor& t = ps.get(name);
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("short write on checkpoint: " + p.string());
}

nlohmann::json load_checkpoint(const std::filesystem::path& p, ParamStore& ps) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + p.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "FCKC", 4) != 0)
        throw std::runtime_error("not a checkpoint file: " + p.string());
    const uint64_t hlen = get_u64_le(f);
    std::string h(hlen, '\0');
    f.read(h.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("truncated checkpoint header: " + p.string());
    nlohmann::json header = nlohmann::json::parse(h);

    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name");
        std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        Tensor t = Tensor::zeros(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!f) throw std::runtime_error("truncated checkpoint payload at " + name + ": " + p.string());
        if (ps.has(name)) {
            Tensor& dst = ps.get(name);
            if (!dst.same_shape(t))
                throw std::runtime_error("checkpoint shape mismatch for " + name + ": " + shape_str(t.shape) +
                                         " vs " + shape_str(dst.shape));
            dst = std::move(t);
        } else {
            ps.add(name, std::move(t));
        }
    }
    return header;
}

}  // namespace mmdfer
