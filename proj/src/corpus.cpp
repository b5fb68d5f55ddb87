#include "mmdfer/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mmdfer/rng.hpp"

namespace mmdfer {

namespace {

const char* kRegions[5] = {"mouth", "brow", "eye", "nose", "chin"};
const char* kMotionsA[7] = {"rise", "furrow", "widen", "wrinkle", "tremble", "drop", "lift"};
const char* kMotionsB[7] = {"stretch", "knit", "squint", "flare", "thrust", "purse", "arch"};

// Region centers as (row, col) fractions of (H, W).
const double kRegionCenter[5][2] = {
    {0.70, 0.50}, {0.22, 0.50}, {0.40, 0.28}, {0.52, 0.50}, {0.88, 0.50},
};

const double kChannelScale[3] = {1.0, 0.8, 0.6};

struct MotionRamp {
    double a;
    double b;
};

// Monotone per-motion intensity ramps with pairwise-distinct means, so the
// mean frame separates classes even when two share a region.
MotionRamp motion_ramp(int64_t motion) {
    const double mean = 0.40 + 0.06 * static_cast<double>(motion);
    if (motion % 2 == 0) return {mean - 0.15, 0.30};
    return {mean + 0.15, -0.30};
}

double ramp_value(const MotionRamp& r, int64_t t, int64_t T) {
    const double frac = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.5;
    return r.a + r.b * frac;
}

double channel_scale(int64_t c) { return kChannelScale[c % 3]; }

const char* kTemplates[5] = {
    "The {region} starts to {motion} across the frames.",
    "Over the clip the {region} appears to {motion} steadily.",
    "Frame by frame the {region} seems to {motion} more.",
    "A steady {motion} develops around the {region} region.",
    "The {motion} of the {region} grows from start to end.",
};

const char* kDirectEmotions[6] = {"happy", "sad", "angry", "surprised", "fearful", "disgusted"};
const char* kIndirectEmotions[6] = {"joy", "sorrow", "anger", "surprise", "fear", "disgust"};

std::string fill_template(std::string tmpl, const std::string& region, const std::string& motion) {
    auto replace_all = [](std::string s, const std::string& key, const std::string& val) {
        size_t pos = 0;
        while ((pos = s.find(key, pos)) != std::string::npos) {
            s.replace(pos, key.size(), val);
            pos += val.size();
        }
        return s;
    };
    return replace_all(replace_all(std::move(tmpl), "{region}", region), "{motion}", motion);
}

double blob(double dy, double dx, double sigma) {
    return std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write file: " + p.string());
    f << text;
}

std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read file: " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

void GeneratorConfig::validate() const {
    if (num_classes < 2) throw std::invalid_argument("generator config: num_classes must be at least 2");
    if (num_classes > 35) throw std::invalid_argument("generator config: name tables support at most 35 classes");
    if (samples_per_class < 1 || T < 1 || H < 1 || W < 1 || C < 1 || R < 1 || paraphrase_count < 1)
        throw std::invalid_argument("generator config: all dimensions must be at least 1");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std))
        throw std::invalid_argument("generator config: noise_std must be finite and non-negative");
    if (leakage_rate < 0.0 || leakage_rate > 1.0)
        throw std::invalid_argument("generator config: leakage_rate must be in [0, 1]");
    if (name_variant != 0 && name_variant != 1)
        throw std::invalid_argument("generator config: name_variant must be 0 or 1");
}

nlohmann::json GeneratorConfig::to_json() const {
    return {{"num_classes", num_classes},
            {"samples_per_class", samples_per_class},
            {"T", T},
            {"H", H},
            {"W", W},
            {"C", C},
            {"R", R},
            {"noise_std", noise_std},
            {"leakage_rate", leakage_rate},
            {"paraphrase_count", paraphrase_count},
            {"name_variant", name_variant}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.num_classes = j.value("num_classes", c.num_classes);
    c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
    c.T = j.value("T", c.T);
    c.H = j.value("H", c.H);
    c.W = j.value("W", c.W);
    c.C = j.value("C", c.C);
    c.R = j.value("R", c.R);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.leakage_rate = j.value("leakage_rate", c.leakage_rate);
    c.paraphrase_count = j.value("paraphrase_count", c.paraphrase_count);
    c.name_variant = j.value("name_variant", c.name_variant);
    return c;
}

std::vector<std::string> class_name_table(int64_t num_classes, int64_t name_variant) {
    std::vector<std::string> names;
    for (int64_t k = 0; k < num_classes; ++k) {
        const char* region = kRegions[k % 5];
        const char* motion = name_variant == 0 ? kMotionsA[k % 7] : kMotionsB[k % 7];
        names.push_back(std::string(region) + " " + motion);
    }
    return names;
}

std::vector<std::string> caption_prompts(const std::string& class_name) {
    const size_t space = class_name.find(' ');
    const std::string region = class_name.substr(0, space);
    const std::string motion = space == std::string::npos ? "" : class_name.substr(space + 1);
    std::vector<std::string> prompts{class_name};
    for (int64_t i = 0; i < 3; ++i)
        prompts.push_back(fill_template(kTemplates[i], region, motion));
    return prompts;
}

DatasetManifest generate_corpus(const GeneratorConfig& config, uint64_t seed,
                                const std::filesystem::path& out_dir) {
    config.validate();
    std::filesystem::create_directories(out_dir / "samples");

    DatasetManifest manifest;
    manifest.corpus_name = config.name_variant == 0 ? "synthetic_faces_a" : "synthetic_faces_b";
    manifest.class_names = class_name_table(config.num_classes, config.name_variant);
    manifest.config = config;
    manifest.seed = seed;
    manifest.root = out_dir;

    const double sigma = static_cast<double>(config.H) / 8.0;
    const int64_t lm_off = std::max<int64_t>(1, config.H / 16);
    Rng base(seed);

    for (int64_t k = 0; k < config.num_classes; ++k) {
        const int64_t region = k % 5;
        const int64_t motion = k % 7;
        const MotionRamp ramp = motion_ramp(motion);
        const double cy = kRegionCenter[region][0] * static_cast<double>(config.H - 1);
        const double cx = kRegionCenter[region][1] * static_cast<double>(config.W - 1);
        const std::string region_word = kRegions[region];
        const std::string motion_word =
            config.name_variant == 0 ? kMotionsA[motion] : kMotionsB[motion];

        double ramp_max = 0.0;
        for (int64_t t = 0; t < config.T; ++t) ramp_max = std::max(ramp_max, ramp_value(ramp, t, config.T));

        for (int64_t j = 0; j < config.samples_per_class; ++j) {
            SampleRecord rec;
            rec.sample_id = "cls" + std::to_string(k) + "_idx" + std::to_string(j);
            rec.class_id = k;
            Rng rng = base.substream(rec.sample_id);

            rec.frames = Tensor::zeros({config.T, config.H, config.W, config.C});
            rec.parsing_map = IntTensor({config.T, config.H, config.W});
            rec.landmark_map = Tensor::zeros({config.T, config.H, config.W});

            for (int64_t t = 0; t < config.T; ++t) {
                const double rv = ramp_value(ramp, t, config.T);
                for (int64_t y = 0; y < config.H; ++y)
                    for (int64_t x = 0; x < config.W; ++x) {
                        const double g = blob(static_cast<double>(y) - cy, static_cast<double>(x) - cx, sigma);
                        const double clean = g * rv;
                        for (int64_t c = 0; c < config.C; ++c) {
                            double v = clean * channel_scale(c);
                            if (config.noise_std > 0.0) v += rng.normal() * config.noise_std;
                            rec.frames.at({t, y, x, c}) = std::clamp(v, 0.0, 1.0);
                        }
                        const int64_t level =
                            std::min<int64_t>(config.R - 1,
                                              static_cast<int64_t>(std::floor(clean / ramp_max *
                                                                              static_cast<double>(config.R))));
                        rec.parsing_map.data[static_cast<size_t>((t * config.H + y) * config.W + x)] =
                            static_cast<int32_t>(level);
                    }
            }

            const int64_t icy = static_cast<int64_t>(std::llround(cy));
            const int64_t icx = static_cast<int64_t>(std::llround(cx));
            const bool diagonal = motion % 2 == 1;
            const int64_t offs[5][2] = {{0, 0},
                                        {diagonal ? -lm_off : -lm_off, diagonal ? -lm_off : 0},
                                        {diagonal ? lm_off : lm_off, diagonal ? lm_off : 0},
                                        {diagonal ? -lm_off : 0, diagonal ? lm_off : -lm_off},
                                        {diagonal ? lm_off : 0, diagonal ? -lm_off : lm_off}};
            for (const auto& o : offs) {
                const int64_t y = std::clamp<int64_t>(icy + o[0], 0, config.H - 1);
                const int64_t x = std::clamp<int64_t>(icx + o[1], 0, config.W - 1);
                for (int64_t t = 0; t < config.T; ++t) rec.landmark_map.at({t, y, x}) = 1.0;
            }

            const int64_t n_templates =
                std::min<int64_t>(config.paraphrase_count, static_cast<int64_t>(std::size(kTemplates)));
            std::string desc =
                fill_template(kTemplates[rng.uniform_int(n_templates)], region_word, motion_word);
            if (config.leakage_rate > 0.0 && rng.bernoulli(config.leakage_rate)) {
                const int64_t e = rng.uniform_int(6);
                if (rng.bernoulli(0.5)) {
                    desc += " The person looks " + std::string(kDirectEmotions[e]) + ".";
                } else {
                    if (!desc.empty() && desc.back() == '.') desc.pop_back();
                    desc += ", suggesting a feeling of " + std::string(kIndirectEmotions[e]) + ".";
                }
            }
            rec.description = desc;

            const std::string rel = "samples/" + rec.sample_id;
            std::filesystem::create_directories(out_dir / rel);
            write_tensor_file(out_dir / rel / "frames.bin", rec.frames);
            write_tensor_file(out_dir / rel / "parsing.bin", rec.parsing_map);
            write_tensor_file(out_dir / rel / "landmarks.bin", rec.landmark_map);
            write_text_file(out_dir / rel / "description.txt", rec.description);

            manifest.samples.push_back({rec.sample_id, rel, k, "train"});
        }
    }

    manifest.save(out_dir);
    return manifest;
}

void DatasetManifest::save(const std::filesystem::path& dir) const {
    std::ofstream f(dir / "manifest.jsonl", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write manifest: " + (dir / "manifest.jsonl").string());
    nlohmann::json header{{"corpus_name", corpus_name},
                          {"class_names", class_names},
                          {"generator_config", config.to_json()},
                          {"seed", seed}};
    f << header.dump() << "\n";
    for (const auto& s : samples) {
        nlohmann::json line{
            {"sample_id", s.sample_id}, {"path", s.path}, {"class_id", s.class_id}, {"split", s.split}};
        f << line.dump() << "\n";
    }
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.jsonl";
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open manifest: " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("empty manifest: " + path.string());
    nlohmann::json header = nlohmann::json::parse(line);

    DatasetManifest m;
    m.corpus_name = header.at("corpus_name");
    m.class_names = header.at("class_names").get<std::vector<std::string>>();
    m.config = GeneratorConfig::from_json(header.at("generator_config"));
    m.seed = header.at("seed");
    m.root = dir;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        m.samples.push_back({j.at("sample_id"), j.at("path"), j.at("class_id"), j.at("split")});
    }
    return m;
}

std::vector<ManifestEntry> DatasetManifest::entries_for_split(const std::string& split) const {
    std::vector<ManifestEntry> out;
    for (const auto& s : samples)
        if (s.split == split) out.push_back(s);
    return out;
}

const ManifestEntry& DatasetManifest::entry(const std::string& sample_id) const {
    for (const auto& s : samples)
        if (s.sample_id == sample_id) return s;
    throw std::invalid_argument("sample_id not in manifest: " + sample_id);
}

SampleRecord load_sample(const DatasetManifest& manifest, const std::string& sample_id) {
    const ManifestEntry& e = manifest.entry(sample_id);
    const auto dir = manifest.root / e.path;
    const GeneratorConfig& c = manifest.config;

    SampleRecord rec;
    rec.sample_id = e.sample_id;
    rec.class_id = e.class_id;
    if (rec.class_id < 0 || rec.class_id >= static_cast<int64_t>(manifest.class_names.size()))
        throw std::runtime_error("load_sample " + sample_id + ": class_id out of range");

    rec.frames = read_tensor_file(dir / "frames.bin");
    const std::vector<int64_t> fshape{c.T, c.H, c.W, c.C};
    if (rec.frames.shape != fshape)
        throw std::runtime_error("load_sample " + sample_id + ": frames shape " +
                                 shape_str(rec.frames.shape) + " does not match " + shape_str(fshape));
    for (double v : rec.frames.data)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::runtime_error("load_sample " + sample_id + ": frames value out of [0, 1]");

    rec.parsing_map = read_int_tensor_file(dir / "parsing.bin");
    if (rec.parsing_map.shape != std::vector<int64_t>{c.T, c.H, c.W})
        throw std::runtime_error("load_sample " + sample_id + ": parsing_map shape mismatch");
    for (int32_t v : rec.parsing_map.data)
        if (v < 0 || v >= c.R)
            throw std::runtime_error("load_sample " + sample_id + ": parsing region id out of range");

    rec.landmark_map = read_tensor_file(dir / "landmarks.bin");
    if (rec.landmark_map.shape != std::vector<int64_t>{c.T, c.H, c.W})
        throw std::runtime_error("load_sample " + sample_id + ": landmark_map shape mismatch");

    rec.description = read_text_file(dir / "description.txt");
    if (rec.description.empty())
        throw std::runtime_error("load_sample " + sample_id + ": description is empty");
    return rec;
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double ratio, uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0, 1)");

    std::map<int64_t, std::vector<size_t>> by_class;
    for (size_t i = 0; i < manifest.samples.size(); ++i)
        by_class[manifest.samples[i].class_id].push_back(i);

    std::vector<std::string> tags(manifest.samples.size());
    Rng base(seed);
    for (auto& [cls, idxs] : by_class) {
        if (idxs.size() < 2)
            throw std::invalid_argument("class " + std::to_string(cls) +
                                        " has fewer than 2 samples; cannot stratify");
        Rng rng = base.substream("class" + std::to_string(cls));
        for (size_t i = idxs.size(); i > 1; --i)
            std::swap(idxs[i - 1], idxs[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
        int64_t n_train = static_cast<int64_t>(std::floor(ratio * static_cast<double>(idxs.size())));
        n_train = std::clamp<int64_t>(n_train, 1, static_cast<int64_t>(idxs.size()) - 1);
        for (size_t i = 0; i < idxs.size(); ++i)
            tags[idxs[i]] = static_cast<int64_t>(i) < n_train ? "train" : "test";
    }

    DatasetManifest train = manifest;
    DatasetManifest test = manifest;
    train.samples.clear();
    test.samples.clear();
    for (size_t i = 0; i < manifest.samples.size(); ++i) {
        ManifestEntry e = manifest.samples[i];
        e.split = tags[i];
        (tags[i] == "train" ? train : test).samples.push_back(e);
    }
    return {train, test};
}

void assign_splits(DatasetManifest& manifest, double ratio, uint64_t seed) {
    auto [train, test] = split_dataset(manifest, ratio, seed);
    std::map<std::string, std::string> tag;
    for (const auto& e : train.samples) tag[e.sample_id] = "train";
    for (const auto& e : test.samples) tag[e.sample_id] = "test";
    for (auto& e : manifest.samples) e.split = tag.at(e.sample_id);
}

uint64_t corpus_hash(const DatasetManifest& manifest) {
    uint64_t h = hash_file(manifest.root / "manifest.jsonl");
    for (const auto& e : manifest.samples) {
        for (const char* f : {"frames.bin", "parsing.bin", "landmarks.bin", "description.txt"}) {
            const uint64_t fh = hash_file(manifest.root / e.path / f);
            h = fnv1a64(&fh, sizeof(fh), h);
        }
    }
    return h;
}

}  // namespace mmdfer
