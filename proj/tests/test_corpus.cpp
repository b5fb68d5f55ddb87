#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mmdfer/corpus.hpp"
#include "mmdfer/textproc.hpp"

using namespace mmdfer;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("mmdfer_corpus_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

GeneratorConfig tiny_config() {
    GeneratorConfig c;
    c.num_classes = 7;
    c.samples_per_class = 4;
    c.T = 4;
    c.H = 16;
    c.W = 16;
    c.C = 3;
    c.R = 5;
    c.noise_std = 0.03;
    return c;
}

}  // namespace

TEST_CASE("class name tables share regions and differ in motions") {
    auto a = class_name_table(35, 0);
    auto b = class_name_table(35, 1);
    CHECK(std::set<std::string>(a.begin(), a.end()).size() == 35);
    CHECK(std::set<std::string>(b.begin(), b.end()).size() == 35);
    for (int64_t k = 0; k < 35; ++k) {
        auto sp_a = a[k].find(' ');
        auto sp_b = b[k].find(' ');
        CHECK(a[k].substr(0, sp_a) == b[k].substr(0, sp_b));
        CHECK(a[k].substr(sp_a + 1) != b[k].substr(sp_b + 1));
    }
    CHECK(a[0] == "mouth rise");
    CHECK(a[6] == "brow lift");
    CHECK(b[0] == "mouth stretch");
}

TEST_CASE("caption prompts phrase the class name like generated descriptions") {
    auto prompts = caption_prompts("mouth rise");
    REQUIRE(prompts.size() == 4);
    CHECK(prompts[0] == "mouth rise");
    std::set<std::string> rest(prompts.begin() + 1, prompts.end());
    CHECK(rest.count("The mouth starts to rise across the frames.") == 1);
    CHECK(rest.count("Over the clip the mouth appears to rise steadily.") == 1);
    CHECK(rest.count("Frame by frame the mouth seems to rise more.") == 1);
}

TEST_CASE("generation is deterministic in the seed") {
    auto cfg = tiny_config();
    auto d1 = fresh_dir("det1");
    auto d2 = fresh_dir("det2");
    auto d3 = fresh_dir("det3");
    auto m1 = generate_corpus(cfg, 11, d1);
    auto m2 = generate_corpus(cfg, 11, d2);
    auto m3 = generate_corpus(cfg, 12, d3);
    CHECK(corpus_hash(m1) == corpus_hash(m2));
    CHECK(corpus_hash(m1) != corpus_hash(m3));
}

TEST_CASE("manifest round trips through disk") {
    auto cfg = tiny_config();
    auto dir = fresh_dir("roundtrip");
    auto m = generate_corpus(cfg, 5, dir);
    auto loaded = DatasetManifest::load(dir);
    CHECK(loaded.corpus_name == "synthetic_faces_a");
    CHECK(loaded.class_names == m.class_names);
    CHECK(loaded.samples.size() == m.samples.size());
    CHECK(loaded.seed == 5);
    CHECK(loaded.config.noise_std == cfg.noise_std);
    CHECK(loaded.config.H == cfg.H);
    for (size_t i = 0; i < m.samples.size(); ++i) {
        CHECK(loaded.samples[i].sample_id == m.samples[i].sample_id);
        CHECK(loaded.samples[i].class_id == m.samples[i].class_id);
    }
}

TEST_CASE("loaded samples satisfy every field invariant") {
    auto cfg = tiny_config();
    auto dir = fresh_dir("load");
    auto m = generate_corpus(cfg, 7, dir);
    for (const auto& e : m.samples) {
        auto rec = load_sample(m, e.sample_id);
        CHECK(rec.class_id == e.class_id);
        CHECK(rec.frames.shape == std::vector<int64_t>{cfg.T, cfg.H, cfg.W, cfg.C});
        CHECK(rec.parsing_map.shape == std::vector<int64_t>{cfg.T, cfg.H, cfg.W});
        CHECK(rec.landmark_map.shape == std::vector<int64_t>{cfg.T, cfg.H, cfg.W});
        CHECK(!rec.description.empty());
        for (double v : rec.frames.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (int32_t v : rec.parsing_map.data) {
            CHECK(v >= 0);
            CHECK(v < cfg.R);
        }
        double lm_sum = 0.0;
        for (double v : rec.landmark_map.data) {
            CHECK((v == 0.0 || v == 1.0));
            lm_sum += v;
        }
        CHECK(lm_sum == doctest::Approx(5.0 * static_cast<double>(cfg.T)));
    }
}

TEST_CASE("load rejects corrupted artifacts with named fields") {
    auto cfg = tiny_config();
    cfg.samples_per_class = 2;
    auto dir = fresh_dir("corrupt");
    auto m = generate_corpus(cfg, 3, dir);
    const auto& e = m.samples[0];

    SUBCASE("frames out of range") {
        Tensor f = read_tensor_file(dir / e.path / "frames.bin");
        f.data[0] = 1.5;
        write_tensor_file(dir / e.path / "frames.bin", f);
        CHECK_THROWS_WITH_AS(load_sample(m, e.sample_id),
                             doctest::Contains("frames value out of [0, 1]"), std::runtime_error);
    }
    SUBCASE("frames shape mismatch") {
        Tensor f = Tensor::zeros({1, 2, 2, 1});
        write_tensor_file(dir / e.path / "frames.bin", f);
        CHECK_THROWS_WITH_AS(load_sample(m, e.sample_id), doctest::Contains("frames shape"),
                             std::runtime_error);
    }
    SUBCASE("parsing id out of range") {
        IntTensor p = read_int_tensor_file(dir / e.path / "parsing.bin");
        p.data[0] = static_cast<int32_t>(cfg.R);
        write_tensor_file(dir / e.path / "parsing.bin", p);
        CHECK_THROWS_WITH_AS(load_sample(m, e.sample_id),
                             doctest::Contains("parsing region id out of range"), std::runtime_error);
    }
    SUBCASE("empty description") {
        std::ofstream(dir / e.path / "description.txt", std::ios::trunc).close();
        CHECK_THROWS_WITH_AS(load_sample(m, e.sample_id), doctest::Contains("description is empty"),
                             std::runtime_error);
    }
    SUBCASE("unknown sample id") {
        CHECK_THROWS_AS(load_sample(m, "nope"), std::invalid_argument);
    }
}

TEST_CASE("noiseless frames are class pure and classes are distinct") {
    auto cfg = tiny_config();
    cfg.noise_std = 0.0;
    cfg.samples_per_class = 2;
    auto dir = fresh_dir("clean");
    auto m = generate_corpus(cfg, 1, dir);

    std::vector<Tensor> first(static_cast<size_t>(cfg.num_classes));
    for (const auto& e : m.samples) {
        auto rec = load_sample(m, e.sample_id);
        auto& slot = first[static_cast<size_t>(e.class_id)];
        if (slot.numel() == 0) {
            slot = rec.frames;
        } else {
            for (int64_t i = 0; i < rec.frames.numel(); ++i)
                CHECK(rec.frames.data[static_cast<size_t>(i)] ==
                      slot.data[static_cast<size_t>(i)]);
        }
    }
    for (int64_t a = 0; a < cfg.num_classes; ++a)
        for (int64_t b = a + 1; b < cfg.num_classes; ++b) {
            double diff = 0.0;
            for (int64_t i = 0; i < first[0].numel(); ++i)
                diff = std::max(diff, std::abs(first[static_cast<size_t>(a)].data[static_cast<size_t>(i)] -
                                               first[static_cast<size_t>(b)].data[static_cast<size_t>(i)]));
            CHECK(diff > 0.01);
        }
}

TEST_CASE("noiseless intensities never reach the clamp") {
    auto cfg = tiny_config();
    cfg.noise_std = 0.0;
    cfg.samples_per_class = 1;
    cfg.num_classes = 7;
    auto dir = fresh_dir("noclamp");
    auto m = generate_corpus(cfg, 1, dir);
    for (const auto& e : m.samples) {
        auto rec = load_sample(m, e.sample_id);
        for (double v : rec.frames.data) CHECK(v < 1.0);
    }
}

TEST_CASE("landmarks sit inside active parsing regions") {
    auto cfg = tiny_config();
    cfg.H = 32;
    cfg.W = 32;
    cfg.samples_per_class = 1;
    auto dir = fresh_dir("support");
    auto m = generate_corpus(cfg, 9, dir);
    for (const auto& e : m.samples) {
        auto rec = load_sample(m, e.sample_id);
        for (int64_t t = 0; t < cfg.T; ++t)
            for (int64_t y = 0; y < cfg.H; ++y)
                for (int64_t x = 0; x < cfg.W; ++x)
                    if (rec.landmark_map.at({t, y, x}) == 1.0) {
                        int32_t level = rec.parsing_map.data[static_cast<size_t>(
                            (t * cfg.H + y) * cfg.W + x)];
                        CHECK(level >= 1);
                    }
    }
}

TEST_CASE("parsing maps change over time with the motion ramp") {
    auto cfg = tiny_config();
    cfg.noise_std = 0.0;
    cfg.samples_per_class = 1;
    auto dir = fresh_dir("ramp");
    auto m = generate_corpus(cfg, 2, dir);
    int64_t changing = 0;
    for (const auto& e : m.samples) {
        auto rec = load_sample(m, e.sample_id);
        const size_t plane = static_cast<size_t>(cfg.H * cfg.W);
        bool differs = false;
        for (size_t i = 0; i < plane && !differs; ++i)
            if (rec.parsing_map.data[i] != rec.parsing_map.data[(cfg.T - 1) * plane + i]) differs = true;
        if (differs) ++changing;
    }
    CHECK(changing == cfg.num_classes);
}

TEST_CASE("stratified split honours the ratio per class") {
    auto cfg = tiny_config();
    cfg.samples_per_class = 10;
    auto dir = fresh_dir("split");
    auto m = generate_corpus(cfg, 4, dir);

    auto [train, test] = split_dataset(m, 0.8, 21);
    CHECK(train.samples.size() == static_cast<size_t>(8 * cfg.num_classes));
    CHECK(test.samples.size() == static_cast<size_t>(2 * cfg.num_classes));
    std::vector<int64_t> tr(static_cast<size_t>(cfg.num_classes), 0);
    std::vector<int64_t> te(static_cast<size_t>(cfg.num_classes), 0);
    for (const auto& e : train.samples) ++tr[static_cast<size_t>(e.class_id)];
    for (const auto& e : test.samples) ++te[static_cast<size_t>(e.class_id)];
    for (int64_t k = 0; k < cfg.num_classes; ++k) {
        CHECK(tr[static_cast<size_t>(k)] == 8);
        CHECK(te[static_cast<size_t>(k)] == 2);
    }

    std::set<std::string> ids;
    for (const auto& e : train.samples) ids.insert(e.sample_id);
    for (const auto& e : test.samples) CHECK(ids.count(e.sample_id) == 0);

    auto [t1, s1] = split_dataset(m, 0.8, 21);
    CHECK(t1.samples.size() == train.samples.size());
    for (size_t i = 0; i < t1.samples.size(); ++i)
        CHECK(t1.samples[i].sample_id == train.samples[i].sample_id);
}

TEST_CASE("split keeps at least one sample on each side") {
    auto cfg = tiny_config();
    cfg.samples_per_class = 2;
    auto dir = fresh_dir("split2");
    auto m = generate_corpus(cfg, 4, dir);
    auto [train, test] = split_dataset(m, 0.9, 1);
    std::vector<int64_t> tr(static_cast<size_t>(cfg.num_classes), 0);
    for (const auto& e : train.samples) ++tr[static_cast<size_t>(e.class_id)];
    for (int64_t k = 0; k < cfg.num_classes; ++k) CHECK(tr[static_cast<size_t>(k)] == 1);
    CHECK_THROWS_AS(split_dataset(m, 1.5, 1), std::invalid_argument);
}

TEST_CASE("assign_splits tags the manifest in place and survives a reload") {
    auto cfg = tiny_config();
    cfg.samples_per_class = 5;
    auto dir = fresh_dir("assign");
    auto m = generate_corpus(cfg, 6, dir);
    assign_splits(m, 0.8, 13);
    m.save(dir);
    auto loaded = DatasetManifest::load(dir);
    CHECK(loaded.entries_for_split("train").size() == static_cast<size_t>(4 * cfg.num_classes));
    CHECK(loaded.entries_for_split("test").size() == static_cast<size_t>(1 * cfg.num_classes));
}

TEST_CASE("zero leakage yields descriptions free of emotion vocabulary") {
    auto cfg = tiny_config();
    cfg.leakage_rate = 0.0;
    cfg.samples_per_class = 6;
    auto dir = fresh_dir("leak0");
    auto m = generate_corpus(cfg, 8, dir);
    auto lex = EmotionLexicon::defaults();
    for (const auto& e : m.samples) {
        auto rec = load_sample(m, e.sample_id);
        CHECK(!has_lexicon_hit(rec.description, lex));
    }
}

TEST_CASE("leakage rate controls the contaminated fraction") {
    auto cfg = tiny_config();
    cfg.leakage_rate = 0.5;
    cfg.samples_per_class = 40;
    auto dir = fresh_dir("leak50");
    auto m = generate_corpus(cfg, 10, dir);
    auto lex = EmotionLexicon::defaults();
    int64_t hits = 0;
    for (const auto& e : m.samples) {
        auto rec = load_sample(m, e.sample_id);
        if (has_lexicon_hit(rec.description, lex)) ++hits;
    }
    const double n = static_cast<double>(m.samples.size());
    const double sigma = std::sqrt(n * 0.25);
    CHECK(static_cast<double>(hits) > 0.5 * n - 3.0 * sigma);
    CHECK(static_cast<double>(hits) < 0.5 * n + 3.0 * sigma);
}

TEST_CASE("config validation rejects bad settings") {
    GeneratorConfig c;
    c.num_classes = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = GeneratorConfig{};
    c.num_classes = 36;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = GeneratorConfig{};
    c.noise_std = -0.1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = GeneratorConfig{};
    c.leakage_rate = 1.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = GeneratorConfig{};
    c.name_variant = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_NOTHROW(GeneratorConfig{}.validate());
}
