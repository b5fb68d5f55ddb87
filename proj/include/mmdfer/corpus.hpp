#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmdfer/tensor.hpp"

namespace mmdfer {

struct GeneratorConfig {
    int64_t num_classes = 7;
    int64_t samples_per_class = 40;
    int64_t T = 4;
    int64_t H = 32;
    int64_t W = 32;
    int64_t C = 3;
    int64_t R = 5;
    double noise_std = 0.03;
    double leakage_rate = 0.0;
    int64_t paraphrase_count = 3;
    // 0 and 1 select disjoint class-name sets over the same generative
    // family; region words are shared, motion words are not.
    int64_t name_variant = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static GeneratorConfig from_json(const nlohmann::json& j);
};

struct SampleRecord {
    std::string sample_id;
    Tensor frames;         // [T, H, W, C], values in [0, 1]
    IntTensor parsing_map;  // [T, H, W], region ids in [0, R)
    Tensor landmark_map;   // [T, H, W], sparse unit impulses
    std::string description;
    int64_t class_id = -1;
};

struct ManifestEntry {
    std::string sample_id;
    std::string path;  // relative to the manifest root
    int64_t class_id = -1;
    std::string split = "train";
};

struct DatasetManifest {
    std::string corpus_name;
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> samples;
    GeneratorConfig config;
    uint64_t seed = 0;
    std::filesystem::path root;  // directory holding manifest.jsonl

    void save(const std::filesystem::path& dir) const;
    static DatasetManifest load(const std::filesystem::path& dir);

    std::vector<ManifestEntry> entries_for_split(const std::string& split) const;
    const ManifestEntry& entry(const std::string& sample_id) const;
};

// Class k pairs a face region (k mod 5) with a motion (k mod 7); supports
// up to 35 distinct classes per variant.
std::vector<std::string> class_name_table(int64_t num_classes, int64_t name_variant);

// The bare class name plus the name phrased like the default generated
// descriptions; averaging their embeddings gives a classifier prompt that
// matches the caption distribution.
std::vector<std::string> caption_prompts(const std::string& class_name);

DatasetManifest generate_corpus(const GeneratorConfig& config, uint64_t seed,
                                const std::filesystem::path& out_dir);

SampleRecord load_sample(const DatasetManifest& manifest, const std::string& sample_id);

// Class-stratified disjoint split; floor(ratio * n) per class goes to
// train, clamped so both sides stay non-empty.
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double ratio, uint64_t seed);

// Tags entries in place using split_dataset's assignment.
void assign_splits(DatasetManifest& manifest, double ratio, uint64_t seed);

// Content hash over the manifest header and every sample file, in manifest
// order.
uint64_t corpus_hash(const DatasetManifest& manifest);

}  // namespace mmdfer
