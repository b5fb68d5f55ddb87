#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "mmdfer/corpus.hpp"
#include "mmdfer/encoders.hpp"
#include "mmdfer/eval.hpp"
#include "mmdfer/training.hpp"

namespace mmdfer {

// Resolved run settings: defaults, overlaid by an optional JSON file,
// overlaid by command-line flags (handled by the CLI layer).
struct RunConfig {
    GeneratorConfig corpus;
    ModelConfig model;
    TrainConfig train;
    ZeroShotConfig zeroshot;
    double split_ratio = 0.8;
    int64_t jobs = 1;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& file);
};

}  // namespace mmdfer
