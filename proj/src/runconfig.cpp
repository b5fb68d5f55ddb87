#include "mmdfer/runconfig.hpp"

#include <fstream>
#include <stdexcept>

namespace mmdfer {

nlohmann::json RunConfig::to_json() const {
    return {{"corpus", corpus.to_json()},
            {"model", model.to_json()},
            {"train", train.to_json()},
            {"zeroshot", zeroshot.to_json()},
            {"split_ratio", split_ratio},
            {"jobs", jobs}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("corpus")) c.corpus = GeneratorConfig::from_json(j.at("corpus"));
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("zeroshot")) c.zeroshot = ZeroShotConfig::from_json(j.at("zeroshot"));
    c.split_ratio = j.value("split_ratio", c.split_ratio);
    c.jobs = j.value("jobs", c.jobs);
    if (!(c.split_ratio > 0.0 && c.split_ratio < 1.0))
        throw std::invalid_argument("run config: split_ratio must be in (0, 1)");
    if (c.jobs < 1) throw std::invalid_argument("run config: jobs must be at least 1");
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
    std::ifstream f(file);
    if (!f) throw std::invalid_argument("run config file not found: " + file.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw std::invalid_argument("run config " + file.string() + ": " + e.what());
    }
    return from_json(j);
}

}  // namespace mmdfer
