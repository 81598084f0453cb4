#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bpim/data.hpp"
#include "bpim/model.hpp"
#include "bpim/train.hpp"

namespace bpim::config {

struct DataConfig {
    std::string name = "dataset";
    std::string train;  // dataset root; relative paths also resolve under $BPIM_CACHE
    std::string val;    // defaults to train
    std::optional<data::SyntheticSpec> synthetic;  // generated into the cache when train is empty
};

/// One file merging the model, training, data and ablation settings.
struct RunConfig {
    std::uint64_t seed = 0;
    model::ModelConfig model;
    train::TrainConfig train;
    DataConfig data;
    std::vector<std::string> ablation_rows{"baseline", "big+awf", "pig+csf", "all"};

    /// Every setting, defaults included.
    nlohmann::json resolved() const;
};

/// The accepted document structure, in a JSON-schema subset (type,
/// properties, additionalProperties, required, enum, minimum, maximum,
/// exclusiveMinimum, items, minItems, maxItems).
const nlohmann::json& run_schema();
const nlohmann::json& synthetic_schema();

/// Checks `doc` against `schema`; returns one message per violation.
std::vector<std::string> validate(const nlohmann::json& doc, const nlohmann::json& schema);

/// YAML text to JSON. Plain scalars become booleans or numbers when they
/// parse as such; quoted scalars stay strings.
nlohmann::json yaml_to_json(const std::string& yaml_text);

/// Parses and validates; throws ConfigError listing every violation.
RunConfig parse_run_config(const std::string& yaml_text);
RunConfig load_run_config(const std::filesystem::path& path);

data::SyntheticSpec parse_synthetic_spec(const std::string& yaml_text);

}  // namespace bpim::config
