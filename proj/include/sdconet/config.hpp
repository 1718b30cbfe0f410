#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sdconet/model.hpp"
#include "sdconet/trainer.hpp"

namespace sdconet {

struct DataConfig {
    int canvas = 128;    // square scene extent, HR pixels
    int tile_size = 128; // HR tile extent; tiles larger than the canvas pad
    int overlap = 32;
    int min_objects = 3, max_objects = 8;
    int count = 8; // scenes per synthesis run
    double clutter = 0.2;

    void validate() const;
};

struct EvalConfig {
    Scalar min_score = 0.05; // prediction score floor
    int fps_warmups = 5;
    int fps_runs = 50;

    void validate() const;
};

// One JSON document drives every command; sections mirror the member structs.
struct RunConfig {
    int config_version = 1;
    ModelConfig model;
    TrainConfig trainer;
    DataConfig data;
    EvalConfig eval;

    RunConfig(); // defaults carry the published filter schedule

    void validate() const;                            // throws on the first violation
    std::vector<std::string> validation_errors() const; // empty when valid

    nlohmann::json to_json() const; // every default appears explicitly

    // Starts from defaults, overlays j, and appends every schema violation
    // (unknown key, wrong type, bad value) instead of stopping at the first.
    static RunConfig from_json(const nlohmann::json& j, std::vector<std::string>& errors);
};

// Reads and parses path. File and parse problems land in errors; the returned
// config is only meaningful when errors stays empty.
RunConfig load_run_config(const std::string& path, std::vector<std::string>& errors);

} // namespace sdconet
