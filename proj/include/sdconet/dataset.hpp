#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdconet/data.hpp"

namespace sdconet {

struct DatasetSpec {
    SceneSpec scene;
    int count = 8; // scenes; each scene may yield several tiles
    int tile_size = 128;
    int overlap = 32;
    uint64_t seed = 0;
};

// Renders, tiles, and degrades spec.count scenes into dir (hr/, lr/,
// annotations.json, manifest.json). Same spec -> byte-identical directory.
// Returns the manifest.
nlohmann::json write_dataset(const std::string& dir, const DatasetSpec& spec);

// Loads a directory written by write_dataset; order follows the annotation
// image list.
std::vector<Sample> load_dataset(const std::string& dir);

// Stable directory name for a spec, used for SDCONET_CACHE entries.
std::string dataset_cache_name(const DatasetSpec& spec);

} // namespace sdconet
