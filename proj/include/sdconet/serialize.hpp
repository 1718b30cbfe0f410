#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sdconet/tensor.hpp"

namespace sdconet {

// Single-file archive: magic "SDCN", u32 version, u64 header length, JSON
// header describing named arrays, then the raw little-endian float64 payload.
struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<Scalar> data;
};

struct Archive {
    std::vector<NamedArray> arrays;
    nlohmann::json meta;

    const NamedArray* find(const std::string& name) const;
};

void save_archive(const std::string& path, const std::vector<NamedArray>& arrays,
                  const nlohmann::json& meta);
Archive load_archive(const std::string& path);

} // namespace sdconet
