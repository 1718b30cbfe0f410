#include "sdconet/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace sdconet {

static_assert(std::endian::native == std::endian::little,
              "archive payload is little-endian");

namespace {
constexpr char kMagic[4] = {'S', 'D', 'C', 'N'};
constexpr uint32_t kVersion = 1;
} // namespace

const NamedArray* Archive::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

void save_archive(const std::string& path, const std::vector<NamedArray>& arrays,
                  const nlohmann::json& meta) {
    nlohmann::json header;
    header["meta"] = meta;
    header["arrays"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& a : arrays) {
        check_contract(static_cast<long long>(a.data.size()) == numel_of(a.shape),
                       "archive array " + a.name + ": data/shape mismatch");
        header["arrays"].push_back(
            {{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.data.size()}});
        offset += a.data.size();
    }
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kMagic, 4);
    uint32_t ver = kVersion;
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& a : arrays)
        f.write(reinterpret_cast<const char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(Scalar)));
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

Archive load_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not an SDCN archive: " + path);
    uint32_t ver = 0;
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!f || ver != kVersion)
        throw IoError("unsupported archive version in " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("truncated archive header: " + path);
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw IoError("corrupt archive header: " + path);

    Archive out;
    out.meta = header.value("meta", nlohmann::json::object());
    for (const auto& e : header.at("arrays")) {
        NamedArray a;
        a.name = e.at("name").get<std::string>();
        a.shape = e.at("shape").get<std::vector<int>>();
        uint64_t count = e.at("count").get<uint64_t>();
        a.data.resize(count);
        f.read(reinterpret_cast<char*>(a.data.data()),
               static_cast<std::streamsize>(count * sizeof(Scalar)));
        if (!f) throw IoError("truncated archive payload: " + path);
        out.arrays.push_back(std::move(a));
    }
    return out;
}

} // namespace sdconet
