#include "sdconet/dataset.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sdconet/common.hpp"
#include "sdconet/image.hpp"

namespace fs = std::filesystem;

namespace sdconet {

namespace {

std::string tile_file(long long id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "tile_%06lld.png", id);
    return buf;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

} // namespace

nlohmann::json write_dataset(const std::string& dir, const DatasetSpec& spec) {
    check_config(spec.count >= 0, "dataset: count must be >= 0");
    check_config(spec.tile_size >= 2 && spec.tile_size % 2 == 0,
                 "dataset: tile_size must be a positive even extent");
    check_config(spec.overlap >= 0 && spec.overlap < spec.tile_size,
                 "dataset: overlap must lie in [0, tile_size)");

    fs::create_directories(fs::path(dir) / "hr");
    fs::create_directories(fs::path(dir) / "lr");

    AnnotationSet set;
    for (size_t c = 0; c < kClassNames.size(); ++c)
        set.categories.push_back({static_cast<int>(c), kClassNames[c], {}});

    long long next_id = 0;
    for (int i = 0; i < spec.count; ++i) {
        Sample scene = synth_scene(spec.scene, spec.seed * 1000003ULL + static_cast<uint64_t>(i));
        const auto patches = tile_image(scene.hr, scene.boxes, spec.tile_size, spec.overlap, i);
        for (const TilePatch& p : patches) {
            const long long id = next_id++;
            const std::string name = tile_file(id);
            save_png((fs::path(dir) / "hr" / name).string(), p.img);
            save_png((fs::path(dir) / "lr" / name).string(), bicubic_down2(p.img));

            AnnImage im;
            im.id = id;
            im.file = "hr/" + name;
            im.width = p.img.w;
            im.height = p.img.h;
            im.extra = {{"lr_file", "lr/" + name},
                        {"scene", i},
                        {"tile_index", p.tile_index},
                        {"x0", p.x0},
                        {"y0", p.y0}};
            set.images.push_back(im);
            for (const GTBox& b : p.boxes) {
                AnnBox ab;
                ab.image_id = id;
                ab.class_id = b.class_id;
                ab.bbox[0] = b.x;
                ab.bbox[1] = b.y;
                ab.bbox[2] = b.w;
                ab.bbox[3] = b.h;
                set.annotations.push_back(ab);
            }
        }
    }
    save_annotations((fs::path(dir) / "annotations.json").string(), set);

    nlohmann::json manifest = {{"format", "sdconet-dataset"},
                               {"version", 1},
                               {"seed", spec.seed},
                               {"count", spec.count},
                               {"canvas_h", spec.scene.h},
                               {"canvas_w", spec.scene.w},
                               {"min_objects", spec.scene.min_objects},
                               {"max_objects", spec.scene.max_objects},
                               {"clutter", spec.scene.clutter},
                               {"tile_size", spec.tile_size},
                               {"overlap", spec.overlap},
                               {"tiles", next_id},
                               {"annotations", set.annotations.size()},
                               {"classes", kClassNames}};
    write_json_file((fs::path(dir) / "manifest.json").string(), manifest);
    return manifest;
}

std::vector<Sample> load_dataset(const std::string& dir) {
    const std::string ann_path = (fs::path(dir) / "annotations.json").string();
    if (!fs::exists(ann_path)) throw IoError("dataset not found: " + dir);
    std::vector<std::string> warnings; // own extra fields land here, not on stderr
    const AnnotationSet set = load_annotations(ann_path, &warnings);

    std::vector<Sample> out;
    out.reserve(set.images.size());
    for (const AnnImage& im : set.images) {
        Sample s;
        s.image_id = im.id;
        s.hr = load_png((fs::path(dir) / im.file).string());
        check_contract(im.extra.contains("lr_file"), "dataset: image entry lacks lr_file");
        s.lr = load_png((fs::path(dir) / im.extra.at("lr_file").get<std::string>()).string());
        for (const AnnBox& b : set.annotations)
            if (b.image_id == im.id)
                s.boxes.push_back({b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3], b.class_id});
        out.push_back(std::move(s));
    }
    return out;
}

std::string dataset_cache_name(const DatasetSpec& spec) {
    std::ostringstream os;
    os << "synth-c" << spec.scene.h << "x" << spec.scene.w << "-t" << spec.tile_size << "-o"
       << spec.overlap << "-n" << spec.count << "-obj" << spec.scene.min_objects << "-"
       << spec.scene.max_objects << "-cl" << spec.scene.clutter << "-s" << spec.seed;
    return os.str();
}

} // namespace sdconet
