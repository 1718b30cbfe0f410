#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sdconet/image.hpp"
#include "sdconet/rng.hpp"

namespace sdconet {

// Axis-aligned box in HR pixel coordinates, top-left origin.
struct GTBox {
    double x = 0, y = 0, w = 0, h = 0;
    int class_id = 0;
};

inline double box_area(const GTBox& b) { return b.w * b.h; }

// class_id order: 0 storage tank (disk), 1 vehicle (rect), 2 ship
// (elongated), 3 airplane (cross)
extern const std::vector<std::string> kClassNames;

struct SceneSpec {
    int h = 128, w = 128;
    int min_objects = 3, max_objects = 8;
    double clutter = 0.2; // unlabeled distractor density knob
};

struct Sample {
    Image hr;
    Image lr; // empty until degraded
    std::vector<GTBox> boxes;
    long long image_id = 0;
};

// Deterministic scene render; throws ContractError when placement retries run out.
Sample synth_scene(const SceneSpec& spec, uint64_t seed);

// Fills sample.lr from sample.hr (bicubic /2).
void degrade_sample(Sample& s);

struct TilePatch {
    Image img;
    std::vector<GTBox> boxes; // tile-local coordinates
    int x0 = 0, y0 = 0;       // tile origin in the source image
    long long image_id = 0;
    int tile_index = 0;
};

// Sliding-window tiling: stride = tile_size - overlap, right/bottom tiles
// zero-padded. Clipped boxes kept when the clipped area is at least 30% of
// the original.
std::vector<TilePatch> tile_image(const Image& img, const std::vector<GTBox>& boxes,
                                  int tile_size, int overlap, long long image_id = 0);

int tiles_per_axis(int extent, int tile_size, int overlap);

// -- annotation file schema ------------------------------------------------
struct AnnImage {
    long long id = 0;
    std::string file;
    int width = 0, height = 0;
    nlohmann::json extra = nlohmann::json::object();
};
struct AnnBox {
    long long image_id = 0;
    int class_id = 0;
    double bbox[4] = {0, 0, 0, 0}; // x, y, w, h
    nlohmann::json extra = nlohmann::json::object();
};
struct AnnCategory {
    int id = 0;
    std::string name;
    nlohmann::json extra = nlohmann::json::object();
};
struct AnnotationSet {
    std::vector<AnnImage> images;
    std::vector<AnnBox> annotations;
    std::vector<AnnCategory> categories;
    nlohmann::json extra = nlohmann::json::object();
};

// Unknown fields are preserved in .extra and reported through warnings.
AnnotationSet load_annotations(const std::string& path,
                               std::vector<std::string>* warnings = nullptr);
// Write-temp-then-rename.
void save_annotations(const std::string& path, const AnnotationSet& set);

} // namespace sdconet
