#include "sdconet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace sdconet {

const std::vector<std::string> kClassNames = {"storage_tank", "vehicle", "ship", "airplane"};

namespace {

double boxes_iou(const GTBox& a, const GTBox& b) {
    double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    double inter = ix * iy;
    double uni = box_area(a) + box_area(b) - inter;
    return uni <= 0 ? 0 : inter / uni;
}

struct Color {
    double r, g, b;
};

void fill_rect(Image& img, int x0, int y0, int x1, int y1, const Color& c) {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, img.w);
    y1 = std::min(y1, img.h);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            img.at(y, x, 0) = c.r;
            img.at(y, x, 1) = c.g;
            img.at(y, x, 2) = c.b;
        }
}

void fill_disk(Image& img, double cx, double cy, double r, const Color& c) {
    int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
    int x1 = std::min(img.w, static_cast<int>(std::ceil(cx + r)) + 1);
    int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
    int y1 = std::min(img.h, static_cast<int>(std::ceil(cy + r)) + 1);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy > r * r) continue;
            // darker rim reads like a tank shadow ring
            double shade = (dx * dx + dy * dy > 0.7 * r * r) ? 0.85 : 1.0;
            img.at(y, x, 0) = c.r * shade;
            img.at(y, x, 1) = c.g * shade;
            img.at(y, x, 2) = c.b * shade;
        }
}

Color clamp_color(Color c) {
    auto cl = [](double v) { return std::min(0.98, std::max(0.02, v)); };
    return {cl(c.r), cl(c.g), cl(c.b)};
}

} // namespace

Sample synth_scene(const SceneSpec& spec, uint64_t seed) {
    check_config(spec.h > 8 && spec.w > 8, "scene canvas too small");
    check_config(spec.min_objects >= 0 && spec.min_objects <= spec.max_objects,
                 "object count range invalid");
    Rng rng(seed);
    Sample s;
    s.image_id = static_cast<long long>(seed);
    s.hr = Image(spec.h, spec.w, 3);

    // background: soft diagonal gradient plus texture noise
    double base = rng.uniform(0.25, 0.45);
    double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
    double tint_r = rng.uniform(-0.03, 0.03), tint_b = rng.uniform(-0.03, 0.03);
    for (int y = 0; y < spec.h; ++y)
        for (int x = 0; x < spec.w; ++x) {
            double v = base + gx * (static_cast<double>(x) / spec.w - 0.5) +
                       gy * (static_cast<double>(y) / spec.h - 0.5) + rng.normal(0.0, 0.015);
            Color c = clamp_color({v + tint_r, v, v + tint_b});
            s.hr.at(y, x, 0) = c.r;
            s.hr.at(y, x, 1) = c.g;
            s.hr.at(y, x, 2) = c.b;
        }

    // unlabeled clutter blobs with weak contrast
    int clutter_n = static_cast<int>(std::lround(spec.clutter * spec.h * spec.w / 800.0));
    for (int i = 0; i < clutter_n; ++i) {
        double cx = rng.uniform(2.0, spec.w - 2.0);
        double cy = rng.uniform(2.0, spec.h - 2.0);
        double r = rng.uniform(1.0, 4.0);
        double dv = rng.uniform(-0.08, 0.08);
        Color c = clamp_color({base + dv + tint_r, base + dv, base + dv + tint_b});
        fill_disk(s.hr, cx, cy, r, c);
    }

    int count = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
    for (int obj = 0; obj < count; ++obj) {
        // skewed-small extent: most objects below 32 px
        double u = rng.uniform();
        double extent = u < 0.7   ? rng.uniform(8.0, 30.0)
                        : u < 0.9 ? rng.uniform(30.0, 60.0)
                                  : rng.uniform(60.0, 100.0);
        extent = std::min(extent, 0.45 * std::min(spec.h, spec.w));
        int cls = static_cast<int>(rng.uniform_int(0, 3));

        double bw = extent, bh = extent;
        double thin = 0;
        switch (cls) {
        case 0: break; // disk: square box
        case 1:
            bh = std::max(4.0, extent * rng.uniform(0.4, 0.6));
            break;
        case 2:
            bh = std::max(3.0, extent * rng.uniform(0.15, 0.3));
            break;
        case 3:
            thin = std::max(2.0, extent * rng.uniform(0.2, 0.3));
            break;
        }
        if (cls == 1 || cls == 2) {
            if (rng.uniform() < 0.5) std::swap(bw, bh);
        }

        double contrast = rng.uniform(0.2, 0.45) * (rng.uniform() < 0.75 ? 1.0 : -1.0);
        Color col = clamp_color({base + contrast + rng.uniform(-0.05, 0.05),
                                 base + contrast + rng.uniform(-0.05, 0.05),
                                 base + contrast + rng.uniform(-0.05, 0.05)});

        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            GTBox b;
            b.w = bw;
            b.h = bh;
            b.x = std::floor(rng.uniform(1.0, spec.w - bw - 1.0));
            b.y = std::floor(rng.uniform(1.0, spec.h - bh - 1.0));
            b.class_id = cls;
            bool clash = false;
            for (const GTBox& other : s.boxes)
                if (boxes_iou(b, other) > 0.15) clash = true;
            if (clash) continue;

            int x0 = static_cast<int>(b.x), y0 = static_cast<int>(b.y);
            int x1 = static_cast<int>(std::lround(b.x + b.w));
            int y1 = static_cast<int>(std::lround(b.y + b.h));
            switch (cls) {
            case 0:
                fill_disk(s.hr, b.x + b.w / 2, b.y + b.h / 2, b.w / 2, col);
                break;
            case 1: {
                fill_rect(s.hr, x0, y0, x1, y1, col);
                // windshield stripe
                Color dark = clamp_color({col.r - 0.12, col.g - 0.12, col.b - 0.12});
                if (b.w >= b.h)
                    fill_rect(s.hr, x0 + (x1 - x0) / 3, y0, x0 + (x1 - x0) / 3 + 2, y1, dark);
                else
                    fill_rect(s.hr, x0, y0 + (y1 - y0) / 3, x1, y0 + (y1 - y0) / 3 + 2, dark);
                break;
            }
            case 2: {
                fill_rect(s.hr, x0, y0, x1, y1, col);
                Color deck = clamp_color({col.r + 0.1, col.g + 0.1, col.b + 0.1});
                int mx = (x0 + x1) / 2, my = (y0 + y1) / 2;
                if (b.w >= b.h)
                    fill_rect(s.hr, mx - 2, y0, mx + 2, y1, deck);
                else
                    fill_rect(s.hr, x0, my - 2, x1, my + 2, deck);
                break;
            }
            case 3: {
                int t = std::max(2, static_cast<int>(std::lround(thin)));
                int mx = (x0 + x1 - t) / 2, my = (y0 + y1 - t) / 2;
                fill_rect(s.hr, x0, my, x1, my + t, col);      // wings
                fill_rect(s.hr, mx, y0, mx + t, y1, col);      // fuselage
                break;
            }
            }
            s.boxes.push_back(b);
            placed = true;
        }
        check_contract(placed, "scene generation: cannot place object after bounded retries");
    }

    for (const GTBox& b : s.boxes) {
        check_contract(b.x >= 0 && b.y >= 0 && b.x + b.w <= spec.w && b.y + b.h <= spec.h,
                       "scene generation: box escaped canvas");
    }
    return s;
}

void degrade_sample(Sample& s) { s.lr = bicubic_down2(s.hr); }

int tiles_per_axis(int extent, int tile_size, int overlap) {
    check_config(overlap >= 0 && overlap < tile_size, "tiling: overlap must be < tile size");
    if (extent <= tile_size) return 1;
    int stride = tile_size - overlap;
    return static_cast<int>(
               std::ceil(static_cast<double>(extent - tile_size) / stride)) + 1;
}

std::vector<TilePatch> tile_image(const Image& img, const std::vector<GTBox>& boxes,
                                  int tile_size, int overlap, long long image_id) {
    check_config(tile_size > 0, "tiling: tile size must be positive");
    check_config(overlap >= 0 && overlap < tile_size, "tiling: overlap must be < tile size");
    int nx = tiles_per_axis(img.w, tile_size, overlap);
    int ny = tiles_per_axis(img.h, tile_size, overlap);
    int stride = tile_size - overlap;

    std::vector<TilePatch> out;
    int index = 0;
    for (int ty = 0; ty < ny; ++ty)
        for (int tx = 0; tx < nx; ++tx) {
            TilePatch p;
            p.x0 = tx * stride;
            p.y0 = ty * stride;
            p.image_id = image_id;
            p.tile_index = index++;
            p.img = Image(tile_size, tile_size, img.c); // zero padded
            int copy_w = std::min(tile_size, img.w - p.x0);
            int copy_h = std::min(tile_size, img.h - p.y0);
            for (int y = 0; y < copy_h; ++y)
                for (int x = 0; x < copy_w; ++x)
                    for (int ch = 0; ch < img.c; ++ch)
                        p.img.at(y, x, ch) = img.at(p.y0 + y, p.x0 + x, ch);

            for (const GTBox& b : boxes) {
                double x0 = std::max(b.x, static_cast<double>(p.x0));
                double y0 = std::max(b.y, static_cast<double>(p.y0));
                double x1 = std::min(b.x + b.w, static_cast<double>(p.x0 + tile_size));
                double y1 = std::min(b.y + b.h, static_cast<double>(p.y0 + tile_size));
                if (x1 <= x0 || y1 <= y0) continue;
                double kept = (x1 - x0) * (y1 - y0);
                if (kept < 0.3 * box_area(b)) continue;
                GTBox c;
                c.x = x0 - p.x0;
                c.y = y0 - p.y0;
                c.w = x1 - x0;
                c.h = y1 - y0;
                c.class_id = b.class_id;
                p.boxes.push_back(c);
            }
            out.push_back(std::move(p));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Annotation files
// ---------------------------------------------------------------------------

namespace {

void collect_extra(const nlohmann::json& obj, const std::vector<std::string>& known,
                   const std::string& where, nlohmann::json& extra,
                   std::vector<std::string>* warnings) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) != known.end()) continue;
        extra[it.key()] = it.value();
        std::string msg = "unknown field '" + it.key() + "' in " + where + " (preserved)";
        if (warnings)
            warnings->push_back(msg); // the sink owner decides what to surface
        else
            std::cerr << "warning: " << msg << std::endl;
    }
}

template <typename T>
T require_field(const nlohmann::json& obj, const char* key, const std::string& where) {
    if (!obj.contains(key))
        throw IoError("annotations: missing field '" + std::string(key) + "' in " + where);
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("annotations: bad field '" + std::string(key) + "' in " + where + ": " +
                      e.what());
    }
}

} // namespace

AnnotationSet load_annotations(const std::string& path, std::vector<std::string>* warnings) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("annotations parse failure in " + path + ": " + e.what());
    }
    if (!doc.is_object()) throw IoError("annotations: top level must be an object in " + path);

    AnnotationSet set;
    collect_extra(doc, {"images", "annotations", "categories"}, "top level", set.extra, warnings);

    int i = 0;
    for (const auto& e : doc.value("images", nlohmann::json::array())) {
        std::string where = "images[" + std::to_string(i++) + "]";
        AnnImage im;
        im.id = require_field<long long>(e, "id", where);
        im.file = require_field<std::string>(e, "file", where);
        im.width = require_field<int>(e, "width", where);
        im.height = require_field<int>(e, "height", where);
        if (im.width <= 0 || im.height <= 0)
            throw IoError("annotations: non-positive image dims in " + where);
        collect_extra(e, {"id", "file", "width", "height"}, where, im.extra, warnings);
        set.images.push_back(std::move(im));
    }
    i = 0;
    for (const auto& e : doc.value("annotations", nlohmann::json::array())) {
        std::string where = "annotations[" + std::to_string(i++) + "]";
        AnnBox b;
        b.image_id = require_field<long long>(e, "image_id", where);
        b.class_id = require_field<int>(e, "class_id", where);
        auto bb = require_field<std::vector<double>>(e, "bbox", where);
        if (bb.size() != 4)
            throw IoError("annotations: bbox must have 4 entries in " + where);
        if (bb[2] <= 0 || bb[3] <= 0)
            throw IoError("annotations: non-positive bbox size in " + where);
        std::copy(bb.begin(), bb.end(), b.bbox);
        collect_extra(e, {"image_id", "class_id", "bbox"}, where, b.extra, warnings);
        set.annotations.push_back(std::move(b));
    }
    i = 0;
    for (const auto& e : doc.value("categories", nlohmann::json::array())) {
        std::string where = "categories[" + std::to_string(i++) + "]";
        AnnCategory c;
        c.id = require_field<int>(e, "id", where);
        c.name = require_field<std::string>(e, "name", where);
        collect_extra(e, {"id", "name"}, where, c.extra, warnings);
        set.categories.push_back(std::move(c));
    }
    return set;
}

void save_annotations(const std::string& path, const AnnotationSet& set) {
    nlohmann::json doc = set.extra;
    doc["images"] = nlohmann::json::array();
    for (const auto& im : set.images) {
        nlohmann::json e = im.extra;
        e["id"] = im.id;
        e["file"] = im.file;
        e["width"] = im.width;
        e["height"] = im.height;
        doc["images"].push_back(std::move(e));
    }
    doc["annotations"] = nlohmann::json::array();
    for (const auto& b : set.annotations) {
        nlohmann::json e = b.extra;
        e["image_id"] = b.image_id;
        e["class_id"] = b.class_id;
        e["bbox"] = {b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]};
        doc["annotations"].push_back(std::move(e));
    }
    doc["categories"] = nlohmann::json::array();
    for (const auto& c : set.categories) {
        nlohmann::json e = c.extra;
        e["id"] = c.id;
        e["name"] = c.name;
        doc["categories"].push_back(std::move(e));
    }

    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw IoError("cannot open for writing: " + tmp.string());
        f << doc.dump(2) << "\n";
        f.flush();
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("atomic rename failed: " + ec.message());
}

} // namespace sdconet
