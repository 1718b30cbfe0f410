#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "sdconet/common.hpp"
#include "sdconet/config.hpp"
#include "sdconet/dataset.hpp"
#include "sdconet/metrics.hpp"
#include "sdconet/model.hpp"
#include "sdconet/trainer.hpp"

namespace fs = std::filesystem;
using namespace sdconet;

namespace {

[[noreturn]] void fail(const std::string& msg, int code = 1) {
    std::cerr << "error: " << msg << "\n";
    std::exit(code);
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

RunConfig load_config_or_fail(const std::string& path) {
    if (path.empty()) return RunConfig{};
    std::vector<std::string> errors;
    RunConfig cfg = load_run_config(path, errors);
    if (!errors.empty()) {
        for (const auto& e : errors) std::cerr << "error: config: " << e << "\n";
        std::exit(1);
    }
    return cfg;
}

DatasetSpec dataset_spec_from(const RunConfig& cfg) {
    DatasetSpec spec;
    spec.scene.h = spec.scene.w = cfg.data.canvas;
    spec.scene.min_objects = cfg.data.min_objects;
    spec.scene.max_objects = cfg.data.max_objects;
    spec.scene.clutter = cfg.data.clutter;
    spec.count = cfg.data.count;
    spec.tile_size = cfg.data.tile_size;
    spec.overlap = cfg.data.overlap;
    spec.seed = static_cast<uint64_t>(cfg.trainer.seed);
    return spec;
}

bool dir_non_empty(const fs::path& p) {
    return fs::exists(p) && fs::is_directory(p) &&
           fs::directory_iterator(p) != fs::directory_iterator();
}

std::string cache_root_or_fail(const char* reason) {
    const char* cache = std::getenv("SDCONET_CACHE");
    if (!cache || !*cache) fail(std::string(reason) + " and SDCONET_CACHE is unset");
    return cache;
}

// Explicit dir wins; otherwise the spec keys a cache entry, synthesized on miss.
std::string resolve_dataset(const RunConfig& cfg, const std::string& explicit_dir) {
    if (!explicit_dir.empty()) {
        if (!fs::exists(fs::path(explicit_dir) / "annotations.json"))
            fail("dataset not found: " + explicit_dir);
        return explicit_dir;
    }
    const std::string cache = cache_root_or_fail("no --data directory given");
    const DatasetSpec spec = dataset_spec_from(cfg);
    const fs::path dir = fs::path(cache) / dataset_cache_name(spec);
    if (!fs::exists(dir / "annotations.json")) {
        write_dataset(dir.string(), spec);
        std::cout << "synthesized dataset cache " << dir.string() << "\n";
    }
    return dir.string();
}

FlopsInput flops_input_from(const RunConfig& cfg, int lr_h, int lr_w) {
    FlopsInput in;
    in.input_h = lr_h;
    in.input_w = lr_w;
    in.encoder = cfg.model.encoder;
    in.det_attn = cfg.model.detector.attn;
    in.schedule = cfg.model.filter.schedule;
    in.sr_blocks = cfg.model.sr.residual_blocks;
    return in;
}

int cmd_synth_data(const RunConfig& cfg, std::string out_dir, bool force) {
    if (out_dir.empty())
        out_dir = (fs::path(cache_root_or_fail("no --out-dir given")) /
                   dataset_cache_name(dataset_spec_from(cfg)))
                      .string();
    if (dir_non_empty(out_dir)) {
        if (!force) fail("out-dir exists and is not empty (use --force): " + out_dir);
        fs::remove_all(out_dir);
    }
    const nlohmann::json manifest = write_dataset(out_dir, dataset_spec_from(cfg));
    std::cout << "wrote " << manifest.at("tiles").get<long long>() << " tiles to " << out_dir
              << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
    if (out_dir.empty()) fail("train: --out-dir is required");
    const std::vector<Sample> samples = load_dataset(resolve_dataset(cfg, data_dir));
    if (samples.empty()) fail("train: dataset is empty");

    fs::create_directories(out_dir);
    write_json_file(fs::path(out_dir) / "config.json", cfg.to_json());

    Rng rng(static_cast<uint64_t>(cfg.trainer.seed));
    Model model(cfg.model, rng);
    Trainer trainer(model, cfg.trainer);
    if (!resume.empty()) {
        if (!fs::exists(resume)) fail("checkpoint not found: " + resume, 2);
        trainer.load_checkpoint(resume);
        std::cout << "resumed from " << resume << " after epoch " << trainer.epoch() << "\n";
    }

    const std::vector<EpochRecord> log = trainer.train(samples, out_dir, &std::cout);

    nlohmann::json final_line;
    if (!log.empty()) {
        final_line = log.back().to_json();
    } else {
        Scalar ap50 = -1, psnr = -1;
        trainer.evaluate(samples, trainer.stage() == 2, ap50, psnr);
        final_line = {{"epoch", trainer.epoch()},
                      {"stage", trainer.stage()},
                      {"ap50", ap50},
                      {"psnr", psnr}};
    }
    std::cout << final_line.dump() << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_dir, bool timing) {
    if (!fs::exists(checkpoint)) fail("checkpoint not found: " + checkpoint, 2);
    const std::vector<Sample> samples = load_dataset(resolve_dataset(cfg, data_dir));
    if (samples.empty()) fail("eval: dataset is empty");

    Rng rng(static_cast<uint64_t>(cfg.trainer.seed));
    Model model(cfg.model, rng);
    Trainer trainer(model, cfg.trainer);
    trainer.load_checkpoint(checkpoint);

    std::vector<PredRecord> preds;
    std::vector<GtRecord> gts;
    Scalar psnr_sum = 0;
    {
        NoGradGuard ng;
        for (const Sample& s : samples) {
            const ModelOutput out = model.forward(image_to_tensor(s.lr), true, false);
            const nlohmann::json recs =
                prediction_records(out.det.logits, out.det.boxes, s.image_id, s.hr.h, s.hr.w,
                                   cfg.eval.min_score);
            for (const PredRecord& p : parse_predictions(recs)) preds.push_back(p);
            for (const GTBox& b : s.boxes)
                gts.push_back({s.image_id, b.class_id, b.x, b.y, b.w, b.h});
            psnr_sum += psnr_db(tensor_to_image(out.sr_image), s.hr);
        }
    }

    EvalReport rep = compute_ap(preds, gts);
    rep.psnr_db = psnr_sum / static_cast<Scalar>(samples.size());
    const FlopsTable table =
        flops_report(flops_input_from(cfg, samples.front().lr.h, samples.front().lr.w));
    rep.flops_g = table.rows.back().total() / 1e9;
    if (timing) {
        const Tensor lr0 = image_to_tensor(samples.front().lr);
        NoGradGuard ng;
        const Scalar ms = median_duration_ms([&] { model.forward(lr0, true, false); },
                                             cfg.eval.fps_warmups, cfg.eval.fps_runs);
        rep.fps = ms > 0 ? 1000.0 / ms : 0.0;
    }

    std::cout << rep.to_text();
    std::cout << rep.to_json().dump() << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_json_file(fs::path(out_dir) / "report.json", rep.to_json());
        std::ofstream txt(fs::path(out_dir) / "report.txt", std::ios::binary | std::ios::trunc);
        txt << rep.to_text();
    }
    return 0;
}

int cmd_flops(const RunConfig& cfg, bool json_mode) {
    const FlopsTable table =
        flops_report(flops_input_from(cfg, cfg.data.tile_size / 2, cfg.data.tile_size / 2));
    if (json_mode)
        std::cout << table.to_json().dump(2) << "\n";
    else
        std::cout << table.to_text();
    return 0;
}

int cmd_visualize_saliency(const RunConfig& cfg, const std::string& checkpoint,
                           const std::string& image_path, const std::string& out_dir) {
    if (!fs::exists(checkpoint)) fail("checkpoint not found: " + checkpoint, 2);
    if (out_dir.empty()) fail("visualize-saliency: --out-dir is required");
    if (!fs::exists(image_path)) fail("input image not found: " + image_path);

    Rng rng(static_cast<uint64_t>(cfg.trainer.seed));
    Model model(cfg.model, rng);
    Trainer trainer(model, cfg.trainer);
    trainer.load_checkpoint(checkpoint);

    const Image lr = load_png(image_path);
    NoGradGuard ng;
    const ModelOutput out = model.forward(image_to_tensor(lr), false, false);

    fs::create_directories(out_dir);
    nlohmann::json levels = nlohmann::json::array();
    for (size_t l = 0; l < out.saliency_maps.size(); ++l) {
        const Tensor& m = out.saliency_maps[l];
        const int h = m.dim(0), w = m.dim(1);
        const auto& v = m.values();
        double lo = v[0], hi = v[0];
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        Image g(h, w, 1);
        const double span = hi - lo;
        for (int i = 0; i < h * w; ++i) g.pix[i] = span > 0 ? (v[i] - lo) / span : 0.0;
        const std::string name = "saliency_l" + std::to_string(l + 1) + ".png";
        save_png((fs::path(out_dir) / name).string(), g);
        levels.push_back(
            {{"level", l + 1}, {"h", h}, {"w", w}, {"min", lo}, {"max", hi}, {"file", name}});
    }
    write_json_file(fs::path(out_dir) / "saliency_minmax.json", {{"levels", levels}});
    std::cout << "wrote " << levels.size() << " saliency maps to " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"joint super-resolution and detection toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, resume, checkpoint, image_path;
    long long seed = 0;
    bool force = false, json_mode = false, timing = false;
    int count = 0, canvas = 0, tile = 0, overlap = 0;

    app.add_option("--config", config_path, "run-config JSON path");
    auto* opt_seed = app.add_option("--seed", seed, "master seed; overrides the config");
    app.add_option("--out-dir", out_dir, "output directory");
    app.add_flag("--force", force, "replace a non-empty --out-dir");

    CLI::App* synth = app.add_subcommand("synth-data", "render a synthetic dataset");
    auto* opt_count = synth->add_option("--count", count, "scenes to render");
    auto* opt_canvas = synth->add_option("--canvas", canvas, "square scene extent, HR px");
    auto* opt_tile = synth->add_option("--tile-size", tile, "HR tile extent");
    auto* opt_overlap = synth->add_option("--overlap", overlap, "tile overlap, HR px");

    CLI::App* train = app.add_subcommand("train", "run the two-stage schedule");
    train->add_option("--data", data_dir, "dataset directory");
    train->add_option("--resume", resume, "checkpoint to continue from");

    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
    eval->add_option("--data", data_dir, "dataset directory");
    eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval->add_flag("--timing", timing, "measure wall-clock fps (non-deterministic)");

    CLI::App* flops = app.add_subcommand("flops", "analytic MAC table for the config");
    flops->add_flag("--json", json_mode, "emit JSON instead of text");

    CLI::App* vis = app.add_subcommand("visualize-saliency", "dump per-level saliency maps");
    vis->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    vis->add_option("--image", image_path, "input LR PNG")->required();

    for (CLI::App* sub : {synth, train, eval, flops, vis}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
    }

    try {
        RunConfig cfg = load_config_or_fail(config_path);
        if (opt_seed->count()) cfg.trainer.seed = seed;
        if (opt_count->count()) cfg.data.count = count;
        if (opt_canvas->count()) cfg.data.canvas = canvas;
        if (opt_tile->count()) cfg.data.tile_size = tile;
        if (opt_overlap->count()) cfg.data.overlap = overlap;
        cfg.data.validate(); // flag overrides re-checked

        if (synth->parsed()) return cmd_synth_data(cfg, out_dir, force);
        if (train->parsed()) return cmd_train(cfg, data_dir, out_dir, resume);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint, data_dir, out_dir, timing);
        if (flops->parsed()) return cmd_flops(cfg, json_mode);
        if (vis->parsed()) return cmd_visualize_saliency(cfg, checkpoint, image_path, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
