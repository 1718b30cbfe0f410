#include "sdconet/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>

#include "sdconet/common.hpp"

namespace sdconet {

void DataConfig::validate() const {
    check_config(canvas >= 64, "data: canvas must be >= 64");
    check_config(canvas % 2 == 0, "data: canvas must be even");
    check_config(tile_size >= 64, "data: tile_size must be >= 64");
    check_config(tile_size % 2 == 0, "data: tile_size must be even");
    check_config(overlap >= 0 && overlap < tile_size, "data: overlap must lie in [0, tile_size)");
    check_config(min_objects >= 1, "data: min_objects must be >= 1");
    check_config(max_objects >= min_objects, "data: max_objects must be >= min_objects");
    check_config(count >= 0, "data: count must be >= 0");
    check_config(clutter >= 0.0 && clutter <= 1.0, "data: clutter must lie in [0, 1]");
}

void EvalConfig::validate() const {
    check_config(min_score >= 0.0 && min_score < 1.0, "eval: min_score must lie in [0, 1)");
    check_config(fps_warmups >= 0, "eval: fps_warmups must be >= 0");
    check_config(fps_runs >= 1, "eval: fps_runs must be >= 1");
}

RunConfig::RunConfig() { model.filter.schedule = FilterSchedule::paper_schedule(); }

std::vector<std::string> RunConfig::validation_errors() const {
    std::vector<std::string> errs;
    auto trap = [&errs](const std::function<void()>& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            std::string msg = e.what();
            const std::string prefix = "config error: ";
            if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
            errs.push_back(msg);
        }
    };
    trap([&] { check_config(config_version == 1, "config_version: unsupported value"); });
    trap([&] { model.encoder.validate(); });
    trap([&] { model.sr.validate(model.encoder.stage_channels); });
    trap([&] { model.saliency.validate(); });
    const int levels = static_cast<int>(model.encoder.stage_channels.size());
    trap([&] { model.filter.validate(levels); });
    trap([&] { model.detector.validate(); });
    trap([&] { model.detector.attn.validate(levels); });
    trainer.validate(&errs);
    trap([&] { data.validate(); });
    trap([&] { eval.validate(); });
    return errs;
}

void RunConfig::validate() const {
    const auto errs = validation_errors();
    check_config(errs.empty(), errs.empty() ? "" : errs.front());
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["config_version"] = config_version;
    j["encoder"] = {{"patch_size", model.encoder.patch_size},
                    {"window_size", model.encoder.window_size},
                    {"stage_depths", model.encoder.stage_depths},
                    {"stage_channels", model.encoder.stage_channels},
                    {"num_heads", model.encoder.num_heads},
                    {"mlp_ratio", model.encoder.mlp_ratio}};
    j["decoder_sr"] = {{"residual_blocks", model.sr.residual_blocks},
                       {"window_size", model.sr.window_size},
                       {"mlp_ratio", model.sr.mlp_ratio},
                       {"num_heads", model.sr.num_heads},
                       {"reconstruct_width", model.sr.reconstruct_width},
                       {"leaky_slope", model.sr.leaky_slope}};
    j["saliency"] = {{"sigma", model.saliency.sigma},
                     {"alpha_init", model.saliency.alpha_init},
                     {"focal_gamma", model.saliency.focal_gamma},
                     {"focal_alpha", model.saliency.focal_alpha}};
    j["filter"] = {{"beta", model.filter.schedule.beta},
                   {"gamma", model.filter.schedule.gamma},
                   {"background_embed", model.filter.background_embed},
                   {"max_grid", model.filter.max_grid}};
    j["detector"] = {{"num_classes", model.detector.num_classes},
                     {"num_queries", model.detector.num_queries},
                     {"num_layers", model.detector.num_layers},
                     {"d_model", model.detector.attn.d_model},
                     {"heads", model.detector.attn.heads},
                     {"points", model.detector.attn.points},
                     {"ffn_dim", model.detector.attn.ffn_dim}};
    j["trainer"] = {{"eta_det_1", trainer.eta_det_1},
                    {"eta_det_2", trainer.eta_det_2},
                    {"eta_feat_1", trainer.eta_feat_1},
                    {"eta_feat_2", trainer.eta_feat_2},
                    {"backbone_lr_mult", trainer.backbone_lr_mult},
                    {"rho", trainer.rho},
                    {"t_det", trainer.t_det},
                    {"t_tot", trainer.t_tot},
                    {"batch_size", trainer.batch_size},
                    {"steps_per_epoch", trainer.steps_per_epoch},
                    {"clip_norm", trainer.clip_norm},
                    {"milestones", trainer.milestones},
                    {"weight_decay", trainer.weight_decay},
                    {"loss_weights",
                     {{"cls", trainer.weights.cls},
                      {"bbox", trainer.weights.bbox},
                      {"giou", trainer.weights.giou},
                      {"sa", trainer.weights.sa},
                      {"sr", trainer.weights.sr}}},
                    {"seed", trainer.seed},
                    {"keep_last", trainer.keep_last}};
    j["data"] = {{"canvas", data.canvas},
                 {"tile_size", data.tile_size},
                 {"overlap", data.overlap},
                 {"min_objects", data.min_objects},
                 {"max_objects", data.max_objects},
                 {"count", data.count},
                 {"clutter", data.clutter}};
    j["eval"] = {{"min_score", eval.min_score},
                 {"fps_warmups", eval.fps_warmups},
                 {"fps_runs", eval.fps_runs}};
    return j;
}

namespace {

// Consumes keys from one section object; leftovers surface as unknown keys.
class SectionReader {
  public:
    SectionReader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {}

    void get(const char* key, int& out) {
        const auto* v = claim(key);
        if (!v) return;
        if (!v->is_number_integer()) return fail(key, "expected integer");
        out = v->get<int>();
    }
    void get(const char* key, long long& out) {
        const auto* v = claim(key);
        if (!v) return;
        if (!v->is_number_integer()) return fail(key, "expected integer");
        out = v->get<long long>();
    }
    void get(const char* key, double& out) {
        const auto* v = claim(key);
        if (!v) return;
        if (!v->is_number()) return fail(key, "expected number");
        out = v->get<double>();
    }
    void get(const char* key, bool& out) {
        const auto* v = claim(key);
        if (!v) return;
        if (!v->is_boolean()) return fail(key, "expected boolean");
        out = v->get<bool>();
    }
    void get(const char* key, std::vector<int>& out) {
        const auto* v = claim(key);
        if (!v) return;
        if (!v->is_array()) return fail(key, "expected array of integers");
        for (const auto& e : *v)
            if (!e.is_number_integer()) return fail(key, "expected array of integers");
        out = v->get<std::vector<int>>();
    }
    void get(const char* key, std::vector<Scalar>& out) {
        const auto* v = claim(key);
        if (!v) return;
        if (!v->is_array()) return fail(key, "expected array of numbers");
        for (const auto& e : *v)
            if (!e.is_number()) return fail(key, "expected array of numbers");
        out = v->get<std::vector<Scalar>>();
    }
    const nlohmann::json* object(const char* key) {
        const auto* v = claim(key);
        if (!v) return nullptr;
        if (!v->is_object()) {
            fail(key, "expected object");
            return nullptr;
        }
        return v;
    }
    void finish() {
        for (const auto& item : j_.items())
            if (std::find(seen_.begin(), seen_.end(), item.key()) == seen_.end())
                errors_.push_back(path_ + item.key() + ": unknown key");
    }

  private:
    const nlohmann::json* claim(const char* key) {
        seen_.emplace_back(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    void fail(const char* key, const char* what) {
        errors_.push_back(path_ + key + ": " + what);
    }

    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::vector<std::string> seen_;
};

} // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j, std::vector<std::string>& errors) {
    RunConfig cfg;
    if (!j.is_object()) {
        errors.push_back("config: root must be a JSON object");
        return cfg;
    }

    SectionReader root(j, "", errors);
    {
        if (j.find("config_version") == j.end()) errors.push_back("config_version: missing");
        root.get("config_version", cfg.config_version);
    }
    if (const auto* s = root.object("encoder")) {
        SectionReader r(*s, "encoder.", errors);
        r.get("patch_size", cfg.model.encoder.patch_size);
        r.get("window_size", cfg.model.encoder.window_size);
        r.get("stage_depths", cfg.model.encoder.stage_depths);
        r.get("stage_channels", cfg.model.encoder.stage_channels);
        r.get("num_heads", cfg.model.encoder.num_heads);
        r.get("mlp_ratio", cfg.model.encoder.mlp_ratio);
        r.finish();
    }
    if (const auto* s = root.object("decoder_sr")) {
        SectionReader r(*s, "decoder_sr.", errors);
        r.get("residual_blocks", cfg.model.sr.residual_blocks);
        r.get("window_size", cfg.model.sr.window_size);
        r.get("mlp_ratio", cfg.model.sr.mlp_ratio);
        r.get("num_heads", cfg.model.sr.num_heads);
        r.get("reconstruct_width", cfg.model.sr.reconstruct_width);
        r.get("leaky_slope", cfg.model.sr.leaky_slope);
        r.finish();
    }
    if (const auto* s = root.object("saliency")) {
        SectionReader r(*s, "saliency.", errors);
        r.get("sigma", cfg.model.saliency.sigma);
        r.get("alpha_init", cfg.model.saliency.alpha_init);
        r.get("focal_gamma", cfg.model.saliency.focal_gamma);
        r.get("focal_alpha", cfg.model.saliency.focal_alpha);
        r.finish();
    }
    if (const auto* s = root.object("filter")) {
        SectionReader r(*s, "filter.", errors);
        r.get("beta", cfg.model.filter.schedule.beta);
        r.get("gamma", cfg.model.filter.schedule.gamma);
        r.get("background_embed", cfg.model.filter.background_embed);
        r.get("max_grid", cfg.model.filter.max_grid);
        r.finish();
    }
    if (const auto* s = root.object("detector")) {
        SectionReader r(*s, "detector.", errors);
        r.get("num_classes", cfg.model.detector.num_classes);
        r.get("num_queries", cfg.model.detector.num_queries);
        r.get("num_layers", cfg.model.detector.num_layers);
        r.get("d_model", cfg.model.detector.attn.d_model);
        r.get("heads", cfg.model.detector.attn.heads);
        r.get("points", cfg.model.detector.attn.points);
        r.get("ffn_dim", cfg.model.detector.attn.ffn_dim);
        r.finish();
    }
    if (const auto* s = root.object("trainer")) {
        SectionReader r(*s, "trainer.", errors);
        r.get("eta_det_1", cfg.trainer.eta_det_1);
        r.get("eta_det_2", cfg.trainer.eta_det_2);
        r.get("eta_feat_1", cfg.trainer.eta_feat_1);
        r.get("eta_feat_2", cfg.trainer.eta_feat_2);
        r.get("backbone_lr_mult", cfg.trainer.backbone_lr_mult);
        r.get("rho", cfg.trainer.rho);
        r.get("t_det", cfg.trainer.t_det);
        r.get("t_tot", cfg.trainer.t_tot);
        r.get("batch_size", cfg.trainer.batch_size);
        r.get("steps_per_epoch", cfg.trainer.steps_per_epoch);
        r.get("clip_norm", cfg.trainer.clip_norm);
        r.get("milestones", cfg.trainer.milestones);
        r.get("weight_decay", cfg.trainer.weight_decay);
        if (const auto* w = r.object("loss_weights")) {
            SectionReader rw(*w, "trainer.loss_weights.", errors);
            rw.get("cls", cfg.trainer.weights.cls);
            rw.get("bbox", cfg.trainer.weights.bbox);
            rw.get("giou", cfg.trainer.weights.giou);
            rw.get("sa", cfg.trainer.weights.sa);
            rw.get("sr", cfg.trainer.weights.sr);
            rw.finish();
        }
        r.get("seed", cfg.trainer.seed);
        r.get("keep_last", cfg.trainer.keep_last);
        r.finish();
    }
    if (const auto* s = root.object("data")) {
        SectionReader r(*s, "data.", errors);
        r.get("canvas", cfg.data.canvas);
        r.get("tile_size", cfg.data.tile_size);
        r.get("overlap", cfg.data.overlap);
        r.get("min_objects", cfg.data.min_objects);
        r.get("max_objects", cfg.data.max_objects);
        r.get("count", cfg.data.count);
        r.get("clutter", cfg.data.clutter);
        r.finish();
    }
    if (const auto* s = root.object("eval")) {
        SectionReader r(*s, "eval.", errors);
        r.get("min_score", cfg.eval.min_score);
        r.get("fps_warmups", cfg.eval.fps_warmups);
        r.get("fps_runs", cfg.eval.fps_runs);
        r.finish();
    }
    root.finish();

    for (const auto& msg : cfg.validation_errors()) errors.push_back(msg);
    return cfg;
}

RunConfig load_run_config(const std::string& path, std::vector<std::string>& errors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        errors.push_back("config: cannot open " + path);
        return RunConfig{};
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        errors.push_back(std::string("config: ") + e.what());
        return RunConfig{};
    }
    return RunConfig::from_json(j, errors);
}

} // namespace sdconet
