#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sdconet/trainer.hpp"
#include "testing.hpp"

using namespace sdconet;
using testing::check_close;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.encoder.stage_channels = {8, 16, 32, 64};
    cfg.encoder.num_heads = {2, 2, 2, 2};
    cfg.filter.schedule = FilterSchedule{{0.6, 0.8, 1.0, 1.0}, {1.0, 0.5}};
    cfg.filter.max_grid = 16;
    cfg.detector.attn.d_model = 32;
    cfg.detector.attn.heads = 4;
    cfg.detector.attn.ffn_dim = 32;
    cfg.detector.num_queries = 12;
    cfg.detector.num_layers = 2;
    return cfg;
}

std::vector<Sample> tiny_data(int n, long long seed0) {
    SceneSpec sp;
    sp.h = 64;
    sp.w = 64;
    sp.min_objects = 1;
    sp.max_objects = 2;
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) {
        Sample s = synth_scene(sp, seed0 + i);
        degrade_sample(s);
        s.image_id = i;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<const Sample*> as_batch(const std::vector<Sample>& data) {
    std::vector<const Sample*> b;
    for (const Sample& s : data) b.push_back(&s);
    return b;
}

std::vector<std::vector<Scalar>> snapshot(const ParamList& pl) {
    std::vector<std::vector<Scalar>> out;
    for (const ParamEntry& p : pl) out.push_back(p.t.values());
    return out;
}

bool identical(const ParamList& pl, const std::vector<std::vector<Scalar>>& snap) {
    for (size_t i = 0; i < pl.size(); ++i)
        for (size_t j = 0; j < snap[i].size(); ++j)
            if (pl[i].t.values()[j] != snap[i][j]) return false;
    return true;
}

} // namespace

TEST_CASE("train config validation and lr helpers") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());

    TrainConfig bad = cfg;
    bad.rho = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.rho = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.t_det = 6;
    CHECK_THROWS_AS(bad.validate(), ConfigError); // t_det must be below t_tot

    bad = cfg;
    bad.clip_norm = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.milestones = {9};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    check_close(cfg.decay_at(1), 1.0, 0.0);
    check_close(cfg.decay_at(3), 1.0, 0.0);
    check_close(cfg.decay_at(4), 0.1, 0.0);
    check_close(cfg.decay_at(6), 0.1, 0.0);
    TrainConfig two = cfg;
    two.milestones = {2, 4};
    check_close(two.decay_at(5), 0.01, 1e-12);

    check_close(cfg.det_lr(1), 1e-4, 0.0);
    check_close(cfg.feat_lr(1), 0.1 * 1e-4, 0.0); // derived backbone multiplier
    TrainConfig explicit_feat = cfg;
    explicit_feat.eta_feat_2 = 3e-5;
    check_close(explicit_feat.feat_lr(2), 3e-5, 0.0);
    check_close(explicit_feat.feat_lr(1), 0.1 * 1e-4, 0.0);
}

TEST_CASE("routing law across the whole schedule") {
    Rng rng(31);
    Model model(tiny_model_config(), rng);
    TrainConfig cfg;
    cfg.t_det = 2;
    cfg.t_tot = 6;
    cfg.milestones = {4};
    Trainer tr(model, cfg);

    int transitions = 0;
    int prev = 0;
    for (int e = 1; e <= cfg.t_tot; ++e) {
        tr.set_routing(e);
        const int want_stage = e <= cfg.t_det ? 1 : 2;
        CHECK(tr.stage() == want_stage);
        const AdamW::Group& det = tr.optimizer().group("det");
        const AdamW::Group& feat = tr.optimizer().group("feat");
        const AdamW::Group& sr = tr.optimizer().group("sr");
        CHECK(sr.frozen == (want_stage == 1));
        CHECK(sr.lr == cfg.rho * det.lr);
        CHECK(det.lr == cfg.det_lr(want_stage) * cfg.decay_at(e));
        CHECK(feat.lr == cfg.feat_lr(want_stage) * cfg.decay_at(e));
        if (prev != 0 && want_stage != prev) ++transitions;
        prev = want_stage;
    }
    CHECK(transitions == 1);

    CHECK_THROWS_AS(tr.set_routing(0), ContractError);
    CHECK_THROWS_AS(tr.set_routing(7), ContractError);
}

TEST_CASE("stage one freezes the sr group bit-exactly") {
    Rng rng(13);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(2, 100);
    TrainConfig cfg;
    cfg.t_det = 2;
    cfg.t_tot = 3;
    cfg.milestones = {};
    cfg.seed = 5;
    Trainer tr(model, cfg);

    ParamGroups g = model.param_groups();
    auto sr_before = snapshot(g.sr);
    auto det_before = snapshot(g.det);
    auto feat_before = snapshot(g.feat);

    tr.run_epoch(data, 1);
    tr.run_epoch(data, 2);

    CHECK(identical(g.sr, sr_before));
    CHECK_FALSE(identical(g.det, det_before));
    CHECK_FALSE(identical(g.feat, feat_before));

    // Stage two moves the sr group too.
    tr.run_epoch(data, 3);
    CHECK_FALSE(identical(g.sr, sr_before));
}

TEST_CASE("epoch records carry routed lrs and snapshots") {
    Rng rng(41);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(2, 300);
    TrainConfig cfg;
    cfg.t_det = 1;
    cfg.t_tot = 4;
    cfg.milestones = {3};
    Trainer tr(model, cfg);

    EpochRecord r1 = tr.run_epoch(data, 1);
    CHECK(r1.stage == 1);
    CHECK(r1.ap50 >= 0.0);
    CHECK(r1.ap50 <= 1.0);
    check_close(r1.psnr, -1.0, 0.0); // no sr branch in stage one
    CHECK(r1.mean.sr == 0.0);
    CHECK(std::isfinite(r1.mean.total));
    CHECK(r1.mean.grad_norm > 0.0);

    EpochRecord r3 = tr.run_epoch(data, 3);
    CHECK(r3.stage == 2);
    CHECK(r3.psnr > 0.0);
    CHECK(r3.mean.sr > 0.0);
    CHECK(r3.lr_sr == cfg.rho * r3.lr_det);
    check_close(r3.lr_det, cfg.eta_det_2 * 0.1, 0.0);

    nlohmann::json j = r3.to_json();
    CHECK(j["epoch"] == 3);
    CHECK(j["stage"] == 2);
    CHECK(j["losses"].contains("total"));
    CHECK(j["lrs"].contains("sr"));
    CHECK(j.contains("ap50"));
}

TEST_CASE("non-finite loss aborts with diagnostics") {
    Rng rng(17);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(1, 200);
    TrainConfig cfg;
    Trainer tr(model, cfg);

    // Poison the saliency head; the ranking path tolerates NaN scores, so the
    // abort must come from the loss check.
    for (ParamEntry& p : model.param_groups().det)
        if (p.name.rfind("saliency.", 0) == 0) {
            Tensor t = p.t;
            t.values()[0] = std::numeric_limits<Scalar>::quiet_NaN();
            break;
        }

    try {
        tr.step(as_batch(data));
        FAIL("expected TrainAbort");
    } catch (const TrainAbort& e) {
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("gradient routing under ablated weights") {
    std::vector<Sample> data = tiny_data(2, 400);

    SUBCASE("zero detection weights still pass sr gradients to sr and feat") {
        Rng rng(23);
        Model model(tiny_model_config(), rng);
        TrainConfig cfg;
        cfg.t_det = 1;
        cfg.weights = LossWeights{0.0, 0.0, 0.0, 0.0, 1.0};
        Trainer tr(model, cfg);
        tr.set_routing(2);

        tr.optimizer().zero_grad();
        LossSet ls = tr.batch_losses(as_batch(data));
        Tensor total = stage_loss(ls, cfg.weights, 2);
        total.backward();

        auto group_grad_norm = [](const ParamList& pl) {
            Scalar sq = 0;
            for (const ParamEntry& p : pl) {
                Tensor t = p.t;
                if (!t.has_grad()) continue;
                for (Scalar v : t.grad()) sq += v * v;
            }
            return std::sqrt(sq);
        };
        ParamGroups g = model.param_groups();
        CHECK(group_grad_norm(g.sr) > 0.0);
        CHECK(group_grad_norm(g.feat) > 0.0);
    }

    SUBCASE("zero sr weight leaves the sr group without gradient") {
        Rng rng(23);
        Model model(tiny_model_config(), rng);
        TrainConfig cfg;
        cfg.t_det = 1;
        cfg.weights.sr = 0.0;
        Trainer tr(model, cfg);
        tr.set_routing(2);

        tr.optimizer().zero_grad();
        LossSet ls = tr.batch_losses(as_batch(data));
        Tensor total = stage_loss(ls, cfg.weights, 2);
        total.backward();

        for (const ParamEntry& p : model.param_groups().sr) {
            Tensor t = p.t;
            if (!t.has_grad()) continue;
            for (Scalar v : t.grad()) CHECK(v == 0.0);
        }
        bool det_hit = false;
        for (const ParamEntry& p : model.param_groups().det) {
            Tensor t = p.t;
            if (!t.has_grad()) continue;
            for (Scalar v : t.grad())
                if (v != 0.0) det_hit = true;
        }
        CHECK(det_hit);
    }
}

TEST_CASE("first stage-two step moves sr per unit gradient at rho times det") {
    Rng rng(37);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(2, 500);
    TrainConfig cfg;
    cfg.t_det = 1;
    cfg.weight_decay = 0.0; // keep the update purely gradient-driven
    Trainer tr(model, cfg);
    tr.set_routing(2);

    tr.optimizer().zero_grad();
    LossSet ls = tr.batch_losses(as_batch(data));
    Tensor total = stage_loss(ls, cfg.weights, 2);
    total.backward();
    tr.optimizer().clip_global_norm(cfg.clip_norm);

    ParamGroups g = model.param_groups();
    auto grads = [](const ParamList& pl) {
        std::vector<std::vector<Scalar>> out;
        for (const ParamEntry& p : pl) {
            Tensor t = p.t;
            out.push_back(t.has_grad() ? t.grad() : std::vector<Scalar>(t.size(), 0.0));
        }
        return out;
    };
    auto sr_g = grads(g.sr), det_g = grads(g.det);
    auto sr_before = snapshot(g.sr), det_before = snapshot(g.det);

    tr.optimizer().step();

    auto per_unit = [](const ParamList& pl, const std::vector<std::vector<Scalar>>& before,
                       const std::vector<std::vector<Scalar>>& gr) {
        Scalar sum = 0;
        long long n = 0;
        for (size_t i = 0; i < pl.size(); ++i)
            for (size_t j = 0; j < before[i].size(); ++j)
                if (std::fabs(gr[i][j]) > 1e-4) {
                    sum += std::fabs(pl[i].t.values()[j] - before[i][j]);
                    ++n;
                }
        REQUIRE(n > 0);
        return sum / static_cast<Scalar>(n);
    };
    const Scalar sr_step = per_unit(g.sr, sr_before, sr_g);
    const Scalar det_step = per_unit(g.det, det_before, det_g);
    const Scalar ratio = sr_step / det_step;
    CHECK(std::fabs(ratio - cfg.rho) / cfg.rho < 1e-2);
}

TEST_CASE("post-clip gradient norm obeys the clip law") {
    Rng rng(53);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(2, 600);
    TrainConfig cfg;
    Trainer tr(model, cfg);

    StepRecord r = tr.step(as_batch(data));
    CHECK(r.grad_norm > cfg.clip_norm); // raw init gradients exceed 0.1

    Scalar sq = 0;
    for (const AdamW::Group& grp : tr.optimizer().groups()) {
        if (grp.frozen) continue;
        for (const ParamEntry& p : grp.params) {
            Tensor t = p.t;
            if (!t.has_grad()) continue;
            for (Scalar v : t.grad()) sq += v * v;
        }
    }
    CHECK(std::sqrt(sq) <= cfg.clip_norm + 1e-6);
}

TEST_CASE("same seed reproduces the run") {
    std::vector<Sample> data = tiny_data(2, 700);
    TrainConfig cfg;
    cfg.t_det = 1;
    cfg.t_tot = 2;
    cfg.milestones = {};
    cfg.seed = 9;

    auto run = [&]() {
        Rng rng(77);
        Model model(tiny_model_config(), rng);
        Trainer tr(model, cfg);
        return tr.train(data);
    };
    std::vector<EpochRecord> a = run(), b = run();
    REQUIRE(a.size() == 2);
    REQUIRE(b.size() == 2);
    check_close(a.back().mean.total, b.back().mean.total, 1e-9);
    check_close(a.back().ap50, b.back().ap50, 1e-12);
}

TEST_CASE("checkpoints rotate, keep the best, and log ndjson") {
    fs::path dir = fs::temp_directory_path() / "sdconet_trainer_ckpt_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    Rng rng(61);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(2, 800);
    TrainConfig cfg;
    cfg.t_det = 1;
    cfg.t_tot = 3;
    cfg.milestones = {};
    cfg.keep_last = 2;
    Trainer tr(model, cfg);
    std::vector<EpochRecord> recs = tr.train(data, dir.string());

    CHECK_FALSE(fs::exists(dir / "ckpt_epoch_1.sdcn"));
    CHECK(fs::exists(dir / "ckpt_epoch_2.sdcn"));
    CHECK(fs::exists(dir / "ckpt_epoch_3.sdcn"));
    CHECK(fs::exists(dir / "ckpt_best.sdcn"));

    std::ifstream log(dir / "train_log.ndjson");
    REQUIRE(log.is_open());
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j["epoch"] == ++lines);
        CHECK((j["stage"] == 1 || j["stage"] == 2));
        CHECK(j["losses"].contains("total"));
        CHECK(j["lrs"].contains("det"));
        CHECK(j.contains("ap50"));
    }
    CHECK(lines == 3);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip restores parameters and optimizer state") {
    fs::path dir = fs::temp_directory_path() / "sdconet_trainer_rt_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string path = (dir / "ckpt.sdcn").string();

    Rng rng(67);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(2, 900);
    TrainConfig cfg;
    cfg.t_det = 1;
    Trainer tr(model, cfg);
    tr.run_epoch(data, 1);
    tr.save_checkpoint(path);

    ParamGroups g = model.param_groups();
    auto det_snap = snapshot(g.det);

    Tensor first = g.det[0].t;
    for (Scalar& v : first.values()) v += 1.0;
    CHECK_FALSE(identical(g.det, det_snap));

    tr.load_checkpoint(path);
    CHECK(identical(g.det, det_snap));
    CHECK(tr.epoch() == 1);
    CHECK(tr.stage() == 1);

    fs::remove_all(dir);
}

TEST_CASE("layered detection losses add the final, auxiliary, and encoder terms") {
    Rng rng(71);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(1, 950);
    Tensor lr = image_to_tensor(data[0].lr);
    ModelOutput out = model.forward(lr, false, true);

    std::vector<DetTarget> gts;
    for (const GTBox& b : data[0].boxes)
        gts.push_back(make_target(b, data[0].hr.h, data[0].hr.w));
    MatchWeights mw;
    DetLosses got = layered_detection_losses(out.det, gts, mw);

    Scalar want_cls = 0, want_bbox = 0, want_giou = 0;
    auto add_term = [&](const Tensor& lg, const Tensor& bx) {
        std::vector<int> asg = hungarian_match(lg, bx, gts, mw);
        DetLosses one = detection_losses(lg, bx, gts, asg, mw.focal_gamma, mw.focal_alpha);
        want_cls += one.cls.item();
        want_bbox += one.bbox.item();
        want_giou += one.giou.item();
    };
    add_term(out.det.aux_logits[0], out.det.aux_boxes[0]);
    add_term(out.det.logits, out.det.boxes);
    add_term(out.det.enc_logits, out.det.enc_boxes);

    check_close(got.cls.item(), want_cls, 1e-12);
    check_close(got.bbox.item(), want_bbox, 1e-12);
    check_close(got.giou.item(), want_giou, 1e-12);
}

TEST_CASE("a short stage-two run reduces the objective") {
    Rng rng(83);
    Model model(tiny_model_config(), rng);
    std::vector<Sample> data = tiny_data(2, 1000);
    TrainConfig cfg;
    cfg.t_det = 1;
    cfg.t_tot = 2;
    cfg.milestones = {};
    cfg.eta_det_1 = cfg.eta_det_2 = 1e-3;
    cfg.seed = 3;
    Trainer tr(model, cfg);
    tr.set_routing(2);

    std::vector<const Sample*> batch = as_batch(data);
    Scalar first = 0, last = 0;
    for (int s = 0; s < 25; ++s) {
        StepRecord r = tr.step(batch);
        if (s == 0) first = r.total;
        last = r.total;
    }
    CHECK(last < 0.9 * first);
}
