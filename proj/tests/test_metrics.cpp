#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "sdconet/metrics.hpp"
#include "sdconet/rng.hpp"
#include "testing.hpp"

using namespace sdconet;
using testing::check_close;

namespace {

PredRecord pred(long long img, int cls, Scalar score, Scalar x, Scalar y, Scalar w, Scalar h) {
    return PredRecord{img, cls, score, x, y, w, h};
}

GtRecord gt(long long img, int cls, Scalar x, Scalar y, Scalar w, Scalar h) {
    return GtRecord{img, cls, x, y, w, h};
}

} // namespace

TEST_CASE("iou on xywh boxes") {
    check_close(iou_xywh(0, 0, 10, 10, 0, 0, 10, 10), 1.0, 1e-12);
    check_close(iou_xywh(0, 0, 10, 10, 20, 0, 10, 10), 0.0, 1e-12);
    check_close(iou_xywh(0, 0, 2, 2, 1, 0, 2, 2), 1.0 / 3.0, 1e-12);
    CHECK_THROWS_AS(iou_xywh(0, 0, 0, 2, 1, 0, 2, 2), ContractError);
}

TEST_CASE("average precision basics") {
    SUBCASE("single perfect detection scores one") {
        EvalReport r = compute_ap({pred(0, 0, 0.9, 4, 4, 8, 8)}, {gt(0, 0, 4, 4, 8, 8)});
        check_close(r.ap, 1.0, 1e-12);
        check_close(r.ap50, 1.0, 1e-12);
        check_close(r.ap75, 1.0, 1e-12);
        check_close(r.ap_s, 1.0, 1e-12);
        check_close(r.per_class_ap.at(0), 1.0, 1e-12);
        check_close(r.ap_m, 0.0, 1e-12);
        check_close(r.ap_l, 0.0, 1e-12);
    }
    SUBCASE("no predictions scores zero") {
        EvalReport r = compute_ap({}, {gt(0, 0, 0, 0, 10, 10)});
        check_close(r.ap, 0.0, 1e-12);
        check_close(r.ap50, 0.0, 1e-12);
    }
    SUBCASE("true positive before a false positive keeps full AP50") {
        // IoU 0.9 at score 0.9, then an IoU-0 false positive at score 0.8
        EvalReport r = compute_ap(
            {pred(0, 0, 0.9, 0, 0, 10, 9), pred(0, 0, 0.8, 30, 30, 10, 10)},
            {gt(0, 0, 0, 0, 10, 10)});
        check_close(r.ap50, 1.0, 1e-12);
        check_close(r.ap75, 1.0, 1e-12);
        CHECK(r.ap >= 0.8);
        CHECK(r.ap <= 0.95);
    }
    SUBCASE("one-to-one matching and the interpolated tail") {
        std::vector<GtRecord> gts{gt(0, 0, 0, 0, 10, 10), gt(0, 0, 40, 0, 10, 10)};
        std::vector<PredRecord> preds{
            pred(0, 0, 0.9, 0, 0, 10, 10),  // matches the first gt
            pred(0, 0, 0.8, 0, 0, 10, 9),   // first gt already taken: false positive
            pred(0, 0, 0.7, 40, 0, 10, 10), // matches the second gt
        };
        EvalReport r = compute_ap(preds, gts);
        check_close(r.ap50, 253.0 / 303.0, 1e-12);
    }
    SUBCASE("classes without ground truth are excluded, not scored zero") {
        EvalReport r = compute_ap(
            {pred(0, 0, 0.9, 4, 4, 8, 8), pred(0, 9, 0.99, 0, 0, 5, 5)},
            {gt(0, 0, 4, 4, 8, 8)});
        check_close(r.ap, 1.0, 1e-12);
        CHECK(r.per_class_ap.count(9) == 0);
    }
    SUBCASE("size buckets use the ignore convention") {
        std::vector<GtRecord> gts{gt(0, 0, 0, 0, 8, 8), gt(1, 0, 0, 0, 100, 100)};
        std::vector<PredRecord> preds{pred(0, 0, 0.9, 0, 0, 8, 8),
                                      pred(1, 0, 0.8, 0, 0, 100, 100)};
        EvalReport r = compute_ap(preds, gts);
        check_close(r.ap, 1.0, 1e-12);
        check_close(r.ap_s, 1.0, 1e-12);
        check_close(r.ap_l, 1.0, 1e-12);
        check_close(r.ap_m, 0.0, 1e-12);
    }
    SUBCASE("adding a top-score true positive never lowers AP50") {
        std::vector<GtRecord> gts{gt(0, 0, 0, 0, 10, 10), gt(0, 0, 40, 0, 10, 10)};
        std::vector<PredRecord> preds{pred(0, 0, 0.6, 0, 0, 10, 10)};
        Scalar before = compute_ap(preds, gts).ap50;
        preds.push_back(pred(0, 0, 0.95, 40, 0, 10, 10));
        Scalar after = compute_ap(preds, gts).ap50;
        CHECK(after >= before - 1e-12);
        check_close(after, 1.0, 1e-12);
    }
    SUBCASE("adding a lowest-score false positive never raises AP50") {
        std::vector<GtRecord> gts{gt(0, 0, 0, 0, 10, 10), gt(0, 0, 40, 0, 10, 10)};
        std::vector<PredRecord> preds{pred(0, 0, 0.6, 0, 0, 10, 10)};
        Scalar before = compute_ap(preds, gts).ap50;
        preds.push_back(pred(0, 0, 0.1, 70, 70, 5, 5));
        Scalar after = compute_ap(preds, gts).ap50;
        check_close(after, before, 1e-12);
    }
}

TEST_CASE("prediction JSON parsing") {
    nlohmann::json good = nlohmann::json::array(
        {{{"image_id", 3}, {"class_id", 1}, {"score", 0.5}, {"bbox", {1.0, 2.0, 3.0, 4.0}}}});
    std::vector<PredRecord> p = parse_predictions(good);
    REQUIRE(p.size() == 1);
    CHECK(p[0].image_id == 3);
    CHECK(p[0].class_id == 1);
    check_close(p[0].score, 0.5, 0.0);
    check_close(p[0].h, 4.0, 0.0);

    CHECK_THROWS_AS(parse_predictions(nlohmann::json::object()), IoError);
    nlohmann::json missing = nlohmann::json::array(
        {{{"image_id", 3}, {"class_id", 1}, {"bbox", {1.0, 2.0, 3.0, 4.0}}}});
    CHECK_THROWS_AS(parse_predictions(missing), IoError);
    nlohmann::json short_box = nlohmann::json::array(
        {{{"image_id", 3}, {"class_id", 1}, {"score", 0.5}, {"bbox", {1.0, 2.0, 3.0}}}});
    CHECK_THROWS_AS(parse_predictions(short_box), IoError);
    nlohmann::json neg = nlohmann::json::array(
        {{{"image_id", 3}, {"class_id", 1}, {"score", 0.5}, {"bbox", {1.0, 2.0, -3.0, 4.0}}}});
    CHECK_THROWS_AS(parse_predictions(neg), IoError);
}

TEST_CASE("psnr") {
    Image a(8, 8, 3, 0.5), b(8, 8, 3, 0.5);
    check_close(psnr_db(a, b), 99.0, 0.0);

    for (double& v : b.pix) v += 1.0 / 255.0;
    check_close(psnr_db(a, b), 20.0 * std::log10(255.0), 1e-9);
    check_close(psnr_db(b, a), psnr_db(a, b), 0.0);

    Scalar prev = 1e9;
    for (Scalar amp : {0.01, 0.05, 0.2}) {
        Image c(8, 8, 3, 0.5);
        for (double& v : c.pix) v += amp;
        Scalar cur = psnr_db(a, c);
        CHECK(cur < prev);
        prev = cur;
    }
    CHECK_THROWS_AS(psnr_db(a, Image(8, 4, 3)), ShapeError);
}

TEST_CASE("bicubic upscale") {
    SUBCASE("constant image stays constant at doubled dims") {
        Image c(5, 7, 3, 0.42);
        Image up = bicubic_up2(c);
        CHECK(up.h == 10);
        CHECK(up.w == 14);
        for (double v : up.pix) check_close(v, 0.42, 1e-12);
    }
    SUBCASE("linearity without clamping") {
        Rng rng(7);
        Image x(6, 6, 1);
        for (double& v : x.pix) v = rng.uniform();
        Image half = x;
        for (double& v : half.pix) v *= 0.5;
        Image ux = bicubic_up2(x, false), uh = bicubic_up2(half, false);
        for (size_t i = 0; i < ux.pix.size(); ++i)
            check_close(uh.pix[i], 0.5 * ux.pix[i], 1e-12);
    }
    SUBCASE("upscale then antialiased downscale approximates the identity") {
        Image x(8, 8, 1);
        for (int y = 0; y < 8; ++y)
            for (int xx = 0; xx < 8; ++xx) x.at(y, xx, 0) = 0.2 + 0.05 * y + 0.04 * xx;
        Image back = bicubic_down2(bicubic_up2(x));
        Scalar err = 0;
        for (size_t i = 0; i < x.pix.size(); ++i) err += std::fabs(back.pix[i] - x.pix[i]);
        CHECK(err / x.pix.size() < 5e-3);
    }
}

TEST_CASE("analytic flops accounting") {
    FlopsInput in;
    in.input_h = in.input_w = 64;
    in.det_attn.d_model = 64;
    in.det_attn.heads = 8;
    in.det_attn.points = 1;
    in.det_attn.ffn_dim = 128;
    in.schedule = FilterSchedule::paper_schedule();

    SUBCASE("paper schedule reproduces the published attention ratio") {
        in.level_tokens = {256, 256, 256, 256};
        FlopsTable t = flops_report(in);
        REQUIRE(t.rows.size() == 4);
        CHECK(t.rows[0].name == "no-filter");
        CHECK(t.rows[1].name == "layer-only");
        CHECK(t.rows[2].name == "scale-only");
        CHECK(t.rows[3].name == "joint");

        double joint = t.rows[3].attention_mac / t.rows[0].attention_mac;
        double layer_only = t.rows[1].attention_mac / t.rows[0].attention_mac;
        check_close(joint, 3120.0 / 6144.0, 1e-12);
        CHECK(std::fabs(joint - 0.51) < 0.01);
        CHECK(std::fabs(layer_only - 0.6) < 0.01);
        CHECK(t.rows[3].total() < t.rows[0].total());
    }
    SUBCASE("all-ones schedule collapses the four variants") {
        in.schedule = FilterSchedule::all_ones(4, 6);
        FlopsTable t = flops_report(in);
        for (int v = 1; v < 4; ++v) {
            check_close(t.rows[static_cast<size_t>(v)].attention_mac, t.rows[0].attention_mac, 0.0);
            check_close(t.rows[static_cast<size_t>(v)].det_linear_mac, t.rows[0].det_linear_mac, 0.0);
            check_close(t.rows[static_cast<size_t>(v)].total(), t.rows[0].total(), 0.0);
        }
    }
    SUBCASE("doubling the input side scales token-linear terms by four") {
        in.schedule = FilterSchedule::all_ones(4, 6);
        FlopsTable small = flops_report(in);
        FlopsInput big = in;
        big.input_h = big.input_w = 128;
        FlopsTable large = flops_report(big);
        check_close(large.rows[0].encoder_mac / small.rows[0].encoder_mac, 4.0, 1e-9);
        check_close(large.rows[0].sr_mac / small.rows[0].sr_mac, 4.0, 1e-9);
        check_close(large.rows[0].det_linear_mac / small.rows[0].det_linear_mac, 4.0, 1e-9);
        check_close(large.rows[0].attention_mac / small.rows[0].attention_mac, 4.0, 1e-9);
    }
    SUBCASE("json and text carry the same rows") {
        in.level_tokens = {64, 16, 4, 1};
        FlopsTable t = flops_report(in);
        nlohmann::json j = t.to_json();
        REQUIRE(j.size() == 4);
        for (size_t v = 0; v < 4; ++v) {
            CHECK(j[v]["name"] == t.rows[v].name);
            check_close(j[v]["attention_mac"].get<double>(), t.rows[v].attention_mac, 0.0);
            check_close(j[v]["total_mac"].get<double>(), t.rows[v].total(), 0.0);
        }
        std::string text = t.to_text();
        CHECK(text.find("no-filter") != std::string::npos);
        CHECK(text.find("joint") != std::string::npos);
    }
}

TEST_CASE("analytic site counts equal an instrumented forward pass") {
    Rng rng(19);
    std::vector<LevelShape> shapes{{2, 2}, {2, 2}, {1, 1}, {1, 1}};
    std::vector<int> counts{4, 4, 1, 1};
    FilterSchedule sched{{0.7, 0.9, 0.8, 1.0}, {1.0, 0.5}};

    DeformableConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.points = 2;
    cfg.ffn_dim = 8;

    FilteredEncoderLayer l0(cfg, 4, rng), l1(cfg, 4, rng);
    std::vector<Scalar> tv(10 * 8), scores(10);
    for (Scalar& v : tv) v = rng.uniform(-1.0, 1.0);
    for (Scalar& s : scores) s = rng.uniform();
    Tensor tokens = Tensor::from(tv, {10, 8});
    Tensor pos = sine_position_embedding(shapes, 8);
    Tensor refs = token_reference_points(shapes);

    long long counted = 0;
    Tensor x = tokens;
    const FilteredEncoderLayer* layers[2] = {&l0, &l1};
    for (int layer = 0; layer < 2; ++layer) {
        ActiveQuerySet active = select_active(scores, counts, sched, layer);
        x = layers[layer]->forward(x, pos, refs, shapes, active, nullptr, &counted);
    }

    AttentionBudget sites = attention_site_count(sched, counts, cfg.heads, 4 * cfg.points);
    CHECK(counted == sites.sites_joint);

    FlopsInput in;
    in.encoder.stage_channels = {8, 16, 32, 64};
    in.encoder.stage_depths = {1, 1, 1, 1};
    in.encoder.num_heads = {2, 2, 2, 2};
    in.schedule = sched;
    in.det_attn = cfg;
    in.level_tokens = counts;
    FlopsTable t = flops_report(in);
    check_close(t.rows[3].attention_mac,
                static_cast<double>(counted) * 5.0 * (cfg.d_model / cfg.heads), 0.0);
}

TEST_CASE("eval report serialization") {
    EvalReport r;
    r.ap = 0.5;
    r.ap50 = 0.75;
    r.psnr_db = 30.25;
    r.per_class_ap[2] = 0.5;
    nlohmann::json j = r.to_json();
    check_close(j["ap"].get<double>(), 0.5, 0.0);
    check_close(j["ap50"].get<double>(), 0.75, 0.0);
    check_close(j["per_class_ap"]["2"].get<double>(), 0.5, 0.0);
    std::string text = r.to_text();
    CHECK(text.find("AP50") != std::string::npos);
    CHECK(text.find("PSNR") != std::string::npos);
    CHECK(text.find("0.7500") != std::string::npos);
}
