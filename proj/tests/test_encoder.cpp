#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <utility>

#include "sdconet/encoder.hpp"
#include "sdconet/ops.hpp"
#include "testing.hpp"

using namespace sdconet;
using namespace sdconet::testing;

namespace {

Tensor random_grid(int h, int w, int c, Rng& rng) {
    std::vector<Scalar> v(static_cast<size_t>(h) * w * c);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(v), {h, w, c});
}

Tensor random_image(int h, int w, Rng& rng) {
    std::vector<Scalar> v(static_cast<size_t>(h) * w * 3);
    for (auto& x : v) x = rng.uniform(0.0, 1.0);
    return Tensor::from(std::move(v), {h, w, 3});
}

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.window_size = 2;
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.stage_channels = {4, 8, 16, 32};
    cfg.num_heads = {2, 2, 4, 4};
    return cfg;
}

void fill_zero(Tensor t) {
    std::fill(t.values().begin(), t.values().end(), 0.0);
}

} // namespace

TEST_CASE("patch embed shape law") {
    Rng rng(11);
    PatchEmbed pe(4, 24, rng);

    CHECK(pe.forward(random_image(256, 256, rng)).shape() == std::vector<int>{64, 64, 24});
    CHECK(pe.forward(random_image(4, 4, rng)).shape() == std::vector<int>{1, 1, 24});
    CHECK(pe.forward(random_image(250, 250, rng)).shape() == std::vector<int>{63, 63, 24});

    Tensor bad = Tensor::zeros({2, 2, 4});
    CHECK_THROWS_AS((void)pe.forward(bad), ShapeError);
}

TEST_CASE("config validation") {
    EncoderConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());

    EncoderConfig bad = cfg;
    bad.stage_channels = {4, 8, 15, 30};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.num_heads = {3, 2, 4, 4}; // 3 does not divide 4
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    EncoderConfig paper = EncoderConfig::swin_t();
    CHECK(paper.stage_channels == std::vector<int>{96, 192, 384, 768});
    CHECK(paper.stage_depths == std::vector<int>{2, 2, 6, 2});
    CHECK_NOTHROW(paper.validate());
}

TEST_CASE("attention rows sum to one") {
    Rng rng(5);
    WindowAttention wa(8, 2, 2, rng);
    Tensor wins = random_grid(4, 4, 8, rng);

    Tensor att;
    (void)wa.forward(wins, Tensor{}, &att);
    REQUIRE(att.shape() == std::vector<int>{8, 4, 4});
    for (int r = 0; r < 8 * 4; ++r) {
        Scalar s = 0;
        for (int c = 0; c < 4; ++c) s += att.values()[static_cast<size_t>(r * 4 + c)];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("layer residual structure") {
    Rng rng(7);
    SwinLayer layer(6, 2, 2, true, 2, rng);
    Tensor grid = random_grid(4, 6, 6, rng);

    SUBCASE("zeroed attention and mlp output give bit-exact identity") {
        fill_zero(layer.attn.proj.w);
        fill_zero(layer.attn.proj.b);
        fill_zero(layer.mlp.fc2.w);
        fill_zero(layer.mlp.fc2.b);
        Tensor out = layer.forward(grid);
        REQUIRE(out.shape() == grid.shape());
        for (size_t i = 0; i < grid.values().size(); ++i) CHECK(out.values()[i] == grid.values()[i]);
    }

    SUBCASE("zeroed attention output leaves input plus mlp branch") {
        fill_zero(layer.attn.proj.w);
        fill_zero(layer.attn.proj.b);
        Tensor out = layer.forward(grid);
        Tensor flat = reshape(grid, {24, 6});
        Tensor want = reshape(add(flat, layer.mlp.forward(layer.ln2.forward(flat))), {4, 6, 6});
        check_all_close(out.values(), want.values(), 1e-12);
    }

    SUBCASE("window larger than grid is a config error") {
        Rng r2(8);
        SwinLayer big(6, 2, 8, false, 2, r2);
        CHECK_THROWS_AS((void)big.forward(grid), ConfigError);
    }

    SUBCASE("unpadded grid is a shape error") {
        Tensor odd = random_grid(5, 6, 6, rng);
        CHECK_THROWS_AS((void)layer.forward(odd), ShapeError);
    }

    SUBCASE("shifted and unshifted layers disagree on multi-window grids") {
        Rng ra(9), rb(9);
        SwinLayer plain(6, 2, 2, false, 2, ra);
        SwinLayer shifted(6, 2, 2, true, 2, rb);
        Tensor a = plain.forward(grid), b = shifted.forward(grid);
        Scalar diff = 0;
        for (size_t i = 0; i < a.values().size(); ++i)
            diff = std::max(diff, std::abs(a.values()[i] - b.values()[i]));
        CHECK(diff > 1e-9);
    }

    SUBCASE("relative position bias reaches the output") {
        Tensor base = layer.forward(grid);
        layer.attn.rel_bias.values()[0] += 1.0;
        Tensor bumped = layer.forward(grid);
        Scalar diff = 0;
        for (size_t i = 0; i < base.values().size(); ++i)
            diff = std::max(diff, std::abs(base.values()[i] - bumped.values()[i]));
        CHECK(diff > 1e-9);
    }
}

TEST_CASE("patch merging halves dims and doubles channels") {
    Rng rng(13);
    PatchMerging pm(4, 8, rng);
    CHECK(pm.forward(random_grid(64, 64, 4, rng)).shape() == std::vector<int>{32, 32, 8});
    CHECK(pm.forward(random_grid(7, 5, 4, rng)).shape() == std::vector<int>{4, 3, 8});

    Tensor tiny = random_grid(1, 4, 4, rng);
    CHECK_THROWS_AS((void)pm.forward(tiny), ContractError);
}

TEST_CASE("encode produces the pyramid dims") {
    Rng rng(17);
    EncoderConfig cfg = tiny_config();
    Encoder enc(cfg, rng);

    SUBCASE("64x64 input") {
        FeaturePyramid pyr = enc.encode(random_image(64, 64, rng));
        REQUIRE(pyr.levels.size() == 4);
        CHECK(pyr.levels[0].shape() == std::vector<int>{16, 16, 4});
        CHECK(pyr.levels[1].shape() == std::vector<int>{8, 8, 8});
        CHECK(pyr.levels[2].shape() == std::vector<int>{4, 4, 16});
        CHECK(pyr.levels[3].shape() == std::vector<int>{2, 2, 32});
        CHECK(pyr.src_h == 64);
    }

    SUBCASE("irregular sizes follow ceil division") {
        for (auto [h, w] : std::vector<std::pair<int, int>>{{37, 50}, {29, 64}, {40, 33}, {64, 37}}) {
            FeaturePyramid pyr = enc.encode(random_image(h, w, rng));
            for (int s = 0; s < 4; ++s) {
                CHECK(pyr.levels[static_cast<size_t>(s)].dim(0) == pyramid_dim(h, s + 1));
                CHECK(pyr.levels[static_cast<size_t>(s)].dim(1) == pyramid_dim(w, s + 1));
                CHECK(pyr.levels[static_cast<size_t>(s)].dim(2) == cfg.stage_channels[static_cast<size_t>(s)]);
            }
        }
    }

    SUBCASE("pyramid dim law matches the closed form") {
        for (int e : {1, 2, 3, 4, 7, 16, 37, 64, 100, 250, 256, 512}) {
            for (int s = 1; s <= 4; ++s) {
                int want = static_cast<int>(std::ceil(e / std::pow(2.0, s + 1)));
                CHECK(pyramid_dim(e, s) == want);
            }
        }
        CHECK(pyramid_dim(256, 1) == 64);
        CHECK(pyramid_dim(512, 4) == 16);
    }

    SUBCASE("all-zero image gives finite features") {
        FeaturePyramid pyr = enc.encode(Tensor::zeros({48, 48, 3}));
        for (const auto& lvl : pyr.levels)
            for (Scalar v : lvl.values()) CHECK(std::isfinite(v));
    }

    SUBCASE("out-of-range image values violate the contract") {
        Tensor bad = Tensor::full({48, 48, 3}, 1.5);
        CHECK_THROWS_AS((void)enc.encode(bad), ContractError);
    }

    SUBCASE("tiny input degenerates before the first merge") {
        CHECK_THROWS_AS((void)enc.encode(random_image(4, 4, rng)), ContractError);
    }
}

TEST_CASE("depth-zero stages reduce to pure merges") {
    Rng rng(19);
    EncoderConfig cfg = tiny_config();
    cfg.stage_depths = {0, 0, 0, 0};
    Encoder enc(cfg, rng);
    FeaturePyramid pyr = enc.encode(random_image(32, 32, rng));
    CHECK(pyr.levels[0].shape() == std::vector<int>{8, 8, 4});
    CHECK(pyr.levels[3].shape() == std::vector<int>{1, 1, 32});

    // level 2 must equal the merge projection applied to level 1 directly
    Tensor want = enc.merges[0].forward(pyr.levels[0]);
    check_all_close(pyr.levels[1].values(), want.values(), 0.0);
}

TEST_CASE("encode is deterministic") {
    Rng rng(23);
    Encoder enc(tiny_config(), rng);
    Tensor img = random_image(24, 40, rng);
    FeaturePyramid a = enc.encode(img);
    FeaturePyramid b = enc.encode(img);
    for (int s = 0; s < 4; ++s)
        for (size_t i = 0; i < a.levels[static_cast<size_t>(s)].values().size(); ++i)
            CHECK(a.levels[static_cast<size_t>(s)].values()[i] ==
                  b.levels[static_cast<size_t>(s)].values()[i]);

    Rng rng2(23);
    Encoder enc2(tiny_config(), rng2);
    FeaturePyramid c = enc2.encode(img);
    for (size_t i = 0; i < a.levels[3].values().size(); ++i)
        CHECK(a.levels[3].values()[i] == c.levels[3].values()[i]);
}

TEST_CASE("gradients reach stage-1 parameters from the coarsest level") {
    Rng rng(29);
    EncoderConfig cfg = tiny_config();
    Encoder enc(cfg, rng);
    Tensor img = random_image(32, 32, rng);

    ParamList all;
    enc.collect("enc", all);
    std::vector<Tensor> probe;
    for (const auto& p : all) {
        if (p.name == "enc.embed.proj.w" || p.name == "enc.stage0.block0.attn.qkv.w" ||
            p.name == "enc.stage0.block0.mlp.fc1.w" || p.name == "enc.stage0.block0.attn.rel_bias")
            probe.push_back(p.t);
    }
    REQUIRE(probe.size() == 4);

    auto loss = [&] {
        FeaturePyramid pyr = enc.encode(img);
        return mean_all(mul(pyr.levels[3], pyr.levels[3]));
    };
    check_gradients(probe, loss, 1e-5, 1e-3);
}
