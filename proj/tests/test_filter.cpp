#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "sdconet/query_filter.hpp"
#include "sdconet/rng.hpp"
#include "testing.hpp"

using namespace sdconet;
using testing::check_all_close;
using testing::check_close;
using testing::check_gradients;

namespace {

// O(n*b) greedy reference: repeatedly take the best remaining (score, -index).
std::vector<int> greedy_top(const std::vector<Scalar>& scores, int offset, int n, int b) {
    std::vector<bool> taken(static_cast<size_t>(n), false);
    std::vector<int> out;
    for (int pick = 0; pick < b; ++pick) {
        int best = -1;
        for (int i = 0; i < n; ++i) {
            if (taken[static_cast<size_t>(i)]) continue;
            if (best < 0 || scores[static_cast<size_t>(offset + i)] >
                                scores[static_cast<size_t>(offset + best)])
                best = i;
        }
        taken[static_cast<size_t>(best)] = true;
        out.push_back(offset + best);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<LevelShape> toy_shapes() { return {{2, 2}, {1, 1}}; }

DeformableConfig toy_cfg() {
    DeformableConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.points = 1;
    cfg.ffn_dim = 8;
    return cfg;
}

} // namespace

TEST_CASE("budget is floor(beta*gamma*n) with a floor of one") {
    CHECK(budget(100, 0.6, 0.4) == 24);
    CHECK(budget(1, 0.6, 0.2) == 1);
    CHECK(budget(10, 0.35, 1.0) == 3);
    CHECK(budget(7, 1.0, 1.0) == 7);
    CHECK(budget(0, 0.5, 0.5) == 0);
    CHECK(budget(3, 0.01, 0.01) == 1);
    CHECK_THROWS_AS(budget(10, 0.0, 0.5), ConfigError);
    CHECK_THROWS_AS(budget(10, 1.2, 0.5), ConfigError);
    CHECK_THROWS_AS(budget(10, 0.5, 0.0), ConfigError);
    CHECK_THROWS_AS(budget(10, 0.5, -0.1), ConfigError);
}

TEST_CASE("schedule validation") {
    FilterSchedule p = FilterSchedule::paper_schedule();
    p.validate();
    CHECK(p.beta.size() == 4);
    CHECK(p.gamma.size() == 6);
    CHECK(p.beta[0] == 0.6);
    CHECK(p.gamma[5] == 0.2);

    FilterSchedule ones = FilterSchedule::all_ones(4, 6);
    ones.validate();
    for (Scalar b : ones.beta) CHECK(b == 1.0);

    FilterSchedule bad = p;
    bad.beta[1] = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = p;
    bad.gamma[2] = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("select_active picks top scores, ties to the lower index") {
    FilterSchedule sched{{1.0}, {0.5}};

    SUBCASE("distinct scores") {
        ActiveQuerySet a = select_active({0.9, 0.1, 0.8, 0.2}, {4}, sched, 0);
        CHECK(a.phi == std::vector<int>{0, 2});
        CHECK(a.level_offsets == std::vector<int>{0});
        CHECK(a.budget_per_level == std::vector<int>{2});
    }
    SUBCASE("ties keep the lower index") {
        ActiveQuerySet a = select_active({0.5, 0.5, 0.5, 0.1}, {4}, sched, 0);
        CHECK(a.phi == std::vector<int>{0, 1});
    }
    SUBCASE("budget equal to the level size keeps every token") {
        FilterSchedule full{{1.0}, {1.0}};
        ActiveQuerySet a = select_active({0.3, 0.1, 0.2}, {3}, full, 0);
        CHECK(a.phi == std::vector<int>{0, 1, 2});
    }
    SUBCASE("two levels select independently with flat offsets") {
        FilterSchedule two{{0.5, 1.0}, {1.0}};
        // level 0: n=4 budget 2; level 1: n=2 budget 2
        ActiveQuerySet a = select_active({0.1, 0.9, 0.2, 0.8, 0.7, 0.6}, {4, 2}, two, 0);
        CHECK(a.phi == std::vector<int>{1, 3, 4, 5});
        CHECK(a.level_offsets == std::vector<int>{0, 4});
        CHECK(a.budget_per_level == std::vector<int>{2, 2});
    }
    SUBCASE("contract checks") {
        CHECK_THROWS_AS(select_active({0.1, 0.2}, {4}, sched, 0), ShapeError);
        CHECK_THROWS_AS(select_active({0.1, 0.2, 0.3, 0.4}, {4}, sched, 1), ConfigError);
        FilterSchedule two{{0.5, 1.0}, {1.0}};
        CHECK_THROWS_AS(select_active({0.1, 0.2, 0.3, 0.4}, {4}, two, 0), ConfigError);
    }
}

TEST_CASE("select_active equals the greedy reference on random inputs") {
    Rng rng(71);
    for (int trial = 0; trial < 30; ++trial) {
        int levels = rng.uniform_int(1, 4);
        std::vector<int> counts;
        std::vector<Scalar> beta;
        int total = 0;
        for (int l = 0; l < levels; ++l) {
            int n = rng.uniform_int(1, 128);
            counts.push_back(n);
            total += n;
            beta.push_back(rng.uniform(0.05, 1.0));
        }
        REQUIRE(total <= 512);
        Scalar gamma = rng.uniform(0.05, 1.0);
        FilterSchedule sched{beta, {gamma}};

        std::vector<Scalar> scores;
        for (int i = 0; i < total; ++i)
            scores.push_back(0.25 * rng.uniform_int(0, 4)); // quantized: ties are common

        ActiveQuerySet a = select_active(scores, counts, sched, 0);

        std::vector<int> want;
        int offset = 0;
        for (int l = 0; l < levels; ++l) {
            int b = budget(counts[static_cast<size_t>(l)], beta[static_cast<size_t>(l)], gamma);
            CHECK(a.budget_per_level[static_cast<size_t>(l)] == b);
            CHECK(a.level_offsets[static_cast<size_t>(l)] == offset);
            std::vector<int> g = greedy_top(scores, offset, counts[static_cast<size_t>(l)], b);
            want.insert(want.end(), g.begin(), g.end());
            offset += counts[static_cast<size_t>(l)];
        }
        CHECK(a.phi == want);
        CHECK(std::is_sorted(a.phi.begin(), a.phi.end()));
        CHECK(std::set<int>(a.phi.begin(), a.phi.end()).size() == a.phi.size());
    }
}

TEST_CASE("non-increasing gamma gives non-increasing budgets across layers") {
    FilterSchedule sched = FilterSchedule::paper_schedule();
    std::vector<int> counts{64, 16, 4, 1};
    std::vector<Scalar> scores(85);
    Rng rng(5);
    for (Scalar& s : scores) s = rng.uniform();

    size_t prev = 1u << 20;
    for (int layer = 0; layer < 6; ++layer) {
        ActiveQuerySet a = select_active(scores, counts, sched, layer);
        CHECK(a.phi.size() <= prev);
        prev = a.phi.size();
        for (size_t l = 0; l + 1 < counts.size(); ++l)
            CHECK(a.budget_per_level[l] <= counts[l]);
    }
}

TEST_CASE("background embedding concatenates shared row and column vectors") {
    Rng rng(9);
    BackgroundEmbedding bg(4, 6, 8, rng);

    Tensor a = bg.embed(2, 3);
    CHECK(a.shape() == std::vector<int>{1, 8});

    Tensor b = bg.embed(2, 5);
    Tensor c = bg.embed(1, 3);
    for (int t = 0; t < 4; ++t) {
        CHECK(a.values()[static_cast<size_t>(t)] == b.values()[static_cast<size_t>(t)]);
        CHECK(a.values()[static_cast<size_t>(4 + t)] == c.values()[static_cast<size_t>(4 + t)]);
    }
    CHECK(a.values() != b.values());
    CHECK(a.values() != c.values());

    Tensor many = bg.embed_many({2, 2}, {3, 5});
    CHECK(many.shape() == std::vector<int>{2, 8});
    for (int t = 0; t < 8; ++t) {
        CHECK(many.values()[static_cast<size_t>(t)] == a.values()[static_cast<size_t>(t)]);
        CHECK(many.values()[static_cast<size_t>(8 + t)] == b.values()[static_cast<size_t>(t)]);
    }

    CHECK_THROWS_AS(bg.embed(4, 0), ContractError);
    CHECK_THROWS_AS(bg.embed(0, -1), ContractError);
    CHECK_THROWS_AS(bg.embed_many({0}, {6}), ContractError);
    CHECK_THROWS_AS(BackgroundEmbedding(4, 6, 7, rng), ConfigError);

    ParamList params;
    bg.collect("bg", params);
    CHECK(params.size() == 2);
    CHECK(params[0].name == "bg.rows.table");
}

TEST_CASE("deformable attention shapes and reference handling") {
    Rng rng(13);
    DeformableConfig cfg = toy_cfg();
    std::vector<LevelShape> shapes = toy_shapes();
    DeformableAttention attn(cfg, 2, rng);

    Tensor q = Tensor::from({0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.2, -0.1,
                             0.4, 0.1, -0.3, 0.2, 0.5, -0.6, 0.1, 0.3},
                            {2, 8});
    std::vector<Scalar> vals(5 * 8);
    for (Scalar& v : vals) v = rng.uniform(-1.0, 1.0);
    Tensor value = Tensor::from(vals, {5, 8});
    Tensor refs = token_reference_points(shapes); // (5,2,2)
    Tensor refs2 = gather_rows(refs, {0, 3});

    long long sites = 0;
    Tensor out = attn.forward(q, value, shapes, refs2, &sites);
    CHECK(out.shape() == std::vector<int>{2, 8});
    CHECK(sites == 2LL * cfg.heads * 2 * cfg.points);

    SUBCASE("box references are accepted") {
        Tensor boxes = Tensor::from(std::vector<Scalar>(2 * 2 * 4, 0.5), {2, 2, 4});
        Tensor out_b = attn.forward(q, value, shapes, boxes);
        CHECK(out_b.shape() == std::vector<int>{2, 8});
    }
    SUBCASE("bad reference shapes are rejected") {
        CHECK_THROWS_AS(attn.forward(q, value, shapes, Tensor::zeros({2, 2, 3})), ShapeError);
        CHECK_THROWS_AS(attn.forward(q, value, shapes, Tensor::zeros({2, 1, 2})), ShapeError);
        CHECK_THROWS_AS(attn.forward(q, value, {{2, 2}}, refs2), ShapeError);
    }
    SUBCASE("config validation") {
        DeformableConfig bad = cfg;
        bad.heads = 3;
        CHECK_THROWS_AS(DeformableAttention(bad, 2, rng), ConfigError);
        bad = cfg;
        bad.d_model = 10;
        CHECK_THROWS_AS(DeformableAttention(bad, 2, rng), ConfigError);
        bad = cfg;
        bad.points = 0;
        CHECK_THROWS_AS(DeformableAttention(bad, 2, rng), ConfigError);
    }
}

TEST_CASE("deformable attention gradients match finite differences") {
    Rng rng(29);
    DeformableConfig cfg = toy_cfg();
    std::vector<LevelShape> shapes = toy_shapes();
    DeformableAttention attn(cfg, 2, rng);

    std::vector<Scalar> qv(2 * 8), vv(5 * 8);
    for (Scalar& v : qv) v = rng.uniform(-0.5, 0.5);
    for (Scalar& v : vv) v = rng.uniform(-0.5, 0.5);
    Tensor q = Tensor::from(qv, {2, 8}, true);
    Tensor value = Tensor::from(vv, {5, 8}, true);
    Tensor refs = gather_rows(token_reference_points(shapes), {1, 4});

    auto loss = [&]() { return mean_all(mul(attn.forward(q, value, shapes, refs),
                                            attn.forward(q, value, shapes, refs))); };
    check_gradients({q, value, attn.sampling_off.w, attn.att_weight.w, attn.value_proj.w,
                     attn.out_proj.w},
                    loss, 1e-5, 1e-3);
}

TEST_CASE("filtered layer with every token active matches the unfiltered computation") {
    Rng rng(41);
    DeformableConfig cfg = toy_cfg();
    std::vector<LevelShape> shapes = toy_shapes();
    FilteredEncoderLayer layer(cfg, 2, rng);

    const int n = 5;
    std::vector<Scalar> tv(n * 8);
    for (Scalar& v : tv) v = rng.uniform(-1.0, 1.0);
    Tensor tokens = Tensor::from(tv, {n, 8});
    Tensor pos = sine_position_embedding(shapes, 8);
    Tensor refs = token_reference_points(shapes);

    FilterSchedule ones = FilterSchedule::all_ones(2, 1);
    std::vector<Scalar> scores(n, 0.5);
    ActiveQuerySet all = select_active(scores, {4, 1}, ones, 0);
    REQUIRE(all.phi.size() == static_cast<size_t>(n));

    long long sites = 0;
    Tensor got = layer.forward(tokens, pos, refs, shapes, all, nullptr, &sites);
    CHECK(sites == static_cast<long long>(n) * cfg.heads * 2 * cfg.points);

    // unfiltered reference built from the same weights, no gather/replace
    Tensor attended = layer.attn.forward(add(tokens, pos), tokens, shapes, refs);
    Tensor h1 = layer.ln1.forward(add(tokens, attended));
    Tensor want = layer.ln2.forward(add(h1, layer.ffn2.forward(relu(layer.ffn1.forward(h1)))));

    REQUIRE(got.shape() == want.shape());
    for (size_t i = 0; i < got.values().size(); ++i)
        CHECK(got.values()[i] == want.values()[i]);
}

TEST_CASE("inactive tokens pass through untouched") {
    Rng rng(43);
    DeformableConfig cfg = toy_cfg();
    std::vector<LevelShape> shapes = toy_shapes();
    FilteredEncoderLayer layer(cfg, 2, rng);

    const int n = 5;
    std::vector<Scalar> tv(n * 8);
    for (Scalar& v : tv) v = rng.uniform(-1.0, 1.0);
    Tensor tokens = Tensor::from(tv, {n, 8});
    Tensor pos = sine_position_embedding(shapes, 8);
    Tensor refs = token_reference_points(shapes);

    SUBCASE("empty selection without background is the identity") {
        ActiveQuerySet none;
        long long sites = 0;
        Tensor out = layer.forward(tokens, pos, refs, shapes, none, nullptr, &sites);
        CHECK(sites == 0);
        for (size_t i = 0; i < tokens.values().size(); ++i)
            CHECK(out.values()[i] == tokens.values()[i]);
    }
    SUBCASE("zeroed background embedding keeps pass-through rows bit-identical") {
        BackgroundEmbedding bg(4, 4, 8, rng);
        std::fill(bg.rows.table.values().begin(), bg.rows.table.values().end(), 0.0);
        std::fill(bg.cols.table.values().begin(), bg.cols.table.values().end(), 0.0);

        ActiveQuerySet some;
        some.phi = {0, 3};
        Tensor with_bg = layer.forward(tokens, pos, refs, shapes, some, &bg);
        Tensor without = layer.forward(tokens, pos, refs, shapes, some, nullptr);
        for (size_t i = 0; i < with_bg.values().size(); ++i)
            CHECK(with_bg.values()[i] == without.values()[i]);

        // pass-through rows equal the input rows exactly
        for (int r : {1, 2, 4})
            for (int c = 0; c < 8; ++c) {
                size_t at = static_cast<size_t>(r) * 8 + static_cast<size_t>(c);
                CHECK(without.values()[at] == tokens.values()[at]);
            }
        // selected rows moved
        Scalar diff = 0;
        for (int r : {0, 3})
            for (int c = 0; c < 8; ++c) {
                size_t at = static_cast<size_t>(r) * 8 + static_cast<size_t>(c);
                diff += std::fabs(without.values()[at] - tokens.values()[at]);
            }
        CHECK(diff > 1e-6);
    }
    SUBCASE("nonzero background embedding shifts only unselected rows") {
        BackgroundEmbedding bg(4, 4, 8, rng);
        ActiveQuerySet some;
        some.phi = {0, 3};
        long long sites = 0;
        Tensor out = layer.forward(tokens, pos, refs, shapes, some, &bg, &sites);
        CHECK(sites == 2LL * cfg.heads * 2 * cfg.points);
        Tensor plain = layer.forward(tokens, pos, refs, shapes, some, nullptr);
        for (int r : {0, 3})
            for (int c = 0; c < 8; ++c) {
                size_t at = static_cast<size_t>(r) * 8 + static_cast<size_t>(c);
                CHECK(out.values()[at] == plain.values()[at]);
            }
        // token 1 is level-0 cell (0,1); token 4 is level-1 cell (0,0)
        std::vector<int> rows, cols;
        token_grid_coords(shapes, rows, cols);
        for (int r : {1, 2, 4}) {
            Tensor want = add(gather_rows(tokens, {r}),
                              bg.embed(rows[static_cast<size_t>(r)], cols[static_cast<size_t>(r)]));
            for (int c = 0; c < 8; ++c) {
                size_t at = static_cast<size_t>(r) * 8 + static_cast<size_t>(c);
                CHECK(out.values()[at] == want.values()[static_cast<size_t>(c)]);
            }
        }
    }
    SUBCASE("gradients flow to the background tables through unselected rows") {
        BackgroundEmbedding bg(4, 4, 8, rng);
        ActiveQuerySet some;
        some.phi = {0, 3};
        auto loss = [&]() {
            Tensor out = layer.forward(tokens, pos, refs, shapes, some, &bg);
            return mean_all(mul(out, out));
        };
        check_gradients({bg.rows.table, bg.cols.table, layer.ffn1.w, layer.ln1.gamma},
                        loss, 1e-5, 1e-3);
    }
}

TEST_CASE("attention site counts reproduce the published savings") {
    std::vector<int> counts{256, 256, 256, 256};

    SUBCASE("all-ones schedule never filters") {
        AttentionBudget b = attention_site_count(FilterSchedule::all_ones(4, 6), counts, 8, 4);
        CHECK(b.sites_baseline == 6LL * 1024 * 8 * 4);
        CHECK(b.sites_gamma_only == b.sites_baseline);
        CHECK(b.sites_beta_only == b.sites_baseline);
        CHECK(b.sites_joint == b.sites_baseline);
    }
    SUBCASE("paper schedule halves the joint site count") {
        AttentionBudget b = attention_site_count(FilterSchedule::paper_schedule(), counts, 8, 4);
        CHECK(b.sites_baseline == 6144LL * 32);
        CHECK(b.sites_joint == 3120LL * 32);
        CHECK(b.sites_gamma_only == 3676LL * 32);
        CHECK(b.sites_beta_only == 5214LL * 32);

        double joint = static_cast<double>(b.sites_joint) / b.sites_baseline;
        double gamma_only = static_cast<double>(b.sites_gamma_only) / b.sites_baseline;
        CHECK(std::fabs(joint - 0.51) < 0.01);
        CHECK(std::fabs(gamma_only - 0.6) < 0.01);
    }
    SUBCASE("count mismatch is rejected") {
        CHECK_THROWS_AS(attention_site_count(FilterSchedule::paper_schedule(), {256}, 8, 4),
                        ConfigError);
    }
}

TEST_CASE("position helpers are deterministic and anchored to cell centers") {
    std::vector<LevelShape> shapes = toy_shapes();

    SUBCASE("sine embedding") {
        Tensor pe = sine_position_embedding(shapes, 8);
        CHECK(pe.shape() == std::vector<int>{5, 8});
        for (Scalar v : pe.values()) CHECK(std::fabs(v) <= 1.0 + 1e-12);
        Tensor pe2 = sine_position_embedding(shapes, 8);
        check_all_close(pe.values(), pe2.values(), 0.0);
        // distinct cells get distinct embeddings
        Scalar diff = 0;
        for (int c = 0; c < 8; ++c)
            diff += std::fabs(pe.values()[static_cast<size_t>(c)] -
                              pe.values()[static_cast<size_t>(8 + c)]);
        CHECK(diff > 1e-6);
        CHECK_THROWS_AS(sine_position_embedding(shapes, 10), ConfigError);
    }
    SUBCASE("reference points") {
        Tensor refs = token_reference_points(shapes);
        CHECK(refs.shape() == std::vector<int>{5, 2, 2});
        // token 0: level-0 cell (0,0) -> center (0.25, 0.25) replicated per level
        check_close(refs.values()[0], 0.25, 1e-12);
        check_close(refs.values()[1], 0.25, 1e-12);
        check_close(refs.values()[2], 0.25, 1e-12);
        // token 1: cell (0,1) -> x = 0.75
        check_close(refs.values()[4], 0.75, 1e-12);
        check_close(refs.values()[5], 0.25, 1e-12);
        // token 4: level-1 single cell -> (0.5, 0.5)
        check_close(refs.values()[16], 0.5, 1e-12);
        check_close(refs.values()[17], 0.5, 1e-12);
    }
    SUBCASE("grid coordinates") {
        std::vector<int> rows, cols;
        token_grid_coords(shapes, rows, cols);
        CHECK(rows == std::vector<int>{0, 0, 1, 1, 0});
        CHECK(cols == std::vector<int>{0, 1, 0, 1, 0});
    }
}
