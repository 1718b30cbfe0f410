#include "sdconet/query_filter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sdconet {

namespace {

// Broadcast refs (K, L, src_comps) to (K, H, L, P, take) starting at component
// `from` of the source's last axis.
Tensor broadcast_refs(const Tensor& refs, int k, int h, int l, int p, int from, int take) {
    const int src_comps = refs.dim(2);
    auto map = std::make_shared<std::vector<long long>>();
    map->reserve(static_cast<size_t>(k) * h * l * p * take);
    for (int kk = 0; kk < k; ++kk)
        for (int hh = 0; hh < h; ++hh)
            for (int ll = 0; ll < l; ++ll)
                for (int pp = 0; pp < p; ++pp)
                    for (int c = 0; c < take; ++c)
                        map->push_back((static_cast<long long>(kk) * l + ll) * src_comps + from + c);
    return gather_flat(refs, map, {k, h, l, p, take});
}

} // namespace

void FilterSchedule::validate() const {
    check_config(!beta.empty() && !gamma.empty(), "filter: empty schedule");
    for (Scalar b : beta) check_config(b > 0.0 && b <= 1.0, "filter: beta outside (0,1]");
    for (Scalar g : gamma) check_config(g > 0.0 && g <= 1.0, "filter: gamma outside (0,1]");
}

FilterSchedule FilterSchedule::paper_schedule() {
    return {{0.6, 0.8, 1.0, 1.0}, {1.0, 0.8, 0.6, 0.6, 0.4, 0.2}};
}

FilterSchedule FilterSchedule::all_ones(int levels, int layers) {
    return {std::vector<Scalar>(static_cast<size_t>(levels), 1.0),
            std::vector<Scalar>(static_cast<size_t>(layers), 1.0)};
}

int budget(int n, Scalar beta, Scalar gamma) {
    check_config(beta > 0.0 && beta <= 1.0, "budget: beta outside (0,1]");
    check_config(gamma > 0.0 && gamma <= 1.0, "budget: gamma outside (0,1]");
    check_contract(n >= 0, "budget: negative token count");
    if (n == 0) return 0;
    const int b = static_cast<int>(std::floor(beta * gamma * n));
    return std::max(1, b);
}

ActiveQuerySet select_active(const std::vector<Scalar>& scores,
                             const std::vector<int>& level_token_counts,
                             const FilterSchedule& sched, int layer) {
    sched.validate();
    check_config(layer >= 0 && layer < static_cast<int>(sched.gamma.size()),
                 "select_active: layer outside the gamma schedule");
    check_config(level_token_counts.size() == sched.beta.size(),
                 "select_active: one beta per level required");
    long long total = 0;
    for (int n : level_token_counts) total += n;
    check_shape(static_cast<long long>(scores.size()) == total,
                "select_active: score length does not match token count");

    ActiveQuerySet out;
    int offset = 0;
    for (size_t t = 0; t < level_token_counts.size(); ++t) {
        const int n = level_token_counts[t];
        const int b = budget(n, sched.beta[t], sched.gamma[static_cast<size_t>(layer)]);
        out.level_offsets.push_back(offset);
        out.budget_per_level.push_back(b);

        std::vector<int> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), offset);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int c) {
            if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(c)])
                return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(c)];
            return a < c;
        });
        idx.resize(static_cast<size_t>(b));
        std::sort(idx.begin(), idx.end());
        out.phi.insert(out.phi.end(), idx.begin(), idx.end());
        offset += n;
    }
    return out;
}

BackgroundEmbedding::BackgroundEmbedding(int max_rows_, int max_cols_, int d, Rng& rng)
    : max_rows(max_rows_), max_cols(max_cols_), half(d / 2) {
    check_config(d % 2 == 0, "background embedding: token width must be even");
    check_config(max_rows_ >= 1 && max_cols_ >= 1, "background embedding: empty tables");
    rows = Embedding(max_rows_, half, rng);
    cols = Embedding(max_cols_, half, rng);
}

Tensor BackgroundEmbedding::embed(int i, int j) const {
    check_contract(i >= 0 && i < max_rows && j >= 0 && j < max_cols,
                   "background embedding: cell index outside the tables");
    return concat({rows.forward({i}), cols.forward({j})}, 1);
}

Tensor BackgroundEmbedding::embed_many(const std::vector<int>& is, const std::vector<int>& js) const {
    check_contract(is.size() == js.size(), "background embedding: row/col count mismatch");
    for (size_t k = 0; k < is.size(); ++k)
        check_contract(is[k] >= 0 && is[k] < max_rows && js[k] >= 0 && js[k] < max_cols,
                       "background embedding: cell index outside the tables");
    return concat({rows.forward(is), cols.forward(js)}, 1);
}

void BackgroundEmbedding::collect(const std::string& prefix, ParamList& out) const {
    rows.collect(prefix + ".rows", out);
    cols.collect(prefix + ".cols", out);
}

void DeformableConfig::validate(int levels) const {
    check_config(d_model >= 4 && d_model % 4 == 0, "deformable: d_model must be a multiple of 4");
    check_config(heads >= 1 && d_model % heads == 0, "deformable: heads must divide d_model");
    check_config(points >= 1, "deformable: points must be >= 1");
    check_config(levels >= 1, "deformable: needs at least one level");
    check_config(ffn_dim >= 1, "deformable: ffn_dim must be >= 1");
}

DeformableAttention::DeformableAttention(const DeformableConfig& cfg, int levels_, Rng& rng)
    : d((cfg.validate(levels_), cfg.d_model)), heads(cfg.heads), levels(levels_), points(cfg.points),
      sampling_off(cfg.d_model, cfg.heads * levels_ * cfg.points * 2, rng),
      att_weight(cfg.d_model, cfg.heads * levels_ * cfg.points, rng),
      value_proj(cfg.d_model, cfg.d_model, rng),
      out_proj(cfg.d_model, cfg.d_model, rng) {}

Tensor DeformableAttention::forward(const Tensor& query, const Tensor& value_src,
                                    const std::vector<LevelShape>& shapes, const Tensor& refs,
                                    long long* site_counter) const {
    const int k = query.dim(0);
    check_shape(static_cast<int>(shapes.size()) == levels,
                "deformable: level shape count mismatch");
    check_shape(refs.rank() == 3 && refs.dim(0) == k && refs.dim(1) == levels,
                "deformable: refs must be (K, levels, 2|4)");
    const int ref_comps = refs.dim(2);
    check_shape(ref_comps == 2 || ref_comps == 4, "deformable: refs last dim must be 2 or 4");

    Tensor off = reshape(sampling_off.forward(query), {k, heads, levels, points, 2});
    Tensor centers = broadcast_refs(refs, k, heads, levels, points, 0, 2);
    Tensor loc;
    if (ref_comps == 2) {
        // normalize offsets by the level extent
        std::vector<Scalar> inv(static_cast<size_t>(k) * heads * levels * points * 2);
        size_t at = 0;
        for (int kk = 0; kk < k; ++kk)
            for (int hh = 0; hh < heads; ++hh)
                for (int ll = 0; ll < levels; ++ll)
                    for (int pp = 0; pp < points; ++pp) {
                        inv[at++] = 1.0 / shapes[static_cast<size_t>(ll)].w;
                        inv[at++] = 1.0 / shapes[static_cast<size_t>(ll)].h;
                    }
        Tensor scale = Tensor::from(std::move(inv), {k, heads, levels, points, 2});
        loc = add(centers, mul(off, scale));
    } else {
        // offsets scaled by half the reference box extent per sampled point
        Tensor wh = broadcast_refs(refs, k, heads, levels, points, 2, 2);
        loc = add(centers, mul(scalar_mul(off, 0.5 / points), wh));
    }

    Tensor att = reshape(att_weight.forward(query), {k * heads, levels * points});
    att = reshape(softmax_lastdim(att), {k, heads, levels, points});
    Tensor value = value_proj.forward(value_src);
    Tensor sampled = ms_deform_attn(value, shapes, loc, att, heads, site_counter);
    return out_proj.forward(sampled);
}

void DeformableAttention::collect(const std::string& prefix, ParamList& out) const {
    sampling_off.collect(prefix + ".off", out);
    att_weight.collect(prefix + ".att", out);
    value_proj.collect(prefix + ".value", out);
    out_proj.collect(prefix + ".out", out);
}

FilteredEncoderLayer::FilteredEncoderLayer(const DeformableConfig& cfg, int levels, Rng& rng)
    : attn(cfg, levels, rng), ln1(cfg.d_model), ln2(cfg.d_model),
      ffn1(cfg.d_model, cfg.ffn_dim, rng), ffn2(cfg.ffn_dim, cfg.d_model, rng) {}

Tensor FilteredEncoderLayer::forward(const Tensor& tokens, const Tensor& pos, const Tensor& refs,
                                     const std::vector<LevelShape>& shapes,
                                     const ActiveQuerySet& active, const BackgroundEmbedding* bg,
                                     long long* site_counter) const {
    const int n = tokens.dim(0);
    for (int i : active.phi) check_contract(i >= 0 && i < n, "filtered layer: phi index out of range");

    Tensor out = tokens;
    if (!active.phi.empty()) {
        Tensor content = gather_rows(tokens, active.phi);
        Tensor q = add(content, gather_rows(pos, active.phi));
        Tensor attended = attn.forward(q, tokens, shapes, gather_rows(refs, active.phi), site_counter);
        Tensor h1 = ln1.forward(add(content, attended));
        Tensor h2 = ln2.forward(add(h1, ffn2.forward(relu(ffn1.forward(h1)))));
        out = row_replace(out, active.phi, h2);
    }

    if (bg) {
        std::vector<bool> selected(static_cast<size_t>(n), false);
        for (int i : active.phi) selected[static_cast<size_t>(i)] = true;
        std::vector<int> rest;
        for (int i = 0; i < n; ++i)
            if (!selected[static_cast<size_t>(i)]) rest.push_back(i);
        if (!rest.empty()) {
            std::vector<int> all_rows, all_cols;
            token_grid_coords(shapes, all_rows, all_cols);
            std::vector<int> ri, ci;
            for (int i : rest) {
                ri.push_back(all_rows[static_cast<size_t>(i)]);
                ci.push_back(all_cols[static_cast<size_t>(i)]);
            }
            Tensor bumped = add(gather_rows(tokens, rest), bg->embed_many(ri, ci));
            out = row_replace(out, rest, bumped);
        }
    }
    return out;
}

void FilteredEncoderLayer::collect(const std::string& prefix, ParamList& out) const {
    attn.collect(prefix + ".attn", out);
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
}

AttentionBudget attention_site_count(const FilterSchedule& sched,
                                     const std::vector<int>& token_counts, int heads,
                                     int k_per_head) {
    sched.validate();
    check_config(token_counts.size() == sched.beta.size(),
                 "attention_site_count: one token count per level required");
    check_config(heads >= 1 && k_per_head >= 1, "attention_site_count: bad H/K");
    AttentionBudget out;
    const long long hk = static_cast<long long>(heads) * k_per_head;
    for (Scalar g : sched.gamma) {
        for (size_t t = 0; t < token_counts.size(); ++t) {
            const int n = token_counts[t];
            out.sites_baseline += static_cast<long long>(n) * hk;
            out.sites_gamma_only += static_cast<long long>(budget(n, 1.0, g)) * hk;
            out.sites_beta_only += static_cast<long long>(budget(n, sched.beta[t], 1.0)) * hk;
            out.sites_joint += static_cast<long long>(budget(n, sched.beta[t], g)) * hk;
        }
    }
    return out;
}

Tensor sine_position_embedding(const std::vector<LevelShape>& shapes, int d) {
    check_config(d % 4 == 0, "sine embedding: d must be a multiple of 4");
    const int half = d / 2;
    const Scalar two_pi = 2.0 * 3.14159265358979323846;
    std::vector<Scalar> out;
    for (const LevelShape& s : shapes) {
        for (int i = 0; i < s.h; ++i) {
            for (int j = 0; j < s.w; ++j) {
                const Scalar coords[2] = {(i + 0.5) / s.h, (j + 0.5) / s.w};
                for (Scalar c : coords) {
                    for (int t = 0; t < half; ++t) {
                        const Scalar freq =
                            std::pow(10000.0, 2.0 * (t / 2) / static_cast<Scalar>(half));
                        const Scalar v = c * two_pi / freq;
                        out.push_back(t % 2 == 0 ? std::sin(v) : std::cos(v));
                    }
                }
            }
        }
    }
    const int n = static_cast<int>(out.size()) / d;
    return Tensor::from(std::move(out), {n, d});
}

Tensor token_reference_points(const std::vector<LevelShape>& shapes) {
    const int levels = static_cast<int>(shapes.size());
    std::vector<Scalar> out;
    for (const LevelShape& s : shapes) {
        for (int i = 0; i < s.h; ++i) {
            for (int j = 0; j < s.w; ++j) {
                const Scalar x = (j + 0.5) / s.w, y = (i + 0.5) / s.h;
                for (int l = 0; l < levels; ++l) {
                    out.push_back(x);
                    out.push_back(y);
                }
            }
        }
    }
    const int n = static_cast<int>(out.size()) / (2 * levels);
    return Tensor::from(std::move(out), {n, levels, 2});
}

void token_grid_coords(const std::vector<LevelShape>& shapes, std::vector<int>& rows_out,
                       std::vector<int>& cols_out) {
    rows_out.clear();
    cols_out.clear();
    for (const LevelShape& s : shapes)
        for (int i = 0; i < s.h; ++i)
            for (int j = 0; j < s.w; ++j) {
                rows_out.push_back(i);
                cols_out.push_back(j);
            }
}

} // namespace sdconet
