#include "sdconet/encoder.hpp"

#include <array>
#include <cmath>
#include <utility>

#include "sdconet/ops.hpp"

namespace sdconet {

namespace {

// (H, W, C) -> (nW, T, C) with T = window^2; H, W multiples of window.
Tensor window_partition(const Tensor& grid, int window) {
    const int h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
    Tensor x = reshape(grid, {h / window, window, w / window, window, c});
    x = permute(x, {0, 2, 1, 3, 4});
    return reshape(x, {(h / window) * (w / window), window * window, c});
}

Tensor window_reverse(const Tensor& wins, int window, int h, int w) {
    const int c = wins.dim(2);
    Tensor x = reshape(wins, {h / window, w / window, window, window, c});
    x = permute(x, {0, 2, 1, 3, 4});
    return reshape(x, {h, w, c});
}

// Region ids over the grid for the shifted layer: tokens rolled across the
// cyclic boundary must not attend to tokens from other regions.
Tensor shift_mask(int h, int w, int window, int shift) {
    std::vector<int> ids(static_cast<size_t>(h) * w, 0);
    auto bands = [&](int extent) {
        return std::array<std::pair<int, int>, 3>{{
            {0, extent - window},
            {extent - window, extent - shift},
            {extent - shift, extent},
        }};
    };
    int cnt = 0;
    for (const auto& [y0, y1] : bands(h)) {
        for (const auto& [x0, x1] : bands(w)) {
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) ids[static_cast<size_t>(y) * w + x] = cnt;
            ++cnt;
        }
    }
    const int nwy = h / window, nwx = w / window, t = window * window;
    std::vector<Scalar> mask(static_cast<size_t>(nwy) * nwx * t * t, 0.0);
    for (int by = 0; by < nwy; ++by) {
        for (int bx = 0; bx < nwx; ++bx) {
            const size_t base = (static_cast<size_t>(by) * nwx + bx) * t * t;
            for (int i = 0; i < t; ++i) {
                const int yi = by * window + i / window, xi = bx * window + i % window;
                for (int j = 0; j < t; ++j) {
                    const int yj = by * window + j / window, xj = bx * window + j % window;
                    if (ids[static_cast<size_t>(yi) * w + xi] != ids[static_cast<size_t>(yj) * w + xj])
                        mask[base + static_cast<size_t>(i) * t + j] = -1e9;
                }
            }
        }
    }
    return Tensor::from(std::move(mask), {nwy * nwx, t, t});
}

// Broadcast (B0, T, T) to (B, T, T). inner_cycle repeats the source cyclically
// (per-head bias shared across windows); otherwise each source block is
// repeated contiguously (per-window mask shared across heads).
Tensor broadcast_batched(const Tensor& x, int out_batch, bool inner_cycle) {
    const int t = x.dim(x.rank() - 1);
    const long long t2 = static_cast<long long>(t) * x.dim(x.rank() - 2);
    const long long src_batch = x.size() / t2;
    auto map = std::make_shared<std::vector<long long>>();
    map->reserve(static_cast<size_t>(out_batch * t2));
    for (long long b = 0; b < out_batch; ++b) {
        const long long sb = inner_cycle ? (b % src_batch) : (b / (out_batch / src_batch));
        for (long long i = 0; i < t2; ++i) map->push_back(sb * t2 + i);
    }
    return gather_flat(x, map, {out_batch, t, t});
}

Tensor pad_to_multiple(const Tensor& grid, int m) {
    const int h = grid.dim(0), w = grid.dim(1);
    const int hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
    if (hp == h && wp == w) return grid;
    return pad2d(grid, hp, wp);
}

} // namespace

void EncoderConfig::validate() const {
    check_config(patch_size >= 1, "encoder: patch_size must be >= 1");
    check_config(window_size >= 2, "encoder: window_size must be >= 2");
    check_config(stage_depths.size() == 4 && stage_channels.size() == 4 && num_heads.size() == 4,
                 "encoder: expects exactly 4 stages");
    for (size_t s = 0; s < 4; ++s) {
        check_config(stage_depths[s] >= 0, "encoder: stage depth must be >= 0");
        check_config(stage_channels[s] >= 1, "encoder: stage channels must be >= 1");
        check_config(num_heads[s] >= 1 && stage_channels[s] % num_heads[s] == 0,
                     "encoder: heads must divide stage channels");
        if (s > 0)
            check_config(stage_channels[s] == 2 * stage_channels[s - 1],
                         "encoder: stage channels must double at each merge");
    }
    check_config(mlp_ratio >= 1, "encoder: mlp_ratio must be >= 1");
}

EncoderConfig EncoderConfig::swin_t() {
    EncoderConfig c;
    c.window_size = 8;
    c.stage_depths = {2, 2, 6, 2};
    c.stage_channels = {96, 192, 384, 768};
    c.num_heads = {3, 6, 12, 24};
    return c;
}

int pyramid_dim(int extent, int level) {
    int e = (extent + 3) / 4;
    for (int l = 1; l < level; ++l) e = (e + 1) / 2;
    return e;
}

WindowAttention::WindowAttention(int dim_, int heads_, int window_, Rng& rng)
    : dim(dim_), heads(heads_), window(window_),
      qkv(dim_, 3 * dim_, rng), proj(dim_, dim_, rng) {
    const int span = 2 * window - 1;
    rel_bias = init_weight(span * span, heads, rng);
    const int t = window * window;
    rel_index.resize(static_cast<size_t>(t) * t);
    for (int i = 0; i < t; ++i) {
        const int yi = i / window, xi = i % window;
        for (int j = 0; j < t; ++j) {
            const int yj = j / window, xj = j % window;
            rel_index[static_cast<size_t>(i) * t + j] = (yi - yj + window - 1) * span + (xi - xj + window - 1);
        }
    }
}

Tensor WindowAttention::forward(const Tensor& windows, const Tensor& mask, Tensor* att_out) const {
    const int nw = windows.dim(0), t = windows.dim(1);
    const int dh = dim / heads;
    Tensor x = qkv.forward(reshape(windows, {nw * t, dim}));
    x = reshape(x, {nw, t, 3, heads, dh});
    x = permute(x, {2, 0, 3, 1, 4}); // (3, nW, heads, T, dh)
    x = reshape(x, {3, nw * heads, t, dh});
    Tensor q = reshape(slice(x, 0, 0, 1), {nw * heads, t, dh});
    Tensor k = reshape(slice(x, 0, 1, 1), {nw * heads, t, dh});
    Tensor v = reshape(slice(x, 0, 2, 1), {nw * heads, t, dh});

    Tensor scores = scalar_mul(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor bias = gather_rows(rel_bias, rel_index); // (T*T, heads)
    bias = permute(reshape(bias, {t, t, heads}), {2, 0, 1});
    scores = add(scores, broadcast_batched(bias, nw * heads, true));
    if (mask.defined()) scores = add(scores, broadcast_batched(mask, nw * heads, false));
    Tensor att = softmax_lastdim(scores);
    if (att_out) *att_out = att;
    Tensor out = bmm(att, v); // (nW*heads, T, dh)
    out = reshape(out, {nw, heads, t, dh});
    out = reshape(permute(out, {0, 2, 1, 3}), {nw * t, dim});
    return reshape(proj.forward(out), {nw, t, dim});
}

void WindowAttention::collect(const std::string& prefix, ParamList& out) const {
    qkv.collect(prefix + ".qkv", out);
    proj.collect(prefix + ".proj", out);
    out.push_back({prefix + ".rel_bias", rel_bias});
}

SwinLayer::SwinLayer(int dim_, int heads, int window_, bool shifted_, int mlp_ratio, Rng& rng)
    : dim(dim_), window(window_), shifted(shifted_),
      ln1(dim_), ln2(dim_),
      attn(dim_, heads, window_, rng),
      mlp(dim_, dim_ * mlp_ratio, dim_, rng) {}

Tensor SwinLayer::forward(const Tensor& grid) const {
    const int h = grid.dim(0), w = grid.dim(1);
    check_config(window <= h && window <= w, "encoder: window_size larger than padded grid side");
    check_shape(h % window == 0 && w % window == 0,
                "encoder: grid must be padded to a multiple of window_size, got " + shape_str(grid.shape()));
    const int shift = (shifted && (h > window || w > window)) ? window / 2 : 0;

    Tensor x = grid;
    if (shift) x = roll2d(x, -shift, -shift);
    Tensor flat = reshape(x, {h * w, dim});
    Tensor wins = window_partition(reshape(ln1.forward(flat), {h, w, dim}), window);
    Tensor mask;
    if (shift) mask = shift_mask(h, w, window, shift);
    Tensor a = attn.forward(wins, mask);
    Tensor inner = add(flat, reshape(window_reverse(a, window, h, w), {h * w, dim}));
    Tensor out = reshape(add(flat, mlp.forward(ln2.forward(inner))), {h, w, dim});
    if (shift) out = roll2d(out, shift, shift);
    return out;
}

void SwinLayer::collect(const std::string& prefix, ParamList& out) const {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    mlp.collect(prefix + ".mlp", out);
}

PatchMerging::PatchMerging(int in_dim_, int out_dim, Rng& rng)
    : in_dim(in_dim_), norm(4 * in_dim_), reduce(4 * in_dim_, out_dim, rng, false) {}

Tensor PatchMerging::forward(const Tensor& grid) const {
    const int h = grid.dim(0), w = grid.dim(1);
    check_contract(h >= 2 && w >= 2, "encoder: grid side < 2 before merge");
    Tensor x = pixel_unshuffle2(pad_to_multiple(grid, 2)); // (ceil(h/2), ceil(w/2), 4C)
    const int oh = x.dim(0), ow = x.dim(1);
    Tensor tok = reduce.forward(norm.forward(reshape(x, {oh * ow, 4 * in_dim})));
    return reshape(tok, {oh, ow, tok.dim(1)});
}

void PatchMerging::collect(const std::string& prefix, ParamList& out) const {
    norm.collect(prefix + ".norm", out);
    reduce.collect(prefix + ".reduce", out);
}

PatchEmbed::PatchEmbed(int patch_, int out_dim, Rng& rng)
    : patch(patch_), proj(patch_ * patch_ * 3, out_dim, rng), norm(out_dim) {}

Tensor PatchEmbed::forward(const Tensor& image) const {
    check_shape(image.rank() == 3 && image.dim(2) == 3,
                "patch_embed expects (H, W, 3), got " + shape_str(image.shape()));
    Tensor x = pad_to_multiple(image, patch);
    const int hp = x.dim(0), wp = x.dim(1);
    // (hp, wp, 3) -> (hp/p, p, wp/p, p, 3) -> (hp/p * wp/p, p*p*3)
    x = reshape(x, {hp / patch, patch, wp / patch, patch, 3});
    x = permute(x, {0, 2, 1, 3, 4});
    x = reshape(x, {(hp / patch) * (wp / patch), patch * patch * 3});
    Tensor tok = norm.forward(proj.forward(x));
    return reshape(tok, {hp / patch, wp / patch, tok.dim(1)});
}

void PatchEmbed::collect(const std::string& prefix, ParamList& out) const {
    proj.collect(prefix + ".proj", out);
    norm.collect(prefix + ".norm", out);
}

Encoder::Encoder(const EncoderConfig& cfg_, Rng& rng) : cfg(cfg_) {
    cfg.validate();
    embed = PatchEmbed(cfg.patch_size, cfg.stage_channels[0], rng);
    stages.resize(4);
    for (size_t s = 0; s < 4; ++s) {
        if (s > 0) merges.emplace_back(cfg.stage_channels[s - 1], cfg.stage_channels[s], rng);
        for (int d = 0; d < cfg.stage_depths[s]; ++d)
            stages[s].emplace_back(cfg.stage_channels[s], cfg.num_heads[s], cfg.window_size,
                                   d % 2 == 1, cfg.mlp_ratio, rng);
    }
}

FeaturePyramid Encoder::encode(const Tensor& image) const {
    check_shape(image.rank() == 3 && image.dim(2) == 3,
                "encode expects (H, W, 3), got " + shape_str(image.shape()));
    for (Scalar v : image.values())
        check_contract(v >= -1e-9 && v <= 1.0 + 1e-9, "encode: image values must lie in [0, 1]");
    FeaturePyramid pyr;
    pyr.src_h = image.dim(0);
    pyr.src_w = image.dim(1);
    Tensor x = embed.forward(image);
    for (size_t s = 0; s < 4; ++s) {
        if (s > 0) x = merges[s - 1].forward(x);
        const int th = x.dim(0), tw = x.dim(1);
        if (!stages[s].empty()) {
            x = pad_to_multiple(x, cfg.window_size);
            for (const auto& layer : stages[s]) x = layer.forward(x);
            if (x.dim(0) != th || x.dim(1) != tw) x = crop2d(x, th, tw);
        }
        pyr.levels.push_back(x);
    }
    return pyr;
}

void Encoder::collect(const std::string& prefix, ParamList& out) const {
    embed.collect(prefix + ".embed", out);
    for (size_t s = 0; s < 4; ++s) {
        if (s > 0) merges[s - 1].collect(prefix + ".merge" + std::to_string(s), out);
        for (size_t d = 0; d < stages[s].size(); ++d)
            stages[s][d].collect(prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(d), out);
    }
}

} // namespace sdconet
