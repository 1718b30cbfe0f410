#include "sdconet/sr_decoder.hpp"

#include "sdconet/ops.hpp"

namespace sdconet {

namespace {

Tensor conv_init(int kh, int kw, int cin, int cout, Rng& rng) {
    std::vector<Scalar> v(static_cast<size_t>(kh) * kw * cin * cout);
    for (auto& x : v) x = rng.trunc_normal(0.02);
    return Tensor::from(std::move(v), {kh, kw, cin, cout}, true);
}

Tensor pad_to_multiple(const Tensor& grid, int m) {
    const int h = grid.dim(0), w = grid.dim(1);
    const int hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
    if (hp == h && wp == w) return grid;
    return pad2d(grid, hp, wp);
}

Tensor run_blocks(const std::vector<SwinLayer>& blocks, Tensor grid, int window) {
    if (blocks.empty()) return grid;
    const int h = grid.dim(0), w = grid.dim(1);
    grid = pad_to_multiple(grid, window);
    for (const auto& blk : blocks) grid = blk.forward(grid);
    if (grid.dim(0) != h || grid.dim(1) != w) grid = crop2d(grid, h, w);
    return grid;
}

} // namespace

void SrDecoderConfig::validate(const std::vector<int>& stage_channels) const {
    check_config(stage_channels.size() == 4, "sr_decoder: expects a 4-level pyramid");
    check_config(residual_blocks >= 0, "sr_decoder: residual_blocks must be >= 0");
    check_config(window_size >= 2, "sr_decoder: window_size must be >= 2");
    for (int c : stage_channels)
        check_config(c % 2 == 0, "sr_decoder: patch expand needs even channels");
    check_config(stage_channels[0] % 4 == 0,
                 "sr_decoder: finest channels must divide by 4 for the two upsampling expands");
    for (size_t s = 0; s < 3; ++s)
        check_config(stage_channels[s] % num_heads == 0,
                     "sr_decoder: heads must divide block channels");
    check_config(reconstruct_width % 12 == 0,
                 "sr_decoder: reconstruct width must divide by scale^2 * 3");
}

PatchExpand::PatchExpand(int in_dim_, Rng& rng)
    : in_dim(in_dim_), norm(in_dim_), expand(in_dim_, 2 * in_dim_, rng, false) {
    check_config(in_dim % 2 == 0, "sr_decoder: patch expand needs even channels");
}

Tensor PatchExpand::forward(const Tensor& grid) const {
    check_shape(grid.rank() == 3 && grid.dim(2) == in_dim,
                "patch_expand: (H,W," + std::to_string(in_dim) + ") required, got " + shape_str(grid.shape()));
    const int h = grid.dim(0), w = grid.dim(1);
    Tensor tok = expand.forward(norm.forward(reshape(grid, {h * w, in_dim})));
    return pixel_shuffle2(reshape(tok, {h, w, 2 * in_dim}));
}

void PatchExpand::collect(const std::string& prefix, ParamList& out) const {
    norm.collect(prefix + ".norm", out);
    expand.collect(prefix + ".expand", out);
}

SrDecoder::SrDecoder(const SrDecoderConfig& cfg_, const std::vector<int>& stage_channels, Rng& rng)
    : cfg(cfg_), channels(stage_channels) {
    cfg.validate(stage_channels);
    level_blocks.resize(3);
    for (int l = 3; l >= 1; --l) { // expand level l+1 (index l) down to level l (index l-1)
        const int c_from = channels[static_cast<size_t>(l)];
        const int c_to = channels[static_cast<size_t>(l - 1)];
        level_expands.emplace_back(c_from, rng);
        skip_fuse.emplace_back(2 * c_to, c_to, rng);
        auto& blocks = level_blocks[static_cast<size_t>(3 - l)];
        for (int d = 0; d < cfg.residual_blocks; ++d)
            blocks.emplace_back(c_to, cfg.num_heads, cfg.window_size, d % 2 == 1, cfg.mlp_ratio, rng);
    }
    up1 = PatchExpand(channels[0], rng);
    up2 = PatchExpand(channels[0] / 2, rng);
    const int c_fine = channels[0] / 4;
    conv1_w = conv_init(3, 3, c_fine, cfg.reconstruct_width, rng);
    conv1_b = Tensor::zeros({cfg.reconstruct_width}, true);
    conv2_w = conv_init(3, 3, cfg.reconstruct_width / 4, 3, rng);
    conv2_b = Tensor::zeros({3}, true);
}

Tensor SrDecoder::decode_features(const FeaturePyramid& pyr) const {
    check_contract(pyr.levels.size() == 4, "sr_decoder: full 4-level pyramid required");
    for (size_t s = 0; s < 4; ++s) {
        check_contract(pyr.levels[s].defined(), "sr_decoder: missing pyramid level");
        check_shape(pyr.levels[s].dim(2) == channels[s],
                    "sr_decoder: pyramid channels do not match decoder construction");
    }
    Tensor z = pyr.levels[3];
    for (int l = 3; l >= 1; --l) {
        const size_t i = static_cast<size_t>(3 - l);
        const Tensor& skip = pyr.levels[static_cast<size_t>(l - 1)];
        const int th = skip.dim(0), tw = skip.dim(1), c = skip.dim(2);
        Tensor up = level_expands[i].forward(z);
        if (up.dim(0) != th || up.dim(1) != tw) up = crop2d(up, th, tw);
        Tensor cat = concat({reshape(up, {th * tw, c}), reshape(skip, {th * tw, c})}, 1);
        z = reshape(skip_fuse[i].forward(cat), {th, tw, c});
        z = run_blocks(level_blocks[i], z, cfg.window_size);
    }
    const int lr_h = pyr.src_h, lr_w = pyr.src_w;
    const int mid_h = (lr_h + 1) / 2, mid_w = (lr_w + 1) / 2;
    z = up1.forward(z);
    if (z.dim(0) != mid_h || z.dim(1) != mid_w) z = crop2d(z, mid_h, mid_w);
    z = up2.forward(z);
    if (z.dim(0) != lr_h || z.dim(1) != lr_w) z = crop2d(z, lr_h, lr_w);
    return z;
}

Tensor SrDecoder::reconstruct(const Tensor& fdec, bool training) const {
    check_shape(fdec.rank() == 3 && fdec.dim(2) == conv1_w.dim(2),
                "reconstruct: channel mismatch, got " + shape_str(fdec.shape()));
    Tensor x = conv2d(fdec, conv1_w, conv1_b, 1, 1);
    check_config(x.dim(2) % 4 == 0, "reconstruct: channels must divide by 4 before shuffle");
    x = pixel_shuffle2(leaky_relu(x, cfg.leaky_slope));
    x = conv2d(x, conv2_w, conv2_b, 1, 1);
    return training ? x : clamp(x, 0.0, 1.0);
}

Tensor SrDecoder::decode(const FeaturePyramid& pyr, bool training) const {
    return reconstruct(decode_features(pyr), training);
}

void SrDecoder::collect(const std::string& prefix, ParamList& out) const {
    for (int l = 3; l >= 1; --l) {
        const size_t i = static_cast<size_t>(3 - l);
        const std::string lv = prefix + ".level" + std::to_string(l);
        level_expands[i].collect(lv + ".expand", out);
        skip_fuse[i].collect(lv + ".fuse", out);
        for (size_t d = 0; d < level_blocks[i].size(); ++d)
            level_blocks[i][d].collect(lv + ".block" + std::to_string(d), out);
    }
    up1.collect(prefix + ".up1", out);
    up2.collect(prefix + ".up2", out);
    out.push_back({prefix + ".conv1.w", conv1_w});
    out.push_back({prefix + ".conv1.b", conv1_b});
    out.push_back({prefix + ".conv2.w", conv2_w});
    out.push_back({prefix + ".conv2.b", conv2_b});
}

Tensor sr_loss(const Tensor& sr, const Tensor& hr) {
    check_shape(sr.shape() == hr.shape(),
                "sr_loss: dim mismatch " + shape_str(sr.shape()) + " vs " + shape_str(hr.shape()));
    return l1_loss(sr, hr);
}

} // namespace sdconet
