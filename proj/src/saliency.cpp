#include "sdconet/saliency.hpp"

#include <cmath>

#include "sdconet/ops.hpp"

namespace sdconet {

void SaliencyConfig::validate() const {
    check_config(sigma > 0, "saliency: sigma must be positive");
    check_config(focal_gamma >= 0, "saliency: focal gamma must be >= 0");
    check_config(focal_alpha > 0 && focal_alpha < 1, "saliency: focal alpha must lie in (0,1)");
}

SaliencyHead::SaliencyHead(int dim_, Rng& rng)
    : dim(dim_), mlp1(dim_, dim_, rng), mlp2(dim_, dim_, 1, rng) {
    check_config(dim % 2 == 0, "saliency: channel width must be even for the local/global split");
}

Tensor SaliencyHead::forward(const Tensor& level) const {
    check_shape(level.rank() == 3 && level.dim(2) == dim,
                "saliency head expects (H,W," + std::to_string(dim) + "), got " + shape_str(level.shape()));
    const int h = level.dim(0), w = level.dim(1), half = dim / 2;
    Tensor t = gelu(mlp1.forward(reshape(level, {h * w, dim})));
    Tensor local = slice(t, 1, 0, half);
    Tensor pooled = broadcast_rows(mean_rows(slice(t, 1, half, half)), h * w);
    Tensor s = mlp2.forward(concat({local, pooled}, 1));
    return reshape(s, {h, w, 1});
}

void SaliencyHead::collect(const std::string& prefix, ParamList& out) const {
    mlp1.collect(prefix + ".mlp1", out);
    mlp2.collect(prefix + ".mlp2", out);
}

SaliencyPyramidHead::SaliencyPyramidHead(const SaliencyConfig& cfg_,
                                         const std::vector<int>& stage_channels, Rng& rng)
    : cfg(cfg_) {
    cfg.validate();
    check_config(stage_channels.size() == 4, "saliency: expects a 4-level pyramid");
    for (int c : stage_channels) heads.emplace_back(c, rng);
    alpha = Tensor::full({1}, cfg.alpha_init, true);
}

Tensor SaliencyPyramidHead::predict_level(int level_index, const Tensor& feat) const {
    return heads[static_cast<size_t>(level_index)].forward(feat);
}

Tensor SaliencyPyramidHead::propagate(const Tensor& coarse_map, const Tensor& fine_feat,
                                      int fine_level_index) const {
    const int fh = fine_feat.dim(0), fw = fine_feat.dim(1);
    Tensor up = upsample2x_nearest(coarse_map);
    check_shape(up.dim(0) >= fh && up.dim(1) >= fw,
                "saliency: upsampled map smaller than the finer level");
    if (up.dim(0) != fh || up.dim(1) != fw) up = crop2d(up, fh, fw);
    Tensor scaled = mul(repeat_block(alpha, fh * fw, {fh, fw, 1}), up);
    return add(scaled, predict_level(fine_level_index, fine_feat));
}

std::vector<Tensor> SaliencyPyramidHead::forward(const FeaturePyramid& pyr) const {
    check_contract(pyr.levels.size() == heads.size(), "saliency: pyramid/head level mismatch");
    std::vector<Tensor> maps(heads.size());
    const int top = static_cast<int>(heads.size()) - 1;
    maps[static_cast<size_t>(top)] = predict_level(top, pyr.levels[static_cast<size_t>(top)]);
    for (int l = top - 1; l >= 0; --l)
        maps[static_cast<size_t>(l)] =
            propagate(maps[static_cast<size_t>(l + 1)], pyr.levels[static_cast<size_t>(l)], l);
    return maps;
}

void SaliencyPyramidHead::collect(const std::string& prefix, ParamList& out) const {
    for (size_t l = 0; l < heads.size(); ++l)
        heads[l].collect(prefix + ".level" + std::to_string(l + 1), out);
    out.push_back({prefix + ".alpha", alpha});
}

Scalar gaussian_confidence(Scalar dx_norm, Scalar dy_norm, Scalar sigma) {
    return std::exp(-(dx_norm * dx_norm + dy_norm * dy_norm) / (2.0 * sigma * sigma));
}

Tensor confidence_target(const std::vector<GTBox>& boxes, int lh, int lw, Scalar img_h,
                         Scalar img_w, Scalar sigma) {
    check_config(lh >= 1 && lw >= 1 && img_h > 0 && img_w > 0, "confidence_target: bad geometry");
    check_config(sigma > 0, "confidence_target: sigma must be positive");
    for (const GTBox& b : boxes)
        check_contract(b.w > 0 && b.h > 0, "confidence_target: zero-area box");

    const Scalar sy = img_h / lh, sx = img_w / lw;
    std::vector<Scalar> c(static_cast<size_t>(lh) * lw, 0.0);
    for (int i = 0; i < lh; ++i) {
        const Scalar cy = (i + 0.5) * sy;
        for (int j = 0; j < lw; ++j) {
            const Scalar cx = (j + 0.5) * sx;
            Scalar best = 0.0;
            for (const GTBox& b : boxes) {
                if (cx < b.x || cx >= b.x + b.w || cy < b.y || cy >= b.y + b.h) continue;
                const Scalar dx = (cx - (b.x + b.w / 2)) / (b.w / 2);
                const Scalar dy = (cy - (b.y + b.h / 2)) / (b.h / 2);
                best = std::max(best, gaussian_confidence(dx, dy, sigma));
            }
            c[static_cast<size_t>(i) * lw + j] = best;
        }
    }
    return Tensor::from(std::move(c), {lh, lw, 1});
}

Tensor saliency_loss(const std::vector<Tensor>& maps, const std::vector<Tensor>& targets,
                     Scalar gamma, Scalar alpha) {
    check_contract(!maps.empty() && maps.size() == targets.size(),
                   "saliency_loss: one target per map required");
    std::vector<Tensor> logit_parts, target_parts;
    for (size_t l = 0; l < maps.size(); ++l) {
        check_shape(maps[l].shape() == targets[l].shape(),
                    "saliency_loss: map/target dim mismatch at level " + std::to_string(l + 1));
        for (Scalar v : targets[l].values())
            check_contract(v >= 0.0 && v <= 1.0, "saliency_loss: target outside [0,1]");
        const int n = static_cast<int>(maps[l].size());
        logit_parts.push_back(reshape(maps[l], {n, 1}));
        target_parts.push_back(reshape(targets[l], {n, 1}));
    }
    Tensor logits = logit_parts.size() == 1 ? logit_parts[0] : concat(logit_parts, 0);
    Tensor tgt = target_parts.size() == 1 ? target_parts[0] : concat(target_parts, 0);
    return mean_all(sigmoid_focal(logits, tgt.detach(), gamma, alpha));
}

} // namespace sdconet
