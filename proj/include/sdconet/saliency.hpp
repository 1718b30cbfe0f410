#pragma once

#include <string>
#include <vector>

#include "sdconet/data.hpp"
#include "sdconet/encoder.hpp"

namespace sdconet {

struct SaliencyConfig {
    Scalar sigma = 1.0 / 3.0; // Gaussian width in normalized-offset units
    Scalar alpha_init = 0.5;
    Scalar focal_gamma = 2.0;
    Scalar focal_alpha = 0.25;

    void validate() const;
};

// Per-level scorer: project -> split channels into local/global halves ->
// spatial-average the global half and broadcast -> concat -> 2-layer map to 1.
struct SaliencyHead {
    int dim = 0;
    Linear mlp1;
    Mlp mlp2;

    SaliencyHead() = default;
    SaliencyHead(int dim, Rng& rng);
    Tensor forward(const Tensor& level) const; // (H,W,C) -> (H,W,1)
    void collect(const std::string& prefix, ParamList& out) const;
};

// Predicts one logit map per pyramid level and fuses them top-down:
// S_{l-1} = alpha * UP(S_l) + head_{l-1}(F_{l-1}), UP = nearest x2.
struct SaliencyPyramidHead {
    SaliencyConfig cfg;
    std::vector<SaliencyHead> heads; // one per level
    Tensor alpha;                    // single shared scalar

    SaliencyPyramidHead() = default;
    SaliencyPyramidHead(const SaliencyConfig& cfg, const std::vector<int>& stage_channels, Rng& rng);

    Tensor predict_level(int level_index, const Tensor& feat) const;
    Tensor propagate(const Tensor& coarse_map, const Tensor& fine_feat, int fine_level_index) const;
    std::vector<Tensor> forward(const FeaturePyramid& pyr) const; // finest first
    void collect(const std::string& prefix, ParamList& out) const;
};

// exp(-(dx^2 + dy^2) / (2 sigma^2)) on normalized offsets.
Scalar gaussian_confidence(Scalar dx_norm, Scalar dy_norm, Scalar sigma);

// Per-cell supervision on a (lh, lw) grid over an (img_h, img_w) frame; boxes
// in the same frame. Cell-center containment; overlaps take the max; offsets
// normalized by box half-extents.
Tensor confidence_target(const std::vector<GTBox>& boxes, int lh, int lw, Scalar img_h,
                         Scalar img_w, Scalar sigma);

// Mean sigmoid focal loss over all cells of all levels.
Tensor saliency_loss(const std::vector<Tensor>& maps, const std::vector<Tensor>& targets,
                     Scalar gamma = 2.0, Scalar alpha = 0.25);

} // namespace sdconet
