#pragma once

#include <string>
#include <vector>

#include "sdconet/encoder.hpp"

namespace sdconet {

struct SrDecoderConfig {
    int residual_blocks = 1; // per decoder level
    int window_size = 4;
    int mlp_ratio = 4;
    int num_heads = 2;          // decoder residual blocks share one head count
    int reconstruct_width = 48; // channels after the first reconstruct conv
    Scalar leaky_slope = 0.2;

    void validate(const std::vector<int>& stage_channels) const;
};

// tokens -> LayerNorm -> linear C -> 2C (bias-free) -> sub-pixel rearrange:
// spatial x2, channels /2. Equivalent to a stride-2 2x2 transposed conv.
struct PatchExpand {
    int in_dim = 0;
    LayerNorm norm;
    Linear expand;

    PatchExpand() = default;
    PatchExpand(int in_dim, Rng& rng);
    Tensor forward(const Tensor& grid) const; // (H,W,C) -> (2H,2W,C/2)
    void collect(const std::string& prefix, ParamList& out) const;
};

struct SrImage {
    Tensor image; // (2H, 2W, 3) clamped at inference
    std::string source_id;
};

struct SrDecoder {
    SrDecoderConfig cfg;
    std::vector<int> channels; // C1..C4 of the pyramid feeding this decoder

    std::vector<PatchExpand> level_expands; // level l+1 -> l, l = 3..1
    std::vector<Linear> skip_fuse;          // concat(expanded, skip) 2C -> C
    std::vector<std::vector<SwinLayer>> level_blocks;
    PatchExpand up1, up2; // C1 -> C1/2 -> C1/4, to LR resolution
    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;

    SrDecoder() = default;
    SrDecoder(const SrDecoderConfig& cfg, const std::vector<int>& stage_channels, Rng& rng);

    // Fused decoder features at LR resolution (H, W, C1/4).
    Tensor decode_features(const FeaturePyramid& pyr) const;
    // conv -> LeakyReLU -> sub-pixel shuffle -> conv to 3 channels.
    Tensor reconstruct(const Tensor& fdec, bool training) const;
    Tensor decode(const FeaturePyramid& pyr, bool training) const; // (2H, 2W, 3)
    void collect(const std::string& prefix, ParamList& out) const;
};

// Mean absolute error.
Tensor sr_loss(const Tensor& sr, const Tensor& hr);

} // namespace sdconet
