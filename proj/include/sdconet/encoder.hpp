#pragma once

#include <string>
#include <vector>

#include "sdconet/nn.hpp"

namespace sdconet {

struct EncoderConfig {
    int patch_size = 4;
    int window_size = 4;
    std::vector<int> stage_depths{1, 1, 1, 1};
    std::vector<int> stage_channels{24, 48, 96, 192};
    std::vector<int> num_heads{2, 4, 4, 8};
    int mlp_ratio = 4;

    void validate() const;
    static EncoderConfig swin_t(); // paper-scale preset
};

struct FeaturePyramid {
    std::vector<Tensor> levels; // (H_s, W_s, C_s), s = 1..4
    int src_h = 0, src_w = 0;
};

// ceil(extent / 2^(level+1)) for level 1..4
int pyramid_dim(int extent, int level);

// Window multi-head self-attention with relative position bias.
// Input (nW, T, C) with T = window^2; optional additive mask (nW, T, T).
struct WindowAttention {
    int dim = 0, heads = 0, window = 0;
    Linear qkv, proj;
    Tensor rel_bias; // ((2w-1)^2, heads)
    std::vector<int> rel_index;

    WindowAttention() = default;
    WindowAttention(int dim, int heads, int window, Rng& rng);
    // att_out, when non-null, receives the softmaxed (nW*heads, T, T) map.
    Tensor forward(const Tensor& windows, const Tensor& mask, Tensor* att_out = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// One windowed-attention layer over an (H, W, C) grid:
//   T_out = T_in + MLP(LN(T_in + Attn(LN(T_in))))
// Requires H, W already padded to multiples of window. When shifted, a cyclic
// half-window shift is applied before windowing and inverted after (skipped
// when one window covers the grid).
struct SwinLayer {
    int dim = 0, window = 0;
    bool shifted = false;
    LayerNorm ln1, ln2;
    WindowAttention attn;
    Mlp mlp;

    SwinLayer() = default;
    SwinLayer(int dim, int heads, int window, bool shifted, int mlp_ratio, Rng& rng);
    Tensor forward(const Tensor& grid) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// 2x2 neighborhood concat + LayerNorm + linear 4C -> 2C; odd dims padded.
struct PatchMerging {
    int in_dim = 0;
    LayerNorm norm;
    Linear reduce;

    PatchMerging() = default;
    PatchMerging(int in_dim, int out_dim, Rng& rng);
    Tensor forward(const Tensor& grid) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct PatchEmbed {
    int patch = 4;
    Linear proj;
    LayerNorm norm;

    PatchEmbed() = default;
    PatchEmbed(int patch, int out_dim, Rng& rng);
    Tensor forward(const Tensor& image) const; // (H,W,3) -> (ceil(H/p), ceil(W/p), C1)
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Encoder {
    EncoderConfig cfg;
    PatchEmbed embed;
    std::vector<PatchMerging> merges;           // stages 2..4
    std::vector<std::vector<SwinLayer>> stages; // per stage layer list

    Encoder() = default;
    Encoder(const EncoderConfig& cfg, Rng& rng);
    FeaturePyramid encode(const Tensor& image) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

} // namespace sdconet
