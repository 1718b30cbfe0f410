#pragma once

#include <string>
#include <vector>

#include "sdconet/detector.hpp"
#include "sdconet/encoder.hpp"
#include "sdconet/query_filter.hpp"
#include "sdconet/saliency.hpp"
#include "sdconet/sr_decoder.hpp"

namespace sdconet {

struct FilterConfig {
    FilterSchedule schedule;
    bool background_embed = true;
    int max_grid = 64; // background table extent per axis

    // levels = pyramid depth; the deformable width lives in DetectorConfig.
    void validate(int levels) const;
};

struct ModelConfig {
    EncoderConfig encoder;
    SrDecoderConfig sr;
    SaliencyConfig saliency;
    FilterConfig filter;
    DetectorConfig detector;

    void validate() const;
};

struct ModelOutput {
    Tensor sr_image;                   // (2H, 2W, 3); undefined when skipped
    std::vector<Tensor> saliency_maps; // finest first, (H_l, W_l, 1) logits
    DetectionOutput det;
    Tensor memory;                  // (N, d) after the filtered encoder stack
    std::vector<LevelShape> shapes; // finest first
    long long attention_sites = 0;
};

struct ParamGroups {
    ParamList feat; // shared encoder
    ParamList det;  // saliency, filter stack, detection decoder
    ParamList sr;   // SR decoder
};

// Shared encoder feeding three consumers: the SR decoder, the saliency
// pyramid, and a saliency-filtered deformable encoder whose memory the
// detection decoder reads. Saliency values rank tokens without gradient;
// supervision reaches the head through its own loss.
struct Model {
    ModelConfig cfg;
    Encoder encoder;
    SrDecoder sr;
    SaliencyPyramidHead saliency;
    std::vector<Linear> input_proj; // per level, C_l -> d
    std::vector<LayerNorm> input_norm;
    Embedding level_embed;
    std::vector<FilteredEncoderLayer> enc_layers;
    BackgroundEmbedding bg;
    DetectionDecoder detector;

    Model() = default;
    Model(const ModelConfig& cfg, Rng& rng);

    ModelOutput forward(const Tensor& lr_image, bool with_sr, bool training,
                        std::vector<std::string>* warnings = nullptr) const;
    ParamGroups param_groups() const;
};

} // namespace sdconet
