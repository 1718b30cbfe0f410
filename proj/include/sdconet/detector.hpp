#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sdconet/data.hpp"
#include "sdconet/nn.hpp"
#include "sdconet/query_filter.hpp"

namespace sdconet {

enum class SizeBucket { small, medium, large };

// Area thresholds 32^2 and 96^2, in HR pixels.
SizeBucket size_bucket(Scalar area_px);

// Ground-truth box in normalized cxcywh with its pixel-area bucket.
struct DetTarget {
    Scalar cx = 0, cy = 0, w = 0, h = 0;
    int class_id = 0;
    SizeBucket bucket = SizeBucket::small;
};

// Clamps the pixel box to the image, normalizes, buckets by original area.
DetTarget make_target(const GTBox& box, int img_h, int img_w);

// Both boxes xyxy with positive extents.
Scalar giou_xyxy(Scalar ax1, Scalar ay1, Scalar ax2, Scalar ay2, Scalar bx1, Scalar by1,
                 Scalar bx2, Scalar by2);

// (M,4) cxcywh -> (M,4) xyxy, differentiable.
Tensor cxcywh_to_xyxy(const Tensor& boxes);

// Row-wise giou of two (M,4) xyxy tensors -> (M,1), differentiable.
Tensor giou_pairs(const Tensor& a, const Tensor& b);

struct MatchWeights {
    Scalar cls = 1.0, bbox = 5.0, giou = 2.0;
    Scalar focal_gamma = 2.0, focal_alpha = 0.25;
};

// Minimum-cost one-to-one assignment of rows (GTs) to columns (queries);
// cost is row-major (rows x cols), rows <= cols. Returns the column per row.
std::vector<int> solve_assignment(const std::vector<Scalar>& cost, int rows, int cols);

// Builds the matching cost from focal class scores, L1 box distance and giou,
// then solves it. Returns the matched query per GT.
std::vector<int> hungarian_match(const Tensor& logits, const Tensor& boxes,
                                 const std::vector<DetTarget>& gts, const MatchWeights& mw);

struct DetLosses {
    Tensor cls, bbox, giou;
};

// L_cls: focal over all queries, unmatched queries as background.
// L_bbox / L_giou: over matched pairs only; zero tensors when gts is empty.
DetLosses detection_losses(const Tensor& logits, const Tensor& boxes,
                           const std::vector<DetTarget>& gts, const std::vector<int>& assignment,
                           Scalar focal_gamma = 2.0, Scalar focal_alpha = 0.25);

struct LossWeights {
    Scalar cls = 1.0, bbox = 5.0, giou = 2.0, sa = 1.0, sr = 1.0;
    void validate() const; // every weight >= 0
};

struct LossSet {
    Tensor cls, bbox, giou, sa;
    Tensor sr; // read only by stage 2
};

// Stage 1: weighted detection + saliency sum. Stage 2 adds sr_weight * L_sr.
Tensor stage_loss(const LossSet& losses, const LossWeights& weights, int stage);

struct DetectorConfig {
    int num_classes = 4;
    int num_queries = 50;
    int num_layers = 2;
    DeformableConfig attn;

    void validate() const;
};

struct DetectionOutput {
    Tensor logits; // (Q, num_classes), final layer
    Tensor boxes;  // (Q, 4) cxcywh in [0,1], final layer
    std::vector<Tensor> aux_logits, aux_boxes; // intermediate decoder layers
    Tensor enc_logits, enc_boxes;              // encoder proposal head
};

// Softmax self-attention block over the query set.
struct QuerySelfAttention {
    int dim = 0, heads = 0;
    Linear wq, wk, wv, proj;

    QuerySelfAttention() = default;
    QuerySelfAttention(int dim, int heads, Rng& rng);
    Tensor forward(const Tensor& content, const Tensor& qpos) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct DetDecoderLayer {
    QuerySelfAttention self_attn;
    DeformableAttention cross;
    LayerNorm ln_self, ln_cross, ln_ffn;
    Linear ffn1, ffn2;

    DetDecoderLayer() = default;
    DetDecoderLayer(const DeformableConfig& cfg, int levels, Rng& rng);
    // refs (Q, levels, 4) constant boxes.
    Tensor forward(const Tensor& content, const Tensor& qpos, const Tensor& memory,
                   const std::vector<LevelShape>& shapes, const Tensor& refs) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Two-stage decoding: encoder proposals seed the reference boxes, decoder
// layers refine them with deformable cross-attention; class/box heads shared
// across layers.
struct DetectionDecoder {
    DetectorConfig cfg;
    int levels = 0;
    Linear enc_proj;
    LayerNorm enc_norm;
    Linear enc_class;
    Mlp enc_bbox;
    Embedding query_content;
    Mlp ref_pos;
    std::vector<DetDecoderLayer> layers;
    Linear class_head;
    Mlp bbox_head;

    DetectionDecoder() = default;
    DetectionDecoder(const DetectorConfig& cfg, int levels, Rng& rng);
    // memory (N, d) level-major over shapes. num_queries > N clamps with a warning.
    DetectionOutput decode(const Tensor& memory, const std::vector<LevelShape>& shapes,
                           std::vector<std::string>* warnings = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Sine embedding of the 4 box coordinates, d/4 dims each; d % 8 == 0.
Tensor sine_box_embedding(const std::vector<Scalar>& boxes_cxcywh, int q, int d);

// One record per query: {image_id, class_id, score, bbox [x,y,w,h] in pixels}.
nlohmann::json prediction_records(const Tensor& logits, const Tensor& boxes, long long image_id,
                                  int img_h, int img_w, Scalar min_score = 0.0);

} // namespace sdconet
