#pragma once

#include <string>
#include <vector>

#include "sdconet/nn.hpp"
#include "sdconet/ops.hpp"

namespace sdconet {

struct FilterSchedule {
    std::vector<Scalar> beta;  // per pyramid level, index 0 = highest resolution
    std::vector<Scalar> gamma; // per detection-encoder layer

    void validate() const; // every entry in (0,1]
    static FilterSchedule paper_schedule();
    static FilterSchedule all_ones(int levels, int layers);
};

// floor(beta*gamma*n), clamped to >= 1 whenever n >= 1.
int budget(int n, Scalar beta, Scalar gamma);

struct ActiveQuerySet {
    std::vector<int> phi; // sorted flat token indices
    std::vector<int> level_offsets;
    std::vector<int> budget_per_level;
};

// Top-budget tokens per level by score, ties to the lower flat index.
ActiveQuerySet select_active(const std::vector<Scalar>& scores,
                             const std::vector<int>& level_token_counts,
                             const FilterSchedule& sched, int layer);

// B_{i,j} = Concat(R_i, C_j) added to unselected tokens.
struct BackgroundEmbedding {
    int max_rows = 0, max_cols = 0, half = 0;
    Embedding rows, cols;

    BackgroundEmbedding() = default;
    BackgroundEmbedding(int max_rows, int max_cols, int d, Rng& rng);
    Tensor embed(int i, int j) const; // (1, d)
    Tensor embed_many(const std::vector<int>& is, const std::vector<int>& js) const; // (K, d)
    void collect(const std::string& prefix, ParamList& out) const;
};

struct DeformableConfig {
    int d_model = 64;
    int heads = 8;
    int points = 1; // sampling points per head per level
    int ffn_dim = 128;

    void validate(int levels) const;
};

// Multi-scale deformable attention: each query samples points bilinearly from
// every pyramid level of the projected value map.
struct DeformableAttention {
    int d = 0, heads = 0, levels = 0, points = 0;
    Linear sampling_off; // d -> heads*levels*points*2
    Linear att_weight;   // d -> heads*levels*points, softmaxed over levels*points
    Linear value_proj, out_proj;

    DeformableAttention() = default;
    DeformableAttention(const DeformableConfig& cfg, int levels, Rng& rng);
    // query (K,d); value_src (N,d) flattened level-major; refs either (K,L,2)
    // normalized centers (offsets scaled by 1/level extent) or (K,L,4) boxes
    // (offsets scaled by wh/2 per sampled point).
    Tensor forward(const Tensor& query, const Tensor& value_src,
                   const std::vector<LevelShape>& shapes, const Tensor& refs,
                   long long* site_counter = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Eq. 8 layer: selected tokens run deformable self-attention over the full
// token set then a feed-forward block (post-norm); unselected tokens pass
// through, plus the background embedding when enabled.
struct FilteredEncoderLayer {
    DeformableAttention attn;
    LayerNorm ln1, ln2;
    Linear ffn1, ffn2;

    FilteredEncoderLayer() = default;
    FilteredEncoderLayer(const DeformableConfig& cfg, int levels, Rng& rng);
    Tensor forward(const Tensor& tokens, const Tensor& pos, const Tensor& refs,
                   const std::vector<LevelShape>& shapes, const ActiveQuerySet& active,
                   const BackgroundEmbedding* bg, long long* site_counter = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct AttentionBudget {
    long long sites_baseline = 0;
    long long sites_gamma_only = 0; // layer-wise filtering only
    long long sites_beta_only = 0;  // pyramid-level filtering only
    long long sites_joint = 0;
};

// Site totals across all layers; k_per_head = levels * points.
AttentionBudget attention_site_count(const FilterSchedule& sched,
                                     const std::vector<int>& token_counts, int heads,
                                     int k_per_head);

// Fixed sine embedding of each token's (y, x) cell center, level-major (N, d).
Tensor sine_position_embedding(const std::vector<LevelShape>& shapes, int d);

// Normalized cell-center reference points replicated per level: (N, levels, 2).
Tensor token_reference_points(const std::vector<LevelShape>& shapes);

// Per-token (row, col) within its own level grid, level-major order.
void token_grid_coords(const std::vector<LevelShape>& shapes, std::vector<int>& rows_out,
                       std::vector<int>& cols_out);

} // namespace sdconet
