#pragma once

#include <memory>
#include <vector>

#include "sdconet/tensor.hpp"

namespace sdconet {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div_op(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scaled(const Tensor& a, const Tensor& b, Scalar cb); // a + cb * b
Tensor scalar_mul(const Tensor& a, Scalar c);
Tensor scalar_add(const Tensor& a, Scalar c);
Tensor maximum(const Tensor& a, const Tensor& b); // ties take a
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, Scalar slope);
Tensor abs_val(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor logsigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor pow_const(const Tensor& a, Scalar p); // requires a >= 0
Tensor log_val(const Tensor& a);             // requires a > 0
Tensor clamp(const Tensor& a, Scalar lo, Scalar hi);

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------
// x: (..., K) collapsed to rows, w: (K, N) -> (..., N)
Tensor matmul(const Tensor& x, const Tensor& w);
// batched: (B,M,K) x (B,K,N) -> (B,M,N)
Tensor bmm(const Tensor& a, const Tensor& b);
// batched with transposed rhs: (B,M,K) x (B,N,K) -> (B,M,N)
Tensor bmm_nt(const Tensor& a, const Tensor& b);
// x: (..., C) + v: (C) broadcast over rows
Tensor add_rowvec(const Tensor& x, const Tensor& v);

// ---------------------------------------------------------------------------
// Normalization / softmax / reductions
// ---------------------------------------------------------------------------
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);
Tensor softmax_lastdim(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_rows(const Tensor& x);                 // (R,C) -> (1,C)
Tensor broadcast_rows(const Tensor& x, int rows);  // (1,C) -> (rows,C)

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------
Tensor reshape(const Tensor& x, std::vector<int> shape); // one dim may be -1
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor gather_rows(const Tensor& x, std::vector<int> idx); // axis-0 rows
// out = base with rows idx[k] replaced by rows[k]; idx entries unique
Tensor row_replace(const Tensor& base, std::vector<int> idx, const Tensor& rows);
// out[i] = map[i] < 0 ? 0 : x.flat[map[i]]
Tensor gather_flat(const Tensor& x, std::shared_ptr<std::vector<long long>> map,
                   std::vector<int> out_shape);
// whole-tensor tiling: out.flat[i] = x.flat[i % x.size()]
Tensor repeat_block(const Tensor& x, int times, std::vector<int> out_shape);

// 2-D grids stored (H, W, C)
Tensor upsample2x_nearest(const Tensor& x);
Tensor crop2d(const Tensor& x, int h, int w);   // top-left crop
Tensor pad2d(const Tensor& x, int h, int w);    // bottom/right zero pad
Tensor roll2d(const Tensor& x, int dy, int dx); // cyclic
Tensor pixel_shuffle2(const Tensor& x);         // (H,W,4k) -> (2H,2W,k)
Tensor pixel_unshuffle2(const Tensor& x);       // (H,W,C)  -> (H/2,W/2,4C)

// conv2d over (H,W,Cin) with kernel (KH,KW,Cin,Cout), zero padding
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// ---------------------------------------------------------------------------
// Multi-scale deformable attention
// ---------------------------------------------------------------------------
struct LevelShape {
    int h = 0;
    int w = 0;
};

// value: (N,C) flattened level-major, C = heads * head_dim
// loc:   (Q, heads, L, P, 2) sampling points, (x,y) normalized to [0,1] per level
// att:   (Q, heads, L, P) weights (softmaxed by the caller)
// Each (q, head, level, point) bilinear sample counts one attention site.
Tensor ms_deform_attn(const Tensor& value, const std::vector<LevelShape>& shapes,
                      const Tensor& loc, const Tensor& att, int heads,
                      long long* site_counter = nullptr);

// ---------------------------------------------------------------------------
// Loss building blocks
// ---------------------------------------------------------------------------
// Per-element sigmoid focal loss against constant targets in [0,1].
Tensor sigmoid_focal(const Tensor& logits, const Tensor& targets, Scalar gamma, Scalar alpha);
Tensor l1_loss(const Tensor& a, const Tensor& b); // mean |a-b|
// logit of clamped input, elementwise
Tensor inverse_sigmoid(const Tensor& x, Scalar eps = 1e-6);

} // namespace sdconet
