#include "sdconet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sdconet {

namespace {

constexpr Scalar kFocalPriorBias = -4.59511985013459; // -log(99): sigmoid ~ 0.01

// Replicates (Q,4) box values to a constant (Q, levels, 4) reference tensor.
Tensor replicate_refs(const std::vector<Scalar>& boxes, int q, int levels) {
    std::vector<Scalar> out;
    out.reserve(static_cast<size_t>(q) * levels * 4);
    for (int i = 0; i < q; ++i)
        for (int l = 0; l < levels; ++l)
            for (int c = 0; c < 4; ++c) out.push_back(boxes[static_cast<size_t>(i) * 4 + c]);
    return Tensor::from(std::move(out), {q, levels, 4});
}

void check_targets(const std::vector<DetTarget>& gts, int num_classes) {
    for (const DetTarget& g : gts) {
        check_contract(g.w > 0 && g.h > 0, "detector: ground-truth box with empty extent");
        check_contract(g.class_id >= 0 && g.class_id < num_classes,
                       "detector: class_id outside [0, num_classes)");
    }
}

} // namespace

SizeBucket size_bucket(Scalar area_px) {
    check_contract(area_px > 0, "size_bucket: non-positive area");
    if (area_px < 32.0 * 32.0) return SizeBucket::small;
    if (area_px < 96.0 * 96.0) return SizeBucket::medium;
    return SizeBucket::large;
}

DetTarget make_target(const GTBox& box, int img_h, int img_w) {
    check_config(img_h > 0 && img_w > 0, "make_target: empty image");
    check_contract(box.w > 0 && box.h > 0, "make_target: box with empty extent");
    Scalar x1 = std::max(0.0, box.x), y1 = std::max(0.0, box.y);
    Scalar x2 = std::min(static_cast<Scalar>(img_w), box.x + box.w);
    Scalar y2 = std::min(static_cast<Scalar>(img_h), box.y + box.h);
    check_contract(x2 > x1 && y2 > y1, "make_target: box entirely outside the image");

    DetTarget t;
    t.cx = 0.5 * (x1 + x2) / img_w;
    t.cy = 0.5 * (y1 + y2) / img_h;
    t.w = (x2 - x1) / img_w;
    t.h = (y2 - y1) / img_h;
    t.class_id = box.class_id;
    t.bucket = size_bucket(box.w * box.h);
    return t;
}

Scalar giou_xyxy(Scalar ax1, Scalar ay1, Scalar ax2, Scalar ay2, Scalar bx1, Scalar by1,
                 Scalar bx2, Scalar by2) {
    check_contract(ax2 > ax1 && ay2 > ay1 && bx2 > bx1 && by2 > by1,
                   "giou: degenerate box");
    const Scalar iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const Scalar ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const Scalar inter = iw * ih;
    const Scalar uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    const Scalar enc = (std::max(ax2, bx2) - std::min(ax1, bx1)) *
                       (std::max(ay2, by2) - std::min(ay1, by1));
    return inter / uni - (enc - uni) / enc;
}

Tensor cxcywh_to_xyxy(const Tensor& boxes) {
    check_shape(boxes.rank() == 2 && boxes.dim(1) == 4, "boxes must be (M,4)");
    Tensor cx = slice(boxes, 1, 0, 1), cy = slice(boxes, 1, 1, 1);
    Tensor w = slice(boxes, 1, 2, 1), h = slice(boxes, 1, 3, 1);
    return concat({add_scaled(cx, w, -0.5), add_scaled(cy, h, -0.5), add_scaled(cx, w, 0.5),
                   add_scaled(cy, h, 0.5)},
                  1);
}

Tensor giou_pairs(const Tensor& a, const Tensor& b) {
    check_shape(a.rank() == 2 && a.dim(1) == 4 && b.shape() == a.shape(),
                "giou_pairs: need matching (M,4) xyxy tensors");
    const int m = a.dim(0);
    for (int i = 0; i < m; ++i) {
        const Scalar* av = a.data() + static_cast<size_t>(i) * 4;
        const Scalar* bv = b.data() + static_cast<size_t>(i) * 4;
        check_contract(av[2] > av[0] && av[3] > av[1] && bv[2] > bv[0] && bv[3] > bv[1],
                       "giou_pairs: degenerate box");
    }
    Tensor ax1 = slice(a, 1, 0, 1), ay1 = slice(a, 1, 1, 1), ax2 = slice(a, 1, 2, 1),
           ay2 = slice(a, 1, 3, 1);
    Tensor bx1 = slice(b, 1, 0, 1), by1 = slice(b, 1, 1, 1), bx2 = slice(b, 1, 2, 1),
           by2 = slice(b, 1, 3, 1);

    Tensor iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)));
    Tensor ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)));
    Tensor inter = mul(iw, ih);
    Tensor area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
    Tensor area_b = mul(sub(bx2, bx1), sub(by2, by1));
    Tensor uni = sub(add(area_a, area_b), inter);
    Tensor enc = mul(sub(maximum(ax2, bx2), minimum(ax1, bx1)),
                     sub(maximum(ay2, by2), minimum(ay1, by1)));
    return sub(div_op(inter, uni), div_op(sub(enc, uni), enc));
}

std::vector<int> solve_assignment(const std::vector<Scalar>& cost, int rows, int cols) {
    check_contract(rows >= 0 && cols >= 0 && rows <= cols,
                   "assignment: more rows than columns");
    check_shape(cost.size() == static_cast<size_t>(rows) * cols,
                "assignment: cost size mismatch");
    if (rows == 0) return {};

    const Scalar inf = std::numeric_limits<Scalar>::infinity();
    std::vector<Scalar> u(static_cast<size_t>(rows) + 1, 0), v(static_cast<size_t>(cols) + 1, 0);
    std::vector<int> p(static_cast<size_t>(cols) + 1, 0), way(static_cast<size_t>(cols) + 1, 0);
    for (int i = 1; i <= rows; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<Scalar> minv(static_cast<size_t>(cols) + 1, inf);
        std::vector<bool> used(static_cast<size_t>(cols) + 1, false);
        do {
            used[static_cast<size_t>(j0)] = true;
            int i0 = p[static_cast<size_t>(j0)], j1 = -1;
            Scalar delta = inf;
            for (int j = 1; j <= cols; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                Scalar cur = cost[static_cast<size_t>(i0 - 1) * cols + (j - 1)] -
                             u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= cols; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> out(static_cast<size_t>(rows), -1);
    for (int j = 1; j <= cols; ++j)
        if (p[static_cast<size_t>(j)] != 0) out[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
    return out;
}

std::vector<int> hungarian_match(const Tensor& logits, const Tensor& boxes,
                                 const std::vector<DetTarget>& gts, const MatchWeights& mw) {
    check_shape(logits.rank() == 2 && boxes.rank() == 2 && boxes.dim(1) == 4 &&
                    logits.dim(0) == boxes.dim(0),
                "hungarian_match: logits (Q,C) and boxes (Q,4) required");
    const int q = logits.dim(0), c = logits.dim(1);
    const int g = static_cast<int>(gts.size());
    check_contract(g <= q, "hungarian_match: more ground-truth boxes than queries");
    check_targets(gts, c);
    if (g == 0) return {};

    const Scalar eps = 1e-8;
    std::vector<Scalar> cost(static_cast<size_t>(g) * q, 0.0);
    for (int gi = 0; gi < g; ++gi) {
        const DetTarget& t = gts[static_cast<size_t>(gi)];
        const Scalar gx1 = t.cx - 0.5 * t.w, gy1 = t.cy - 0.5 * t.h;
        const Scalar gx2 = t.cx + 0.5 * t.w, gy2 = t.cy + 0.5 * t.h;
        for (int qi = 0; qi < q; ++qi) {
            const Scalar* bp = boxes.data() + static_cast<size_t>(qi) * 4;
            const Scalar p =
                1.0 / (1.0 + std::exp(-logits.data()[static_cast<size_t>(qi) * c + t.class_id]));
            const Scalar pos = mw.focal_alpha * std::pow(1.0 - p, mw.focal_gamma) * -std::log(p + eps);
            const Scalar neg =
                (1.0 - mw.focal_alpha) * std::pow(p, mw.focal_gamma) * -std::log(1.0 - p + eps);
            Scalar l1 = 0;
            const Scalar pred[4] = {bp[0], bp[1], bp[2], bp[3]};
            const Scalar want[4] = {t.cx, t.cy, t.w, t.h};
            for (int k = 0; k < 4; ++k) l1 += std::fabs(pred[k] - want[k]);
            const Scalar gv = giou_xyxy(pred[0] - 0.5 * pred[2], pred[1] - 0.5 * pred[3],
                                        pred[0] + 0.5 * pred[2], pred[1] + 0.5 * pred[3], gx1, gy1,
                                        gx2, gy2);
            cost[static_cast<size_t>(gi) * q + qi] =
                mw.cls * (pos - neg) + mw.bbox * l1 + mw.giou * (1.0 - gv);
        }
    }
    return solve_assignment(cost, g, q);
}

DetLosses detection_losses(const Tensor& logits, const Tensor& boxes,
                           const std::vector<DetTarget>& gts, const std::vector<int>& assignment,
                           Scalar focal_gamma, Scalar focal_alpha) {
    const int q = logits.dim(0), c = logits.dim(1);
    check_shape(boxes.dim(0) == q && boxes.dim(1) == 4, "detection_losses: boxes must be (Q,4)");
    check_contract(assignment.size() == gts.size(), "detection_losses: assignment size mismatch");
    check_targets(gts, c);

    std::vector<Scalar> onehot(static_cast<size_t>(q) * c, 0.0);
    for (size_t gi = 0; gi < gts.size(); ++gi) {
        const int qi = assignment[gi];
        check_contract(qi >= 0 && qi < q, "detection_losses: matched query out of range");
        onehot[static_cast<size_t>(qi) * c + gts[gi].class_id] = 1.0;
    }
    DetLosses out;
    out.cls = mean_all(
        sigmoid_focal(logits, Tensor::from(std::move(onehot), {q, c}), focal_gamma, focal_alpha));
    if (gts.empty()) {
        out.bbox = Tensor::scalar(0.0);
        out.giou = Tensor::scalar(0.0);
        return out;
    }
    std::vector<Scalar> gtv;
    for (const DetTarget& t : gts) {
        gtv.push_back(t.cx);
        gtv.push_back(t.cy);
        gtv.push_back(t.w);
        gtv.push_back(t.h);
    }
    Tensor gt_boxes = Tensor::from(std::move(gtv), {static_cast<int>(gts.size()), 4});
    Tensor matched = gather_rows(boxes, assignment);
    out.bbox = l1_loss(matched, gt_boxes);
    Tensor gv = giou_pairs(cxcywh_to_xyxy(matched), cxcywh_to_xyxy(gt_boxes));
    out.giou = mean_all(scalar_add(neg(gv), 1.0));
    return out;
}

void LossWeights::validate() const {
    check_config(cls >= 0 && bbox >= 0 && giou >= 0 && sa >= 0 && sr >= 0,
                 "loss weights must be non-negative");
}

Tensor stage_loss(const LossSet& losses, const LossWeights& weights, int stage) {
    weights.validate();
    check_config(stage == 1 || stage == 2, "stage must be 1 or 2");
    Tensor total = add(add(scalar_mul(losses.cls, weights.cls), scalar_mul(losses.bbox, weights.bbox)),
                       add(scalar_mul(losses.giou, weights.giou), scalar_mul(losses.sa, weights.sa)));
    if (stage == 2) total = add_scaled(total, losses.sr, weights.sr);
    return total;
}

void DetectorConfig::validate() const {
    check_config(num_classes >= 1, "detector: num_classes must be >= 1");
    check_config(num_queries >= 1, "detector: num_queries must be >= 1");
    check_config(num_layers >= 1, "detector: num_layers must be >= 1");
    check_config(attn.d_model % 8 == 0, "detector: d_model must be a multiple of 8");
}

QuerySelfAttention::QuerySelfAttention(int dim_, int heads_, Rng& rng)
    : dim(dim_), heads(heads_), wq(dim_, dim_, rng), wk(dim_, dim_, rng), wv(dim_, dim_, rng),
      proj(dim_, dim_, rng) {
    check_config(dim_ % heads_ == 0, "self-attention: heads must divide dim");
}

Tensor QuerySelfAttention::forward(const Tensor& content, const Tensor& qpos) const {
    const int n = content.dim(0), dh = dim / heads;
    Tensor withpos = add(content, qpos);
    auto split = [&](const Tensor& t) {
        return permute(reshape(t, {n, heads, dh}), {1, 0, 2}); // (heads, n, dh)
    };
    Tensor qh = split(wq.forward(withpos));
    Tensor kh = split(wk.forward(withpos));
    Tensor vh = split(wv.forward(content));
    Tensor scores = scalar_mul(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<Scalar>(dh)));
    Tensor att = softmax_lastdim(scores);
    Tensor mixed = reshape(permute(bmm(att, vh), {1, 0, 2}), {n, dim});
    return proj.forward(mixed);
}

void QuerySelfAttention::collect(const std::string& prefix, ParamList& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    proj.collect(prefix + ".proj", out);
}

DetDecoderLayer::DetDecoderLayer(const DeformableConfig& cfg, int levels, Rng& rng)
    : self_attn(cfg.d_model, cfg.heads, rng), cross(cfg, levels, rng), ln_self(cfg.d_model),
      ln_cross(cfg.d_model), ln_ffn(cfg.d_model), ffn1(cfg.d_model, cfg.ffn_dim, rng),
      ffn2(cfg.ffn_dim, cfg.d_model, rng) {}

Tensor DetDecoderLayer::forward(const Tensor& content, const Tensor& qpos, const Tensor& memory,
                                const std::vector<LevelShape>& shapes, const Tensor& refs) const {
    Tensor h = ln_self.forward(add(content, self_attn.forward(content, qpos)));
    Tensor ca = cross.forward(add(h, qpos), memory, shapes, refs);
    Tensor h2 = ln_cross.forward(add(h, ca));
    return ln_ffn.forward(add(h2, ffn2.forward(relu(ffn1.forward(h2)))));
}

void DetDecoderLayer::collect(const std::string& prefix, ParamList& out) const {
    self_attn.collect(prefix + ".self", out);
    cross.collect(prefix + ".cross", out);
    ln_self.collect(prefix + ".ln_self", out);
    ln_cross.collect(prefix + ".ln_cross", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
}

DetectionDecoder::DetectionDecoder(const DetectorConfig& cfg_, int levels_, Rng& rng)
    : cfg(cfg_), levels(levels_), enc_proj(cfg_.attn.d_model, cfg_.attn.d_model, rng),
      enc_norm(cfg_.attn.d_model), enc_class(cfg_.attn.d_model, cfg_.num_classes, rng),
      enc_bbox(cfg_.attn.d_model, cfg_.attn.d_model, 4, rng),
      query_content(cfg_.num_queries, cfg_.attn.d_model, rng),
      ref_pos(cfg_.attn.d_model, cfg_.attn.d_model, cfg_.attn.d_model, rng),
      class_head(cfg_.attn.d_model, cfg_.num_classes, rng),
      bbox_head(cfg_.attn.d_model, cfg_.attn.d_model, 4, rng) {
    cfg_.validate();
    cfg_.attn.validate(levels_);
    for (int i = 0; i < cfg_.num_layers; ++i) layers.emplace_back(cfg_.attn, levels_, rng);
    // rare-positive prior: class heads start near p = 0.01
    std::fill(class_head.b.values().begin(), class_head.b.values().end(), kFocalPriorBias);
    std::fill(enc_class.b.values().begin(), enc_class.b.values().end(), kFocalPriorBias);
}

DetectionOutput DetectionDecoder::decode(const Tensor& memory, const std::vector<LevelShape>& shapes,
                                         std::vector<std::string>* warnings) const {
    check_shape(memory.rank() == 2 && memory.dim(1) == cfg.attn.d_model,
                "decode: memory must be (N, d_model)");
    check_shape(static_cast<int>(shapes.size()) == levels, "decode: level count mismatch");
    long long want_n = 0;
    for (const LevelShape& s : shapes) want_n += static_cast<long long>(s.h) * s.w;
    const int n = memory.dim(0);
    check_shape(want_n == n, "decode: token count does not match level shapes");

    int q = cfg.num_queries;
    if (q > n) {
        q = n;
        if (warnings)
            warnings->push_back("detector: num_queries exceeds token count, clamped to " +
                                std::to_string(n));
    }

    DetectionOutput out;
    Tensor mem2 = enc_norm.forward(enc_proj.forward(memory));
    out.enc_logits = enc_class.forward(mem2);

    // per-token anchor: own cell center, extent 0.05 * 2^level
    std::vector<Scalar> anchors;
    anchors.reserve(static_cast<size_t>(n) * 4);
    for (size_t l = 0; l < shapes.size(); ++l) {
        const Scalar wl = 0.05 * std::pow(2.0, static_cast<Scalar>(l));
        for (int i = 0; i < shapes[l].h; ++i)
            for (int j = 0; j < shapes[l].w; ++j) {
                anchors.push_back((j + 0.5) / shapes[l].w);
                anchors.push_back((i + 0.5) / shapes[l].h);
                anchors.push_back(wl);
                anchors.push_back(wl);
            }
    }
    Tensor proposal = inverse_sigmoid(Tensor::from(std::move(anchors), {n, 4}));
    out.enc_boxes = sigmoid(add(enc_bbox.forward(mem2), proposal));

    // top-q tokens by strongest class response seed the references
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<Scalar> peak(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        const Scalar* row = out.enc_logits.data() + static_cast<size_t>(i) * cfg.num_classes;
        peak[static_cast<size_t>(i)] = *std::max_element(row, row + cfg.num_classes);
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (peak[static_cast<size_t>(a)] != peak[static_cast<size_t>(b)])
            return peak[static_cast<size_t>(a)] > peak[static_cast<size_t>(b)];
        return a < b;
    });
    order.resize(static_cast<size_t>(q));

    std::vector<Scalar> refs(static_cast<size_t>(q) * 4);
    for (int i = 0; i < q; ++i)
        for (int c = 0; c < 4; ++c)
            refs[static_cast<size_t>(i) * 4 + c] =
                out.enc_boxes.data()[static_cast<size_t>(order[static_cast<size_t>(i)]) * 4 + c];

    std::vector<int> head_rows(static_cast<size_t>(q));
    std::iota(head_rows.begin(), head_rows.end(), 0);
    Tensor content = gather_rows(query_content.all(), head_rows);

    for (size_t k = 0; k < layers.size(); ++k) {
        Tensor qpos = ref_pos.forward(sine_box_embedding(refs, q, cfg.attn.d_model));
        Tensor level_refs = replicate_refs(refs, q, levels);
        content = layers[k].forward(content, qpos, memory, shapes, level_refs);
        Tensor ref_t = Tensor::from(std::vector<Scalar>(refs), {q, 4});
        Tensor boxes_k = sigmoid(add(bbox_head.forward(content), inverse_sigmoid(ref_t)));
        Tensor logits_k = class_head.forward(content);
        if (k + 1 < layers.size()) {
            out.aux_logits.push_back(logits_k);
            out.aux_boxes.push_back(boxes_k);
            refs.assign(boxes_k.data(), boxes_k.data() + boxes_k.size());
        } else {
            out.logits = logits_k;
            out.boxes = boxes_k;
        }
    }
    return out;
}

void DetectionDecoder::collect(const std::string& prefix, ParamList& out) const {
    enc_proj.collect(prefix + ".enc_proj", out);
    enc_norm.collect(prefix + ".enc_norm", out);
    enc_class.collect(prefix + ".enc_class", out);
    enc_bbox.collect(prefix + ".enc_bbox", out);
    query_content.collect(prefix + ".query", out);
    ref_pos.collect(prefix + ".ref_pos", out);
    for (size_t i = 0; i < layers.size(); ++i)
        layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    class_head.collect(prefix + ".class_head", out);
    bbox_head.collect(prefix + ".bbox_head", out);
}

Tensor sine_box_embedding(const std::vector<Scalar>& boxes_cxcywh, int q, int d) {
    check_config(d % 8 == 0, "sine box embedding: d must be a multiple of 8");
    check_shape(boxes_cxcywh.size() == static_cast<size_t>(q) * 4,
                "sine box embedding: need q*4 coordinates");
    const int per = d / 4;
    const Scalar two_pi = 2.0 * 3.14159265358979323846;
    std::vector<Scalar> out;
    out.reserve(static_cast<size_t>(q) * d);
    for (int i = 0; i < q; ++i) {
        for (int c = 0; c < 4; ++c) {
            const Scalar coord = boxes_cxcywh[static_cast<size_t>(i) * 4 + c];
            for (int t = 0; t < per; ++t) {
                const Scalar freq = std::pow(10000.0, 2.0 * (t / 2) / static_cast<Scalar>(per));
                const Scalar v = coord * two_pi / freq;
                out.push_back(t % 2 == 0 ? std::sin(v) : std::cos(v));
            }
        }
    }
    return Tensor::from(std::move(out), {q, d});
}

nlohmann::json prediction_records(const Tensor& logits, const Tensor& boxes, long long image_id,
                                  int img_h, int img_w, Scalar min_score) {
    check_shape(logits.rank() == 2 && boxes.rank() == 2 && boxes.dim(1) == 4 &&
                    logits.dim(0) == boxes.dim(0),
                "prediction_records: logits (Q,C) and boxes (Q,4) required");
    const int q = logits.dim(0), c = logits.dim(1);
    nlohmann::json out = nlohmann::json::array();
    for (int i = 0; i < q; ++i) {
        const Scalar* row = logits.data() + static_cast<size_t>(i) * c;
        int best = 0;
        for (int k = 1; k < c; ++k)
            if (row[k] > row[best]) best = k;
        const Scalar score = 1.0 / (1.0 + std::exp(-row[best]));
        if (score < min_score) continue;
        const Scalar* b = boxes.data() + static_cast<size_t>(i) * 4;
        out.push_back({{"image_id", image_id},
                       {"class_id", best},
                       {"score", score},
                       {"bbox",
                        {(b[0] - 0.5 * b[2]) * img_w, (b[1] - 0.5 * b[3]) * img_h, b[2] * img_w,
                         b[3] * img_h}}});
    }
    return out;
}

} // namespace sdconet
