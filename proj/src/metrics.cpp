#include "sdconet/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sdconet {

namespace {

constexpr Scalar kPsnrCap = 99.0;
constexpr int kRecallPoints = 101;

struct ClassEval {
    std::vector<const PredRecord*> preds; // score-descending
    std::vector<const GtRecord*> gts;
};

// AP for one class at one IoU threshold. Ground truths whose bucket is
// outside `bucket` are ignore-entries: predictions matching them drop out of
// the PR curve instead of counting as false positives. bucket < 0 keeps all.
// Returns -1 when no ground truth survives the bucket filter.
Scalar ap_single(const ClassEval& ce, Scalar thr, int bucket) {
    std::vector<bool> ignored(ce.gts.size(), false);
    int npos = 0;
    for (size_t g = 0; g < ce.gts.size(); ++g) {
        const GtRecord* gt = ce.gts[g];
        const bool in_bucket =
            bucket < 0 || static_cast<int>(size_bucket(gt->w * gt->h)) == bucket;
        ignored[g] = !in_bucket;
        if (in_bucket) ++npos;
    }
    if (npos == 0) return -1.0;

    std::vector<bool> taken(ce.gts.size(), false);
    std::vector<int> flags; // 1 = TP, 0 = FP; ignored predictions skipped
    flags.reserve(ce.preds.size());
    for (const PredRecord* p : ce.preds) {
        int best = -1, best_ign = -1;
        Scalar best_iou = thr, best_ign_iou = thr;
        for (size_t g = 0; g < ce.gts.size(); ++g) {
            if (taken[g]) continue;
            const GtRecord* gt = ce.gts[g];
            if (gt->image_id != p->image_id) continue;
            Scalar v = iou_xywh(p->x, p->y, p->w, p->h, gt->x, gt->y, gt->w, gt->h);
            if (ignored[g]) {
                if (v >= best_ign_iou) {
                    best_ign_iou = v;
                    best_ign = static_cast<int>(g);
                }
            } else if (v >= best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            taken[static_cast<size_t>(best)] = true;
            flags.push_back(1);
        } else if (best_ign < 0) {
            flags.push_back(0);
        } // matches to ignored ground truth drop out of the curve
    }

    std::vector<std::pair<Scalar, Scalar>> curve; // (recall, precision)
    int tp = 0, fp = 0;
    for (int f : flags) {
        f ? ++tp : ++fp;
        curve.push_back({static_cast<Scalar>(tp) / npos,
                         static_cast<Scalar>(tp) / (tp + fp)});
    }
    // 101-point interpolation: best precision among points at recall >= level
    Scalar total = 0;
    for (int r = 0; r < kRecallPoints; ++r) {
        const Scalar level = static_cast<Scalar>(r) / (kRecallPoints - 1);
        Scalar best_p = 0;
        for (const auto& [rec, prec] : curve)
            if (rec + 1e-12 >= level) best_p = std::max(best_p, prec);
        total += best_p;
    }
    return total / kRecallPoints;
}

Scalar mean_defined(const std::vector<Scalar>& vals) {
    Scalar sum = 0;
    int n = 0;
    for (Scalar v : vals)
        if (v >= 0) {
            sum += v;
            ++n;
        }
    return n ? sum / n : 0.0;
}

double encoder_block_mac(double tokens, double c, int window, int mlp_ratio) {
    const double t = static_cast<double>(window) * window;
    return tokens * (4.0 * c * c + 2.0 * t * c + 2.0 * mlp_ratio * c * c);
}

} // namespace

std::vector<PredRecord> parse_predictions(const nlohmann::json& arr) {
    if (!arr.is_array()) throw IoError("predictions: expected a JSON array");
    std::vector<PredRecord> out;
    out.reserve(arr.size());
    for (size_t i = 0; i < arr.size(); ++i) {
        const nlohmann::json& r = arr[i];
        const std::string at = "predictions[" + std::to_string(i) + "]: ";
        if (!r.is_object()) throw IoError(at + "expected an object");
        for (const char* key : {"image_id", "class_id", "score", "bbox"})
            if (!r.contains(key)) throw IoError(at + "missing field '" + key + "'");
        if (!r["bbox"].is_array() || r["bbox"].size() != 4)
            throw IoError(at + "bbox must hold 4 numbers");
        PredRecord p;
        p.image_id = r["image_id"].get<long long>();
        p.class_id = r["class_id"].get<int>();
        p.score = r["score"].get<Scalar>();
        p.x = r["bbox"][0].get<Scalar>();
        p.y = r["bbox"][1].get<Scalar>();
        p.w = r["bbox"][2].get<Scalar>();
        p.h = r["bbox"][3].get<Scalar>();
        if (!std::isfinite(p.score) || p.w < 0 || p.h < 0)
            throw IoError(at + "non-finite score or negative extent");
        out.push_back(p);
    }
    return out;
}

Scalar iou_xywh(Scalar ax, Scalar ay, Scalar aw, Scalar ah, Scalar bx, Scalar by, Scalar bw,
                Scalar bh) {
    check_contract(aw > 0 && ah > 0 && bw > 0 && bh > 0, "iou: degenerate box");
    const Scalar ix = std::max(0.0, std::min(ax + aw, bx + bw) - std::max(ax, bx));
    const Scalar iy = std::max(0.0, std::min(ay + ah, by + bh) - std::max(ay, by));
    const Scalar inter = ix * iy;
    return inter / (aw * ah + bw * bh - inter);
}

EvalReport compute_ap(const std::vector<PredRecord>& preds, const std::vector<GtRecord>& gts) {
    std::map<int, ClassEval> classes;
    for (const GtRecord& g : gts) {
        check_contract(g.w > 0 && g.h > 0, "compute_ap: ground truth with empty extent");
        classes[g.class_id].gts.push_back(&g);
    }
    for (const PredRecord& p : preds) {
        auto it = classes.find(p.class_id);
        if (it != classes.end()) it->second.preds.push_back(&p);
    }
    for (auto& [cid, ce] : classes)
        std::stable_sort(ce.preds.begin(), ce.preds.end(),
                         [](const PredRecord* a, const PredRecord* b) { return a->score > b->score; });

    std::vector<Scalar> thresholds;
    for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);

    EvalReport rep;
    std::vector<Scalar> all_means, t50, t75, small_means, med_means, large_means;
    for (auto& [cid, ce] : classes) {
        std::vector<Scalar> per_thr, per_small, per_med, per_large;
        for (Scalar t : thresholds) {
            per_thr.push_back(ap_single(ce, t, -1));
            per_small.push_back(ap_single(ce, t, static_cast<int>(SizeBucket::small)));
            per_med.push_back(ap_single(ce, t, static_cast<int>(SizeBucket::medium)));
            per_large.push_back(ap_single(ce, t, static_cast<int>(SizeBucket::large)));
        }
        Scalar cls_ap = mean_defined(per_thr);
        rep.per_class_ap[cid] = cls_ap;
        all_means.push_back(cls_ap);
        t50.push_back(per_thr[0]);
        t75.push_back(per_thr[5]);
        if (per_small[0] >= 0) small_means.push_back(mean_defined(per_small));
        if (per_med[0] >= 0) med_means.push_back(mean_defined(per_med));
        if (per_large[0] >= 0) large_means.push_back(mean_defined(per_large));
    }
    rep.ap = mean_defined(all_means);
    rep.ap50 = mean_defined(t50);
    rep.ap75 = mean_defined(t75);
    rep.ap_s = mean_defined(small_means);
    rep.ap_m = mean_defined(med_means);
    rep.ap_l = mean_defined(large_means);
    return rep;
}

Scalar psnr_db(const Image& a, const Image& b) {
    check_shape(a.h == b.h && a.w == b.w && a.c == b.c, "psnr: image dims differ");
    check_contract(a.size() > 0, "psnr: empty image");
    Scalar mse = 0;
    for (size_t i = 0; i < a.pix.size(); ++i) {
        const Scalar d = a.pix[i] - b.pix[i];
        mse += d * d;
    }
    mse /= static_cast<Scalar>(a.pix.size());
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

Scalar median_duration_ms(const std::function<void()>& fn, int warmups, int runs) {
    check_config(runs >= 1, "median_duration_ms: runs must be >= 1");
    for (int i = 0; i < warmups; ++i) fn();
    std::vector<Scalar> ms(static_cast<size_t>(runs));
    for (int i = 0; i < runs; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        auto t1 = std::chrono::steady_clock::now();
        ms[static_cast<size_t>(i)] =
            std::chrono::duration<Scalar, std::milli>(t1 - t0).count();
    }
    std::sort(ms.begin(), ms.end());
    return ms[ms.size() / 2];
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [cid, v] : per_class_ap) per[std::to_string(cid)] = v;
    return {{"ap", ap},       {"ap50", ap50}, {"ap75", ap75},
            {"ap_s", ap_s},   {"ap_m", ap_m}, {"ap_l", ap_l},
            {"psnr_db", psnr_db}, {"fps", fps},   {"flops_g", flops_g},
            {"per_class_ap", per}};
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "metric      value\n";
    os << "AP          " << ap << "\n";
    os << "AP50        " << ap50 << "\n";
    os << "AP75        " << ap75 << "\n";
    os << "AP_s        " << ap_s << "\n";
    os << "AP_m        " << ap_m << "\n";
    os << "AP_l        " << ap_l << "\n";
    os << "PSNR (dB)   " << psnr_db << "\n";
    os << "FPS         " << fps << "\n";
    os << "FLOPs (G)   " << flops_g << "\n";
    for (const auto& [cid, v] : per_class_ap) os << "AP[class " << cid << "]  " << v << "\n";
    return os.str();
}

FlopsTable flops_report(const FlopsInput& in) {
    in.encoder.validate();
    in.schedule.validate();
    const int levels = static_cast<int>(in.schedule.beta.size());
    in.det_attn.validate(levels);
    check_config(static_cast<int>(in.encoder.stage_channels.size()) == levels,
                 "flops: one pyramid level per encoder stage expected");

    std::vector<int> tokens = in.level_tokens;
    if (tokens.empty()) {
        for (int l = 0; l < levels; ++l)
            tokens.push_back(pyramid_dim(in.input_h, l) * pyramid_dim(in.input_w, l));
    }
    check_config(static_cast<int>(tokens.size()) == levels, "flops: level token count mismatch");

    // encoder: patch embed + windowed blocks + merges
    double enc = static_cast<double>(in.input_h / in.encoder.patch_size) *
                 (in.input_w / in.encoder.patch_size) * in.encoder.patch_size *
                 in.encoder.patch_size * 3.0 * in.encoder.stage_channels[0];
    for (int s = 0; s < levels; ++s) {
        const double n = tokens[static_cast<size_t>(s)];
        const double c = in.encoder.stage_channels[static_cast<size_t>(s)];
        enc += in.encoder.stage_depths[static_cast<size_t>(s)] *
               encoder_block_mac(n, c, in.encoder.window_size, in.encoder.mlp_ratio);
        if (s + 1 < levels)
            enc += tokens[static_cast<size_t>(s + 1)] * (4.0 * c) * (2.0 * c);
    }

    // sr decoder: expand/fuse/blocks per level + reconstruction convs
    double sr = 0;
    for (int l = levels - 1; l >= 1; --l) {
        const double c_out = in.encoder.stage_channels[static_cast<size_t>(l - 1)];
        const double n_out = tokens[static_cast<size_t>(l - 1)];
        sr += n_out * (2.0 * c_out) * c_out * 2.0; // expand(C->2C at half count) + fuse(2C->C)
        sr += in.sr_blocks *
              encoder_block_mac(n_out, c_out, in.encoder.window_size, in.encoder.mlp_ratio);
    }
    const double c1 = in.encoder.stage_channels[0];
    const double hw = static_cast<double>(in.input_h) * in.input_w;
    sr += hw * 4.0 * (2.0 * (c1 / 2.0)) * (c1 / 2.0) / 2.0; // two plain expands
    sr += hw * 9.0 * (c1 / 4.0) * 48.0;                     // conv1 at input dims
    sr += 4.0 * hw * 9.0 * 12.0 * 3.0;                      // conv2 at 2x dims

    const double d = in.det_attn.d_model;
    const double heads = in.det_attn.heads;
    const double pts = in.det_attn.points;
    const double site_mac = 5.0 * (d / heads); // 4 bilinear taps + weighting per channel
    const int layers = static_cast<int>(in.schedule.gamma.size());
    double n_total = 0;
    for (int t : tokens) n_total += t;

    AttentionBudget sites =
        attention_site_count(in.schedule, tokens, in.det_attn.heads,
                             levels * in.det_attn.points);

    FlopsTable table;
    const char* names[4] = {"no-filter", "layer-only", "scale-only", "joint"};
    const long long site_totals[4] = {sites.sites_baseline, sites.sites_gamma_only,
                                      sites.sites_beta_only, sites.sites_joint};
    for (int v = 0; v < 4; ++v) {
        FlopsRow row;
        row.name = names[v];
        row.encoder_mac = enc;
        row.sr_mac = sr;
        row.attention_mac = static_cast<double>(site_totals[v]) * site_mac;

        double lin = 0;
        for (int layer = 0; layer < layers; ++layer) {
            lin += n_total * d * d; // value projection runs over every token
            for (int l = 0; l < levels; ++l) {
                const Scalar beta = (v == 2 || v == 3) ? in.schedule.beta[static_cast<size_t>(l)] : 1.0;
                const Scalar gamma =
                    (v == 1 || v == 3) ? in.schedule.gamma[static_cast<size_t>(layer)] : 1.0;
                const double k = budget(tokens[static_cast<size_t>(l)], beta, gamma);
                lin += k * (d * (heads * levels * pts * 3.0) + d * d +
                            2.0 * d * in.det_attn.ffn_dim);
            }
        }
        row.det_linear_mac = lin;
        table.rows.push_back(row);
    }
    return table;
}

nlohmann::json FlopsTable::to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const FlopsRow& r : rows)
        out.push_back({{"name", r.name},
                       {"encoder_mac", r.encoder_mac},
                       {"sr_mac", r.sr_mac},
                       {"det_linear_mac", r.det_linear_mac},
                       {"attention_mac", r.attention_mac},
                       {"total_mac", r.total()}});
    return out;
}

std::string FlopsTable::to_text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(0);
    os << "variant      encoder      sr           det-linear   attention    total (MAC)\n";
    for (const FlopsRow& r : rows) {
        os << r.name;
        for (size_t i = r.name.size(); i < 13; ++i) os << ' ';
        for (double v : {r.encoder_mac, r.sr_mac, r.det_linear_mac, r.attention_mac, r.total()}) {
            std::string s = std::to_string(static_cast<long long>(v));
            os << s;
            for (size_t i = s.size(); i < 13; ++i) os << ' ';
        }
        os << "\n";
    }
    return os.str();
}

} // namespace sdconet
