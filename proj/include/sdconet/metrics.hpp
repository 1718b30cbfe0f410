#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdconet/detector.hpp"
#include "sdconet/encoder.hpp"
#include "sdconet/image.hpp"
#include "sdconet/query_filter.hpp"

namespace sdconet {

struct PredRecord {
    long long image_id = 0;
    int class_id = 0;
    Scalar score = 0;
    Scalar x = 0, y = 0, w = 0, h = 0; // pixels
};

struct GtRecord {
    long long image_id = 0;
    int class_id = 0;
    Scalar x = 0, y = 0, w = 0, h = 0; // pixels
};

// Parses the prediction JSON array; malformed records raise IoError.
std::vector<PredRecord> parse_predictions(const nlohmann::json& arr);

// Plain IoU of two xywh pixel boxes with positive extents.
Scalar iou_xywh(Scalar ax, Scalar ay, Scalar aw, Scalar ah, Scalar bx, Scalar by, Scalar bw,
                Scalar bh);

struct EvalReport {
    Scalar ap = 0, ap50 = 0, ap75 = 0, ap_s = 0, ap_m = 0, ap_l = 0;
    Scalar psnr_db = 0, fps = 0, flops_g = 0;
    std::map<int, Scalar> per_class_ap;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

// 101-point interpolated AP over IoU thresholds 0.50:0.05:0.95 with greedy
// score-ordered one-to-one matching. Classes without ground truth are
// excluded from the mean; size buckets use the ignore convention.
EvalReport compute_ap(const std::vector<PredRecord>& preds, const std::vector<GtRecord>& gts);

// 10*log10(1/MSE), capped at 99 dB; identical images return the cap.
Scalar psnr_db(const Image& a, const Image& b);

// Median wall time of fn over `runs` calls after `warmups` discarded calls.
Scalar median_duration_ms(const std::function<void()>& fn, int warmups = 5, int runs = 50);

struct FlopsInput {
    int input_h = 128, input_w = 128; // network input (LR) dims
    EncoderConfig encoder;
    DeformableConfig det_attn;
    FilterSchedule schedule;
    int sr_blocks = 1;
    std::vector<int> level_tokens; // empty: derived from encoder dims
};

struct FlopsRow {
    std::string name;
    double encoder_mac = 0, sr_mac = 0, det_linear_mac = 0, attention_mac = 0;
    double total() const { return encoder_mac + sr_mac + det_linear_mac + attention_mac; }
};

// Rows: no-filter, layer-only, scale-only, joint.
struct FlopsTable {
    std::vector<FlopsRow> rows;
    nlohmann::json to_json() const;
    std::string to_text() const;
};

// Analytic multiply-accumulate counts; the attention term scales exactly with
// the filtered site counts.
FlopsTable flops_report(const FlopsInput& in);

} // namespace sdconet
