#include "sdconet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "sdconet/metrics.hpp"
#include "sdconet/serialize.hpp"

namespace sdconet {

void TrainConfig::validate(std::vector<std::string>* errs) const {
    auto demand = [errs](bool ok, const char* msg) {
        if (ok) return;
        if (errs)
            errs->emplace_back(msg);
        else
            check_config(false, msg);
    };
    demand(eta_det_1 > 0 && eta_det_2 > 0, "trainer: det learning rates must be positive");
    demand(rho > 0 && rho < 1, "trainer: rho must lie in (0, 1)");
    demand(t_det >= 1, "trainer: t_det must be at least 1");
    demand(t_det < t_tot, "trainer: t_det must be below t_tot");
    demand(batch_size >= 1, "trainer: batch_size must be positive");
    demand(steps_per_epoch >= 0, "trainer: steps_per_epoch must be non-negative");
    demand(clip_norm > 0, "trainer: clip_norm must be positive");
    demand(weight_decay >= 0, "trainer: weight_decay must be non-negative");
    demand(backbone_lr_mult > 0, "trainer: backbone_lr_mult must be positive");
    demand(keep_last >= 1, "trainer: keep_last must be at least 1");
    for (int m : milestones) {
        demand(m >= 1 && m <= t_tot, "trainer: milestone outside [1, t_tot]");
        if (!(m >= 1 && m <= t_tot)) break;
    }
    try {
        weights.validate();
    } catch (const ConfigError& e) {
        if (!errs) throw;
        std::string msg = e.what();
        const std::string prefix = "config error: ";
        if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
        errs->push_back(msg);
    }
}

Scalar TrainConfig::det_lr(int stage) const { return stage == 1 ? eta_det_1 : eta_det_2; }

Scalar TrainConfig::feat_lr(int stage) const {
    const Scalar eta = stage == 1 ? eta_feat_1 : eta_feat_2;
    return eta >= 0 ? eta : backbone_lr_mult * det_lr(stage);
}

Scalar TrainConfig::decay_at(int epoch) const {
    Scalar f = 1.0;
    for (int m : milestones)
        if (epoch >= m) f *= 0.1;
    return f;
}

nlohmann::json EpochRecord::to_json() const {
    return nlohmann::json{
        {"epoch", epoch},
        {"stage", stage},
        {"losses",
         {{"total", mean.total},
          {"cls", mean.cls},
          {"bbox", mean.bbox},
          {"giou", mean.giou},
          {"sa", mean.sa},
          {"sr", mean.sr}}},
        {"lrs", {{"feat", lr_feat}, {"det", lr_det}, {"sr", lr_sr}}},
        {"grad_norm", mean.grad_norm},
        {"ap50", ap50},
        {"psnr", psnr}};
}

namespace {

std::vector<AdamW::Group> make_groups(Model& model, const TrainConfig& cfg) {
    cfg.validate();
    ParamGroups g = model.param_groups();
    std::vector<AdamW::Group> out;
    out.push_back({"feat", g.feat, cfg.feat_lr(1), cfg.weight_decay, false});
    out.push_back({"det", g.det, cfg.det_lr(1), cfg.weight_decay, false});
    out.push_back({"sr", g.sr, cfg.rho * cfg.det_lr(1), cfg.weight_decay, true});
    return out;
}

std::string epoch_ckpt_path(const std::string& dir, int epoch) {
    return dir + "/ckpt_epoch_" + std::to_string(epoch) + ".sdcn";
}

} // namespace

DetLosses layered_detection_losses(const DetectionOutput& det, const std::vector<DetTarget>& gts,
                                   const MatchWeights& mw) {
    std::vector<std::pair<const Tensor*, const Tensor*>> outs;
    for (size_t k = 0; k < det.aux_logits.size(); ++k)
        outs.emplace_back(&det.aux_logits[k], &det.aux_boxes[k]);
    outs.emplace_back(&det.logits, &det.boxes);
    outs.emplace_back(&det.enc_logits, &det.enc_boxes);

    DetLosses total;
    for (size_t i = 0; i < outs.size(); ++i) {
        std::vector<int> assignment = hungarian_match(*outs[i].first, *outs[i].second, gts, mw);
        DetLosses one = detection_losses(*outs[i].first, *outs[i].second, gts, assignment,
                                         mw.focal_gamma, mw.focal_alpha);
        if (i == 0) {
            total = one;
        } else {
            total.cls = add(total.cls, one.cls);
            total.bbox = add(total.bbox, one.bbox);
            total.giou = add(total.giou, one.giou);
        }
    }
    return total;
}

Trainer::Trainer(Model& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), opt_(make_groups(model, cfg)) {
    set_routing(1);
    epoch_ = 0; // no epoch entered yet; checkpoints restore the last completed one
}

void Trainer::set_routing(int epoch) {
    check_contract(epoch >= 1 && epoch <= cfg_.t_tot, "trainer: epoch outside [1, t_tot]");
    epoch_ = epoch;
    stage_ = epoch <= cfg_.t_det ? 1 : 2;
    const Scalar d = cfg_.decay_at(epoch);
    AdamW::Group& feat = opt_.group("feat");
    AdamW::Group& det = opt_.group("det");
    AdamW::Group& srg = opt_.group("sr");
    det.lr = cfg_.det_lr(stage_) * d;
    feat.lr = cfg_.feat_lr(stage_) * d;
    srg.lr = cfg_.rho * det.lr;
    srg.frozen = stage_ == 1;
}

void Trainer::abort_if_not_finite(const ModelOutput& out) const {
    auto finite = [](const Tensor& t) {
        if (!t.defined()) return true;
        for (Scalar v : t.values())
            if (!std::isfinite(v)) return false;
        return true;
    };
    std::string bad;
    if (!finite(out.det.logits) || !finite(out.det.boxes) || !finite(out.det.enc_logits) ||
        !finite(out.det.enc_boxes))
        bad = "detector outputs";
    for (const Tensor& t : out.det.aux_logits)
        if (!finite(t)) bad = "detector outputs";
    for (const Tensor& t : out.det.aux_boxes)
        if (!finite(t)) bad = "detector outputs";
    for (const Tensor& t : out.saliency_maps)
        if (!finite(t)) bad = bad.empty() ? "saliency maps" : bad + ", saliency maps";
    if (!finite(out.sr_image)) bad = bad.empty() ? "sr image" : bad + ", sr image";
    if (!bad.empty()) {
        std::ostringstream msg;
        msg << "non-finite forward outputs (" << bad << ") at epoch " << epoch_ << " stage "
            << stage_;
        throw TrainAbort(msg.str());
    }
}

LossSet Trainer::batch_losses(const std::vector<const Sample*>& batch) const {
    check_contract(!batch.empty(), "trainer: empty batch");
    const bool with_sr = stage_ == 2;
    MatchWeights mw;
    mw.cls = cfg_.weights.cls;
    mw.bbox = cfg_.weights.bbox;
    mw.giou = cfg_.weights.giou;

    LossSet sum;
    for (size_t i = 0; i < batch.size(); ++i) {
        const Sample* s = batch[i];
        check_contract(s != nullptr && s->lr.h > 0 && s->hr.h == 2 * s->lr.h,
                       "trainer: sample needs an LR image at half the HR size");
        ModelOutput out = model_.forward(image_to_tensor(s->lr), with_sr, true);
        abort_if_not_finite(out);

        std::vector<DetTarget> gts;
        gts.reserve(s->boxes.size());
        for (const GTBox& b : s->boxes) gts.push_back(make_target(b, s->hr.h, s->hr.w));
        DetLosses dl = layered_detection_losses(out.det, gts, mw);

        std::vector<Tensor> targets;
        targets.reserve(out.saliency_maps.size());
        for (size_t l = 0; l < out.saliency_maps.size(); ++l)
            targets.push_back(confidence_target(s->boxes, out.shapes[l].h, out.shapes[l].w,
                                                s->hr.h, s->hr.w, model_.cfg.saliency.sigma));
        Tensor sa = saliency_loss(out.saliency_maps, targets, model_.cfg.saliency.focal_gamma,
                                  model_.cfg.saliency.focal_alpha);

        if (i == 0) {
            sum.cls = dl.cls;
            sum.bbox = dl.bbox;
            sum.giou = dl.giou;
            sum.sa = sa;
        } else {
            sum.cls = add(sum.cls, dl.cls);
            sum.bbox = add(sum.bbox, dl.bbox);
            sum.giou = add(sum.giou, dl.giou);
            sum.sa = add(sum.sa, sa);
        }
        if (with_sr) {
            Tensor one = sr_loss(out.sr_image, image_to_tensor(s->hr));
            sum.sr = i == 0 ? one : add(sum.sr, one);
        }
    }
    const Scalar inv = 1.0 / static_cast<Scalar>(batch.size());
    sum.cls = scalar_mul(sum.cls, inv);
    sum.bbox = scalar_mul(sum.bbox, inv);
    sum.giou = scalar_mul(sum.giou, inv);
    sum.sa = scalar_mul(sum.sa, inv);
    if (sum.sr.defined()) sum.sr = scalar_mul(sum.sr, inv);
    return sum;
}

StepRecord Trainer::step(const std::vector<const Sample*>& batch) {
    opt_.zero_grad();
    LossSet ls = batch_losses(batch);
    Tensor total = stage_loss(ls, cfg_.weights, stage_);

    StepRecord r;
    r.total = total.item();
    r.cls = ls.cls.item();
    r.bbox = ls.bbox.item();
    r.giou = ls.giou.item();
    r.sa = ls.sa.item();
    r.sr = ls.sr.defined() ? ls.sr.item() : 0.0;
    if (!std::isfinite(r.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch_ << " stage " << stage_ << " (cls " << r.cls
            << ", bbox " << r.bbox << ", giou " << r.giou << ", sa " << r.sa << ", sr " << r.sr
            << ")";
        throw TrainAbort(msg.str());
    }
    total.backward();
    r.grad_norm = opt_.clip_global_norm(cfg_.clip_norm);
    opt_.step();
    return r;
}

EpochRecord Trainer::run_epoch(const std::vector<Sample>& data, int epoch) {
    check_contract(!data.empty(), "trainer: empty dataset");
    set_routing(epoch);
    const int n = static_cast<int>(data.size());
    const int bs = std::min(cfg_.batch_size, n);
    const bool fixed_steps = cfg_.steps_per_epoch > 0;
    const int steps = fixed_steps ? cfg_.steps_per_epoch : (n + bs - 1) / bs;

    Rng order(cfg_.seed * 1000003 + epoch);
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    order.shuffle(idx);

    size_t cursor = 0;
    StepRecord acc;
    for (int s = 0; s < steps; ++s) {
        std::vector<const Sample*> batch;
        for (int b = 0; b < bs; ++b) {
            if (cursor == idx.size()) {
                if (!fixed_steps) break; // single pass: last batch may be short
                order.shuffle(idx);
                cursor = 0;
            }
            batch.push_back(&data[static_cast<size_t>(idx[cursor++])]);
        }
        StepRecord r = step(batch);
        acc.total += r.total;
        acc.cls += r.cls;
        acc.bbox += r.bbox;
        acc.giou += r.giou;
        acc.sa += r.sa;
        acc.sr += r.sr;
        acc.grad_norm += r.grad_norm;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage_;
    const Scalar inv = 1.0 / static_cast<Scalar>(steps);
    rec.mean = {acc.total * inv, acc.cls * inv,  acc.bbox * inv,     acc.giou * inv,
                acc.sa * inv,    acc.sr * inv,   acc.grad_norm * inv};
    rec.lr_feat = opt_.group("feat").lr;
    rec.lr_det = opt_.group("det").lr;
    rec.lr_sr = opt_.group("sr").lr;
    evaluate(data, stage_ == 2, rec.ap50, rec.psnr);
    return rec;
}

std::vector<EpochRecord> Trainer::train(const std::vector<Sample>& data,
                                        const std::string& out_dir, std::ostream* progress) {
    std::vector<EpochRecord> log;
    const int first = epoch_ + 1; // resume continues the epoch numbering
    std::ofstream ndjson;
    if (!out_dir.empty()) {
        ndjson.open(out_dir + "/train_log.ndjson", first > 1 ? std::ios::app : std::ios::trunc);
        check_contract(ndjson.is_open(), "trainer: cannot write train log in " + out_dir);
    }

    int prev_stage = epoch_ >= 1 ? stage_ : 0;
    for (int e = first; e <= cfg_.t_tot; ++e) {
        EpochRecord rec = run_epoch(data, e);
        if (progress) {
            if (prev_stage != 0 && rec.stage != prev_stage)
                *progress << "stage transition: 1 -> 2 at epoch " << e << "\n";
            *progress << "epoch " << e << " stage " << rec.stage << " total " << rec.mean.total
                      << " ap50 " << rec.ap50 << "\n";
        }
        prev_stage = rec.stage;
        log.push_back(rec);

        if (ndjson.is_open()) {
            ndjson << rec.to_json().dump() << "\n";
            ndjson.flush();
        }
        if (!out_dir.empty()) {
            save_checkpoint(epoch_ckpt_path(out_dir, e));
            const int expired = e - cfg_.keep_last;
            if (expired >= 1) std::remove(epoch_ckpt_path(out_dir, expired).c_str());
            if (rec.ap50 > best_ap_) {
                best_ap_ = rec.ap50;
                save_checkpoint(out_dir + "/ckpt_best.sdcn");
            }
        }
    }
    return log;
}

void Trainer::evaluate(const std::vector<Sample>& data, bool with_sr, Scalar& ap50_out,
                       Scalar& psnr_out) const {
    NoGradGuard ng;
    std::vector<PredRecord> preds;
    std::vector<GtRecord> gts;
    Scalar psnr_sum = 0;
    int psnr_n = 0;
    for (const Sample& s : data) {
        ModelOutput out = model_.forward(image_to_tensor(s.lr), with_sr, false);
        nlohmann::json recs =
            prediction_records(out.det.logits, out.det.boxes, s.image_id, s.hr.h, s.hr.w);
        for (const PredRecord& p : parse_predictions(recs)) preds.push_back(p);
        for (const GTBox& b : s.boxes)
            gts.push_back({s.image_id, b.class_id, b.x, b.y, b.w, b.h});
        if (with_sr) {
            psnr_sum += psnr_db(tensor_to_image(out.sr_image), s.hr);
            ++psnr_n;
        }
    }
    ap50_out = gts.empty() ? -1.0 : compute_ap(preds, gts).ap50;
    psnr_out = psnr_n > 0 ? psnr_sum / psnr_n : -1.0;
}

void Trainer::save_checkpoint(const std::string& path) const {
    ParamGroups g = model_.param_groups();
    std::vector<NamedArray> arrays;
    auto put = [&arrays](const ParamList& pl) {
        for (const ParamEntry& p : pl) arrays.push_back({p.name, p.t.shape(), p.t.values()});
    };
    put(g.feat);
    put(g.det);
    put(g.sr);

    nlohmann::json steps = nlohmann::json::object();
    for (const AdamW::SlotState& s : opt_.state()) {
        arrays.push_back({"opt.m." + s.name, {static_cast<int>(s.m.size())}, s.m});
        arrays.push_back({"opt.v." + s.name, {static_cast<int>(s.v.size())}, s.v});
        steps[s.name] = s.step;
    }
    nlohmann::json meta{{"format", "sdconet-checkpoint"}, {"version", 1},      {"epoch", epoch_},
                        {"stage", stage_},                {"best_ap", best_ap_}, {"opt_steps", steps}};
    save_archive(path, arrays, meta);
}

void Trainer::load_checkpoint(const std::string& path) {
    Archive a = load_archive(path);
    ParamGroups g = model_.param_groups();
    std::vector<AdamW::SlotState> slots;
    nlohmann::json steps = a.meta.value("opt_steps", nlohmann::json::object());

    auto restore = [&](ParamList& pl) {
        for (ParamEntry& p : pl) {
            const NamedArray* arr = a.find(p.name);
            if (arr == nullptr) throw IoError("checkpoint missing array " + p.name);
            check_shape(arr->shape == p.t.shape(), "checkpoint shape mismatch for " + p.name);
            p.t.values() = arr->data;

            const NamedArray* m = a.find("opt.m." + p.name);
            const NamedArray* v = a.find("opt.v." + p.name);
            if (m != nullptr && v != nullptr) {
                AdamW::SlotState s;
                s.name = p.name;
                s.step = steps.value(p.name, 0LL);
                s.m = m->data;
                s.v = v->data;
                slots.push_back(std::move(s));
            }
        }
    };
    restore(g.feat);
    restore(g.det);
    restore(g.sr);
    opt_.load_state(slots);

    epoch_ = a.meta.value("epoch", 0);
    stage_ = a.meta.value("stage", 1);
    best_ap_ = a.meta.value("best_ap", -1.0);
}

} // namespace sdconet
