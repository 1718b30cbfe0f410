#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdconet/data.hpp"
#include "sdconet/model.hpp"
#include "sdconet/optim.hpp"

namespace sdconet {

struct TrainConfig {
    // Negative feat lr means: derive as backbone_lr_mult * the stage's det lr.
    Scalar eta_det_1 = 1e-4, eta_det_2 = 1e-4;
    Scalar eta_feat_1 = -1.0, eta_feat_2 = -1.0;
    Scalar backbone_lr_mult = 0.1;
    Scalar rho = 0.1; // SR lr scale in stage two, in (0, 1)
    int t_det = 2;    // stage-one epochs, boundary inclusive
    int t_tot = 6;
    int batch_size = 2;
    int steps_per_epoch = 0; // 0: one pass over the dataset
    Scalar clip_norm = 0.1;
    std::vector<int> milestones{4}; // lr x0.1 from each listed epoch on
    Scalar weight_decay = 1e-4;
    LossWeights weights;
    long long seed = 0;
    int keep_last = 2; // epoch checkpoints retained beside the best one

    // With errs, collects every violation instead of throwing at the first.
    void validate(std::vector<std::string>* errs = nullptr) const;
    Scalar det_lr(int stage) const;
    Scalar feat_lr(int stage) const;
    Scalar decay_at(int epoch) const;
};

struct StepRecord {
    Scalar total = 0, cls = 0, bbox = 0, giou = 0, sa = 0, sr = 0;
    Scalar grad_norm = 0; // pre-clip global norm
};

struct EpochRecord {
    int epoch = 0, stage = 0;
    StepRecord mean;
    Scalar lr_feat = 0, lr_det = 0, lr_sr = 0;
    Scalar ap50 = -1.0; // training-split snapshot
    Scalar psnr = -1.0; // stage two only

    nlohmann::json to_json() const;
};

// Two-stage routing: epochs up to t_det train feat+det with the SR group
// frozen; later epochs unfreeze SR at rho times the det lr. Milestone decay
// scales every group, so the rho ratio survives it.
class Trainer {
public:
    Trainer(Model& model, const TrainConfig& cfg);

    void set_routing(int epoch);
    int stage() const { return stage_; }
    int epoch() const { return epoch_; }
    AdamW& optimizer() { return opt_; }
    const TrainConfig& config() const { return cfg_; }

    // Batch-mean loss components; sr is built only in stage two.
    LossSet batch_losses(const std::vector<const Sample*>& batch) const;
    StepRecord step(const std::vector<const Sample*>& batch);

    EpochRecord run_epoch(const std::vector<Sample>& data, int epoch);
    std::vector<EpochRecord> train(const std::vector<Sample>& data,
                                   const std::string& out_dir = "",
                                   std::ostream* progress = nullptr);

    // ap50 and psnr (psnr only when with_sr) over a split, no gradients.
    void evaluate(const std::vector<Sample>& data, bool with_sr, Scalar& ap50_out,
                  Scalar& psnr_out) const;

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

private:
    void abort_if_not_finite(const ModelOutput& out) const;

    Model& model_;
    TrainConfig cfg_;
    AdamW opt_;
    int stage_ = 1;
    int epoch_ = 0;
    Scalar best_ap_ = -1.0;
};

// Detection losses for one decode: final layer plus every auxiliary layer and
// the encoder proposals, each with its own assignment.
DetLosses layered_detection_losses(const DetectionOutput& det, const std::vector<DetTarget>& gts,
                                   const MatchWeights& mw);

} // namespace sdconet
