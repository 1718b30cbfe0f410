#include "sdconet/model.hpp"

namespace sdconet {

void FilterConfig::validate(int levels) const {
    schedule.validate();
    check_config(static_cast<int>(schedule.beta.size()) == levels,
                 "filter: beta length must equal pyramid depth");
    check_config(max_grid >= 1, "filter: max_grid must be positive");
}

void ModelConfig::validate() const {
    encoder.validate();
    sr.validate(encoder.stage_channels);
    saliency.validate();
    const int levels = static_cast<int>(encoder.stage_channels.size());
    filter.validate(levels);
    detector.validate();
    detector.attn.validate(levels);
}

Model::Model(const ModelConfig& cfg_in, Rng& rng) : cfg(cfg_in) {
    cfg.validate();
    const int levels = static_cast<int>(cfg.encoder.stage_channels.size());
    const int d = cfg.detector.attn.d_model;

    encoder = Encoder(cfg.encoder, rng);
    sr = SrDecoder(cfg.sr, cfg.encoder.stage_channels, rng);
    saliency = SaliencyPyramidHead(cfg.saliency, cfg.encoder.stage_channels, rng);

    input_proj.reserve(static_cast<size_t>(levels));
    input_norm.reserve(static_cast<size_t>(levels));
    for (int l = 0; l < levels; ++l) {
        input_proj.emplace_back(cfg.encoder.stage_channels[static_cast<size_t>(l)], d, rng);
        input_norm.emplace_back(d);
    }
    level_embed = Embedding(levels, d, rng);

    const int enc_depth = static_cast<int>(cfg.filter.schedule.gamma.size());
    enc_layers.reserve(static_cast<size_t>(enc_depth));
    for (int k = 0; k < enc_depth; ++k)
        enc_layers.emplace_back(cfg.detector.attn, levels, rng);
    bg = BackgroundEmbedding(cfg.filter.max_grid, cfg.filter.max_grid, d, rng);

    detector = DetectionDecoder(cfg.detector, levels, rng);
}

ModelOutput Model::forward(const Tensor& lr_image, bool with_sr, bool training,
                           std::vector<std::string>* warnings) const {
    check_contract(lr_image.rank() == 3 && lr_image.dim(2) == 3,
                   "model: input must be (H, W, 3)");
    const int levels = static_cast<int>(cfg.encoder.stage_channels.size());

    FeaturePyramid pyr = encoder.encode(lr_image);
    ModelOutput out;
    out.saliency_maps = saliency.forward(pyr);
    if (with_sr) out.sr_image = sr.decode(pyr, training);

    std::vector<int> counts(static_cast<size_t>(levels));
    std::vector<Tensor> projected;
    projected.reserve(static_cast<size_t>(levels));
    std::vector<int> token_levels;
    for (int l = 0; l < levels; ++l) {
        const Tensor& feat = pyr.levels[static_cast<size_t>(l)];
        const int h = feat.dim(0), w = feat.dim(1), c = feat.dim(2);
        out.shapes.push_back({h, w});
        counts[static_cast<size_t>(l)] = h * w;
        Tensor flat = reshape(feat, {h * w, c});
        projected.push_back(input_norm[static_cast<size_t>(l)].forward(
            input_proj[static_cast<size_t>(l)].forward(flat)));
        token_levels.insert(token_levels.end(), static_cast<size_t>(h * w), l);
    }
    Tensor tokens = concat(projected, 0);

    const int d = cfg.detector.attn.d_model;
    Tensor pos = add(sine_position_embedding(out.shapes, d), level_embed.forward(token_levels));
    Tensor refs = token_reference_points(out.shapes);

    // Ranking reads raw logit values; the maps keep their own gradient path.
    std::vector<Scalar> scores;
    scores.reserve(static_cast<size_t>(tokens.dim(0)));
    for (const Tensor& map : out.saliency_maps) {
        const std::vector<Scalar>& v = map.values();
        scores.insert(scores.end(), v.begin(), v.end());
    }

    const BackgroundEmbedding* bg_ptr = cfg.filter.background_embed ? &bg : nullptr;
    Tensor x = tokens;
    for (size_t k = 0; k < enc_layers.size(); ++k) {
        ActiveQuerySet active =
            select_active(scores, counts, cfg.filter.schedule, static_cast<int>(k));
        x = enc_layers[k].forward(x, pos, refs, out.shapes, active, bg_ptr,
                                  &out.attention_sites);
    }
    out.memory = x;
    out.det = detector.decode(x, out.shapes, warnings);
    return out;
}

ParamGroups Model::param_groups() const {
    ParamGroups g;
    encoder.collect("encoder", g.feat);

    saliency.collect("saliency", g.det);
    for (size_t l = 0; l < input_proj.size(); ++l) {
        const std::string tag = "proj" + std::to_string(l);
        input_proj[l].collect(tag, g.det);
        input_norm[l].collect(tag + ".norm", g.det);
    }
    level_embed.collect("level_embed", g.det);
    for (size_t k = 0; k < enc_layers.size(); ++k)
        enc_layers[k].collect("enc_layer" + std::to_string(k), g.det);
    if (cfg.filter.background_embed) bg.collect("bg", g.det);
    detector.collect("det", g.det);

    sr.collect("sr", g.sr);
    return g;
}

} // namespace sdconet
