#include "lmfnet/model.hpp"

namespace lmfnet {

const char* ablation_mode_name(AblationMode m) {
    switch (m) {
        case AblationMode::Full: return "full";
        case AblationMode::CatOnly: return "cat_only";
        case AblationMode::MffrOnly: return "mffr_only";
        case AblationMode::MfsafOnly: return "mfsaf_only";
    }
    return "full";
}

void ModelConfig::validate() const {
    encoder.validate();
    fusion.validate();
    decoder.validate();
    if (num_modalities < 1) throw ConfigError("model: at least one modality required");
}

ModelConfig ModelConfig::tiny(int modalities, int classes) {
    ModelConfig c;
    c.encoder = EncoderConfig::tiny();
    c.fusion = FusionConfig::tiny();
    c.decoder.embed_dim = 32;
    c.decoder.num_classes = classes;
    c.num_modalities = modalities;
    return c;
}

FeatureStage feature_stage_from_name(const std::string& name) {
    if (name == "pre_fusion") return FeatureStage::PreFusion;
    if (name == "post_reproject") return FeatureStage::PostReproject;
    if (name == "post_mffr") return FeatureStage::PostMffr;
    if (name == "post_mfsaf") return FeatureStage::PostMfsaf;
    if (name == "post_residual") return FeatureStage::PostResidual;
    if (name == "post_merge") return FeatureStage::PostMerge;
    throw ConfigError("unknown feature stage: " + name);
}

const char* feature_stage_name(FeatureStage s) {
    switch (s) {
        case FeatureStage::PreFusion: return "pre_fusion";
        case FeatureStage::PostReproject: return "post_reproject";
        case FeatureStage::PostMffr: return "post_mffr";
        case FeatureStage::PostMfsaf: return "post_mfsaf";
        case FeatureStage::PostResidual: return "post_residual";
        case FeatureStage::PostMerge: return "post_merge";
    }
    return "pre_fusion";
}

namespace {

std::array<int, 4> decoder_channels(const ModelConfig& cfg) {
    std::array<int, 4> ch = cfg.encoder.embed_dims;
    if (cfg.mode == AblationMode::CatOnly) {
        for (auto& c : ch) c *= cfg.num_modalities;
    }
    return ch;
}

}  // namespace

LmfNet::LmfNet(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(splitmix64(init_seed ^ 0xfeedc0deULL));
    encoder_ = MixVisionEncoder(cfg_.encoder, params_, "encoder", rng, cfg_.dtype);
    if (cfg_.mode != AblationMode::CatOnly) {
        const bool use_mffr = cfg_.mode != AblationMode::MfsafOnly;
        const bool use_mfsaf = cfg_.mode != AblationMode::MffrOnly;
        for (int level = 0; level < 4; ++level) {
            fusion_[static_cast<std::size_t>(level)] =
                FusionBlock(cfg_.fusion, level, cfg_.encoder.embed_dims[static_cast<std::size_t>(level)],
                            cfg_.num_modalities, params_, "fusion.level" + std::to_string(level), rng,
                            cfg_.dtype, use_mffr, use_mfsaf);
        }
    }
    decoder_ = MlpDecoder(cfg_.decoder, decoder_channels(cfg_), params_, "decoder", rng, cfg_.dtype);
}

std::array<Tensor, 4> LmfNet::fused_levels(const std::vector<Tensor>& modalities,
                                           const ForwardCtx& ctx) const {
    if (static_cast<int>(modalities.size()) != cfg_.num_modalities) {
        throw ShapeError("model: configured for " + std::to_string(cfg_.num_modalities) +
                         " modalities, got " + std::to_string(modalities.size()));
    }
    auto pyramids = encoder_.forward_modalities(modalities);
    std::array<Tensor, 4> fused;
    for (int level = 0; level < 4; ++level) {
        std::vector<Tensor> per_mod;
        per_mod.reserve(pyramids.size());
        for (const auto& p : pyramids) per_mod.push_back(p[static_cast<std::size_t>(level)]);
        if (cfg_.mode == AblationMode::CatOnly) {
            fused[static_cast<std::size_t>(level)] = per_mod.size() == 1 ? per_mod[0] : concat(per_mod, 1);
        } else {
            fused[static_cast<std::size_t>(level)] =
                fusion_[static_cast<std::size_t>(level)].forward(stack_modalities(per_mod), ctx);
        }
    }
    return fused;
}

Tensor LmfNet::forward(const std::vector<Tensor>& modalities, const ForwardCtx& ctx) const {
    return decoder_.forward(fused_levels(modalities, ctx));
}

ParamCounts LmfNet::count_parameters() const {
    ParamCounts c;
    c.total = params_.total_count();
    c.encoder = params_.count_with_prefix("encoder.");
    c.fusion = params_.count_with_prefix("fusion.");
    c.decoder = params_.count_with_prefix("decoder.");
    return c;
}

std::vector<FeatureBlock> LmfNet::export_features(const std::vector<Tensor>& modalities,
                                                  FeatureStage stage,
                                                  const std::vector<std::string>& modality_names) const {
    if (stage != FeatureStage::PreFusion && cfg_.mode == AblationMode::CatOnly) {
        throw ConfigError("export_features: stage '" + std::string(feature_stage_name(stage)) +
                          "' requires the fusion module (not available in cat_only mode)");
    }
    auto ctx = ForwardCtx::eval();
    auto pyramids = encoder_.forward_modalities(modalities);
    std::vector<FeatureBlock> blocks;
    for (int level = 0; level < 4; ++level) {
        std::vector<Tensor> per_mod;
        per_mod.reserve(pyramids.size());
        for (const auto& p : pyramids) per_mod.push_back(p[static_cast<std::size_t>(level)]);
        if (stage == FeatureStage::PreFusion) {
            for (std::size_t m = 0; m < per_mod.size(); ++m) {
                const std::string label =
                    m < modality_names.size() ? modality_names[m] : "modality" + std::to_string(m);
                blocks.push_back({level, label, per_mod[m].detach()});
            }
            continue;
        }
        const auto& block = fusion_[static_cast<std::size_t>(level)];
        auto stacked = stack_modalities(per_mod);
        Tensor staged;
        switch (stage) {
            case FeatureStage::PostReproject: staged = block.reprojected(stacked); break;
            case FeatureStage::PostMffr: staged = block.after_mffr(stacked, ctx); break;
            case FeatureStage::PostMfsaf: staged = block.after_mfsaf(stacked, ctx); break;
            case FeatureStage::PostResidual: staged = block.residual(stacked, ctx); break;
            case FeatureStage::PostMerge: staged = block.forward(stacked, ctx); break;
            default: break;
        }
        if (stage == FeatureStage::PostMerge) {
            blocks.push_back({level, "fused", staged.detach()});
        } else {
            const std::int64_t hidden = staged.shape().back();
            for (std::int64_t k = 0; k < hidden; ++k) {
                blocks.push_back({level, "hidden" + std::to_string(k), index_axis(staged, 4, k).detach()});
            }
        }
    }
    return blocks;
}

}  // namespace lmfnet
