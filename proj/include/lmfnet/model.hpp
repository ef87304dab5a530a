#pragma once

#include <array>
#include <string>
#include <vector>

#include "lmfnet/decoder.hpp"
#include "lmfnet/encoder.hpp"
#include "lmfnet/fusion.hpp"

namespace lmfnet {

enum class AblationMode { Full, CatOnly, MffrOnly, MfsafOnly };
const char* ablation_mode_name(AblationMode m);

struct ModelConfig {
    EncoderConfig encoder;
    FusionConfig fusion;
    DecoderConfig decoder;
    int num_modalities = 3;
    AblationMode mode = AblationMode::Full;
    Dtype dtype = Dtype::F32;

    void validate() const;
    static ModelConfig tiny(int modalities, int classes = 5);
};

struct ParamCounts {
    std::int64_t total = 0;
    std::int64_t encoder = 0;
    std::int64_t fusion = 0;
    std::int64_t decoder = 0;
};

enum class FeatureStage { PreFusion, PostReproject, PostMffr, PostMfsaf, PostResidual, PostMerge };
FeatureStage feature_stage_from_name(const std::string& name);
const char* feature_stage_name(FeatureStage s);

struct FeatureBlock {
    int level = 0;
    std::string label;  // modality name, "hidden<k>" or "fused"
    Tensor values;
};

class LmfNet {
public:
    explicit LmfNet(const ModelConfig& cfg, std::uint64_t init_seed = 0);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const MixVisionEncoder& encoder() const { return encoder_; }
    const FusionBlock& fusion_block(int level) const { return fusion_[static_cast<std::size_t>(level)]; }
    bool has_fusion() const { return cfg_.mode != AblationMode::CatOnly; }

    // one (B,3,H,W) tensor per configured modality -> (B,num_classes,H,W)
    Tensor forward(const std::vector<Tensor>& modalities, const ForwardCtx& ctx) const;

    ParamCounts count_parameters() const;

    std::vector<FeatureBlock> export_features(const std::vector<Tensor>& modalities, FeatureStage stage,
                                              const std::vector<std::string>& modality_names) const;

private:
    std::array<Tensor, 4> fused_levels(const std::vector<Tensor>& modalities, const ForwardCtx& ctx) const;

    ModelConfig cfg_;
    ParamStore params_;
    MixVisionEncoder encoder_;
    std::array<FusionBlock, 4> fusion_;
    MlpDecoder decoder_;
};

}  // namespace lmfnet
