#pragma once

#include <array>
#include <string>
#include <vector>

#include "lmfnet/nn.hpp"

namespace lmfnet {

enum class MergeOp { Max, Mean, Linear };
const char* merge_op_name(MergeOp op);
MergeOp merge_op_from_name(const std::string& name);

struct FusionConfig {
    int n = 4;                                // base hidden-modality count
    std::array<int, 4> sr_strides{16, 8, 4, 1};
    MergeOp merge = MergeOp::Max;
    double dropout_rate = 0.1;
    std::array<int, 3> conv3d_kernel{3, 3, 3};
    double ln_eps = 1e-5;

    // hidden-modality schedule over the four pyramid levels
    std::array<int, 4> hidden_counts() const {
        return {n, n + 4, n + 8, n + 16};
    }
    static FusionConfig tiny();
    void validate() const;
};

// (B,C,h,w,N) with the trailing axis holding modalities in configured order.
// Slice [..,k] equals pyramid k's level feature bit-exactly.
Tensor stack_modalities(const std::vector<Tensor>& level_features);

// reduce the trailing modality axis to one map
Tensor merge_modalities(const Tensor& stack, MergeOp op, const Tensor& w = Tensor(),
                        const Tensor& bias = Tensor());

// Linear modality expansion, channel-grouped 3d convolution over
// (modality, height, width), linear restoration, dropout.
class MffrLayer {
public:
    MffrLayer() = default;
    MffrLayer(ParamStore& ps, const std::string& prefix, int channels, int modalities, int hidden,
              std::array<int, 3> kernel, double dropout_rate, Rng& rng, Dtype dt);

    Tensor forward(const Tensor& stack, const ForwardCtx& ctx) const;
    // value after the grouped conv, before the restoring linear (test point)
    Tensor conv_stage(const Tensor& stack) const;

private:
    Tensor expand_w_, expand_b_;
    Tensor conv_w_, conv_b_;
    Tensor restore_w_, restore_b_;
    std::array<int, 3> kernel_{3, 3, 3};
    double dropout_rate_ = 0.1;
    int channels_ = 0;
};

// Per-modality spatial self-attention: the modality axis acts as the head
// axis, queries/keys/values are shared channel projections, and keys/values
// are shrunk by an m x m strided depthwise conv.
class MfsafLayer {
public:
    MfsafLayer() = default;
    MfsafLayer(ParamStore& ps, const std::string& prefix, int channels, int modalities, int sr_stride,
               Rng& rng, Dtype dt);

    Tensor forward(const Tensor& stack) const;
    // re-stacked attention output before the modality-mixing projection
    Tensor attention_output(const Tensor& stack) const;

private:
    Tensor wq_, bq_, wk_, bk_, wv_, bv_;
    Tensor sr_w_, sr_b_;
    Tensor out_w_, out_b_;
    int sr_ = 1;
    int channels_ = 0;
};

// One fusion module instance for one pyramid level.
class FusionBlock {
public:
    FusionBlock() = default;
    FusionBlock(const FusionConfig& cfg, int level, int channels, int modalities, ParamStore& ps,
                const std::string& prefix, Rng& rng, Dtype dt, bool use_mffr = true,
                bool use_mfsaf = true);

    // (B,C,h,w,N) -> (B,C,h,w)
    Tensor forward(const Tensor& stack, const ForwardCtx& ctx) const;

    // intermediate stacks for feature export and tests
    Tensor reprojected(const Tensor& stack) const;                       // F_r
    Tensor residual(const Tensor& stack, const ForwardCtx& ctx) const;   // F_res
    Tensor after_mffr(const Tensor& stack, const ForwardCtx& ctx) const;
    Tensor after_mfsaf(const Tensor& stack, const ForwardCtx& ctx) const;

    int hidden_count() const { return hidden_; }

private:
    Tensor fused_feature(const Tensor& stack, const ForwardCtx& ctx) const;  // F_f
    Tensor reproject_w_, reproject_b_;
    Tensor ln_r_g_, ln_r_b_, ln_f_g_, ln_f_b_;
    MffrLayer mffr1_, mffr2_;
    MfsafLayer mfsaf_;
    Tensor merge_w_, merge_bias_;
    MergeOp merge_ = MergeOp::Max;
    double dropout_rate_ = 0.1;
    double eps_ = 1e-5;
    int hidden_ = 0;
    bool use_mffr_ = true;
    bool use_mfsaf_ = true;
};

// layer norm over the channel axis of (B,C,h,w,M), separate statistics per
// (batch, position, modality), shared affine parameters
Tensor channel_layer_norm(const Tensor& stack, const Tensor& scale, const Tensor& shift, double eps);

}  // namespace lmfnet
