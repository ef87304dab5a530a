#pragma once

#include <array>
#include <vector>

#include "lmfnet/nn.hpp"

namespace lmfnet {

struct EncoderConfig {
    std::array<int, 4> embed_dims{32, 64, 160, 256};
    std::array<int, 4> depths{2, 2, 2, 2};
    std::array<int, 4> num_heads{1, 2, 5, 8};
    std::array<int, 4> sr_ratios{8, 4, 2, 1};
    std::array<int, 4> patch_kernels{7, 3, 3, 3};
    std::array<int, 4> patch_strides{4, 2, 2, 2};
    int mlp_ratio = 4;
    double ln_eps = 1e-5;

    static EncoderConfig b0() { return EncoderConfig{}; }
    static EncoderConfig tiny();
    void validate() const;
};

// level i holds (B, embed_dims[i], H/4 / 2^i, W/4 / 2^i)
using FeaturePyramid = std::array<Tensor, 4>;

class PatchEmbed {
public:
    PatchEmbed() = default;
    PatchEmbed(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch, int kernel, int stride,
               Rng& rng, Dtype dt, double eps);
    // (B,Cin,H,W) -> tokens (B,h*w,C); h,w reported through the out-params
    Tensor forward(const Tensor& x, std::int64_t& h, std::int64_t& w) const;

private:
    Tensor w_, b_, ln_g_, ln_b_;
    int kernel_ = 3;
    int stride_ = 2;
    double eps_ = 1e-5;
};

class EfficientAttention {
public:
    EfficientAttention() = default;
    EfficientAttention(ParamStore& ps, const std::string& prefix, int dim, int heads, int sr_ratio,
                       Rng& rng, Dtype dt, double eps);
    Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w) const;

private:
    Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
    Tensor sr_w_, sr_b_, srln_g_, srln_b_;
    int heads_ = 1;
    int sr_ = 1;
    double eps_ = 1e-5;
};

class MixFfn {
public:
    MixFfn() = default;
    MixFfn(ParamStore& ps, const std::string& prefix, int dim, int hidden, Rng& rng, Dtype dt);
    Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w) const;

private:
    Tensor w1_, b1_, dw_w_, dw_b_, w2_, b2_;
};

class EncoderBlock {
public:
    EncoderBlock() = default;
    EncoderBlock(ParamStore& ps, const std::string& prefix, int dim, int heads, int sr_ratio,
                 int mlp_ratio, Rng& rng, Dtype dt, double eps);
    Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w) const;

private:
    Tensor ln1_g_, ln1_b_, ln2_g_, ln2_b_;
    EfficientAttention attn_;
    MixFfn ffn_;
    double eps_ = 1e-5;
};

// Hierarchical transformer feature extractor. One parameter set; every
// modality branch runs through the same instance.
class MixVisionEncoder {
public:
    MixVisionEncoder() = default;
    MixVisionEncoder(const EncoderConfig& cfg, ParamStore& ps, const std::string& prefix, Rng& rng,
                     Dtype dt);

    const EncoderConfig& config() const { return cfg_; }

    // (B,3,H,W) with H,W divisible by 32
    FeaturePyramid forward(const Tensor& x) const;
    std::vector<FeaturePyramid> forward_modalities(const std::vector<Tensor>& inputs) const;

    // test access points
    Tensor patch_tokens(int stage, const Tensor& x, std::int64_t& h, std::int64_t& w) const;
    Tensor stage_map(int stage, const Tensor& tokens, std::int64_t h, std::int64_t w) const;

private:
    EncoderConfig cfg_;
    std::array<PatchEmbed, 4> patch_;
    std::array<std::vector<EncoderBlock>, 4> blocks_;
    std::array<Tensor, 4> norm_g_, norm_b_;
};

}  // namespace lmfnet
