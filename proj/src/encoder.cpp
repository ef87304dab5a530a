#include "lmfnet/encoder.hpp"

#include <cmath>

namespace lmfnet {

namespace init {

Tensor conv_weight(ParamStore& ps, const std::string& name, ShapeVec shape, Rng& rng, Dtype dt) {
    const std::int64_t fan_in = shape_numel(shape) / shape[0];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    auto t = Tensor::randn(shape, dt, rng, 0.0, stddev);
    return ps.add(name, ParamKind::Weight, t);
}

Tensor linear_weight(ParamStore& ps, const std::string& name, std::int64_t d_in, std::int64_t d_out,
                     Rng& rng, Dtype dt) {
    auto t = Tensor::zeros({d_in, d_out}, dt);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.node()->data.set(i, rng.truncated_normal(0.02));
    return ps.add(name, ParamKind::Weight, t);
}

Tensor zeros_bias(ParamStore& ps, const std::string& name, std::int64_t n, Dtype dt) {
    return ps.add(name, ParamKind::Bias, Tensor::zeros({n}, dt));
}

Tensor norm_scale(ParamStore& ps, const std::string& name, std::int64_t n, Dtype dt) {
    return ps.add(name, ParamKind::NormScale, Tensor::full({n}, 1.0, dt));
}

Tensor norm_shift(ParamStore& ps, const std::string& name, std::int64_t n, Dtype dt) {
    return ps.add(name, ParamKind::NormShift, Tensor::zeros({n}, dt));
}

}  // namespace init

Tensor map_to_tokens(const Tensor& x) {
    const std::int64_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    return reshape(permute(x, {0, 2, 3, 1}), {B, h * w, C});
}

Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w) {
    const std::int64_t B = tokens.dim(0), C = tokens.dim(2);
    return permute(reshape(tokens, {B, h, w, C}), {0, 3, 1, 2});
}

EncoderConfig EncoderConfig::tiny() {
    EncoderConfig c;
    c.embed_dims = {8, 16, 24, 32};
    c.depths = {1, 1, 1, 1};
    c.num_heads = {1, 2, 3, 4};
    c.sr_ratios = {8, 4, 2, 1};
    return c;
}

void EncoderConfig::validate() const {
    for (int i = 0; i < 4; ++i) {
        if (embed_dims[i] < 1) throw ConfigError("encoder: embed_dims must be positive");
        if (depths[i] < 0) throw ConfigError("encoder: depths must be >= 0");
        if (num_heads[i] < 1 || embed_dims[i] % num_heads[i] != 0) {
            throw ConfigError("encoder: embed_dims[" + std::to_string(i) + "]=" +
                              std::to_string(embed_dims[i]) + " not divisible by num_heads=" +
                              std::to_string(num_heads[i]));
        }
        if (sr_ratios[i] < 1) throw ConfigError("encoder: sr_ratios must be >= 1");
        if (patch_strides[i] < 1) throw ConfigError("encoder: patch strides must be >= 1");
    }
    if (patch_strides[0] != 4 || patch_strides[1] != 2 || patch_strides[2] != 2 || patch_strides[3] != 2) {
        throw ConfigError("encoder: stage strides must be 4,2,2,2 for the 1/4..1/32 pyramid");
    }
    if (mlp_ratio < 1) throw ConfigError("encoder: mlp_ratio must be >= 1");
}

PatchEmbed::PatchEmbed(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch, int kernel,
                       int stride, Rng& rng, Dtype dt, double eps)
    : kernel_(kernel), stride_(stride), eps_(eps) {
    w_ = init::conv_weight(ps, prefix + ".proj.weight", {out_ch, in_ch, kernel, kernel}, rng, dt);
    b_ = init::zeros_bias(ps, prefix + ".proj.bias", out_ch, dt);
    ln_g_ = init::norm_scale(ps, prefix + ".norm.scale", out_ch, dt);
    ln_b_ = init::norm_shift(ps, prefix + ".norm.shift", out_ch, dt);
}

Tensor PatchEmbed::forward(const Tensor& x, std::int64_t& h, std::int64_t& w) const {
    auto m = conv2d(x, w_, b_, stride_, kernel_ / 2);
    h = m.dim(2);
    w = m.dim(3);
    return layer_norm(map_to_tokens(m), ln_g_, ln_b_, eps_);
}

EfficientAttention::EfficientAttention(ParamStore& ps, const std::string& prefix, int dim, int heads,
                                       int sr_ratio, Rng& rng, Dtype dt, double eps)
    : heads_(heads), sr_(sr_ratio), eps_(eps) {
    wq_ = init::linear_weight(ps, prefix + ".q.weight", dim, dim, rng, dt);
    bq_ = init::zeros_bias(ps, prefix + ".q.bias", dim, dt);
    wk_ = init::linear_weight(ps, prefix + ".k.weight", dim, dim, rng, dt);
    bk_ = init::zeros_bias(ps, prefix + ".k.bias", dim, dt);
    wv_ = init::linear_weight(ps, prefix + ".v.weight", dim, dim, rng, dt);
    bv_ = init::zeros_bias(ps, prefix + ".v.bias", dim, dt);
    wo_ = init::linear_weight(ps, prefix + ".proj.weight", dim, dim, rng, dt);
    bo_ = init::zeros_bias(ps, prefix + ".proj.bias", dim, dt);
    if (sr_ > 1) {
        sr_w_ = init::conv_weight(ps, prefix + ".sr.weight", {dim, dim, sr_, sr_}, rng, dt);
        sr_b_ = init::zeros_bias(ps, prefix + ".sr.bias", dim, dt);
        srln_g_ = init::norm_scale(ps, prefix + ".sr_norm.scale", dim, dt);
        srln_b_ = init::norm_shift(ps, prefix + ".sr_norm.shift", dim, dt);
    }
}

Tensor EfficientAttention::forward(const Tensor& tokens, std::int64_t h, std::int64_t w) const {
    const std::int64_t B = tokens.dim(0), n = tokens.dim(1), C = tokens.dim(2);
    const std::int64_t dh = C / heads_;

    auto split_heads = [&](const Tensor& t) {
        const std::int64_t rows = t.dim(1);
        return permute(reshape(t, {B, rows, heads_, dh}), {0, 2, 1, 3});
    };

    auto q = split_heads(linear(tokens, wq_, bq_));

    Tensor kv_src = tokens;
    if (sr_ > 1) {
        auto spatial = tokens_to_map(tokens, h, w);
        auto reduced = conv2d(spatial, sr_w_, sr_b_, sr_, 0);
        kv_src = layer_norm(map_to_tokens(reduced), srln_g_, srln_b_, eps_);
    }
    auto k = split_heads(linear(kv_src, wk_, bk_));
    auto v = split_heads(linear(kv_src, wv_, bv_));

    auto scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(dh)));
    auto attn = softmax(scores, 3);
    auto ctx = matmul(attn, v);  // (B,heads,n,dh)
    auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, n, C});
    return linear(merged, wo_, bo_);
}

MixFfn::MixFfn(ParamStore& ps, const std::string& prefix, int dim, int hidden, Rng& rng, Dtype dt) {
    w1_ = init::linear_weight(ps, prefix + ".fc1.weight", dim, hidden, rng, dt);
    b1_ = init::zeros_bias(ps, prefix + ".fc1.bias", hidden, dt);
    dw_w_ = init::conv_weight(ps, prefix + ".dwconv.weight", {hidden, 1, 3, 3}, rng, dt);
    dw_b_ = init::zeros_bias(ps, prefix + ".dwconv.bias", hidden, dt);
    w2_ = init::linear_weight(ps, prefix + ".fc2.weight", hidden, dim, rng, dt);
    b2_ = init::zeros_bias(ps, prefix + ".fc2.bias", dim, dt);
}

Tensor MixFfn::forward(const Tensor& tokens, std::int64_t h, std::int64_t w) const {
    auto hid = linear(tokens, w1_, b1_);
    const std::int64_t hidden = hid.dim(2);
    auto spatial = tokens_to_map(hid, h, w);
    auto mixed = conv2d(spatial, dw_w_, dw_b_, 1, 1, static_cast<int>(hidden));
    return linear(gelu(map_to_tokens(mixed)), w2_, b2_);
}

EncoderBlock::EncoderBlock(ParamStore& ps, const std::string& prefix, int dim, int heads, int sr_ratio,
                           int mlp_ratio, Rng& rng, Dtype dt, double eps)
    : eps_(eps) {
    ln1_g_ = init::norm_scale(ps, prefix + ".norm1.scale", dim, dt);
    ln1_b_ = init::norm_shift(ps, prefix + ".norm1.shift", dim, dt);
    attn_ = EfficientAttention(ps, prefix + ".attn", dim, heads, sr_ratio, rng, dt, eps);
    ln2_g_ = init::norm_scale(ps, prefix + ".norm2.scale", dim, dt);
    ln2_b_ = init::norm_shift(ps, prefix + ".norm2.shift", dim, dt);
    ffn_ = MixFfn(ps, prefix + ".ffn", dim, dim * mlp_ratio, rng, dt);
}

Tensor EncoderBlock::forward(const Tensor& tokens, std::int64_t h, std::int64_t w) const {
    auto x = add(tokens, attn_.forward(layer_norm(tokens, ln1_g_, ln1_b_, eps_), h, w));
    return add(x, ffn_.forward(layer_norm(x, ln2_g_, ln2_b_, eps_), h, w));
}

MixVisionEncoder::MixVisionEncoder(const EncoderConfig& cfg, ParamStore& ps, const std::string& prefix,
                                   Rng& rng, Dtype dt)
    : cfg_(cfg) {
    cfg_.validate();
    int in_ch = 3;
    for (int s = 0; s < 4; ++s) {
        const std::string sp = prefix + ".stage" + std::to_string(s);
        patch_[s] = PatchEmbed(ps, sp + ".patch", in_ch, cfg_.embed_dims[s], cfg_.patch_kernels[s],
                               cfg_.patch_strides[s], rng, dt, cfg_.ln_eps);
        for (int b = 0; b < cfg_.depths[s]; ++b) {
            blocks_[s].emplace_back(ps, sp + ".block" + std::to_string(b), cfg_.embed_dims[s],
                                    cfg_.num_heads[s], cfg_.sr_ratios[s], cfg_.mlp_ratio, rng, dt,
                                    cfg_.ln_eps);
        }
        if (cfg_.depths[s] > 0) {
            norm_g_[s] = init::norm_scale(ps, sp + ".norm.scale", cfg_.embed_dims[s], dt);
            norm_b_[s] = init::norm_shift(ps, sp + ".norm.shift", cfg_.embed_dims[s], dt);
        }
        in_ch = cfg_.embed_dims[s];
    }
}

Tensor MixVisionEncoder::patch_tokens(int stage, const Tensor& x, std::int64_t& h, std::int64_t& w) const {
    return patch_[stage].forward(x, h, w);
}

Tensor MixVisionEncoder::stage_map(int stage, const Tensor& tokens, std::int64_t h, std::int64_t w) const {
    Tensor t = tokens;
    for (const auto& block : blocks_[stage]) t = block.forward(t, h, w);
    if (!blocks_[stage].empty()) t = layer_norm(t, norm_g_[stage], norm_b_[stage], cfg_.ln_eps);
    return tokens_to_map(t, h, w);
}

FeaturePyramid MixVisionEncoder::forward(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3) {
        throw ShapeError("encoder: expected (B,3,H,W), got " + shape_to_string(x.shape()));
    }
    if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0) {
        throw ShapeError("encoder: H and W must be divisible by 32 (pad upstream), got " +
                         shape_to_string(x.shape()));
    }
    FeaturePyramid levels;
    Tensor cur = x;
    for (int s = 0; s < 4; ++s) {
        std::int64_t h = 0, w = 0;
        auto tokens = patch_[s].forward(cur, h, w);
        levels[s] = stage_map(s, tokens, h, w);
        cur = levels[s];
    }
    return levels;
}

std::vector<FeaturePyramid> MixVisionEncoder::forward_modalities(const std::vector<Tensor>& inputs) const {
    if (inputs.empty()) throw ShapeError("encoder: at least one modality input required");
    for (const auto& t : inputs) {
        if (t.shape() != inputs[0].shape()) {
            throw ShapeError("encoder: modality geometry mismatch " + shape_to_string(t.shape()) +
                             " vs " + shape_to_string(inputs[0].shape()));
        }
    }
    std::vector<FeaturePyramid> out;
    out.reserve(inputs.size());
    for (const auto& t : inputs) out.push_back(forward(t));
    return out;
}

}  // namespace lmfnet
