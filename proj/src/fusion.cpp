#include "lmfnet/fusion.hpp"

#include <cmath>

namespace lmfnet {

const char* merge_op_name(MergeOp op) {
    switch (op) {
        case MergeOp::Max: return "max";
        case MergeOp::Mean: return "mean";
        case MergeOp::Linear: return "linear";
    }
    return "max";
}

MergeOp merge_op_from_name(const std::string& name) {
    if (name == "max") return MergeOp::Max;
    if (name == "mean") return MergeOp::Mean;
    if (name == "linear") return MergeOp::Linear;
    throw ConfigError("unknown merge operation: " + name + " (expected max|mean|linear)");
}

FusionConfig FusionConfig::tiny() {
    FusionConfig c;
    c.n = 2;
    c.sr_strides = {2, 2, 1, 1};
    return c;
}

void FusionConfig::validate() const {
    if (n < 1) throw ConfigError("fusion: n must be >= 1");
    for (int m : sr_strides) {
        if (m < 1) throw ConfigError("fusion: sr_strides must be >= 1");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("fusion: dropout must be in [0,1)");
    for (int k : conv3d_kernel) {
        if (k < 1 || k % 2 == 0) throw ConfigError("fusion: conv3d kernel extents must be odd");
    }
}

Tensor stack_modalities(const std::vector<Tensor>& level_features) {
    if (level_features.empty()) throw ShapeError("stack_modalities: no modalities");
    for (const auto& f : level_features) {
        if (f.ndim() != 4) throw ShapeError("stack_modalities: level features must be (B,C,h,w)");
        if (f.shape() != level_features[0].shape()) {
            throw ShapeError("stack_modalities: mismatched level shapes " + shape_to_string(f.shape()) +
                             " vs " + shape_to_string(level_features[0].shape()));
        }
    }
    return stack_last(level_features);
}

Tensor merge_modalities(const Tensor& stack, MergeOp op, const Tensor& w, const Tensor& bias) {
    if (stack.ndim() != 5) throw ShapeError("merge_modalities: expected (B,C,h,w,N)");
    switch (op) {
        case MergeOp::Max: return reduce_max_last(stack);
        case MergeOp::Mean: return reduce_mean_last(stack);
        case MergeOp::Linear:
            if (!w.defined() || !bias.defined()) {
                throw ConfigError("merge_modalities: linear merge requires weights and bias");
            }
            return weighted_merge_last(stack, w, bias);
    }
    throw ConfigError("merge_modalities: unknown op");
}

Tensor channel_layer_norm(const Tensor& stack, const Tensor& scale_t, const Tensor& shift_t, double eps) {
    // (B,C,h,w,M) -> (B,h,w,M,C), normalize trailing C, back
    auto moved = permute(stack, {0, 2, 3, 4, 1});
    auto normed = layer_norm(moved, scale_t, shift_t, eps);
    return permute(normed, {0, 4, 1, 2, 3});
}

// ---- MFFR --------------------------------------------------------------

MffrLayer::MffrLayer(ParamStore& ps, const std::string& prefix, int channels, int modalities, int hidden,
                     std::array<int, 3> kernel, double dropout_rate, Rng& rng, Dtype dt)
    : kernel_(kernel), dropout_rate_(dropout_rate), channels_(channels) {
    expand_w_ = init::linear_weight(ps, prefix + ".expand.weight", modalities, hidden, rng, dt);
    expand_b_ = init::zeros_bias(ps, prefix + ".expand.bias", hidden, dt);
    conv_w_ = init::conv_weight(ps, prefix + ".conv.weight",
                                {channels, 1, kernel[0], kernel[1], kernel[2]}, rng, dt);
    conv_b_ = init::zeros_bias(ps, prefix + ".conv.bias", channels, dt);
    restore_w_ = init::linear_weight(ps, prefix + ".restore.weight", hidden, modalities, rng, dt);
    restore_b_ = init::zeros_bias(ps, prefix + ".restore.bias", modalities, dt);
}

Tensor MffrLayer::conv_stage(const Tensor& stack) const {
    auto expanded = linear(stack, expand_w_, expand_b_);  // modality axis M -> hidden
    // (B,C,h,w,Nh) -> (B,C,Nh,h,w): channels stay the grouped-conv channel
    // axis so each kernel sees one channel across modality-depth and space
    auto vol = permute(expanded, {0, 1, 4, 2, 3});
    auto mixed = grouped_conv3d(vol, conv_w_, conv_b_,
                                {kernel_[0] / 2, kernel_[1] / 2, kernel_[2] / 2}, channels_);
    return permute(mixed, {0, 1, 3, 4, 2});  // back to (B,C,h,w,Nh)
}

Tensor MffrLayer::forward(const Tensor& stack, const ForwardCtx& ctx) const {
    auto restored = linear(conv_stage(stack), restore_w_, restore_b_);
    return dropout(restored, dropout_rate_, ctx.next_seed(), ctx.training);
}

// ---- MFSAF -------------------------------------------------------------

MfsafLayer::MfsafLayer(ParamStore& ps, const std::string& prefix, int channels, int modalities,
                       int sr_stride, Rng& rng, Dtype dt)
    : sr_(sr_stride), channels_(channels) {
    wq_ = init::linear_weight(ps, prefix + ".q.weight", channels, channels, rng, dt);
    bq_ = init::zeros_bias(ps, prefix + ".q.bias", channels, dt);
    wk_ = init::linear_weight(ps, prefix + ".k.weight", channels, channels, rng, dt);
    bk_ = init::zeros_bias(ps, prefix + ".k.bias", channels, dt);
    wv_ = init::linear_weight(ps, prefix + ".v.weight", channels, channels, rng, dt);
    bv_ = init::zeros_bias(ps, prefix + ".v.bias", channels, dt);
    if (sr_ > 1) {
        sr_w_ = init::conv_weight(ps, prefix + ".sr.weight", {channels, 1, sr_, sr_}, rng, dt);
        sr_b_ = init::zeros_bias(ps, prefix + ".sr.bias", channels, dt);
    }
    out_w_ = init::linear_weight(ps, prefix + ".out.weight", modalities, modalities, rng, dt);
    out_b_ = init::zeros_bias(ps, prefix + ".out.bias", modalities, dt);
}

Tensor MfsafLayer::attention_output(const Tensor& stack) const {
    const std::int64_t B = stack.dim(0), C = stack.dim(1), h = stack.dim(2), w = stack.dim(3),
                       M = stack.dim(4);
    if (sr_ > 1 && (h < sr_ || w < sr_)) {
        throw ConfigError("mfsaf: feature map " + std::to_string(h) + "x" + std::to_string(w) +
                          " is smaller than sr stride m=" + std::to_string(sr_) +
                          "; configure a smaller m for this level");
    }
    // tokens per modality: (B,M,h*w,C)
    auto tokens = reshape(permute(stack, {0, 4, 2, 3, 1}), {B, M, h * w, C});
    auto q = linear(tokens, wq_, bq_);

    Tensor kv_tokens = tokens;
    if (sr_ > 1) {
        auto spatial = reshape(permute(stack, {0, 4, 1, 2, 3}), {B * M, C, h, w});
        auto reduced = conv2d(spatial, sr_w_, sr_b_, sr_, 0, static_cast<int>(C));
        const std::int64_t hr = reduced.dim(2), wr = reduced.dim(3);
        kv_tokens = reshape(permute(reshape(reduced, {B, M, C, hr, wr}), {0, 1, 3, 4, 2}),
                            {B, M, hr * wr, C});
    }
    auto k = linear(kv_tokens, wk_, bk_);
    auto v = linear(kv_tokens, wv_, bv_);

    // d_k = C; every modality attends independently
    auto scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(C)));
    auto attn = softmax(scores, 3);
    auto ctx_tokens = matmul(attn, v);  // (B,M,h*w,C)
    return permute(reshape(ctx_tokens, {B, M, h, w, C}), {0, 4, 2, 3, 1});
}

Tensor MfsafLayer::forward(const Tensor& stack) const {
    return linear(attention_output(stack), out_w_, out_b_);
}

// ---- fusion block ------------------------------------------------------

FusionBlock::FusionBlock(const FusionConfig& cfg, int level, int channels, int modalities,
                         ParamStore& ps, const std::string& prefix, Rng& rng, Dtype dt, bool use_mffr,
                         bool use_mfsaf)
    : merge_(cfg.merge),
      dropout_rate_(cfg.dropout_rate),
      eps_(cfg.ln_eps),
      hidden_(cfg.hidden_counts()[static_cast<std::size_t>(level)]),
      use_mffr_(use_mffr),
      use_mfsaf_(use_mfsaf) {
    cfg.validate();
    reproject_w_ = init::linear_weight(ps, prefix + ".reproject.weight", modalities, hidden_, rng, dt);
    reproject_b_ = init::zeros_bias(ps, prefix + ".reproject.bias", hidden_, dt);
    ln_r_g_ = init::norm_scale(ps, prefix + ".norm_r.scale", channels, dt);
    ln_r_b_ = init::norm_shift(ps, prefix + ".norm_r.shift", channels, dt);
    if (use_mffr_) {
        mffr1_ = MffrLayer(ps, prefix + ".mffr1", channels, hidden_, hidden_, cfg.conv3d_kernel,
                           cfg.dropout_rate, rng, dt);
    }
    if (use_mfsaf_) {
        mfsaf_ = MfsafLayer(ps, prefix + ".mfsaf", channels, hidden_,
                            cfg.sr_strides[static_cast<std::size_t>(level)], rng, dt);
    }
    ln_f_g_ = init::norm_scale(ps, prefix + ".norm_f.scale", channels, dt);
    ln_f_b_ = init::norm_shift(ps, prefix + ".norm_f.shift", channels, dt);
    if (use_mffr_) {
        mffr2_ = MffrLayer(ps, prefix + ".mffr2", channels, hidden_, hidden_, cfg.conv3d_kernel,
                           cfg.dropout_rate, rng, dt);
    }
    if (merge_ == MergeOp::Linear) {
        // unit weights and zero bias make linear merge start out equal to mean
        merge_w_ = ps.add(prefix + ".merge.weight", ParamKind::Weight, Tensor::full({hidden_}, 1.0, dt));
        merge_bias_ = ps.add(prefix + ".merge.bias", ParamKind::Bias, Tensor::zeros({1}, dt));
    }
}

Tensor FusionBlock::reprojected(const Tensor& stack) const {
    if (stack.ndim() != 5) throw ShapeError("fusion: expected (B,C,h,w,N), got " + shape_to_string(stack.shape()));
    auto expanded = linear(stack, reproject_w_, reproject_b_);
    return channel_layer_norm(expanded, ln_r_g_, ln_r_b_, eps_);
}

Tensor FusionBlock::after_mffr(const Tensor& stack, const ForwardCtx& ctx) const {
    auto f_r = reprojected(stack);
    return use_mffr_ ? mffr1_.forward(f_r, ctx) : f_r;
}

Tensor FusionBlock::after_mfsaf(const Tensor& stack, const ForwardCtx& ctx) const {
    auto mid = after_mffr(stack, ctx);
    return use_mfsaf_ ? mfsaf_.forward(mid) : mid;
}

Tensor FusionBlock::fused_feature(const Tensor& stack, const ForwardCtx& ctx) const {
    auto att = after_mfsaf(stack, ctx);
    return channel_layer_norm(dropout(att, dropout_rate_, ctx.next_seed(), ctx.training), ln_f_g_,
                              ln_f_b_, eps_);
}

Tensor FusionBlock::residual(const Tensor& stack, const ForwardCtx& ctx) const {
    auto f_r = reprojected(stack);
    Tensor mid = use_mffr_ ? mffr1_.forward(f_r, ctx) : f_r;
    if (use_mfsaf_) mid = mfsaf_.forward(mid);
    auto f_f = channel_layer_norm(dropout(mid, dropout_rate_, ctx.next_seed(), ctx.training), ln_f_g_,
                                  ln_f_b_, eps_);
    return add(f_r, use_mffr_ ? mffr2_.forward(f_f, ctx) : f_f);
}

Tensor FusionBlock::forward(const Tensor& stack, const ForwardCtx& ctx) const {
    return merge_modalities(residual(stack, ctx), merge_, merge_w_, merge_bias_);
}

}  // namespace lmfnet
