#pragma once

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lmfnet/common.hpp"

namespace lmfnet {

enum class Dtype { F32, F64 };

const char* dtype_name(Dtype dt);
Dtype dtype_from_name(const std::string& name);
std::size_t dtype_size(Dtype dt);

// Dense value block, float32 or float64.
class Storage {
public:
    Storage() : values_(std::vector<float>{}) {}
    Storage(Dtype dt, std::int64_t n, double fill = 0.0);

    Dtype dtype() const {
        return std::holds_alternative<std::vector<float>>(values_) ? Dtype::F32 : Dtype::F64;
    }
    std::int64_t size() const;

    template <typename T>
    std::span<T> as() {
        return std::span<T>(std::get<std::vector<T>>(values_));
    }
    template <typename T>
    std::span<const T> as() const {
        return std::span<const T>(std::get<std::vector<T>>(values_));
    }

    double get(std::int64_t i) const;
    void set(std::int64_t i, double v);
    void fill(double v);
    void add(const Storage& other);  // elementwise +=, same dtype/size

private:
    std::variant<std::vector<float>, std::vector<double>> values_;
};

template <typename Fn>
decltype(auto) dispatch_dtype(Dtype dt, Fn&& fn) {
    if (dt == Dtype::F32) {
        return fn(float{});
    }
    return fn(double{});
}

struct TensorNode;

// Value-semantics handle onto a graph node. Tensors are immutable after
// construction except for gradient accumulation during backward().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(ShapeVec shape, Dtype dt, bool requires_grad = false);
    static Tensor full(ShapeVec shape, double value, Dtype dt);
    static Tensor from_values(ShapeVec shape, const std::vector<double>& values, Dtype dt);
    static Tensor randn(ShapeVec shape, Dtype dt, Rng& rng, double mean = 0.0, double stddev = 1.0);
    static Tensor rand_uniform(ShapeVec shape, Dtype dt, Rng& rng, double lo = 0.0, double hi = 1.0);
    static Tensor scalar(double value, Dtype dt);

    bool defined() const { return node_ != nullptr; }
    const ShapeVec& shape() const;
    std::int64_t dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape().size()); }
    std::int64_t numel() const;
    Dtype dtype() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool rg);

    template <typename T>
    std::span<const T> data() const;
    template <typename T>
    std::span<T> mutable_data();  // test/optimizer access; never call on graph interiors

    double value_at(std::int64_t flat_index) const;
    double item() const;  // requires numel()==1

    bool has_grad() const;
    std::span<const float> grad_f32() const;
    std::span<const double> grad_f64() const;
    double grad_at(std::int64_t flat_index) const;
    void zero_grad();

    // Reverse-mode pass from a scalar. Accumulates into .grad of every
    // reachable node with requires_grad.
    void backward() const;

    Tensor detach() const;        // same values, no history
    Tensor clone() const;         // deep copy, no history
    Tensor astype(Dtype dt) const;

    std::vector<double> to_vector() const;

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> node_ptr() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
    ShapeVec shape;
    Storage data;
    std::unique_ptr<Storage> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const TensorNode&)> backward_fn;

    std::int64_t numel() const { return shape_numel(shape); }
    void ensure_grad();
};

// Autograd recording is on by default; NoGradGuard switches it off for the
// current scope (inference, data prep).
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Integer class-index grid, shape (B,H,W) or (H,W).
struct LabelMap {
    ShapeVec shape;
    std::vector<std::int32_t> values;

    static LabelMap zeros(ShapeVec shape);
    std::int64_t numel() const { return shape_numel(shape); }
};

// ---- operations ------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);                  // same shape
Tensor add_scaled(const Tensor& a, const Tensor& b, double alpha);
Tensor mul(const Tensor& a, const Tensor& b);                  // same shape
Tensor scale(const Tensor& a, double factor);
Tensor gelu(const Tensor& x);
Tensor dropout(const Tensor& x, double rate, std::uint64_t seed, bool training);

// y[..., j] = sum_i x[..., i] * w[i, j] + b[j]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w);

// normalization over the trailing axis, scale/shift of extent d
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps = 1e-5);

Tensor softmax(const Tensor& x, int axis);

// batched matmul: (..., m, k) x (..., k, n) with identical leading dims
Tensor matmul(const Tensor& a, const Tensor& b);

// cross-correlation; x (B,Cin,H,W), k (Cout,Cin/groups,kh,kw)
Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int padding,
              int groups = 1);
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding, int groups = 1);

// depthwise-over-channels 3d conv; x (B,C,D,H,W), k (C,1,kd,kh,kw), stride 1.
// groups must equal C and padding must preserve the shape.
Tensor grouped_conv3d(const Tensor& x, const Tensor& k, const Tensor& b,
                      std::array<int, 3> padding, int groups);

// align-corners=false bilinear resize of (B,C,H,W)
Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor reshape(const Tensor& x, ShapeVec new_shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// remove `axis` by selecting `index`
Tensor index_axis(const Tensor& x, int axis, std::int64_t index);
// join equal-shaped tensors along a fresh trailing axis
Tensor stack_last(const std::vector<Tensor>& parts);

// reductions over the trailing axis
Tensor reduce_max_last(const Tensor& x);    // grad routed to the first argmax
Tensor reduce_mean_last(const Tensor& x);
// (sum_k w[k] * x[..., k]) / K + bias
Tensor weighted_merge_last(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// mean over non-ignored pixels of -log softmax(logits)[target];
// logits (B,C,H,W), target (B,H,W)
Tensor cross_entropy(const Tensor& logits, const LabelMap& target, int ignore_label);

// ---- parameters ------------------------------------------------------

enum class ParamKind { Weight, Bias, NormScale, NormShift };
const char* param_kind_name(ParamKind k);
ParamKind param_kind_from_name(const std::string& name);

struct Parameter {
    std::string name;
    ParamKind kind = ParamKind::Weight;
    Tensor tensor;
};

class ParamStore {
public:
    Tensor add(std::string name, ParamKind kind, Tensor t);
    const std::vector<Parameter>& items() const { return items_; }
    std::vector<Parameter>& items() { return items_; }
    const Parameter& by_name(const std::string& name) const;
    std::int64_t total_count() const;
    std::int64_t count_with_prefix(const std::string& prefix) const;
    void zero_grad();

private:
    std::vector<Parameter> items_;
};

// max over parameter elements of |analytic - central difference| /
// max(|analytic|, |numeric|, 1e-12). f must be deterministic.
double grad_check(const std::function<Tensor()>& f, std::span<Parameter> params, double h);

}  // namespace lmfnet
