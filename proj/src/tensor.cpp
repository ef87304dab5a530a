#include "lmfnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace lmfnet {

std::string shape_to_string(const ShapeVec& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

std::int64_t shape_numel(const ShapeVec& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double Rng::truncated_normal(double stddev) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return z * stddev;
}

const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "float32" : "float64"; }

Dtype dtype_from_name(const std::string& name) {
    if (name == "float32") return Dtype::F32;
    if (name == "float64") return Dtype::F64;
    throw ConfigError("unknown dtype: " + name);
}

std::size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

Storage::Storage(Dtype dt, std::int64_t n, double fill) {
    if (n < 0) throw ShapeError("negative storage size");
    if (dt == Dtype::F32) {
        values_ = std::vector<float>(static_cast<std::size_t>(n), static_cast<float>(fill));
    } else {
        values_ = std::vector<double>(static_cast<std::size_t>(n), fill);
    }
}

std::int64_t Storage::size() const {
    return std::visit([](const auto& v) { return static_cast<std::int64_t>(v.size()); }, values_);
}

double Storage::get(std::int64_t i) const {
    return std::visit([i](const auto& v) { return static_cast<double>(v[static_cast<std::size_t>(i)]); },
                      values_);
}

void Storage::set(std::int64_t i, double value) {
    std::visit(
        [i, value](auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            v[static_cast<std::size_t>(i)] = static_cast<T>(value);
        },
        values_);
}

void Storage::fill(double value) {
    std::visit(
        [value](auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            std::fill(v.begin(), v.end(), static_cast<T>(value));
        },
        values_);
}

void Storage::add(const Storage& other) {
    if (dtype() != other.dtype() || size() != other.size()) {
        throw ShapeError("storage add mismatch");
    }
    std::visit(
        [&other](auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            auto o = other.as<T>();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += o[i];
        },
        values_);
}

void TensorNode::ensure_grad() {
    if (!grad) grad = std::make_unique<Storage>(data.dtype(), numel(), 0.0);
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> make_node(ShapeVec shape, Dtype dt) {
    auto n = std::make_shared<TensorNode>();
    n->data = Storage(dt, shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    return n;
}

// Wires parents/backward onto `out` when recording is active and any parent
// requires grad. `backward` receives the output node (grad guaranteed set).
void attach(const std::shared_ptr<TensorNode>& out, std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void(const TensorNode&)> backward) {
    if (!g_grad_enabled) return;
    bool any = false;
    for (const auto& p : parents) {
        if (p && p->requires_grad) any = true;
    }
    if (!any) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(backward);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) {
        throw ShapeError(std::string(op) + ": mismatched operands " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

std::int64_t outer_size(const ShapeVec& s, int axis) {
    std::int64_t n = 1;
    for (int i = 0; i < axis; ++i) n *= s[static_cast<std::size_t>(i)];
    return n;
}

std::int64_t inner_size(const ShapeVec& s, int axis) {
    std::int64_t n = 1;
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) n *= s[i];
    return n;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

// ---- Tensor basics ----------------------------------------------------

Tensor Tensor::zeros(ShapeVec shape, Dtype dt, bool requires_grad) {
    auto n = make_node(std::move(shape), dt);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(ShapeVec shape, double value, Dtype dt) {
    auto n = make_node(std::move(shape), dt);
    n->data.fill(value);
    return Tensor(std::move(n));
}

Tensor Tensor::from_values(ShapeVec shape, const std::vector<double>& values, Dtype dt) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("from_values: " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    auto n = make_node(std::move(shape), dt);
    for (std::size_t i = 0; i < values.size(); ++i) n->data.set(static_cast<std::int64_t>(i), values[i]);
    return Tensor(std::move(n));
}

Tensor Tensor::randn(ShapeVec shape, Dtype dt, Rng& rng, double mean, double stddev) {
    auto n = make_node(std::move(shape), dt);
    const std::int64_t count = n->numel();
    for (std::int64_t i = 0; i < count; ++i) n->data.set(i, rng.normal(mean, stddev));
    return Tensor(std::move(n));
}

Tensor Tensor::rand_uniform(ShapeVec shape, Dtype dt, Rng& rng, double lo, double hi) {
    auto n = make_node(std::move(shape), dt);
    const std::int64_t count = n->numel();
    for (std::int64_t i = 0; i < count; ++i) n->data.set(i, rng.uniform(lo, hi));
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

const ShapeVec& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::numel() const { return node_->numel(); }
Dtype Tensor::dtype() const { return node_->data.dtype(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
}

template <typename T>
std::span<const T> Tensor::data() const {
    return node_->data.as<T>();
}
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

template <typename T>
std::span<T> Tensor::mutable_data() {
    return node_->data.as<T>();
}
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

double Tensor::value_at(std::int64_t i) const { return node_->data.get(i); }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
    return node_->data.get(0);
}

bool Tensor::has_grad() const { return node_ && node_->grad != nullptr; }

std::span<const float> Tensor::grad_f32() const { return node_->grad->as<float>(); }
std::span<const double> Tensor::grad_f64() const { return node_->grad->as<double>(); }

double Tensor::grad_at(std::int64_t i) const {
    if (!has_grad()) return 0.0;
    return node_->grad->get(i);
}

void Tensor::zero_grad() {
    if (node_ && node_->grad) node_->grad->fill(0.0);
}

Tensor Tensor::detach() const {
    auto n = make_node(node_->shape, dtype());
    n->data = node_->data;
    return Tensor(std::move(n));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::astype(Dtype dt) const {
    if (dt == dtype()) return detach();
    auto n = make_node(node_->shape, dt);
    const std::int64_t count = numel();
    for (std::int64_t i = 0; i < count; ++i) n->data.set(i, node_->data.get(i));
    return Tensor(std::move(n));
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<std::size_t>(numel()));
    for (std::int64_t i = 0; i < numel(); ++i) out[static_cast<std::size_t>(i)] = node_->data.get(i);
    return out;
}

void Tensor::backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_to_string(shape()));
    if (!node_->requires_grad) return;

    // iterative post-order DFS over parents
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [cur, idx] = stack.back();
        if (idx < cur->parents.size()) {
            TensorNode* p = cur->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(cur);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad->fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && n->grad) n->backward_fn(*n);
    }
}

LabelMap LabelMap::zeros(ShapeVec shape) {
    LabelMap m;
    m.shape = std::move(shape);
    m.values.assign(static_cast<std::size_t>(shape_numel(m.shape)), 0);
    return m;
}

// ---- elementwise ------------------------------------------------------

Tensor add_scaled(const Tensor& a, const Tensor& b, double alpha) {
    check_same_shape(a, b, "add");
    auto out = make_node(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pa = a.data<T>();
        auto pb = b.data<T>();
        auto po = out->data.as<T>();
        const T al = static_cast<T>(alpha);
        for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + al * pb[i];
    });
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    attach(out, {an, bn}, [an, bn, alpha](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            if (an->requires_grad) {
                an->ensure_grad();
                auto ga = an->grad->as<T>();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                auto gb = bn->grad->as<T>();
                const T al = static_cast<T>(alpha);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += al * go[i];
            }
        });
    });
    return Tensor(out);
}

Tensor add(const Tensor& a, const Tensor& b) { return add_scaled(a, b, 1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = make_node(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pa = a.data<T>();
        auto pb = b.data<T>();
        auto po = out->data.as<T>();
        for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
    });
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    attach(out, {an, bn}, [an, bn](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            auto pa = an->data.as<T>();
            auto pb = bn->data.as<T>();
            if (an->requires_grad) {
                an->ensure_grad();
                auto ga = an->grad->as<T>();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                auto gb = bn->grad->as<T>();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa[i];
            }
        });
    });
    return Tensor(out);
}

Tensor scale(const Tensor& a, double factor) {
    auto out = make_node(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pa = a.data<T>();
        auto po = out->data.as<T>();
        const T f = static_cast<T>(factor);
        for (std::size_t i = 0; i < po.size(); ++i) po[i] = f * pa[i];
    });
    auto an = a.node_ptr();
    attach(out, {an}, [an, factor](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            an->ensure_grad();
            auto ga = an->grad->as<T>();
            const T f = static_cast<T>(factor);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += f * go[i];
        });
    });
    return Tensor(out);
}

Tensor gelu(const Tensor& x) {
    auto out = make_node(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out->data.as<T>();
        for (std::size_t i = 0; i < po.size(); ++i) {
            double v = static_cast<double>(px[i]);
            po[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)));
        }
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            auto px = xn->data.as<T>();
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            for (std::size_t i = 0; i < go.size(); ++i) {
                double v = static_cast<double>(px[i]);
                double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
                double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
                gx[i] += go[i] * static_cast<T>(cdf + v * pdf);
            }
        });
    });
    return Tensor(out);
}

Tensor dropout(const Tensor& x, double rate, std::uint64_t seed, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(x.numel()));
    Rng rng(seed);
    for (auto& m : *mask) m = rng.uniform() >= rate ? 1 : 0;
    const double keep_scale = 1.0 / (1.0 - rate);
    auto out = make_node(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out->data.as<T>();
        const T s = static_cast<T>(keep_scale);
        for (std::size_t i = 0; i < po.size(); ++i) po[i] = (*mask)[i] ? px[i] * s : T(0);
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn, mask, keep_scale](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            const T s = static_cast<T>(keep_scale);
            for (std::size_t i = 0; i < go.size(); ++i) {
                if ((*mask)[i]) gx[i] += go[i] * s;
            }
        });
    });
    return Tensor(out);
}

// ---- linear -----------------------------------------------------------

namespace {

template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
              bool trans_a, bool trans_b) {
    // c (m x n) += op(a) * op(b); plain loops, deterministic accumulation
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            T acc = 0;
            if (!trans_a && !trans_b) {
                const T* ar = a + i * k;
                for (std::int64_t p = 0; p < k; ++p) acc += ar[p] * b[p * n + j];
            } else if (!trans_a && trans_b) {
                const T* ar = a + i * k;
                const T* br = b + j * k;
                for (std::int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            } else if (trans_a && !trans_b) {
                for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            } else {
                for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
            }
            c[i * n + j] += acc;
        }
    }
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.ndim() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_to_string(w.shape()));
    const std::int64_t d_in = w.dim(0);
    const std::int64_t d_out = w.dim(1);
    if (x.ndim() < 1 || x.shape().back() != d_in) {
        throw ShapeError("linear: input " + shape_to_string(x.shape()) + " incompatible with weight " +
                         shape_to_string(w.shape()));
    }
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != d_out)) {
        throw ShapeError("linear: bias " + shape_to_string(b.shape()) + " incompatible with weight " +
                         shape_to_string(w.shape()));
    }
    ShapeVec out_shape = x.shape();
    out_shape.back() = d_out;
    auto out = make_node(out_shape, x.dtype());
    const std::int64_t rows = x.numel() / d_in;
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto pw = w.data<T>();
        auto po = out->data.as<T>();
        if (b.defined()) {
            auto pb = b.data<T>();
            for (std::int64_t r = 0; r < rows; ++r) {
                T* orow = po.data() + r * d_out;
                for (std::int64_t j = 0; j < d_out; ++j) orow[j] = pb[j];
            }
        }
        gemm_acc<T>(px.data(), pw.data(), po.data(), rows, d_in, d_out, false, false);
    });
    auto xn = x.node_ptr();
    auto wn = w.node_ptr();
    auto bn = b.defined() ? b.node_ptr() : nullptr;
    attach(out, {xn, wn, bn}, [xn, wn, bn, rows, d_in, d_out](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            if (xn->requires_grad) {
                xn->ensure_grad();
                gemm_acc<T>(go.data(), wn->data.as<T>().data(), xn->grad->as<T>().data(), rows, d_out,
                            d_in, false, true);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                gemm_acc<T>(xn->data.as<T>().data(), go.data(), wn->grad->as<T>().data(), d_in, rows,
                            d_out, true, false);
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                auto gb = bn->grad->as<T>();
                for (std::int64_t j = 0; j < d_out; ++j) {
                    T acc = 0;
                    for (std::int64_t r = 0; r < rows; ++r) acc += go[static_cast<std::size_t>(r * d_out + j)];
                    gb[static_cast<std::size_t>(j)] += acc;
                }
            }
        });
    });
    return Tensor(out);
}

Tensor linear(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor()); }

// ---- layer norm -------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& scale_t, const Tensor& shift_t, double eps) {
    if (eps <= 0.0) throw ConfigError("layer_norm eps must be positive");
    const std::int64_t d = x.shape().back();
    if (scale_t.numel() != d || shift_t.numel() != d) {
        throw ShapeError("layer_norm: scale/shift extent must match trailing dim " + std::to_string(d));
    }
    const std::int64_t slices = x.numel() / d;
    auto out = make_node(x.shape(), x.dtype());
    // inv_std and normalized values are needed again in backward
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(slices));
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto pg = scale_t.data<T>();
        auto pb = shift_t.data<T>();
        auto po = out->data.as<T>();
        for (std::int64_t s = 0; s < slices; ++s) {
            const T* row = px.data() + s * d;
            double mean = 0.0;
            for (std::int64_t i = 0; i < d; ++i) mean += static_cast<double>(row[i]);
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::int64_t i = 0; i < d; ++i) {
                double c = static_cast<double>(row[i]) - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            double istd = 1.0 / std::sqrt(var + eps);
            (*inv_std)[static_cast<std::size_t>(s)] = istd;
            T* orow = po.data() + s * d;
            for (std::int64_t i = 0; i < d; ++i) {
                double xh = (static_cast<double>(row[i]) - mean) * istd;
                (*xhat)[static_cast<std::size_t>(s * d + i)] = xh;
                orow[i] = static_cast<T>(xh * static_cast<double>(pg[i]) + static_cast<double>(pb[i]));
            }
        }
    });
    auto xn = x.node_ptr();
    auto gn = scale_t.node_ptr();
    auto bn = shift_t.node_ptr();
    attach(out, {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, slices, d](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            if (gn->requires_grad) {
                gn->ensure_grad();
                auto gg = gn->grad->as<T>();
                for (std::int64_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::int64_t s = 0; s < slices; ++s) {
                        acc += static_cast<double>(go[static_cast<std::size_t>(s * d + i)]) *
                               (*xhat)[static_cast<std::size_t>(s * d + i)];
                    }
                    gg[static_cast<std::size_t>(i)] += static_cast<T>(acc);
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                auto gb = bn->grad->as<T>();
                for (std::int64_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::int64_t s = 0; s < slices; ++s) {
                        acc += static_cast<double>(go[static_cast<std::size_t>(s * d + i)]);
                    }
                    gb[static_cast<std::size_t>(i)] += static_cast<T>(acc);
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                auto gx = xn->grad->as<T>();
                auto pg = gn->data.as<T>();
                for (std::int64_t s = 0; s < slices; ++s) {
                    double mean_dy = 0.0;
                    double mean_dy_xhat = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        double dy = static_cast<double>(go[static_cast<std::size_t>(s * d + i)]) *
                                    static_cast<double>(pg[i]);
                        mean_dy += dy;
                        mean_dy_xhat += dy * (*xhat)[static_cast<std::size_t>(s * d + i)];
                    }
                    mean_dy /= static_cast<double>(d);
                    mean_dy_xhat /= static_cast<double>(d);
                    double istd = (*inv_std)[static_cast<std::size_t>(s)];
                    for (std::int64_t i = 0; i < d; ++i) {
                        double dy = static_cast<double>(go[static_cast<std::size_t>(s * d + i)]) *
                                    static_cast<double>(pg[i]);
                        double xh = (*xhat)[static_cast<std::size_t>(s * d + i)];
                        gx[static_cast<std::size_t>(s * d + i)] +=
                            static_cast<T>((dy - mean_dy - xh * mean_dy_xhat) * istd);
                    }
                }
            }
        });
    });
    return Tensor(out);
}

// ---- softmax ----------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("softmax: invalid axis");
    const std::int64_t extent = x.dim(axis);
    const std::int64_t outer = outer_size(x.shape(), axis);
    const std::int64_t inner = inner_size(x.shape(), axis);
    auto out = make_node(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out->data.as<T>();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * extent * inner + in;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::int64_t k = 0; k < extent; ++k) {
                    mx = std::max(mx, static_cast<double>(px[static_cast<std::size_t>(base + k * inner)]));
                }
                double sum = 0.0;
                for (std::int64_t k = 0; k < extent; ++k) {
                    double e = std::exp(static_cast<double>(px[static_cast<std::size_t>(base + k * inner)]) - mx);
                    po[static_cast<std::size_t>(base + k * inner)] = static_cast<T>(e);
                    sum += e;
                }
                const double inv = 1.0 / sum;
                for (std::int64_t k = 0; k < extent; ++k) {
                    auto& v = po[static_cast<std::size_t>(base + k * inner)];
                    v = static_cast<T>(static_cast<double>(v) * inv);
                }
            }
        }
    });
    auto xn = x.node_ptr();
    auto on = out;
    attach(out, {xn}, [xn, on, extent, outer, inner](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            auto py = on->data.as<T>();
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            for (std::int64_t ot = 0; ot < outer; ++ot) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = ot * extent * inner + in;
                    double dot = 0.0;
                    for (std::int64_t k = 0; k < extent; ++k) {
                        const auto idx = static_cast<std::size_t>(base + k * inner);
                        dot += static_cast<double>(go[idx]) * static_cast<double>(py[idx]);
                    }
                    for (std::int64_t k = 0; k < extent; ++k) {
                        const auto idx = static_cast<std::size_t>(base + k * inner);
                        gx[idx] += static_cast<T>(static_cast<double>(py[idx]) *
                                                  (static_cast<double>(go[idx]) - dot));
                    }
                }
            }
        });
    });
    return Tensor(out);
}

// ---- matmul -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2 || a.ndim() != b.ndim()) {
        throw ShapeError("matmul: ranks " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    }
    const int nd = a.ndim();
    for (int i = 0; i < nd - 2; ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw ShapeError("matmul: leading dims differ " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
        }
    }
    const std::int64_t m = a.dim(nd - 2);
    const std::int64_t k = a.dim(nd - 1);
    const std::int64_t k2 = b.dim(nd - 2);
    const std::int64_t n = b.dim(nd - 1);
    if (k != k2) {
        throw ShapeError("matmul: inner dims differ " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    ShapeVec out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    const std::int64_t batch = shape_numel(out_shape) / (m * n);
    auto out = make_node(out_shape, a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pa = a.data<T>();
        auto pb = b.data<T>();
        auto po = out->data.as<T>();
        for (std::int64_t bt = 0; bt < batch; ++bt) {
            gemm_acc<T>(pa.data() + bt * m * k, pb.data() + bt * k * n, po.data() + bt * m * n, m, k, n,
                        false, false);
        }
    });
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    attach(out, {an, bn}, [an, bn, batch, m, k, n](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            if (an->requires_grad) {
                an->ensure_grad();
                auto ga = an->grad->as<T>();
                auto pb = bn->data.as<T>();
                for (std::int64_t bt = 0; bt < batch; ++bt) {
                    gemm_acc<T>(go.data() + bt * m * n, pb.data() + bt * k * n, ga.data() + bt * m * k, m,
                                n, k, false, true);
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                auto gb = bn->grad->as<T>();
                auto pa = an->data.as<T>();
                for (std::int64_t bt = 0; bt < batch; ++bt) {
                    gemm_acc<T>(pa.data() + bt * m * k, go.data() + bt * m * n, gb.data() + bt * k * n, k,
                                m, n, true, false);
                }
            }
        });
    });
    return Tensor(out);
}

// ---- conv2d -----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int padding, int groups) {
    if (x.ndim() != 4 || k.ndim() != 4) {
        throw ShapeError("conv2d: expected x rank 4 and kernel rank 4, got " + shape_to_string(x.shape()) +
                         " and " + shape_to_string(k.shape()));
    }
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = k.dim(0), Ckin = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0) {
        throw ConfigError("conv2d: groups=" + std::to_string(groups) + " must divide channels");
    }
    if (Ckin != Cin / groups) {
        throw ShapeError("conv2d: kernel " + shape_to_string(k.shape()) + " incompatible with input " +
                         shape_to_string(x.shape()) + " at groups=" + std::to_string(groups));
    }
    if (kh > H + 2 * padding || kw > W + 2 * padding) {
        throw ShapeError("conv2d: kernel " + shape_to_string(k.shape()) + " larger than padded input " +
                         shape_to_string(x.shape()));
    }
    if (b.defined() && b.numel() != Cout) throw ShapeError("conv2d: bias extent must equal Cout");
    const std::int64_t Ho = (H + 2 * padding - kh) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - kw) / stride + 1;
    const std::int64_t cpg_in = Cin / groups;
    const std::int64_t cpg_out = Cout / groups;
    auto out = make_node({B, Cout, Ho, Wo}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto pk = k.data<T>();
        auto po = out->data.as<T>();
        const T* pb = nullptr;
        if (b.defined()) pb = b.data<T>().data();
        for (std::int64_t bi = 0; bi < B; ++bi) {
            for (std::int64_t co = 0; co < Cout; ++co) {
                const std::int64_t g = co / cpg_out;
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                        T acc = pb ? pb[co] : T(0);
                        for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
                            const std::int64_t cin = g * cpg_in + ci;
                            const T* xplane = px.data() + ((bi * Cin + cin) * H) * W;
                            const T* krow = pk.data() + ((co * cpg_in + ci) * kh) * kw;
                            for (std::int64_t r = 0; r < kh; ++r) {
                                const std::int64_t ih = oh * stride - padding + r;
                                if (ih < 0 || ih >= H) continue;
                                for (std::int64_t c = 0; c < kw; ++c) {
                                    const std::int64_t iw = ow * stride - padding + c;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += xplane[ih * W + iw] * krow[r * kw + c];
                                }
                            }
                        }
                        po[static_cast<std::size_t>(((bi * Cout + co) * Ho + oh) * Wo + ow)] = acc;
                    }
                }
            }
        }
    });
    auto xn = x.node_ptr();
    auto kn = k.node_ptr();
    auto bn = b.defined() ? b.node_ptr() : nullptr;
    attach(out, {xn, kn, bn},
           [xn, kn, bn, B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, padding, cpg_in, cpg_out](
               const TensorNode& o) {
               dispatch_dtype(o.data.dtype(), [&](auto tag) {
                   using T = decltype(tag);
                   auto go = o.grad->as<T>();
                   if (xn->requires_grad) {
                       xn->ensure_grad();
                       auto gx = xn->grad->as<T>();
                       auto pk = kn->data.as<T>();
                       for (std::int64_t bi = 0; bi < B; ++bi) {
                           for (std::int64_t cin = 0; cin < Cin; ++cin) {
                               const std::int64_t g = cin / cpg_in;
                               const std::int64_t ci = cin % cpg_in;
                               for (std::int64_t ih = 0; ih < H; ++ih) {
                                   for (std::int64_t iw = 0; iw < W; ++iw) {
                                       T acc = 0;
                                       for (std::int64_t co = g * cpg_out; co < (g + 1) * cpg_out; ++co) {
                                           const T* krow = pk.data() + ((co * cpg_in + ci) * kh) * kw;
                                           const T* gplane = go.data() + ((bi * Cout + co) * Ho) * Wo;
                                           for (std::int64_t r = 0; r < kh; ++r) {
                                               const std::int64_t num = ih + padding - r;
                                               if (num < 0 || num % stride != 0) continue;
                                               const std::int64_t oh = num / stride;
                                               if (oh >= Ho) continue;
                                               for (std::int64_t c = 0; c < kw; ++c) {
                                                   const std::int64_t numw = iw + padding - c;
                                                   if (numw < 0 || numw % stride != 0) continue;
                                                   const std::int64_t ow = numw / stride;
                                                   if (ow >= Wo) continue;
                                                   acc += gplane[oh * Wo + ow] * krow[r * kw + c];
                                               }
                                           }
                                       }
                                       gx[static_cast<std::size_t>(((bi * Cin + cin) * H + ih) * W + iw)] += acc;
                                   }
                               }
                           }
                       }
                   }
                   if (kn->requires_grad) {
                       kn->ensure_grad();
                       auto gk = kn->grad->as<T>();
                       auto px = xn->data.as<T>();
                       for (std::int64_t co = 0; co < Cout; ++co) {
                           const std::int64_t g = co / cpg_out;
                           for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
                               const std::int64_t cin = g * cpg_in + ci;
                               for (std::int64_t r = 0; r < kh; ++r) {
                                   for (std::int64_t c = 0; c < kw; ++c) {
                                       T acc = 0;
                                       for (std::int64_t bi = 0; bi < B; ++bi) {
                                           const T* xplane = px.data() + ((bi * Cin + cin) * H) * W;
                                           const T* gplane = go.data() + ((bi * Cout + co) * Ho) * Wo;
                                           for (std::int64_t oh = 0; oh < Ho; ++oh) {
                                               const std::int64_t ih = oh * stride - padding + r;
                                               if (ih < 0 || ih >= H) continue;
                                               for (std::int64_t ow = 0; ow < Wo; ++ow) {
                                                   const std::int64_t iw = ow * stride - padding + c;
                                                   if (iw < 0 || iw >= W) continue;
                                                   acc += xplane[ih * W + iw] * gplane[oh * Wo + ow];
                                               }
                                           }
                                       }
                                       gk[static_cast<std::size_t>(((co * cpg_in + ci) * kh + r) * kw + c)] += acc;
                                   }
                               }
                           }
                       }
                   }
                   if (bn && bn->requires_grad) {
                       bn->ensure_grad();
                       auto gb = bn->grad->as<T>();
                       for (std::int64_t co = 0; co < Cout; ++co) {
                           T acc = 0;
                           for (std::int64_t bi = 0; bi < B; ++bi) {
                               const T* gplane = go.data() + ((bi * Cout + co) * Ho) * Wo;
                               for (std::int64_t i = 0; i < Ho * Wo; ++i) acc += gplane[i];
                           }
                           gb[static_cast<std::size_t>(co)] += acc;
                       }
                   }
               });
           });
    return Tensor(out);
}

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding, int groups) {
    return conv2d(x, k, Tensor(), stride, padding, groups);
}

// ---- grouped conv3d ---------------------------------------------------

Tensor grouped_conv3d(const Tensor& x, const Tensor& k, const Tensor& b, std::array<int, 3> padding,
                      int groups) {
    if (x.ndim() != 5 || k.ndim() != 5) {
        throw ShapeError("grouped_conv3d: expected rank-5 input and kernel, got " +
                         shape_to_string(x.shape()) + " and " + shape_to_string(k.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    if (groups != C) {
        throw ConfigError("grouped_conv3d: groups=" + std::to_string(groups) + " must equal channels C=" +
                          std::to_string(C));
    }
    if (k.dim(0) != C || k.dim(1) != 1) {
        throw ShapeError("grouped_conv3d: kernel must be (C,1,kd,kh,kw), got " + shape_to_string(k.shape()));
    }
    const std::int64_t kd = k.dim(2), kh = k.dim(3), kw = k.dim(4);
    const std::int64_t pd = padding[0], ph = padding[1], pw = padding[2];
    if (2 * pd != kd - 1 || 2 * ph != kh - 1 || 2 * pw != kw - 1) {
        throw ConfigError("grouped_conv3d: padding must preserve the input shape");
    }
    if (b.defined() && b.numel() != C) throw ShapeError("grouped_conv3d: bias extent must equal C");
    auto out = make_node(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto pk = k.data<T>();
        auto po = out->data.as<T>();
        const T* pb = b.defined() ? b.data<T>().data() : nullptr;
        for (std::int64_t bi = 0; bi < B; ++bi) {
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xvol = px.data() + ((bi * C + c) * D) * H * W;
                const T* kvol = pk.data() + c * kd * kh * kw;
                T* ovol = po.data() + ((bi * C + c) * D) * H * W;
                for (std::int64_t od = 0; od < D; ++od) {
                    for (std::int64_t oh = 0; oh < H; ++oh) {
                        for (std::int64_t ow = 0; ow < W; ++ow) {
                            T acc = pb ? pb[c] : T(0);
                            for (std::int64_t rd = 0; rd < kd; ++rd) {
                                const std::int64_t id = od - pd + rd;
                                if (id < 0 || id >= D) continue;
                                for (std::int64_t rh = 0; rh < kh; ++rh) {
                                    const std::int64_t ih = oh - ph + rh;
                                    if (ih < 0 || ih >= H) continue;
                                    for (std::int64_t rw = 0; rw < kw; ++rw) {
                                        const std::int64_t iw = ow - pw + rw;
                                        if (iw < 0 || iw >= W) continue;
                                        acc += xvol[(id * H + ih) * W + iw] *
                                               kvol[(rd * kh + rh) * kw + rw];
                                    }
                                }
                            }
                            ovol[(od * H + oh) * W + ow] = acc;
                        }
                    }
                }
            }
        }
    });
    auto xn = x.node_ptr();
    auto kn = k.node_ptr();
    auto bn = b.defined() ? b.node_ptr() : nullptr;
    attach(out, {xn, kn, bn}, [xn, kn, bn, B, C, D, H, W, kd, kh, kw, pd, ph, pw](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            if (xn->requires_grad) {
                xn->ensure_grad();
                auto gx = xn->grad->as<T>();
                auto pk = kn->data.as<T>();
                for (std::int64_t bi = 0; bi < B; ++bi) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* kvol = pk.data() + c * kd * kh * kw;
                        const T* gvol = go.data() + ((bi * C + c) * D) * H * W;
                        T* xg = gx.data() + ((bi * C + c) * D) * H * W;
                        for (std::int64_t id = 0; id < D; ++id) {
                            for (std::int64_t ih = 0; ih < H; ++ih) {
                                for (std::int64_t iw = 0; iw < W; ++iw) {
                                    T acc = 0;
                                    for (std::int64_t rd = 0; rd < kd; ++rd) {
                                        const std::int64_t od = id + pd - rd;
                                        if (od < 0 || od >= D) continue;
                                        for (std::int64_t rh = 0; rh < kh; ++rh) {
                                            const std::int64_t oh = ih + ph - rh;
                                            if (oh < 0 || oh >= H) continue;
                                            for (std::int64_t rw = 0; rw < kw; ++rw) {
                                                const std::int64_t ow = iw + pw - rw;
                                                if (ow < 0 || ow >= W) continue;
                                                acc += gvol[(od * H + oh) * W + ow] *
                                                       kvol[(rd * kh + rh) * kw + rw];
                                            }
                                        }
                                    }
                                    xg[(id * H + ih) * W + iw] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (kn->requires_grad) {
                kn->ensure_grad();
                auto gk = kn->grad->as<T>();
                auto px = xn->data.as<T>();
                for (std::int64_t c = 0; c < C; ++c) {
                    for (std::int64_t rd = 0; rd < kd; ++rd) {
                        for (std::int64_t rh = 0; rh < kh; ++rh) {
                            for (std::int64_t rw = 0; rw < kw; ++rw) {
                                T acc = 0;
                                for (std::int64_t bi = 0; bi < B; ++bi) {
                                    const T* xvol = px.data() + ((bi * C + c) * D) * H * W;
                                    const T* gvol = go.data() + ((bi * C + c) * D) * H * W;
                                    for (std::int64_t od = 0; od < D; ++od) {
                                        const std::int64_t id = od - pd + rd;
                                        if (id < 0 || id >= D) continue;
                                        for (std::int64_t oh = 0; oh < H; ++oh) {
                                            const std::int64_t ih = oh - ph + rh;
                                            if (ih < 0 || ih >= H) continue;
                                            for (std::int64_t ow = 0; ow < W; ++ow) {
                                                const std::int64_t iw = ow - pw + rw;
                                                if (iw < 0 || iw >= W) continue;
                                                acc += xvol[(id * H + ih) * W + iw] *
                                                       gvol[(od * H + oh) * W + ow];
                                            }
                                        }
                                    }
                                }
                                gk[static_cast<std::size_t>(((c * kd + rd) * kh + rh) * kw + rw)] += acc;
                            }
                        }
                    }
                }
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                auto gb = bn->grad->as<T>();
                const std::int64_t plane = D * H * W;
                for (std::int64_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (std::int64_t bi = 0; bi < B; ++bi) {
                        const T* gvol = go.data() + ((bi * C + c) * D) * H * W;
                        for (std::int64_t i = 0; i < plane; ++i) acc += gvol[i];
                    }
                    gb[static_cast<std::size_t>(c)] += acc;
                }
            }
        });
    });
    return Tensor(out);
}

// ---- bilinear resize --------------------------------------------------

namespace {

struct LerpCoord {
    std::int64_t lo;
    std::int64_t hi;
    double frac;
};

// align-corners=false source coordinate for output index i
LerpCoord lerp_coord(std::int64_t i, std::int64_t in_size, std::int64_t out_size) {
    const double s = static_cast<double>(in_size) / static_cast<double>(out_size);
    double src = (static_cast<double>(i) + 0.5) * s - 0.5;
    if (src < 0.0) src = 0.0;
    double fl = std::floor(src);
    LerpCoord c;
    c.lo = static_cast<std::int64_t>(fl);
    if (c.lo > in_size - 1) c.lo = in_size - 1;
    c.hi = std::min<std::int64_t>(c.lo + 1, in_size - 1);
    c.frac = src - static_cast<double>(c.lo);
    if (c.frac < 0.0) c.frac = 0.0;
    return c;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    if (x.ndim() != 4) throw ShapeError("resize_bilinear: expected (B,C,H,W), got " + shape_to_string(x.shape()));
    if (out_h < 1 || out_w < 1) throw ConfigError("resize_bilinear: output extents must be >= 1");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto out = make_node({B, C, out_h, out_w}, x.dtype());
    std::vector<LerpCoord> rows(static_cast<std::size_t>(out_h));
    std::vector<LerpCoord> cols(static_cast<std::size_t>(out_w));
    for (std::int64_t i = 0; i < out_h; ++i) rows[static_cast<std::size_t>(i)] = lerp_coord(i, H, out_h);
    for (std::int64_t j = 0; j < out_w; ++j) cols[static_cast<std::size_t>(j)] = lerp_coord(j, W, out_w);
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out->data.as<T>();
        for (std::int64_t p = 0; p < B * C; ++p) {
            const T* in = px.data() + p * H * W;
            T* ov = po.data() + p * out_h * out_w;
            for (std::int64_t i = 0; i < out_h; ++i) {
                const auto& rc = rows[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < out_w; ++j) {
                    const auto& cc = cols[static_cast<std::size_t>(j)];
                    const double top = static_cast<double>(in[rc.lo * W + cc.lo]) * (1.0 - cc.frac) +
                                       static_cast<double>(in[rc.lo * W + cc.hi]) * cc.frac;
                    const double bot = static_cast<double>(in[rc.hi * W + cc.lo]) * (1.0 - cc.frac) +
                                       static_cast<double>(in[rc.hi * W + cc.hi]) * cc.frac;
                    ov[i * out_w + j] = static_cast<T>(top * (1.0 - rc.frac) + bot * rc.frac);
                }
            }
        }
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn, B, C, H, W, out_h, out_w, rows, cols](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            for (std::int64_t p = 0; p < B * C; ++p) {
                const T* gv = go.data() + p * out_h * out_w;
                T* xg = gx.data() + p * H * W;
                for (std::int64_t i = 0; i < out_h; ++i) {
                    const auto& rc = rows[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < out_w; ++j) {
                        const auto& cc = cols[static_cast<std::size_t>(j)];
                        const double g = static_cast<double>(gv[i * out_w + j]);
                        xg[rc.lo * W + cc.lo] += static_cast<T>(g * (1.0 - rc.frac) * (1.0 - cc.frac));
                        xg[rc.lo * W + cc.hi] += static_cast<T>(g * (1.0 - rc.frac) * cc.frac);
                        xg[rc.hi * W + cc.lo] += static_cast<T>(g * rc.frac * (1.0 - cc.frac));
                        xg[rc.hi * W + cc.hi] += static_cast<T>(g * rc.frac * cc.frac);
                    }
                }
            }
        });
    });
    return Tensor(out);
}

// ---- layout -----------------------------------------------------------

namespace {

std::vector<std::int64_t> row_major_strides(const ShapeVec& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
    }
    return st;
}

template <typename T>
void permute_copy(const T* src, T* dst, const ShapeVec& in_shape, const std::vector<int>& perm) {
    const int nd = static_cast<int>(in_shape.size());
    ShapeVec out_shape(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    const auto in_strides = row_major_strides(in_shape);
    // stride in the source for each output axis
    std::vector<std::int64_t> src_stride(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    const std::int64_t total = shape_numel(in_shape);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
    std::int64_t src_off = 0;
    for (std::int64_t flat = 0; flat < total; ++flat) {
        dst[flat] = src[src_off];
        for (int ax = nd - 1; ax >= 0; --ax) {
            auto a = static_cast<std::size_t>(ax);
            if (++idx[a] < out_shape[a]) {
                src_off += src_stride[a];
                break;
            }
            src_off -= src_stride[a] * (out_shape[a] - 1);
            idx[a] = 0;
        }
    }
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    return inv;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute: perm rank mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (int p : perm) {
        if (p < 0 || p >= nd || seen[static_cast<std::size_t>(p)]) throw ShapeError("permute: invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    ShapeVec out_shape(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
    auto out = make_node(out_shape, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        permute_copy<T>(x.data<T>().data(), out->data.as<T>().data(), x.shape(), perm);
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn, perm](const TensorNode& o) {
        const auto inv = inverse_perm(perm);
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            std::vector<T> tmp(static_cast<std::size_t>(o.numel()));
            permute_copy<T>(o.grad->as<T>().data(), tmp.data(), o.shape, inv);
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
        });
    });
    return Tensor(out);
}

Tensor reshape(const Tensor& x, ShapeVec new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(new_shape));
    }
    auto out = make_node(new_shape, x.dtype());
    out->data = x.node()->data;
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn](const TensorNode& o) {
        xn->ensure_grad();
        xn->grad->add(*o.grad);
    });
    return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int nd = parts[0].ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("concat: invalid axis");
    ShapeVec out_shape = parts[0].shape();
    std::int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd || p.dtype() != parts[0].dtype()) throw ShapeError("concat: rank/dtype mismatch");
        for (int i = 0; i < nd; ++i) {
            if (i != axis && p.dim(i) != out_shape[static_cast<std::size_t>(i)]) {
                throw ShapeError("concat: shape mismatch " + shape_to_string(p.shape()) + " vs " +
                                 shape_to_string(parts[0].shape()));
            }
        }
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    auto out = make_node(out_shape, parts[0].dtype());
    const std::int64_t outer = outer_size(out_shape, axis);
    const std::int64_t inner = inner_size(out_shape, axis);
    dispatch_dtype(parts[0].dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto po = out->data.as<T>();
        std::int64_t offset = 0;
        for (const auto& p : parts) {
            auto pp = p.data<T>();
            const std::int64_t ext = p.dim(axis);
            for (std::int64_t o = 0; o < outer; ++o) {
                std::memcpy(po.data() + (o * total_axis + offset) * inner, pp.data() + o * ext * inner,
                            static_cast<std::size_t>(ext * inner) * sizeof(T));
            }
            offset += ext;
        }
    });
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
        parents.push_back(p.node_ptr());
        extents.push_back(p.dim(axis));
    }
    auto parent_copy = parents;
    attach(out, std::move(parents), [parent_copy, extents, outer, inner, total_axis](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            std::int64_t offset = 0;
            for (std::size_t pi = 0; pi < parent_copy.size(); ++pi) {
                const auto& pn = parent_copy[pi];
                const std::int64_t ext = extents[pi];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    auto gp = pn->grad->as<T>();
                    for (std::int64_t ou = 0; ou < outer; ++ou) {
                        const T* src = go.data() + (ou * total_axis + offset) * inner;
                        T* dst = gp.data() + ou * ext * inner;
                        for (std::int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += ext;
            }
        });
    });
    return Tensor(out);
}

Tensor index_axis(const Tensor& x, int axis, std::int64_t index) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("index_axis: invalid axis");
    if (index < 0 || index >= x.dim(axis)) throw ShapeError("index_axis: index out of range");
    ShapeVec out_shape;
    for (int i = 0; i < nd; ++i) {
        if (i != axis) out_shape.push_back(x.dim(i));
    }
    if (out_shape.empty()) out_shape.push_back(1);
    const std::int64_t outer = outer_size(x.shape(), axis);
    const std::int64_t inner = inner_size(x.shape(), axis);
    const std::int64_t ext = x.dim(axis);
    auto out = make_node(out_shape, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out->data.as<T>();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(po.data() + o * inner, px.data() + (o * ext + index) * inner,
                        static_cast<std::size_t>(inner) * sizeof(T));
        }
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn, outer, inner, ext, index](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                const T* src = go.data() + ou * inner;
                T* dst = gx.data() + (ou * ext + index) * inner;
                for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        });
    });
    return Tensor(out);
}

Tensor stack_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("stack_last: no inputs");
    const ShapeVec base = parts[0].shape();
    for (const auto& p : parts) {
        if (p.shape() != base || p.dtype() != parts[0].dtype()) {
            throw ShapeError("stack_last: mismatched part " + shape_to_string(p.shape()) + " vs " +
                             shape_to_string(base));
        }
    }
    const std::int64_t n = static_cast<std::int64_t>(parts.size());
    ShapeVec out_shape = base;
    out_shape.push_back(n);
    auto out = make_node(out_shape, parts[0].dtype());
    const std::int64_t outer = shape_numel(base);
    dispatch_dtype(parts[0].dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto po = out->data.as<T>();
        for (std::int64_t k = 0; k < n; ++k) {
            auto pp = parts[static_cast<std::size_t>(k)].data<T>();
            for (std::int64_t o = 0; o < outer; ++o) po[static_cast<std::size_t>(o * n + k)] = pp[static_cast<std::size_t>(o)];
        }
    });
    std::vector<std::shared_ptr<TensorNode>> parents;
    for (const auto& p : parts) parents.push_back(p.node_ptr());
    auto parent_copy = parents;
    attach(out, std::move(parents), [parent_copy, outer, n](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            for (std::int64_t k = 0; k < n; ++k) {
                const auto& pn = parent_copy[static_cast<std::size_t>(k)];
                if (!pn->requires_grad) continue;
                pn->ensure_grad();
                auto gp = pn->grad->as<T>();
                for (std::int64_t ou = 0; ou < outer; ++ou) {
                    gp[static_cast<std::size_t>(ou)] += go[static_cast<std::size_t>(ou * n + k)];
                }
            }
        });
    });
    return Tensor(out);
}

// ---- trailing-axis reductions ------------------------------------------

Tensor reduce_max_last(const Tensor& x) {
    if (x.ndim() < 1) throw ShapeError("reduce_max_last: rank must be >= 1");
    const std::int64_t n = x.shape().back();
    ShapeVec out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    const std::int64_t outer = x.numel() / n;
    auto out = make_node(out_shape, x.dtype());
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(outer));
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out->data.as<T>();
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* row = px.data() + o * n;
            std::int64_t best = 0;
            for (std::int64_t k = 1; k < n; ++k) {
                if (row[k] > row[best]) best = k;
            }
            (*argmax)[static_cast<std::size_t>(o)] = best;
            po[static_cast<std::size_t>(o)] = row[best];
        }
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn, argmax, outer, n](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                gx[static_cast<std::size_t>(ou * n + (*argmax)[static_cast<std::size_t>(ou)])] +=
                    go[static_cast<std::size_t>(ou)];
            }
        });
    });
    return Tensor(out);
}

Tensor reduce_mean_last(const Tensor& x) {
    if (x.ndim() < 1) throw ShapeError("reduce_mean_last: rank must be >= 1");
    const std::int64_t n = x.shape().back();
    ShapeVec out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    const std::int64_t outer = x.numel() / n;
    auto out = make_node(out_shape, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out->data.as<T>();
        const T inv = static_cast<T>(1.0 / static_cast<double>(n));
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* row = px.data() + o * n;
            T acc = 0;
            for (std::int64_t k = 0; k < n; ++k) acc += row[k];
            po[static_cast<std::size_t>(o)] = acc * inv;
        }
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn, outer, n](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            const T inv = static_cast<T>(1.0 / static_cast<double>(n));
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                const T g = go[static_cast<std::size_t>(ou)] * inv;
                T* row = gx.data() + ou * n;
                for (std::int64_t k = 0; k < n; ++k) row[k] += g;
            }
        });
    });
    return Tensor(out);
}

Tensor weighted_merge_last(const Tensor& x, const Tensor& w, const Tensor& bias) {
    const std::int64_t n = x.shape().back();
    if (w.numel() != n) throw ShapeError("weighted_merge_last: weights must match trailing extent");
    if (bias.numel() != 1) throw ShapeError("weighted_merge_last: bias must be a scalar");
    ShapeVec out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    const std::int64_t outer = x.numel() / n;
    auto out = make_node(out_shape, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto pw = w.data<T>();
        auto po = out->data.as<T>();
        const T inv = static_cast<T>(1.0 / static_cast<double>(n));
        const T b0 = bias.data<T>()[0];
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* row = px.data() + o * n;
            T acc = 0;
            for (std::int64_t k = 0; k < n; ++k) acc += pw[static_cast<std::size_t>(k)] * row[k];
            po[static_cast<std::size_t>(o)] = acc * inv + b0;
        }
    });
    auto xn = x.node_ptr();
    auto wn = w.node_ptr();
    auto bn = bias.node_ptr();
    attach(out, {xn, wn, bn}, [xn, wn, bn, outer, n](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto go = o.grad->as<T>();
            const T inv = static_cast<T>(1.0 / static_cast<double>(n));
            if (xn->requires_grad) {
                xn->ensure_grad();
                auto gx = xn->grad->as<T>();
                auto pw = wn->data.as<T>();
                for (std::int64_t ou = 0; ou < outer; ++ou) {
                    const T g = go[static_cast<std::size_t>(ou)] * inv;
                    T* row = gx.data() + ou * n;
                    for (std::int64_t k = 0; k < n; ++k) row[k] += g * pw[static_cast<std::size_t>(k)];
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                auto gw = wn->grad->as<T>();
                auto px = xn->data.as<T>();
                for (std::int64_t k = 0; k < n; ++k) {
                    T acc = 0;
                    for (std::int64_t ou = 0; ou < outer; ++ou) {
                        acc += go[static_cast<std::size_t>(ou)] * px[static_cast<std::size_t>(ou * n + k)];
                    }
                    gw[static_cast<std::size_t>(k)] += acc * inv;
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                auto gb = bn->grad->as<T>();
                T acc = 0;
                for (std::int64_t ou = 0; ou < outer; ++ou) acc += go[static_cast<std::size_t>(ou)];
                gb[0] += acc;
            }
        });
    });
    return Tensor(out);
}

Tensor sum_all(const Tensor& x) {
    auto out = make_node({1}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        T acc = 0;
        for (std::size_t i = 0; i < px.size(); ++i) acc += px[i];
        out->data.as<T>()[0] = acc;
    });
    auto xn = x.node_ptr();
    attach(out, {xn}, [xn](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T g = o.grad->as<T>()[0];
            xn->ensure_grad();
            auto gx = xn->grad->as<T>();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    });
    return Tensor(out);
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// ---- cross entropy ----------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const LabelMap& target, int ignore_label) {
    if (logits.ndim() != 4) throw ShapeError("cross_entropy: logits must be (B,C,H,W)");
    const std::int64_t B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    if (target.shape != ShapeVec{B, H, W}) {
        throw ShapeError("cross_entropy: target shape " + shape_to_string(target.shape) +
                         " does not match logits " + shape_to_string(logits.shape()));
    }
    for (auto t : target.values) {
        if (t != ignore_label && (t < 0 || t >= C)) {
            throw DataError("cross_entropy: class index " + std::to_string(t) + " out of range [0," +
                            std::to_string(C) + ")");
        }
    }
    auto out = make_node({1}, logits.dtype());
    // per-pixel softmax probabilities are reused in backward
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(logits.numel()));
    std::int64_t counted = 0;
    double loss = 0.0;
    dispatch_dtype(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pl = logits.data<T>();
        const std::int64_t plane = H * W;
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t px = 0; px < plane; ++px) {
                const std::int32_t t = target.values[static_cast<std::size_t>(b * plane + px)];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::int64_t c = 0; c < C; ++c) {
                    mx = std::max(mx, static_cast<double>(pl[static_cast<std::size_t>((b * C + c) * plane + px)]));
                }
                double sum = 0.0;
                for (std::int64_t c = 0; c < C; ++c) {
                    const double e = std::exp(
                        static_cast<double>(pl[static_cast<std::size_t>((b * C + c) * plane + px)]) - mx);
                    (*probs)[static_cast<std::size_t>((b * C + c) * plane + px)] = e;
                    sum += e;
                }
                const double inv = 1.0 / sum;
                for (std::int64_t c = 0; c < C; ++c) {
                    (*probs)[static_cast<std::size_t>((b * C + c) * plane + px)] *= inv;
                }
                if (t == ignore_label) continue;
                ++counted;
                loss -= std::log(std::max(
                    (*probs)[static_cast<std::size_t>((b * C + t) * plane + px)], 1e-300));
            }
        }
    });
    if (counted == 0) throw DataError("cross_entropy: every pixel carries the ignore label");
    loss /= static_cast<double>(counted);
    out->data.set(0, loss);
    auto ln = logits.node_ptr();
    auto tgt = std::make_shared<LabelMap>(target);
    attach(out, {ln}, [ln, tgt, probs, B, C, H, W, ignore_label, counted](const TensorNode& o) {
        dispatch_dtype(o.data.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const double g = static_cast<double>(o.grad->as<T>()[0]) / static_cast<double>(counted);
            ln->ensure_grad();
            auto gl = ln->grad->as<T>();
            const std::int64_t plane = H * W;
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t px = 0; px < plane; ++px) {
                    const std::int32_t t = tgt->values[static_cast<std::size_t>(b * plane + px)];
                    if (t == ignore_label) continue;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const auto idx = static_cast<std::size_t>((b * C + c) * plane + px);
                        double p = (*probs)[idx];
                        if (c == t) p -= 1.0;
                        gl[idx] += static_cast<T>(g * p);
                    }
                }
            }
        });
    });
    return Tensor(out);
}

// ---- parameters -------------------------------------------------------

const char* param_kind_name(ParamKind k) {
    switch (k) {
        case ParamKind::Weight: return "weight";
        case ParamKind::Bias: return "bias";
        case ParamKind::NormScale: return "norm_scale";
        case ParamKind::NormShift: return "norm_shift";
    }
    return "weight";
}

ParamKind param_kind_from_name(const std::string& name) {
    if (name == "weight") return ParamKind::Weight;
    if (name == "bias") return ParamKind::Bias;
    if (name == "norm_scale") return ParamKind::NormScale;
    if (name == "norm_shift") return ParamKind::NormShift;
    throw ConfigError("unknown parameter kind: " + name);
}

Tensor ParamStore::add(std::string name, ParamKind kind, Tensor t) {
    for (const auto& p : items_) {
        if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    }
    t.set_requires_grad(true);
    items_.push_back(Parameter{std::move(name), kind, t});
    return t;
}

const Parameter& ParamStore::by_name(const std::string& name) const {
    for (const auto& p : items_) {
        if (p.name == name) return p;
    }
    throw ConfigError("no such parameter: " + name);
}

std::int64_t ParamStore::total_count() const {
    std::int64_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
}

std::int64_t ParamStore::count_with_prefix(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& p : items_) {
        if (p.name.rfind(prefix, 0) == 0) n += p.tensor.numel();
    }
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
}

double grad_check(const std::function<Tensor()>& f, std::span<Parameter> params, double h) {
    for (auto& p : params) p.tensor.zero_grad();
    Tensor loss = f();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        std::vector<double> g(static_cast<std::size_t>(p.tensor.numel()), 0.0);
        for (std::int64_t i = 0; i < p.tensor.numel(); ++i) {
            const double a = p.tensor.grad_at(i);
            if (!std::isfinite(a)) {
                throw NumericError("grad_check: non-finite gradient in parameter '" + p.name + "'");
            }
            g[static_cast<std::size_t>(i)] = a;
        }
        analytic.push_back(std::move(g));
    }

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& t = params[pi].tensor;
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double saved = t.value_at(i);
            t.node()->data.set(i, saved + h);
            const double fp = f().item();
            t.node()->data.set(i, saved - h);
            const double fm = f().item();
            t.node()->data.set(i, saved);
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][static_cast<std::size_t>(i)];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
            worst = std::max(worst, rel);
        }
    }
    for (auto& p : params) p.tensor.zero_grad();
    return worst;
}

}  // namespace lmfnet
