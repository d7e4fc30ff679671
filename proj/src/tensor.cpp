#include "via/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace via {

namespace {

thread_local Tape* t_active_tape = nullptr;

int64_t shape_product(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
        n *= d;
    }
    return n;
}

void ensure_finite(const Tensor& t, const char* op) {
    const float* p = t.data();
    const int64_t n = t.size();
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) {
            throw std::runtime_error(std::string(op) + ": non-finite value produced");
        }
    }
}

std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (int i = 0; i < t.rank(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.dim(i));
    }
    return s + "]";
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Records `out` if any input is tracked by the active tape.
void maybe_record(Tensor& out, const std::vector<const Tensor*>& inputs, Tape::GradFn fn) {
    Tape* tape = t_active_tape;
    if (!tape) return;
    bool any = false;
    for (const Tensor* in : inputs) {
        if (tape->tracks(*in)) { any = true; break; }
    }
    if (any) tape->record(out, inputs, std::move(fn));
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<float>>(static_cast<size_t>(shape_product(shape_)), 0.0f)) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> values) : shape_(std::move(shape)) {
    if (shape_product(shape_) != static_cast<int64_t>(values.size())) {
        throw std::invalid_argument("Tensor: value count does not match shape");
    }
    data_ = std::make_shared<std::vector<float>>(std::move(values));
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal()) * stddev;
    return t;
}

int64_t Tensor::size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

float Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return (*data_)[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<float>>(*data_);
    return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
std::atomic<uint64_t> g_tape_counter{1};
}

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

void Tape::watch(Tensor& param) {
    if (tracks(param)) return;
    nodes_.push_back(Node{{}, nullptr});
    param.set_tape_link(id_, static_cast<int>(nodes_.size()) - 1);
}

void Tape::record(Tensor& out, const std::vector<const Tensor*>& inputs, GradFn fn) {
    Node node;
    node.inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) {
        node.inputs.push_back(tracks(*in) ? in->node() : -1);
    }
    node.grad_fn = std::move(fn);
    nodes_.push_back(std::move(node));
    out.set_tape_link(id_, static_cast<int>(nodes_.size()) - 1);
}

Gradients Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("Tape::backward: loss must be scalar");
    if (!tracks(loss)) throw std::invalid_argument("Tape::backward: loss is not recorded on this tape");

    // Grad lambdas reuse the public ops; suspend recording while replaying.
    Tape* saved = t_active_tape;
    t_active_tape = nullptr;

    std::vector<Tensor> buffers(nodes_.size());
    buffers[static_cast<size_t>(loss.node())] = Tensor::scalar(1.0f);

    for (int i = loss.node(); i >= 0; --i) {
        const Node& node = nodes_[static_cast<size_t>(i)];
        Tensor& gout = buffers[static_cast<size_t>(i)];
        if (!gout.defined() || !node.grad_fn) continue;
        std::vector<Tensor> gins = node.grad_fn(gout);
        if (gins.size() != node.inputs.size()) {
            t_active_tape = saved;
            throw std::runtime_error("Tape::backward: grad_fn arity mismatch");
        }
        for (size_t j = 0; j < gins.size(); ++j) {
            int id = node.inputs[j];
            if (id < 0 || !gins[j].defined()) continue;
            Tensor& buf = buffers[static_cast<size_t>(id)];
            if (!buf.defined()) {
                buf = gins[j].clone();
            } else {
                if (!buf.same_shape(gins[j])) {
                    t_active_tape = saved;
                    throw std::runtime_error("Tape::backward: gradient shape mismatch");
                }
                float* a = buf.data();
                const float* b = gins[j].data();
                for (int64_t k = 0; k < buf.size(); ++k) a[k] += b[k];
            }
        }
    }
    t_active_tape = saved;

    std::unordered_map<int, Tensor> by_node;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].grad_fn && buffers[i].defined()) {
            by_node.emplace(static_cast<int>(i), buffers[i]);
        }
    }
    return Gradients(id_, std::move(by_node));
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

Tape* active_tape() { return t_active_tape; }

Gradients::Gradients(uint64_t tape_id, std::unordered_map<int, Tensor> by_node)
    : tape_id_(tape_id), by_node_(std::move(by_node)) {}

Tensor Gradients::grad(const Tensor& param) const {
    if (param.tape_id() == tape_id_ && param.node() >= 0) {
        auto it = by_node_.find(param.node());
        if (it != by_node_.end()) return it->second;
    }
    return Tensor::zeros(param.shape());
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    ensure_finite(out, "add");
    maybe_record(out, {&a, &b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "sub: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
    ensure_finite(out, "sub");
    maybe_record(out, {&a, &b}, [](const Tensor& g) {
        return std::vector<Tensor>{g, mul_scalar(g, -1.0f)};
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "mul: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
    ensure_finite(out, "mul");
    maybe_record(out, {&a, &b}, [a, b](const Tensor& g) {
        return std::vector<Tensor>{mul(g, b), mul(g, a)};
    });
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    Tensor out(a.shape());
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + s;
    ensure_finite(out, "add_scalar");
    maybe_record(out, {&a}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
    return out;
}

Tensor mul_scalar(const Tensor& a, float s) {
    Tensor out(a.shape());
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * s;
    ensure_finite(out, "mul_scalar");
    maybe_record(out, {&a}, [s](const Tensor& g) { return std::vector<Tensor>{mul_scalar(g, s)}; });
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require(a.rank() == 2 && v.rank() == 1 && a.dim(1) == v.dim(0),
            "add_rowvec: expected [m,n] + [n], got " + shape_str(a) + " + " + shape_str(v));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pv = v.data();
    float* po = out.data();
    for (int i = 0; i < m; ++i) {
        const float* ra = pa + static_cast<int64_t>(i) * n;
        float* ro = po + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) ro[j] = ra[j] + pv[j];
    }
    ensure_finite(out, "add_rowvec");
    maybe_record(out, {&a, &v}, [m, n](const Tensor& g) {
        Tensor gv({n});
        const float* pg = g.data();
        float* pgv = gv.data();
        for (int i = 0; i < m; ++i) {
            const float* rg = pg + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) pgv[j] += rg[j];
        }
        return std::vector<Tensor>{g, gv};
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace {

// c[m,n] = a[m,k] * b[k,n], accumulating over rows of b (cache friendly).
void mm_kernel(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<int64_t>(i) * n;
        std::memset(crow, 0, sizeof(float) * static_cast<size_t>(n));
        const float* arow = a + static_cast<int64_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const float av = arow[l];
            const float* brow = b + static_cast<int64_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] = a[m,k] * b[n,k]^T; rows of both operands are contiguous.
void mm_nt_kernel(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * k;
        float* crow = c + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<int64_t>(j) * k;
            float acc = 0.0f;
            for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] = acc;
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul: inner dimensions must match, got " + shape_str(a) + " x " + shape_str(b));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    mm_kernel(a.data(), b.data(), out.data(), m, k, n);
    ensure_finite(out, "matmul");
    maybe_record(out, {&a, &b}, [a, b](const Tensor& g) {
        // dA = g * B^T; dB = A^T * g
        return std::vector<Tensor>{matmul_nt(g, transpose2d(b)), matmul(transpose2d(a), g)};
    });
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
            "matmul_nt: inner dimensions must match, got " + shape_str(a) + " x " + shape_str(b) + "^T");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out({m, n});
    mm_nt_kernel(a.data(), b.data(), out.data(), m, k, n);
    ensure_finite(out, "matmul_nt");
    maybe_record(out, {&a, &b}, [a, b](const Tensor& g) {
        // out = A B^T: dA = g * B; dB = g^T * A
        return std::vector<Tensor>{matmul(g, b), matmul(transpose2d(g), a)};
    });
    return out;
}

Tensor transpose2d(const Tensor& a) {
    require(a.rank() == 2, "transpose2d: expected rank-2, got " + shape_str(a));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    const float* pa = a.data();
    float* po = out.data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) po[static_cast<int64_t>(j) * m + i] = pa[static_cast<int64_t>(i) * n + j];
    }
    maybe_record(out, {&a}, [](const Tensor& g) { return std::vector<Tensor>{transpose2d(g)}; });
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
    require(a.rank() == 2, "softmax_rows: expected rank-2, got " + shape_str(a));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out(a.shape());
    const float* pa = a.data();
    float* po = out.data();
    for (int i = 0; i < m; ++i) {
        const float* ra = pa + static_cast<int64_t>(i) * n;
        float* ro = po + static_cast<int64_t>(i) * n;
        float mx = ra[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, ra[j]);
        float sum = 0.0f;
        for (int j = 0; j < n; ++j) {
            ro[j] = std::exp(ra[j] - mx);
            sum += ro[j];
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < n; ++j) ro[j] *= inv;
    }
    ensure_finite(out, "softmax_rows");
    maybe_record(out, {&a}, [out, m, n](const Tensor& g) {
        Tensor gin({m, n});
        const float* py = out.data();
        const float* pg = g.data();
        float* pi = gin.data();
        for (int i = 0; i < m; ++i) {
            const float* ry = py + static_cast<int64_t>(i) * n;
            const float* rg = pg + static_cast<int64_t>(i) * n;
            float* ri = pi + static_cast<int64_t>(i) * n;
            float dot = 0.0f;
            for (int j = 0; j < n; ++j) dot += ry[j] * rg[j];
            for (int j = 0; j < n; ++j) ri[j] = ry[j] * (rg[j] - dot);
        }
        return std::vector<Tensor>{gin};
    });
    return out;
}

Tensor silu(const Tensor& a) {
    Tensor out(a.shape());
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) {
        const float s = 1.0f / (1.0f + std::exp(-pa[i]));
        po[i] = pa[i] * s;
    }
    ensure_finite(out, "silu");
    maybe_record(out, {&a}, [a](const Tensor& g) {
        Tensor gin(a.shape());
        const float* pa2 = a.data();
        const float* pg = g.data();
        float* pi = gin.data();
        for (int64_t i = 0; i < gin.size(); ++i) {
            const float s = 1.0f / (1.0f + std::exp(-pa2[i]));
            pi[i] = pg[i] * s * (1.0f + pa2[i] * (1.0f - s));
        }
        return std::vector<Tensor>{gin};
    });
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    require(shape_product(new_shape) == a.size(),
            "reshape: element count mismatch for " + shape_str(a));
    // Shares the buffer; tensors are immutable so aliasing is safe.
    Tensor out = a;
    out.set_tape_link(0, -1);
    Tensor shaped(std::move(new_shape), std::vector<float>(a.data(), a.data() + a.size()));
    // Avoid the copy when untracked? Keep it simple: single copy, negligible here.
    maybe_record(shaped, {&a}, [shape = a.shape()](const Tensor& g) {
        return std::vector<Tensor>{reshape(g, shape)};
    });
    return shaped;
}

Tensor mean_all(const Tensor& a) {
    const int64_t n = a.size();
    double acc = 0.0;
    const float* pa = a.data();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    ensure_finite(out, "mean_all");
    maybe_record(out, {&a}, [shape = a.shape(), n](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(shape, g.item() / static_cast<float>(n))};
    });
    return out;
}

Tensor sum_all(const Tensor& a) {
    const int64_t n = a.size();
    double acc = 0.0;
    const float* pa = a.data();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    ensure_finite(out, "sum_all");
    maybe_record(out, {&a}, [shape = a.shape()](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(shape, g.item())};
    });
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// ParamMap
// ---------------------------------------------------------------------------

Tensor& ParamMap::add(const std::string& name, Tensor value) {
    if (map_.count(name)) throw std::invalid_argument("ParamMap::add: duplicate name " + name);
    order_.push_back(name);
    return map_.emplace(name, std::move(value)).first->second;
}

Tensor& ParamMap::at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("ParamMap::at: unknown name " + name);
    return it->second;
}

const Tensor& ParamMap::at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("ParamMap::at: unknown name " + name);
    return it->second;
}

bool ParamMap::contains(const std::string& name) const { return map_.count(name) > 0; }

int64_t ParamMap::element_count() const {
    int64_t n = 0;
    for (const auto& name : order_) n += map_.at(name).size();
    return n;
}

ParamMap ParamMap::clone() const {
    ParamMap copy;
    for (const auto& name : order_) copy.add(name, map_.at(name).clone());
    return copy;
}

void ParamMap::watch_all(Tape& tape) {
    for (const auto& name : order_) tape.watch(map_.at(name));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

void adamw_step(ParamMap& params, const Gradients& grads, OptimizerState& state) {
    const AdamWConfig& c = state.config;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), static_cast<double>(state.step));

    for (const std::string& name : params.names()) {
        Tensor& p = params.at(name);
        Tensor g = grads.grad(p);
        if (!g.same_shape(p)) {
            throw std::invalid_argument("adamw_step: gradient shape mismatch for " + name);
        }
        Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape())).first->second;

        float* pp = p.data();
        float* pm = m.data();
        float* pv = v.data();
        const float* pg = g.data();
        for (int64_t i = 0; i < p.size(); ++i) {
            pm[i] = c.beta1 * pm[i] + (1.0f - c.beta1) * pg[i];
            pv[i] = c.beta2 * pv[i] + (1.0f - c.beta2) * pg[i] * pg[i];
            const float mhat = pm[i] / static_cast<float>(bc1);
            const float vhat = pv[i] / static_cast<float>(bc2);
            // Decoupled weight decay: applied directly to the parameter, scaled by lr.
            pp[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * pp[i]);
            if (!std::isfinite(pp[i])) {
                throw std::runtime_error("adamw_step: non-finite parameter " + name +
                                         " at step " + std::to_string(state.step));
            }
        }
    }
}

} // namespace via
