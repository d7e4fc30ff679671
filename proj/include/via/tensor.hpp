#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "via/rng.hpp"

namespace via {

class Tape;

// Dense row-major float32 tensor. Values are immutable after creation except
// for trainable parameters, which the optimizer updates in place while
// training is single-threaded. Copies share the underlying buffer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);                      // zero-filled
    Tensor(std::vector<int> shape, std::vector<float> values);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor scalar(float value);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const;
    bool defined() const { return static_cast<bool>(data_); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    float* data() { return data_->data(); }
    const float* data() const { return data_->data(); }
    float operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    float& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    float item() const;                                           // scalar only

    // Deep copy (fresh buffer, no tape linkage).
    Tensor clone() const;

    // Tape linkage. node < 0 means the tensor is a constant for autodiff.
    int node() const { return node_; }
    uint64_t tape_id() const { return tape_id_; }
    void set_tape_link(uint64_t tape_id, int node) { tape_id_ = tape_id; node_ = node; }

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<float>> data_;
    int node_ = -1;
    uint64_t tape_id_ = 0;
};

// Gradient lookup produced by Tape::backward. Parameters that do not reach
// the loss get a zero gradient of their own shape.
class Gradients {
public:
    Gradients() = default;
    Gradients(uint64_t tape_id, std::unordered_map<int, Tensor> by_node);
    Tensor grad(const Tensor& param) const;

private:
    uint64_t tape_id_ = 0;
    std::unordered_map<int, Tensor> by_node_;
};

// Reverse-mode tape. Ops record themselves onto the thread's active tape (see
// TapeScope); backward replays in exact reverse order of recording. One tape
// per training step, single-threaded; inference threads simply run with no
// active tape and every op stays pure.
class Tape {
public:
    using GradFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

    Tape();

    uint64_t id() const { return id_; }
    void watch(Tensor& param);                                    // register leaf
    bool tracks(const Tensor& t) const { return t.tape_id() == id_ && t.node() >= 0; }

    // Used by op implementations: registers grad_fn for `out` given `inputs`.
    void record(Tensor& out, const std::vector<const Tensor*>& inputs, GradFn fn);

    // loss must be a scalar recorded on this tape.
    Gradients backward(const Tensor& loss);

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<int> inputs;   // node ids, -1 for untracked
        GradFn grad_fn;            // null for leaves
    };
    std::vector<Node> nodes_;
    uint64_t id_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// ---------------------------------------------------------------------------
// Ops. All validate shapes, reject non-finite results, and record onto the
// active tape when one of their inputs is tracked.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);            // elementwise
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor add_rowvec(const Tensor& a, const Tensor& v);     // a[m,n] + v[n] per row

Tensor matmul(const Tensor& a, const Tensor& b);         // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);      // a x b^T, b is [n,k]
Tensor transpose2d(const Tensor& a);

Tensor softmax_rows(const Tensor& a);                    // row-max stabilized
Tensor silu(const Tensor& a);

Tensor reshape(const Tensor& a, std::vector<int> new_shape);   // shares buffer

// HWC image ops. x is [H,W,C]; conv weight is [kh,kw,Cin,Cout], bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, float eps = 1e-5f);

Tensor embedding(const Tensor& table, const std::vector<int>& indices); // [len,D]

Tensor concat_rows(const Tensor& a, const Tensor& b);          // [m1+m2, n]
Tensor concat_channels(const Tensor& a, const Tensor& b);      // [H,W,C1+C2]

Tensor mean_all(const Tensor& a);                              // scalar
Tensor sum_all(const Tensor& a);                               // scalar

// Mean squared error over all elements; composition of primitives.
Tensor mse(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Named parameter collection. Insertion order is stable so checkpoints are
// byte-identical across runs with the same seed.
// ---------------------------------------------------------------------------

class ParamMap {
public:
    Tensor& add(const std::string& name, Tensor value);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    int64_t element_count() const;

    ParamMap clone() const;
    void watch_all(Tape& tape);

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and bias-corrected moments.
// ---------------------------------------------------------------------------

struct AdamWConfig {
    float lr = 5e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

struct OptimizerState {
    AdamWConfig config;
    int64_t step = 0;
    std::unordered_map<std::string, Tensor> m;   // first moments
    std::unordered_map<std::string, Tensor> v;   // second moments
};

// Updates params in place. Moment tensors are lazily created per parameter.
void adamw_step(ParamMap& params, const Gradients& grads, OptimizerState& state);

} // namespace via
