#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "haarnet/error.hpp"

namespace haarnet {

inline constexpr float kNegInf = -std::numeric_limits<float>::infinity();
inline constexpr float kPosInf = std::numeric_limits<float>::infinity();

// Dense rank-4 extents: batch, channels, height, width.
struct Shape {
    int64_t n = 0;
    int64_t c = 0;
    int64_t h = 0;
    int64_t w = 0;

    int64_t numel() const { return n * c * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

namespace detail {

// Node storage shared by tensor handles. Tensors produced by recorded
// operations carry their parents and a backward rule; leaves carry neither.
struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;  // allocated on first accumulation

    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backprop;  // null on leaves
    uint64_t seq = 0;
    bool consumed = false;  // set once a backward pass has used this node

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
    bool is_leaf() const { return !backprop; }
};

uint64_t next_seq();

}  // namespace detail

// Value-semantics handle onto a shared float32 buffer. Data is mutable only
// on leaves before they enter a graph; gradient buffers are owned here too.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false);
    static Tensor full(Shape s, float value, bool requires_grad = false);
    static Tensor from_vector(Shape s, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->shape.numel(); }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::span<float> values() { return impl_->data; }
    std::span<const float> values() const { return impl_->data; }

    float at(int64_t n, int64_t c, int64_t h, int64_t w) const;
    float& at(int64_t n, int64_t c, int64_t h, int64_t w);

    // Scalar (1,1,1,1) convenience.
    float item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v);

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const float> grad() const;
    std::span<float> grad_mut();
    void zero_grad();

    // Deep copy of values only; the copy is a leaf detached from any graph.
    Tensor clone() const;

    bool is_leaf() const { return impl_->is_leaf(); }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered view of the recorded operations reachable from one output, earliest
// first. Mostly for introspection and graph-shape assertions.
class Graph {
  public:
    struct Node {
        uint64_t seq;
        std::vector<uint64_t> input_seqs;
    };

    static Graph trace(const Tensor& output);

    size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

  private:
    std::vector<Node> nodes_;
};

// Reverse-mode pass. `loss` must be scalar-shaped and produced by at least
// one recorded operation. Every requires_grad leaf reachable from it receives
// (accumulates) d loss / d leaf. A node participates in exactly one backward;
// a second call through the same recording raises StateError.
void backward(const Tensor& loss);

bool grad_enabled();

// RAII switch that stops operations from recording while alive.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Central-difference gradient oracle: (f(x+eps e_i) - f(x-eps e_i)) / h where
// h is the realized float32 step. Evaluates f value-only; independent of the
// backward implementation it is used to check.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps);

namespace detail {

// Shared by all operation implementations: builds the output tensor and, when
// grad mode is on and some input needs gradients, records the backward rule.
Tensor make_op(Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
               std::function<void(TensorImpl&)> backprop);

inline void accumulate(TensorImpl& t, int64_t index, float v) { t.grad[index] += v; }

}  // namespace detail

}  // namespace haarnet
