#include "haarnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace haarnet {

std::string Shape::str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

namespace detail {

uint64_t next_seq() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

thread_local int g_no_grad_depth = 0;

std::shared_ptr<detail::TensorImpl> make_impl(Shape s, std::vector<float> data, bool requires_grad) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
        throw ShapeError("tensor: all extents must be positive, got " + s.str());
    }
    if (static_cast<int64_t>(data.size()) != s.numel()) {
        throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + s.str());
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = s;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    impl->seq = detail::next_seq();
    return impl;
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor Tensor::zeros(Shape s, bool requires_grad) {
    return Tensor(make_impl(s, std::vector<float>(static_cast<size_t>(s.numel()), 0.0f), requires_grad));
}

Tensor Tensor::full(Shape s, float value, bool requires_grad) {
    return Tensor(make_impl(s, std::vector<float>(static_cast<size_t>(s.numel()), value), requires_grad));
}

Tensor Tensor::from_vector(Shape s, std::vector<float> values, bool requires_grad) {
    return Tensor(make_impl(s, std::move(values), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_vector({1, 1, 1, 1}, {value}, requires_grad);
}

float Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    const Shape& s = impl_->shape;
    return impl_->data[static_cast<size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

float& Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) {
    const Shape& s = impl_->shape;
    return impl_->data[static_cast<size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor is not scalar, shape " + shape().str());
    return impl_->data[0];
}

void Tensor::set_requires_grad(bool v) {
    if (!impl_->is_leaf()) throw StateError("set_requires_grad: only leaves may change grad mode");
    impl_->requires_grad = v;
}

std::span<const float> Tensor::grad() const {
    if (impl_->grad.empty()) throw StateError("grad: no gradient present; run backward first");
    return impl_->grad;
}

std::span<float> Tensor::grad_mut() {
    if (impl_->grad.empty()) throw StateError("grad: no gradient present; run backward first");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
    return Tensor(make_impl(impl_->shape, impl_->data, false));
}

namespace detail {

Tensor make_op(Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
               std::function<void(TensorImpl&)> backprop) {
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) {
            if (t.defined() && t.requires_grad()) {
                needs_grad = true;
                break;
            }
        }
    }
    auto impl = make_impl(shape, std::move(data), needs_grad);
    if (needs_grad) {
        impl->parents.reserve(inputs.size());
        for (Tensor& t : inputs) impl->parents.push_back(t.impl());
        impl->backprop = std::move(backprop);
    }
    return Tensor::wrap(std::move(impl));
}

}  // namespace detail

namespace {

std::vector<detail::TensorImpl*> reachable_ops(detail::TensorImpl* root) {
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<detail::TensorImpl*> stack{root};
    while (!stack.empty()) {
        detail::TensorImpl* node = stack.back();
        stack.pop_back();
        if (!seen.insert(node).second) continue;
        if (node->is_leaf()) continue;
        order.push_back(node);
        for (auto& p : node->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->seq < b->seq; });
    return order;
}

}  // namespace

Graph Graph::trace(const Tensor& output) {
    Graph g;
    for (detail::TensorImpl* node : reachable_ops(output.impl().get())) {
        Node n;
        n.seq = node->seq;
        n.input_seqs.reserve(node->parents.size());
        for (auto& p : node->parents) n.input_seqs.push_back(p->seq);
        g.nodes_.push_back(std::move(n));
    }
    return g;
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
    if (!(loss.shape() == Shape{1, 1, 1, 1})) {
        throw ContractError("backward: loss must have shape (1,1,1,1), got " + loss.shape().str());
    }
    detail::TensorImpl* root = loss.impl().get();
    if (root->is_leaf()) throw ContractError("backward: no recorded operations produce this loss");

    std::vector<detail::TensorImpl*> order = reachable_ops(root);
    for (detail::TensorImpl* node : order) {
        if (node->consumed) {
            throw StateError("backward: graph already consumed by a previous backward pass; rerun forward");
        }
    }
    for (detail::TensorImpl* node : order) node->consumed = true;

    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->grad.empty()) continue;  // no gradient flowed into this node
        node->backprop(*node);
    }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
    if (eps <= 0.0) throw ContractError("finite_diff_grad: eps must be positive");
    NoGradGuard ng;
    Tensor probe = x.clone();
    std::vector<float> out(static_cast<size_t>(x.numel()), 0.0f);
    float* p = probe.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const float orig = p[i];
        const float hi = static_cast<float>(static_cast<double>(orig) + eps);
        const float lo = static_cast<float>(static_cast<double>(orig) - eps);
        p[i] = hi;
        const double f_hi = f(probe);
        p[i] = lo;
        const double f_lo = f(probe);
        p[i] = orig;
        const double h = static_cast<double>(hi) - static_cast<double>(lo);
        out[static_cast<size_t>(i)] = static_cast<float>((f_hi - f_lo) / h);
    }
    return Tensor::from_vector(x.shape(), std::move(out));
}

}  // namespace haarnet
