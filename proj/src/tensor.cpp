#include "mhnes/tensor.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace mhnes {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_tape_counter = 0;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_to_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ",")); }

std::span<double> TensorImpl::grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw std::invalid_argument(fmt::format("Tensor::from: shape {} needs {} values, got {}",
                                                shape_to_string(shape), shape_numel(shape), values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw std::out_of_range(fmt::format("axis {} out of range for shape {}", axis, shape_to_string(impl_->shape)));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }
std::span<const double> Tensor::grad() const { return impl_->grad; }
bool Tensor::has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument(fmt::format("item() on tensor of shape {}", shape_to_string(shape())));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!impl_->is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
    impl_->requires_grad = flag;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data, false); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn backward) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    bool any = false;
    if (t_grad_enabled) {
        for (const auto& input : inputs) any = any || input.requires_grad();
    }
    if (any) {
        impl->requires_grad = true;
        impl->seq = ++t_tape_counter;
        impl->inputs.reserve(inputs.size());
        for (auto& input : inputs) impl->inputs.push_back(input.shared());
        impl->backward = std::move(backward);
    }
    return Tensor(std::move(impl));
}

Tape Tape::collect(const Tensor& root) {
    Tape tape;
    if (!root.defined() || !root.requires_grad() || root.impl()->is_leaf()) return tape;
    std::unordered_set<TensorImpl*> seen;
    std::vector<TensorImpl*> stack{root.impl()};
    seen.insert(root.impl());
    while (!stack.empty()) {
        TensorImpl* node = stack.back();
        stack.pop_back();
        tape.nodes_.push_back(node);
        for (const auto& input : node->inputs) {
            if (input->requires_grad && !input->is_leaf() && seen.insert(input.get()).second) stack.push_back(input.get());
        }
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const TensorImpl* a, const TensorImpl* b) { return a->seq < b->seq; });
    return tape;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument(fmt::format("backward: loss must be scalar, got shape {}",
                                                loss.defined() ? shape_to_string(loss.shape()) : "<undefined>"));
    }
    if (!loss.requires_grad()) return;
    TensorImpl* root = loss.impl();
    if (root->is_leaf()) {
        root->grad_buffer()[0] += 1.0;
        return;
    }
    Tape tape = Tape::collect(loss);
    for (TensorImpl* node : tape.nodes()) node->grad.assign(node->data.size(), 0.0);
    root->grad[0] = 1.0;
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        TensorImpl* node = *it;
        node->backward(*node);
        if (node != root) std::vector<double>().swap(node->grad);
    }
}

}  // namespace mhnes
