#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mhnes {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct TensorImpl;
using BackwardFn = std::function<void(TensorImpl& out)>;

/// Storage and autograd bookkeeping behind a Tensor handle.
///
/// `seq` is the node's position on the thread's tape; leaves keep seq == 0.
/// `grad` stays empty until a backward pass first touches the node.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn backward;

    bool is_leaf() const { return seq == 0; }
    std::span<double> grad_buffer();
};

/// Dense row-major float64 array participating in a define-by-run tape.
///
/// Copies are shallow: two Tensor handles may refer to the same storage,
/// which is how parameters are shared between a model and its optimizer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    std::span<const double> grad() const;
    bool has_grad() const;
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    void zero_grad();

    /// Deep copy of the values, detached from the tape.
    Tensor detach() const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Creates an op result. The node is recorded on the tape only when recording
/// is enabled and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward);

/// Ordered record of the operations reachable from a root, earliest first.
class Tape {
public:
    static Tape collect(const Tensor& root);
    const std::vector<TensorImpl*>& nodes() const { return nodes_; }

private:
    std::vector<TensorImpl*> nodes_;
};

/// Populates grad of every requires_grad leaf reachable from `loss`.
/// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

}  // namespace mhnes
