#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kmmvae/errors.hpp"

namespace kmmvae::autodiff {

/// Dense tensor extents, rank 0..4. Rank-0 is used for scalars produced
/// by full reductions.
class Shape {
public:
    Shape() : rank_(0) { dims_.fill(1); }
    Shape(std::initializer_list<std::size_t> dims);
    static Shape vector(std::size_t n) { return Shape{n}; }

    std::size_t rank() const { return rank_; }
    std::size_t operator[](std::size_t axis) const { return dims_[axis]; }
    std::size_t numel() const;
    bool operator==(const Shape& other) const;
    bool operator!=(const Shape& other) const { return !(*this == other); }
    std::string str() const;

    /// Extents collapsed to (outer, axis, inner) around one axis.
    void split(std::size_t axis, std::size_t& outer, std::size_t& mid, std::size_t& inner) const;

private:
    std::array<std::size_t, 4> dims_;
    std::size_t rank_;
};

class Tape;
namespace detail {
struct Node;
struct Access;
}

/// Handle to a dense double tensor. Copies share the underlying storage;
/// leaves created with requires_grad participate in reverse-mode
/// differentiation when a Tape is active (see TapeScope).
class Tensor {
public:
    Tensor() = default;

    /// Non-differentiable tensor.
    static Tensor constant(Shape shape, std::vector<double> values);
    static Tensor constant(std::vector<double> values); // rank-1
    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    /// Differentiable leaf (network parameter or watched input).
    static Tensor variable(Shape shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const { return shape().numel(); }
    std::span<const double> values() const;
    double item() const; // single-element tensors only
    bool requires_grad() const;

    /// Accumulated gradient; empty until a backward pass has touched
    /// this leaf. Same length as values once populated.
    std::span<const double> grad() const;
    void zero_grad() const;

    /// Overwrites the stored values in place (optimizer updates).
    /// Only valid on leaves, and only between tape lifetimes.
    void set_values(std::span<const double> v) const;

    detail::Node* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
    friend class Tape;
    friend struct detail::Access;
};

/// Recording context for one forward/backward cycle. Single-threaded per
/// tape; independent tapes may live on different threads concurrently.
/// Ops record onto the active tape (TapeScope) whenever differentiation
/// can reach them; with no active tape they evaluate eagerly.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Reverse sweep: fills per-node adjoints. One shot; a second call
    /// throws contract_error. Does not touch Tensor::grad.
    void run_backward(const Tensor& loss);

    /// Adjoint of a tensor recorded or watched on this tape; empty span
    /// if the backward sweep never reached it.
    std::span<const double> adjoint(const Tensor& t) const;

    /// Leaves (requires_grad tensors) that participated in this tape.
    const std::vector<Tensor>& watched() const { return watched_; }

    bool consumed() const { return consumed_; }
    std::size_t num_records() const { return records_.size(); }

    /// Drops all records and adjoints, keeps buffers for reuse.
    void reset();

    std::uint64_t id() const { return id_; }

private:
    friend struct detail::Access;

    std::size_t new_slot();
    std::size_t slot_for_input(detail::Node* n, bool& fresh_leaf);
    std::vector<double>& adjoint_slot(std::size_t idx, std::size_t size);
    const std::vector<double>* peek_adjoint(std::size_t idx) const;

    struct Record {
        std::size_t out_slot;
        std::function<void(Tape&)> backward;
    };

    std::uint64_t id_;
    std::vector<Record> records_;
    std::vector<std::vector<double>> slots_;
    std::vector<bool> slot_set_;
    std::unordered_map<const detail::Node*, std::size_t> leaf_slots_;
    std::vector<Tensor> watched_;
    bool consumed_ = false;
};

/// RAII activation of a tape on the current thread.
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

// ---- operator set ----

Tensor matmul(const Tensor& a, const Tensor& b);

/// 1-D cross-correlation with same-size zero padding.
/// x: [c_in x R], kernels: [c_out x c_in x w] (w odd), bias: [c_out].
Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias);

// Binary elementwise; equal shapes or one single-element operand
// broadcast against the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor negate(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);                   // all axes -> rank-0
Tensor sum(const Tensor& x, std::size_t axis); // drops the axis
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

/// View with identical element count and order.
Tensor reshape(const Tensor& x, Shape shape);

/// min(max(x, lo), hi), composed from relu; gradient passes through the
/// interior and is zero outside.
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor add_scalar(const Tensor& x, double c) { return add(x, Tensor::scalar(c)); }
inline Tensor mul_scalar(const Tensor& x, double c) { return mul(x, Tensor::scalar(c)); }

/// Runs the reverse sweep on the active tape and accumulates adjoints
/// into the .grad of every watched leaf. loss must be a single-element
/// tensor recorded on the active tape.
void backward(const Tensor& loss);

} // namespace kmmvae::autodiff
