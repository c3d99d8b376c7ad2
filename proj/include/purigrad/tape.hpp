#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "purigrad/tensor.hpp"

namespace purigrad {

enum class Op : uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,
    matmul,
    sum,
    mean,
    affine,
    silu,
    leaky_relu,
    soft_leaky_relu,
    softmax_xent,
    clamp,
    concat,
    gather_t,
    // internal kinds emitted by recorded backward passes
    rowscale,
    broadcast,
    leaky_relu_grad,
    soft_leaky_relu_grad,
};

const char* op_name(Op op);

struct TapeNode {
    Op op = Op::leaf;
    std::array<int32_t, 3> in{-1, -1, -1};
    int n_in = 0;
    std::shared_ptr<TensorStorage> out;
    // scalar attributes: scale factor, clamp bounds, activation parameters
    double a0 = 0.0;
    double a1 = 0.0;
    // integer attributes: class labels, gather indices, concat split point
    std::vector<int32_t> idx;
    bool requires_grad = false;
};

/// Graph-memory accounting. Counts payload bytes of op-produced tape nodes
/// (stored activations); leaves (inputs, parameters, constants) are excluded,
/// as are tensors detached from the graph.
class MemoryMeter {
public:
    void on_alloc(size_t bytes) {
        current_bytes_ += bytes;
        live_node_count_ += 1;
        if (current_bytes_ > peak_bytes_) peak_bytes_ = current_bytes_;
        if (cap_bytes_ != 0 && current_bytes_ > cap_bytes_)
            throw OutOfBudget(current_bytes_, cap_bytes_);
    }
    void on_free(size_t bytes) {
        current_bytes_ -= bytes;
        live_node_count_ -= 1;
    }

    size_t current_bytes() const { return current_bytes_; }
    size_t peak_bytes() const { return peak_bytes_; }
    int64_t live_node_count() const { return live_node_count_; }

    void set_cap(size_t bytes) { cap_bytes_ = bytes; }
    size_t cap() const { return cap_bytes_; }

    void reset() {
        current_bytes_ = 0;
        peak_bytes_ = 0;
        live_node_count_ = 0;
    }

    struct OutOfBudget : std::runtime_error {
        OutOfBudget(size_t current, size_t cap)
            : std::runtime_error("graph memory budget exceeded: " + std::to_string(current) +
                                 " bytes > cap " + std::to_string(cap)),
              current_bytes(current),
              cap_bytes(cap) {}
        size_t current_bytes;
        size_t cap_bytes;
    };

private:
    size_t current_bytes_ = 0;
    size_t peak_bytes_ = 0;
    int64_t live_node_count_ = 0;
    size_t cap_bytes_ = 0;
};

class GradMap {
public:
    bool contains(const Tensor& t) const;
    /// Gradient for a leaf; throws if absent.
    Tensor at(const Tensor& t) const;
    /// Gradient or an undefined Tensor if the leaf received none.
    Tensor find(const Tensor& t) const;

private:
    std::unordered_map<int32_t, Tensor> grads_;
    const Tape* tape_ = nullptr;
    friend class Tape;
};

/// Recorded computation graph. Nodes are appended in topological order;
/// single-owner (one logical thread records and backpropagates it).
class Tape {
public:
    Tape() = default;
    explicit Tape(MemoryMeter* meter) : meter_(meter) {}
    ~Tape() { release(); }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a free-standing tensor as a leaf on this tape. A tensor
    /// already on this tape is returned unchanged.
    Tensor leaf(const Tensor& t, bool requires_grad);
    Tensor constant(const Tensor& t) { return leaf(t, false); }

    size_t size() const { return nodes_.size(); }
    const TapeNode& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
    Tensor tensor_for(int32_t id) const;

    /// Reverse-mode sweep from `root`, seeded with `seed` (pass an undefined
    /// Tensor for the default all-ones seed of a scalar root). When
    /// `record_second_order` is set, all backward arithmetic is appended to
    /// this tape so a further backward over the returned gradients yields
    /// exact Hessian-vector products; op kinds without a recordable
    /// derivative raise instead of silently returning zero.
    /// Nodes listed in `stop_at` are treated as independent leaves: the sweep
    /// retains their gradients and does not traverse their inputs.
    GradMap backward(const Tensor& root, const Tensor& seed, bool record_second_order = false,
                     std::span<const int32_t> stop_at = {});

    /// Frees all node payloads (meter decremented). Tensors detached
    /// beforehand keep their storage alive.
    void release();

    MemoryMeter* meter() const { return meter_; }

    // Used by op builders (ops.cpp); not part of the public surface.
    Tensor emit(Op op, std::initializer_list<Tensor> inputs, Shape out_dims,
                std::vector<double> out_data, double a0 = 0.0, double a1 = 0.0,
                std::vector<int32_t> idx = {});
    Tensor bind(const Tensor& t);
    int32_t leaf_id(const TensorStorage* storage) const;

private:
    std::vector<TapeNode> nodes_;
    std::unordered_map<const TensorStorage*, int32_t> leaf_index_;
    MemoryMeter* meter_ = nullptr;
    bool released_ = false;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct UnsupportedDoubleBackward : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace purigrad
