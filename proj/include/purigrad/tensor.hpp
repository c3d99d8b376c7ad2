#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace purigrad {

class Tape;

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& dims);
std::string shape_str(const Shape& dims);

struct TensorStorage {
    Shape dims;
    std::vector<double> data;
};

/// Dense n-dimensional array of 64-bit reals, row-major. A Tensor may be
/// bound to a Tape node (graph tensor) or free-standing (detached/leaf).
/// Storage is shared on copy; detached tensors are treated as immutable.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape dims);
    static Tensor full(Shape dims, double value);
    static Tensor scalar(double value);
    static Tensor from(Shape dims, std::vector<double> values);

    bool defined() const { return st_ != nullptr; }
    const Shape& dims() const { return st_->dims; }
    int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }
    int64_t rank() const { return static_cast<int64_t>(st_->dims.size()); }

    // 2-d helpers; rank-1 tensors are treated as a single row where needed.
    int64_t rows() const;
    int64_t cols() const;

    std::span<const double> data() const { return st_->data; }
    // In-place mutation is reserved for owners of free-standing tensors
    // (parameter updates); graph tensors must never be mutated.
    std::span<double> mutable_data() { return st_->data; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: numel != 1");
        return st_->data[0];
    }
    double at(int64_t i) const { return st_->data[static_cast<size_t>(i)]; }
    double at2(int64_t r, int64_t c) const { return st_->data[static_cast<size_t>(r * cols() + c)]; }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool rg) {
        requires_grad_ = rg;
        return *this;
    }

    /// Same storage, no tape affiliation, requires_grad off.
    Tensor detach() const {
        Tensor t;
        t.st_ = st_;
        return t;
    }
    /// Deep copy, no tape affiliation.
    Tensor clone() const;

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int32_t node() const { return node_; }

    const std::shared_ptr<TensorStorage>& storage() const { return st_; }

    bool same_shape(const Tensor& other) const { return st_->dims == other.st_->dims; }

private:
    std::shared_ptr<TensorStorage> st_;
    Tape* tape_ = nullptr;
    int32_t node_ = -1;
    bool requires_grad_ = false;

    friend class Tape;
};

/// Throws std::invalid_argument if any entry is NaN/Inf.
void check_finite(std::span<const double> values, const char* context);

double max_abs_diff(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Mean of equally-shaped tensors accumulated by fixed pairwise reduction,
/// so the result does not depend on the order the slots were produced in.
Tensor pairwise_mean(std::vector<Tensor> slots);

}  // namespace purigrad
