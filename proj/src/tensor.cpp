#include "purigrad/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace purigrad {

int64_t shape_numel(const Shape& dims) {
    int64_t n = 1;
    for (int64_t d : dims) {
        if (d <= 0) throw std::invalid_argument("Tensor shape entries must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& dims) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ",";
        os << dims[i];
    }
    os << "]";
    return os.str();
}

void check_finite(std::span<const double> values, const char* context) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument(std::string(context) + ": non-finite value encountered");
        }
    }
}

Tensor Tensor::zeros(Shape dims) {
    int64_t n = shape_numel(dims);
    Tensor t;
    t.st_ = std::make_shared<TensorStorage>(TensorStorage{std::move(dims), std::vector<double>(static_cast<size_t>(n), 0.0)});
    return t;
}

Tensor Tensor::full(Shape dims, double value) {
    if (!std::isfinite(value)) throw std::invalid_argument("Tensor::full: non-finite value");
    int64_t n = shape_numel(dims);
    Tensor t;
    t.st_ = std::make_shared<TensorStorage>(TensorStorage{std::move(dims), std::vector<double>(static_cast<size_t>(n), value)});
    return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from(Shape dims, std::vector<double> values) {
    int64_t n = shape_numel(dims);
    if (n != static_cast<int64_t>(values.size())) {
        throw std::invalid_argument("Tensor::from: product(dims) != data length (" + shape_str(dims) +
                                    " vs " + std::to_string(values.size()) + ")");
    }
    check_finite(values, "Tensor::from");
    Tensor t;
    t.st_ = std::make_shared<TensorStorage>(TensorStorage{std::move(dims), std::move(values)});
    return t;
}

int64_t Tensor::rows() const {
    const Shape& d = st_->dims;
    if (d.size() == 2) return d[0];
    if (d.size() == 1) return 1;
    throw std::invalid_argument("Tensor::rows: rank " + std::to_string(d.size()) + " tensor");
}

int64_t Tensor::cols() const {
    const Shape& d = st_->dims;
    if (d.size() == 2) return d[1];
    if (d.size() == 1) return d[0];
    throw std::invalid_argument("Tensor::cols: rank " + std::to_string(d.size()) + " tensor");
}

Tensor Tensor::clone() const {
    Tensor t;
    t.st_ = std::make_shared<TensorStorage>(*st_);
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    auto da = a.data();
    auto db = b.data();
    for (size_t i = 0; i < da.size(); ++i) m = std::max(m, std::abs(da[i] - db[i]));
    return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    auto da = a.data();
    auto db = b.data();
    return std::memcmp(da.data(), db.data(), da.size() * sizeof(double)) == 0;
}

Tensor pairwise_mean(std::vector<Tensor> slots) {
    if (slots.empty()) throw std::invalid_argument("pairwise_mean: no slots");
    size_t total = slots.size();
    size_t n = total;
    while (n > 1) {
        size_t half = (n + 1) / 2;
        for (size_t i = 0; i + 1 < n; i += 2) {
            Tensor merged = slots[i].clone();
            auto a = merged.mutable_data();
            auto b = slots[i + 1].data();
            for (size_t k = 0; k < a.size(); ++k) a[k] += b[k];
            slots[i / 2] = merged;
        }
        if (n % 2 == 1) slots[half - 1] = slots[n - 1];
        n = half;
    }
    Tensor out = slots[0].clone();
    auto d = out.mutable_data();
    for (double& v : d) v /= static_cast<double>(total);
    return out;
}

}  // namespace purigrad
