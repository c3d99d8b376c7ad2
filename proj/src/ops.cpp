#include "purigrad/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace purigrad::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_str(a.dims()) + " vs " +
                                 shape_str(b.dims()));
}

// Dimensions of a matmul. Rank-1 lhs acts as [1,k] (result rank 1),
// rank-1 rhs acts as [k,1] (result rank 1).
struct MatDims {
    int64_t m, k, n;
    Shape out_dims;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b) {
    require(a.rank() <= 2 && b.rank() <= 2, "matmul: operands must be rank 1 or 2");
    require(!(a.rank() == 1 && b.rank() == 1), "matmul: two rank-1 operands; use mul+sum for dot");
    int64_t m, k, n;
    Shape out;
    if (a.rank() == 1) {
        k = a.dims()[0];
        require(b.dims()[0] == k, "matmul: inner dims " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
        m = 1;
        n = b.dims()[1];
        out = {n};
    } else if (b.rank() == 1) {
        m = a.dims()[0];
        k = a.dims()[1];
        require(b.dims()[0] == k, "matmul: inner dims " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
        n = 1;
        out = {m};
    } else {
        m = a.dims()[0];
        k = a.dims()[1];
        require(b.dims()[0] == k, "matmul: inner dims " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
        n = b.dims()[1];
        out = {m, n};
    }
    return {m, k, n, std::move(out)};
}

}  // namespace

namespace eval {

std::vector<double> softmax(std::span<const double> row) {
    double mx = *std::max_element(row.begin(), row.end());
    std::vector<double> p(row.size());
    double z = 0.0;
    for (size_t i = 0; i < row.size(); ++i) {
        p[i] = std::exp(row[i] - mx);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

double silu_val(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad_val(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

double soft_leaky_relu_val(double x, double a, double e) {
    return (1.0 - a) * x + a * std::sqrt(x * x + e * e) - a * e;
}

double soft_leaky_relu_grad_val(double x, double a, double e) {
    return (1.0 - a) + a * x / std::sqrt(x * x + e * e);
}

double soft_leaky_relu_grad2_val(double x, double a, double e) {
    double q = x * x + e * e;
    return a * e * e / (q * std::sqrt(q));
}

}  // namespace eval

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    auto db = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += db[i];
    return t.emit(Op::add, {a, b}, a.dims(), std::move(out));
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    auto db = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= db[i];
    return t.emit(Op::sub, {a, b}, a.dims(), std::move(out));
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.data().begin(), a.data().end());
    auto db = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= db[i];
    return t.emit(Op::mul, {a, b}, a.dims(), std::move(out));
}

Tensor scale(Tape& t, const Tensor& a, double c) {
    if (!std::isfinite(c)) throw std::invalid_argument("scale: non-finite factor");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= c;
    return t.emit(Op::scale, {a}, a.dims(), std::move(out), c);
}

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
    MatDims d = matmul_dims(a, b);
    std::vector<double> out(static_cast<size_t>(d.m * d.n));
    MapC A(a.data().data(), d.m, d.k);
    MapC B(b.data().data(), d.k, d.n);
    Map Y(out.data(), d.m, d.n);
    Y.noalias() = A * B;
    return t.emit(Op::matmul, {a, b}, d.out_dims, std::move(out));
}

Tensor sum(Tape& t, const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return t.emit(Op::sum, {a}, {1}, {s});
}

Tensor mean(Tape& t, const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return t.emit(Op::mean, {a}, {1}, {s / static_cast<double>(a.numel())});
}

Tensor affine(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b) {
    require(w.rank() == 2, "affine: weight must be rank 2");
    require(b.rank() == 1, "affine: bias must be rank 1");
    int64_t out_dim = w.dims()[0];
    int64_t in_dim = w.dims()[1];
    require(b.dims()[0] == out_dim, "affine: bias length " + shape_str(b.dims()) +
                                        " vs weight " + shape_str(w.dims()));
    int64_t batch = x.rank() == 1 ? 1 : x.dims()[0];
    int64_t xin = x.rank() == 1 ? x.dims()[0] : x.dims()[1];
    require(x.rank() <= 2 && xin == in_dim,
            "affine: input " + shape_str(x.dims()) + " vs weight " + shape_str(w.dims()));
    std::vector<double> out(static_cast<size_t>(batch * out_dim));
    MapC X(x.data().data(), batch, in_dim);
    MapC W(w.data().data(), out_dim, in_dim);
    Map Y(out.data(), batch, out_dim);
    Y.noalias() = X * W.transpose();
    auto db = b.data();
    for (int64_t r = 0; r < batch; ++r)
        for (int64_t c = 0; c < out_dim; ++c) out[static_cast<size_t>(r * out_dim + c)] += db[static_cast<size_t>(c)];
    Shape od = x.rank() == 1 ? Shape{out_dim} : Shape{batch, out_dim};
    return t.emit(Op::affine, {x, w, b}, std::move(od), std::move(out));
}

Tensor silu(Tape& t, const Tensor& a) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v = eval::silu_val(v);
    return t.emit(Op::silu, {a}, a.dims(), std::move(out));
}

Tensor leaky_relu(Tape& t, const Tensor& a, double slope) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v = v > 0.0 ? v : slope * v;
    return t.emit(Op::leaky_relu, {a}, a.dims(), std::move(out), slope);
}

Tensor soft_leaky_relu(Tape& t, const Tensor& x, double a, double e) {
    if (!(a >= 0.0 && a < 1.0))
        throw std::invalid_argument("soft_leaky_relu: parameter a must lie in [0,1), got " + std::to_string(a));
    if (!(e > 0.0))
        throw std::invalid_argument("soft_leaky_relu: smoothing e must be positive, got " + std::to_string(e));
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = eval::soft_leaky_relu_val(v, a, e);
    return t.emit(Op::soft_leaky_relu, {x}, x.dims(), std::move(out), a, e);
}

Tensor softmax_cross_entropy(Tape& t, const Tensor& logits, const std::vector<int32_t>& labels) {
    require(logits.rank() == 2, "softmax_cross_entropy: logits must be [B,C]");
    int64_t batch = logits.dims()[0];
    int64_t classes = logits.dims()[1];
    require(static_cast<int64_t>(labels.size()) == batch,
            "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                std::to_string(batch));
    std::vector<double> out(static_cast<size_t>(batch));
    auto dl = logits.data();
    for (int64_t r = 0; r < batch; ++r) {
        int32_t y = labels[static_cast<size_t>(r)];
        require(y >= 0 && y < classes, "softmax_cross_entropy: label out of range");
        std::span<const double> row = dl.subspan(static_cast<size_t>(r * classes), static_cast<size_t>(classes));
        double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        out[static_cast<size_t>(r)] = std::log(z) + mx - row[static_cast<size_t>(y)];
    }
    return t.emit(Op::softmax_xent, {logits}, {batch}, std::move(out), 0.0, 0.0,
                  std::vector<int32_t>(labels));
}

Tensor clamp(Tape& t, const Tensor& a, double lo, double hi) {
    require(lo <= hi, "clamp: lo > hi");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v = std::min(std::max(v, lo), hi);
    return t.emit(Op::clamp, {a}, a.dims(), std::move(out), lo, hi);
}

Tensor concat(Tape& t, const Tensor& a, const Tensor& b) {
    if (a.rank() == 1 && b.rank() == 1) {
        std::vector<double> out;
        out.reserve(static_cast<size_t>(a.numel() + b.numel()));
        out.insert(out.end(), a.data().begin(), a.data().end());
        out.insert(out.end(), b.data().begin(), b.data().end());
        return t.emit(Op::concat, {a, b}, {a.numel() + b.numel()}, std::move(out), 0.0, 0.0,
                      {static_cast<int32_t>(a.numel())});
    }
    require(a.rank() == 2 && b.rank() == 2 && a.dims()[0] == b.dims()[0],
            "concat: need matching row counts, got " + shape_str(a.dims()) + " and " + shape_str(b.dims()));
    int64_t rows = a.dims()[0], ca = a.dims()[1], cb = b.dims()[1];
    std::vector<double> out(static_cast<size_t>(rows * (ca + cb)));
    auto da = a.data();
    auto db = b.data();
    for (int64_t r = 0; r < rows; ++r) {
        std::copy_n(da.begin() + r * ca, ca, out.begin() + r * (ca + cb));
        std::copy_n(db.begin() + r * cb, cb, out.begin() + r * (ca + cb) + ca);
    }
    return t.emit(Op::concat, {a, b}, {rows, ca + cb}, std::move(out), 0.0, 0.0,
                  {static_cast<int32_t>(ca)});
}

Tensor gather_t(Tape& t, const Tensor& values, const std::vector<int32_t>& indices) {
    require(values.rank() == 1, "gather_t: values must be rank 1");
    std::vector<double> out(indices.size());
    auto dv = values.data();
    for (size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < values.numel(), "gather_t: index out of range");
        out[i] = dv[static_cast<size_t>(indices[i])];
    }
    return t.emit(Op::gather_t, {values}, {static_cast<int64_t>(indices.size())}, std::move(out),
                  0.0, 0.0, std::vector<int32_t>(indices));
}

Tensor rowscale(Tape& t, const Tensor& x, const Tensor& s) {
    require(x.rank() == 2, "rowscale: x must be rank 2");
    int64_t rows = x.dims()[0];
    require(s.numel() == rows, "rowscale: scaler length " + std::to_string(s.numel()) +
                                   " vs rows " + std::to_string(rows));
    int64_t cols = x.dims()[1];
    std::vector<double> out(x.data().begin(), x.data().end());
    auto ds = s.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(r * cols + c)] *= ds[static_cast<size_t>(r)];
    return t.emit(Op::rowscale, {x, s}, x.dims(), std::move(out));
}

Tensor broadcast(Tape& t, const Tensor& s, Shape dims) {
    require(s.numel() == 1, "broadcast: source must be scalar");
    int64_t n = shape_numel(dims);
    std::vector<double> out(static_cast<size_t>(n), s.data()[0]);
    return t.emit(Op::broadcast, {s}, std::move(dims), std::move(out));
}

Tensor leaky_relu_grad(Tape& t, const Tensor& x, double slope) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = v > 0.0 ? 1.0 : slope;
    return t.emit(Op::leaky_relu_grad, {x}, x.dims(), std::move(out), slope);
}

Tensor soft_leaky_relu_grad(Tape& t, const Tensor& x, double a, double e) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = eval::soft_leaky_relu_grad_val(v, a, e);
    return t.emit(Op::soft_leaky_relu_grad, {x}, x.dims(), std::move(out), a, e);
}

}  // namespace purigrad::ops
