#include "purigrad/tape.hpp"

#include <Eigen/Core>

#include <cmath>

#include "purigrad/ops.hpp"

namespace purigrad {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::matmul: return "matmul";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::affine: return "affine";
        case Op::silu: return "silu";
        case Op::leaky_relu: return "leaky_relu";
        case Op::soft_leaky_relu: return "soft_leaky_relu";
        case Op::softmax_xent: return "softmax_cross_entropy";
        case Op::clamp: return "clamp";
        case Op::concat: return "concat";
        case Op::gather_t: return "gather_t";
        case Op::rowscale: return "rowscale";
        case Op::broadcast: return "broadcast";
        case Op::leaky_relu_grad: return "leaky_relu_grad";
        case Op::soft_leaky_relu_grad: return "soft_leaky_relu_grad";
    }
    return "?";
}

bool GradMap::contains(const Tensor& t) const { return find(t).defined(); }

Tensor GradMap::at(const Tensor& t) const {
    Tensor g = find(t);
    if (!g.defined()) throw std::out_of_range("GradMap: no gradient recorded for tensor");
    return g;
}

Tensor GradMap::find(const Tensor& t) const {
    int32_t id = -1;
    if (t.on_tape() && t.tape() == tape_) {
        id = t.node();
    } else if (tape_ != nullptr) {
        // resolve a free-standing tensor through the tape's leaf registry
        id = tape_->leaf_id(t.storage().get());
    }
    auto it = grads_.find(id);
    return it == grads_.end() ? Tensor{} : it->second;
}

int32_t Tape::leaf_id(const TensorStorage* storage) const {
    auto it = leaf_index_.find(storage);
    return it == leaf_index_.end() ? -1 : it->second;
}

Tensor Tape::tensor_for(int32_t id) const {
    const TapeNode& n = nodes_[static_cast<size_t>(id)];
    Tensor t;
    t.st_ = n.out;
    t.tape_ = const_cast<Tape*>(this);
    t.node_ = id;
    t.requires_grad_ = n.requires_grad;
    return t;
}

Tensor Tape::leaf(const Tensor& t, bool requires_grad) {
    if (!t.defined()) throw std::invalid_argument("Tape::leaf: undefined tensor");
    if (t.on_tape()) {
        if (t.tape() != this) throw std::logic_error("Tape::leaf: tensor belongs to another tape");
        return t;
    }
    // one leaf node per storage so parameter gradients accumulate across uses
    if (int32_t existing = leaf_id(t.storage().get()); existing >= 0) {
        if (requires_grad && !nodes_[static_cast<size_t>(existing)].requires_grad) {
            throw std::logic_error(
                "Tape::leaf: storage already bound without requires_grad; bind gradient "
                "leaves before first use");
        }
        return tensor_for(existing);
    }
    TapeNode n;
    n.op = Op::leaf;
    n.out = t.storage();
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    int32_t id = static_cast<int32_t>(nodes_.size() - 1);
    leaf_index_.emplace(t.storage().get(), id);
    return tensor_for(id);
}

Tensor Tape::bind(const Tensor& t) {
    if (t.on_tape()) {
        if (t.tape() != this) throw std::logic_error("op input belongs to another tape");
        return t;
    }
    return leaf(t, t.requires_grad());
}

Tensor Tape::emit(Op op, std::initializer_list<Tensor> inputs, Shape out_dims,
                  std::vector<double> out_data, double a0, double a1, std::vector<int32_t> idx) {
    if (released_) throw std::logic_error("Tape::emit: tape already released");
    check_finite(out_data, op_name(op));
    TapeNode n;
    n.op = op;
    n.a0 = a0;
    n.a1 = a1;
    n.idx = std::move(idx);
    for (const Tensor& in : inputs) {
        Tensor bound = bind(in);
        n.in[static_cast<size_t>(n.n_in++)] = bound.node();
        n.requires_grad = n.requires_grad || bound.requires_grad();
    }
    n.out = std::make_shared<TensorStorage>(TensorStorage{std::move(out_dims), std::move(out_data)});
    size_t bytes = n.out->data.size() * sizeof(double);
    nodes_.push_back(std::move(n));
    if (meter_ != nullptr) {
        try {
            meter_->on_alloc(bytes);
        } catch (...) {
            nodes_.pop_back();
            throw;
        }
    }
    return tensor_for(static_cast<int32_t>(nodes_.size() - 1));
}

void Tape::release() {
    if (released_) return;
    released_ = true;
    if (meter_ != nullptr) {
        for (const TapeNode& n : nodes_) {
            if (n.op != Op::leaf && n.out) meter_->on_free(n.out->data.size() * sizeof(double));
        }
    }
    nodes_.clear();
    leaf_index_.clear();
}

namespace {

// ---- numeric vector-Jacobian products -------------------------------------

using Buf = std::vector<double>;

struct NumericCtx {
    const std::vector<TapeNode>& nodes;
    std::vector<Buf>& grads;
    std::vector<char>& has_grad;

    Buf& grad_of(int32_t id) {
        if (!has_grad[static_cast<size_t>(id)]) {
            grads[static_cast<size_t>(id)].assign(nodes[static_cast<size_t>(id)].out->data.size(), 0.0);
            has_grad[static_cast<size_t>(id)] = 1;
        }
        return grads[static_cast<size_t>(id)];
    }
    bool wants(int32_t id) const { return nodes[static_cast<size_t>(id)].requires_grad; }
    const std::vector<double>& val(int32_t id) const { return nodes[static_cast<size_t>(id)].out->data; }
    const Shape& dims(int32_t id) const { return nodes[static_cast<size_t>(id)].out->dims; }
};

void numeric_vjp(NumericCtx& ctx, const TapeNode& n, const Buf& gy) {
    auto i0 = n.in[0], i1 = n.in[1], i2 = n.in[2];
    switch (n.op) {
        case Op::leaf:
            return;
        case Op::add: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            if (ctx.wants(i1)) {
                Buf& g = ctx.grad_of(i1);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            return;
        }
        case Op::sub: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            if (ctx.wants(i1)) {
                Buf& g = ctx.grad_of(i1);
                for (size_t i = 0; i < gy.size(); ++i) g[i] -= gy[i];
            }
            return;
        }
        case Op::mul: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& b = ctx.val(i1);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * b[i];
            }
            if (ctx.wants(i1)) {
                Buf& g = ctx.grad_of(i1);
                const Buf& a = ctx.val(i0);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * a[i];
            }
            return;
        }
        case Op::scale: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += n.a0 * gy[i];
            }
            return;
        }
        case Op::matmul: {
            const Shape& da = ctx.dims(i0);
            const Shape& db = ctx.dims(i1);
            int64_t k = da.size() == 1 ? da[0] : da[1];
            int64_t m = da.size() == 1 ? 1 : da[0];
            int64_t nn = db.size() == 1 ? 1 : db[1];
            MapC G(gy.data(), m, nn);
            // products land in a fresh buffer first so accumulation is a plain
            // elementwise add (sign-symmetric contributions cancel exactly)
            if (ctx.wants(i0)) {
                MapC B(ctx.val(i1).data(), k, nn);
                RowMat tmp = G * B.transpose();
                Map GA(ctx.grad_of(i0).data(), m, k);
                GA += tmp;
            }
            if (ctx.wants(i1)) {
                MapC A(ctx.val(i0).data(), m, k);
                RowMat tmp = A.transpose() * G;
                Map GB(ctx.grad_of(i1).data(), k, nn);
                GB += tmp;
            }
            return;
        }
        case Op::sum: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                for (double& v : g) v += gy[0];
            }
            return;
        }
        case Op::mean: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                double c = gy[0] / static_cast<double>(g.size());
                for (double& v : g) v += c;
            }
            return;
        }
        case Op::affine: {
            const Shape& dx = ctx.dims(i0);
            int64_t batch = dx.size() == 1 ? 1 : dx[0];
            int64_t in_dim = dx.size() == 1 ? dx[0] : dx[1];
            int64_t out_dim = ctx.dims(i1)[0];
            MapC G(gy.data(), batch, out_dim);
            if (ctx.wants(i0)) {
                MapC W(ctx.val(i1).data(), out_dim, in_dim);
                RowMat tmp = G * W;
                Map GX(ctx.grad_of(i0).data(), batch, in_dim);
                GX += tmp;
            }
            if (ctx.wants(i1)) {
                MapC X(ctx.val(i0).data(), batch, in_dim);
                RowMat tmp = G.transpose() * X;
                Map GW(ctx.grad_of(i1).data(), out_dim, in_dim);
                GW += tmp;
            }
            if (ctx.wants(i2)) {
                Buf tmp(static_cast<size_t>(out_dim), 0.0);
                for (int64_t r = 0; r < batch; ++r)
                    for (int64_t c = 0; c < out_dim; ++c) tmp[static_cast<size_t>(c)] += gy[static_cast<size_t>(r * out_dim + c)];
                Buf& gb = ctx.grad_of(i2);
                for (int64_t c = 0; c < out_dim; ++c) gb[static_cast<size_t>(c)] += tmp[static_cast<size_t>(c)];
            }
            return;
        }
        case Op::silu: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& x = ctx.val(i0);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * ops::eval::silu_grad_val(x[i]);
            }
            return;
        }
        case Op::leaky_relu: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& x = ctx.val(i0);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * (x[i] > 0.0 ? 1.0 : n.a0);
            }
            return;
        }
        case Op::soft_leaky_relu: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& x = ctx.val(i0);
                for (size_t i = 0; i < gy.size(); ++i)
                    g[i] += gy[i] * ops::eval::soft_leaky_relu_grad_val(x[i], n.a0, n.a1);
            }
            return;
        }
        case Op::softmax_xent: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& logits = ctx.val(i0);
                int64_t batch = static_cast<int64_t>(gy.size());
                int64_t classes = ctx.dims(i0)[1];
                for (int64_t r = 0; r < batch; ++r) {
                    auto row = std::span<const double>(logits).subspan(
                        static_cast<size_t>(r * classes), static_cast<size_t>(classes));
                    std::vector<double> p = ops::eval::softmax(row);
                    int32_t y = n.idx[static_cast<size_t>(r)];
                    for (int64_t c = 0; c < classes; ++c) {
                        double delta = (c == y) ? 1.0 : 0.0;
                        g[static_cast<size_t>(r * classes + c)] += gy[static_cast<size_t>(r)] * (p[static_cast<size_t>(c)] - delta);
                    }
                }
            }
            return;
        }
        case Op::clamp: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& x = ctx.val(i0);
                for (size_t i = 0; i < gy.size(); ++i)
                    if (x[i] >= n.a0 && x[i] <= n.a1) g[i] += gy[i];
            }
            return;
        }
        case Op::concat: {
            int64_t split = n.idx[0];
            const Shape& dy = ctx.dims(i0);
            if (dy.size() == 1) {
                if (ctx.wants(i0)) {
                    Buf& g = ctx.grad_of(i0);
                    for (size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                }
                if (ctx.wants(i1)) {
                    Buf& g = ctx.grad_of(i1);
                    for (size_t i = 0; i < g.size(); ++i) g[i] += gy[static_cast<size_t>(split) + i];
                }
                return;
            }
            int64_t rows = dy[0], ca = dy[1];
            int64_t cb = ctx.dims(i1)[1];
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < ca; ++c)
                        g[static_cast<size_t>(r * ca + c)] += gy[static_cast<size_t>(r * (ca + cb) + c)];
            }
            if (ctx.wants(i1)) {
                Buf& g = ctx.grad_of(i1);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cb; ++c)
                        g[static_cast<size_t>(r * cb + c)] += gy[static_cast<size_t>(r * (ca + cb) + ca + c)];
            }
            return;
        }
        case Op::gather_t: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                for (size_t i = 0; i < gy.size(); ++i) g[static_cast<size_t>(n.idx[i])] += gy[i];
            }
            return;
        }
        case Op::rowscale: {
            const Shape& dx = ctx.dims(i0);
            int64_t rows = dx[0], cols = dx[1];
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& s = ctx.val(i1);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c)
                        g[static_cast<size_t>(r * cols + c)] += gy[static_cast<size_t>(r * cols + c)] * s[static_cast<size_t>(r)];
            }
            if (ctx.wants(i1)) {
                Buf& g = ctx.grad_of(i1);
                const Buf& x = ctx.val(i0);
                for (int64_t r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (int64_t c = 0; c < cols; ++c)
                        acc += gy[static_cast<size_t>(r * cols + c)] * x[static_cast<size_t>(r * cols + c)];
                    g[static_cast<size_t>(r)] += acc;
                }
            }
            return;
        }
        case Op::broadcast: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                double acc = 0.0;
                for (double v : gy) acc += v;
                g[0] += acc;
            }
            return;
        }
        case Op::leaky_relu_grad:
            // piecewise constant: zero derivative almost everywhere
            return;
        case Op::soft_leaky_relu_grad: {
            if (ctx.wants(i0)) {
                Buf& g = ctx.grad_of(i0);
                const Buf& x = ctx.val(i0);
                for (size_t i = 0; i < gy.size(); ++i)
                    g[i] += gy[i] * ops::eval::soft_leaky_relu_grad2_val(x[i], n.a0, n.a1);
            }
            return;
        }
    }
}

}  // namespace

GradMap Tape::backward(const Tensor& root, const Tensor& seed_in, bool record_second_order,
                       std::span<const int32_t> stop_at) {
    if (!root.on_tape() || root.tape() != this)
        throw std::invalid_argument("backward: root is not on this tape");
    Tensor seed = seed_in;
    if (!seed.defined()) {
        if (root.numel() != 1)
            throw ShapeError("backward: non-scalar root requires an explicit seed");
        seed = Tensor::scalar(1.0);
    }
    if (seed.dims() != root.dims())
        throw ShapeError("backward: seed shape " + shape_str(seed.dims()) + " does not match root " +
                         shape_str(root.dims()));

    size_t n_at_start = nodes_.size();
    std::vector<char> stop(n_at_start, 0);
    for (int32_t id : stop_at) stop[static_cast<size_t>(id)] = 1;
    std::vector<char> reach(n_at_start, 0);
    {
        std::vector<int32_t> stack{root.node()};
        reach[static_cast<size_t>(root.node())] = 1;
        while (!stack.empty()) {
            int32_t id = stack.back();
            stack.pop_back();
            if (stop[static_cast<size_t>(id)]) continue;
            const TapeNode& nd = nodes_[static_cast<size_t>(id)];
            for (int i = 0; i < nd.n_in; ++i) {
                int32_t in = nd.in[static_cast<size_t>(i)];
                if (!reach[static_cast<size_t>(in)] && nodes_[static_cast<size_t>(in)].requires_grad) {
                    reach[static_cast<size_t>(in)] = 1;
                    stack.push_back(in);
                }
            }
        }
    }

    GradMap gm;
    gm.tape_ = this;

    if (!record_second_order) {
        std::vector<Buf> grads(n_at_start);
        std::vector<char> has_grad(n_at_start, 0);
        NumericCtx ctx{nodes_, grads, has_grad};
        grads[static_cast<size_t>(root.node())].assign(seed.data().begin(), seed.data().end());
        has_grad[static_cast<size_t>(root.node())] = 1;
        for (int32_t id = root.node(); id >= 0; --id) {
            size_t uid = static_cast<size_t>(id);
            if (!reach[uid] || !has_grad[uid]) continue;
            const TapeNode& nd = nodes_[uid];
            if (nd.op == Op::leaf || stop[uid]) continue;
            numeric_vjp(ctx, nd, grads[uid]);
            grads[uid] = Buf{};  // free as we go
            has_grad[uid] = 0;
        }
        for (size_t id = 0; id < n_at_start; ++id) {
            bool wants = (nodes_[id].op == Op::leaf && nodes_[id].requires_grad) || stop[id];
            if (!wants) continue;
            if (has_grad[id]) {
                gm.grads_[static_cast<int32_t>(id)] =
                    Tensor::from(nodes_[id].out->dims, std::move(grads[id]));
            } else if (reach[id]) {
                // reachable but fed only zero-derivative paths
                gm.grads_[static_cast<int32_t>(id)] = Tensor::zeros(nodes_[id].out->dims);
            }
        }
        return gm;
    }

    // Recorded backward: gradients are built with tape ops so a further
    // backward over them yields exact Hessian-vector products.
    std::vector<Tensor> grads(n_at_start);
    auto accum = [&](int32_t id, const Tensor& contrib) {
        size_t uid = static_cast<size_t>(id);
        grads[uid] = grads[uid].defined() ? ops::add(*this, grads[uid], contrib) : contrib;
    };
    grads[static_cast<size_t>(root.node())] = constant(seed);
    for (int32_t id = root.node(); id >= 0; --id) {
        size_t uid = static_cast<size_t>(id);
        if (!reach[uid] || !grads[uid].defined()) continue;
        const TapeNode nd = nodes_[uid];  // copy: emitting ops may reallocate nodes_
        if (nd.op == Op::leaf || stop[uid]) continue;
        Tensor gy = grads[uid];
        switch (nd.op) {
            case Op::add:
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad) accum(nd.in[0], gy);
                if (nodes_[static_cast<size_t>(nd.in[1])].requires_grad) accum(nd.in[1], gy);
                break;
            case Op::sub:
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad) accum(nd.in[0], gy);
                if (nodes_[static_cast<size_t>(nd.in[1])].requires_grad)
                    accum(nd.in[1], ops::scale(*this, gy, -1.0));
                break;
            case Op::mul:
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad)
                    accum(nd.in[0], ops::mul(*this, gy, tensor_for(nd.in[1])));
                if (nodes_[static_cast<size_t>(nd.in[1])].requires_grad)
                    accum(nd.in[1], ops::mul(*this, gy, tensor_for(nd.in[0])));
                break;
            case Op::scale:
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad)
                    accum(nd.in[0], ops::scale(*this, gy, nd.a0));
                break;
            case Op::sum:
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad)
                    accum(nd.in[0], ops::broadcast(*this, gy, nodes_[static_cast<size_t>(nd.in[0])].out->dims));
                break;
            case Op::affine: {
                if (nodes_[static_cast<size_t>(nd.in[1])].requires_grad ||
                    nodes_[static_cast<size_t>(nd.in[2])].requires_grad)
                    throw UnsupportedDoubleBackward(
                        "recorded backward through affine parameters is not supported");
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad)
                    accum(nd.in[0], ops::matmul(*this, gy, tensor_for(nd.in[1])));
                break;
            }
            case Op::leaky_relu:
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad)
                    accum(nd.in[0],
                          ops::mul(*this, gy, ops::leaky_relu_grad(*this, tensor_for(nd.in[0]), nd.a0)));
                break;
            case Op::soft_leaky_relu:
                if (nodes_[static_cast<size_t>(nd.in[0])].requires_grad)
                    accum(nd.in[0], ops::mul(*this, gy,
                                             ops::soft_leaky_relu_grad(*this, tensor_for(nd.in[0]),
                                                                       nd.a0, nd.a1)));
                break;
            default:
                throw UnsupportedDoubleBackward(std::string("recorded backward not implemented for op '") +
                                                op_name(nd.op) + "'");
        }
    }
    for (size_t id = 0; id < n_at_start; ++id) {
        if (grads[id].defined()) {
            gm.grads_[static_cast<int32_t>(id)] = grads[id];
        } else if (reach[id] &&
                   ((nodes_[id].op == Op::leaf && nodes_[id].requires_grad) || stop[id])) {
            gm.grads_[static_cast<int32_t>(id)] = constant(Tensor::zeros(nodes_[id].out->dims));
        }
    }
    return gm;
}

}  // namespace purigrad
