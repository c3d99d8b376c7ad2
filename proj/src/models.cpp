#include "purigrad/models.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace purigrad::models {

const char* act_name(Act act) {
    switch (act) {
        case Act::silu: return "silu";
        case Act::leaky_relu: return "leaky_relu";
        case Act::soft_leaky_relu: return "soft_leaky_relu";
    }
    return "?";
}

Act act_from_name(const std::string& name) {
    if (name == "silu") return Act::silu;
    if (name == "leaky_relu") return Act::leaky_relu;
    if (name == "soft_leaky_relu") return Act::soft_leaky_relu;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

Mlp Mlp::init(std::vector<int64_t> dims, Act act, Rng& rng, ActParams actp) {
    if (dims.size() < 2) throw std::invalid_argument("Mlp::init: need at least in/out dims");
    Mlp m;
    m.layer_dims = std::move(dims);
    m.act = act;
    m.actp = actp;
    for (size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
        int64_t in = m.layer_dims[l];
        int64_t out = m.layer_dims[l + 1];
        double std_dev = std::sqrt(2.0 / static_cast<double>(in));
        std::vector<double> w(static_cast<size_t>(in * out));
        for (double& v : w) v = std_dev * rng.normal();
        m.weights.push_back(Tensor::from({out, in}, std::move(w)));
        m.biases.push_back(Tensor::zeros({out}));
    }
    return m;
}

Tensor Mlp::forward(Tape& tape, const Tensor& x) const {
    Tensor h = x;
    for (size_t l = 0; l < weights.size(); ++l) {
        h = ops::affine(tape, h, weights[l], biases[l]);
        if (l + 1 < weights.size()) {
            switch (act) {
                case Act::silu: h = ops::silu(tape, h); break;
                case Act::leaky_relu: h = ops::leaky_relu(tape, h, actp.slope); break;
                case Act::soft_leaky_relu: h = ops::soft_leaky_relu(tape, h, actp.a, actp.e); break;
            }
        }
    }
    return h;
}

Tensor Mlp::forward_detached(const Tensor& x) const {
    Tape tape;
    return forward(tape, x).detach();
}

std::vector<Tensor*> Mlp::params() {
    std::vector<Tensor*> p;
    for (auto& w : weights) p.push_back(&w);
    for (auto& b : biases) p.push_back(&b);
    return p;
}

std::vector<const Tensor*> Mlp::params() const {
    std::vector<const Tensor*> p;
    for (const auto& w : weights) p.push_back(&w);
    for (const auto& b : biases) p.push_back(&b);
    return p;
}

NoiseSchedule NoiseSchedule::make(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("NoiseSchedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.sigma.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T) + 1);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<size_t>(t - 1)] = b;
        s.alpha[static_cast<size_t>(t - 1)] = 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - b);
        s.sigma[static_cast<size_t>(t - 1)] =
            std::sqrt(b * (1.0 - s.alpha_bar[static_cast<size_t>(t - 1)]) /
                      (1.0 - s.alpha_bar[static_cast<size_t>(t)]));
    }
    return s;
}

namespace {

Tensor sample_component_means(const MixtureSpec& spec, Rng rng) {
    std::vector<double> means(static_cast<size_t>(spec.components) * static_cast<size_t>(spec.dim));
    for (int c = 0; c < spec.components; ++c) {
        for (int attempt = 0;; ++attempt) {
            std::span<double> row(means.data() + static_cast<size_t>(c) * static_cast<size_t>(spec.dim),
                                  static_cast<size_t>(spec.dim));
            rng.fill_uniform(row, spec.mean_lo, spec.mean_hi);
            bool ok = true;
            for (int p = 0; p < c && ok; ++p) {
                double d2 = 0.0;
                for (int64_t k = 0; k < spec.dim; ++k) {
                    double diff = row[static_cast<size_t>(k)] -
                                  means[static_cast<size_t>(p) * static_cast<size_t>(spec.dim) + static_cast<size_t>(k)];
                    d2 += diff * diff;
                }
                ok = d2 >= spec.min_mean_dist * spec.min_mean_dist;
            }
            if (ok) break;
            if (attempt > 20000)
                throw std::runtime_error("make_dataset: cannot place component means at requested separation");
        }
    }
    return Tensor::from({spec.components, spec.dim}, std::move(means));
}

}  // namespace

SyntheticDataset make_dataset(const MixtureSpec& spec, int64_t n, uint64_t stream) {
    if (spec.classes < 1 || spec.components < spec.classes)
        throw std::invalid_argument("make_dataset: need components >= classes >= 1");
    Rng root(spec.seed);
    Tensor means = spec.means ? *spec.means : sample_component_means(spec, root.derive(1));
    std::vector<int> comp_class = spec.component_class;
    if (comp_class.empty()) {
        for (int c = 0; c < spec.components; ++c) comp_class.push_back(c % spec.classes);
    }
    std::vector<std::vector<int>> class_comps(static_cast<size_t>(spec.classes));
    for (int c = 0; c < spec.components; ++c)
        class_comps[static_cast<size_t>(comp_class[static_cast<size_t>(c)])].push_back(c);
    for (const auto& v : class_comps)
        if (v.empty()) throw std::invalid_argument("make_dataset: class without components");

    Rng pts = root.derive(2 + stream);
    std::vector<double> data(static_cast<size_t>(n) * static_cast<size_t>(spec.dim));
    std::vector<int32_t> labels(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int label = static_cast<int>(i % spec.classes);
        const auto& comps = class_comps[static_cast<size_t>(label)];
        int comp = comps[static_cast<size_t>((i / spec.classes) % static_cast<int64_t>(comps.size()))];
        std::span<double> row(data.data() + static_cast<size_t>(i) * static_cast<size_t>(spec.dim),
                              static_cast<size_t>(spec.dim));
        for (int attempt = 0;; ++attempt) {
            bool inside = true;
            for (int64_t k = 0; k < spec.dim; ++k) {
                double v = means.at2(comp, k) + spec.sigma * pts.normal();
                row[static_cast<size_t>(k)] = v;
                inside = inside && v >= 0.0 && v <= 1.0;
            }
            if (inside) break;
            if (attempt > 10000) {
                for (double& v : row) v = std::min(std::max(v, 0.0), 1.0);
                break;
            }
        }
        labels[static_cast<size_t>(i)] = static_cast<int32_t>(label);
    }
    SyntheticDataset ds;
    ds.points = Tensor::from({n, spec.dim}, std::move(data));
    ds.labels = std::move(labels);
    ds.spec = spec;
    ds.spec.means = means;
    ds.spec.component_class = comp_class;
    return ds;
}

namespace {

Tensor batch_rows(const Tensor& points, const std::vector<int64_t>& order, int64_t lo, int64_t hi) {
    int64_t d = points.dims()[1];
    std::vector<double> out(static_cast<size_t>((hi - lo) * d));
    for (int64_t i = lo; i < hi; ++i) {
        const double* src = points.data().data() + order[static_cast<size_t>(i)] * d;
        std::copy_n(src, d, out.begin() + (i - lo) * d);
    }
    return Tensor::from({hi - lo, d}, std::move(out));
}

void sgd_step(std::vector<Tensor*> params, Tape& tape, const GradMap& gm, double lr) {
    for (Tensor* p : params) {
        Tensor g = gm.find(*p);
        if (!g.defined()) continue;
        auto pd = p->mutable_data();
        auto gd = g.data();
        for (size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * gd[i];
    }
    (void)tape;
}

std::vector<int64_t> epoch_order(int64_t n, Rng rng) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates with the portable stream
    for (int64_t i = n - 1; i > 0; --i) {
        int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    return order;
}

}  // namespace

Mlp train_classifier(const SyntheticDataset& data, const TrainConfig& cfg,
                     std::vector<int64_t> hidden, Act act, TrainMetrics* metrics) {
    if (data.size() == 0) throw std::invalid_argument("train_classifier: empty dataset");
    int classes = 1 + *std::max_element(data.labels.begin(), data.labels.end());
    if (classes < 2) throw std::invalid_argument("train_classifier: need at least 2 classes");
    std::vector<int64_t> dims{data.dim()};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(classes);
    Rng rng(cfg.seed);
    Rng init_rng = rng.derive(0);
    Mlp net = Mlp::init(dims, act, init_rng);
    for (Tensor* p : net.params()) p->set_requires_grad(true);

    TrainMetrics local;
    int64_t n = data.size();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = epoch_order(n, rng.derive(1 + static_cast<uint64_t>(epoch)));
        double epoch_loss = 0.0;
        int64_t batches = 0;
        for (int64_t lo = 0; lo < n; lo += cfg.batch) {
            int64_t hi = std::min(n, lo + cfg.batch);
            Tensor xb = batch_rows(data.points, order, lo, hi);
            std::vector<int32_t> yb;
            for (int64_t i = lo; i < hi; ++i) yb.push_back(data.labels[static_cast<size_t>(order[static_cast<size_t>(i)])]);
            Tape tape;
            for (Tensor* p : net.params()) tape.leaf(*p, true);
            Tensor logits = net.forward(tape, xb);
            Tensor ce = ops::softmax_cross_entropy(tape, logits, yb);
            Tensor loss = ops::mean(tape, ce);
            GradMap gm = tape.backward(loss, Tensor{});
            sgd_step(net.params(), tape, gm, cfg.lr);
            epoch_loss += loss.item();
            ++batches;
        }
        local.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    }
    local.final_loss = local.epoch_loss.empty() ? 0.0 : local.epoch_loss.back();
    local.train_accuracy = classifier_accuracy(net, data);
    local.converged = local.train_accuracy >= 0.95;
    if (!local.converged)
        std::cerr << "warning: classifier train accuracy " << local.train_accuracy
                  << " below 0.95 after " << cfg.epochs << " epochs\n";
    if (metrics) *metrics = local;
    for (Tensor* p : net.params()) p->set_requires_grad(false);
    return net;
}

Mlp train_denoiser(const SyntheticDataset& data, const NoiseSchedule& schedule,
                   const TrainConfig& cfg, std::vector<int64_t> hidden, Act act,
                   TrainMetrics* metrics) {
    int64_t d = data.dim();
    std::vector<int64_t> dims{d + 1};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(d);
    Rng rng(cfg.seed);
    Rng init_rng = rng.derive(0);
    Mlp net = Mlp::init(dims, act, init_rng);
    for (Tensor* p : net.params()) p->set_requires_grad(true);

    // gather tables for the per-sample noising coefficients
    std::vector<double> sqrt_ab(schedule.alpha_bar.size());
    std::vector<double> sqrt_1m_ab(schedule.alpha_bar.size());
    for (size_t i = 0; i < schedule.alpha_bar.size(); ++i) {
        sqrt_ab[i] = std::sqrt(schedule.alpha_bar[i]);
        sqrt_1m_ab[i] = std::sqrt(1.0 - schedule.alpha_bar[i]);
    }
    int64_t table_len = static_cast<int64_t>(sqrt_ab.size());
    Tensor sqrt_ab_t = Tensor::from({table_len}, std::move(sqrt_ab));
    Tensor sqrt_1m_ab_t = Tensor::from({table_len}, std::move(sqrt_1m_ab));

    TrainMetrics local;
    int64_t n = data.size();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.derive(1 + static_cast<uint64_t>(epoch));
        auto order = epoch_order(n, erng.derive(0));
        Rng noise_rng = erng.derive(1);
        double epoch_loss = 0.0;
        int64_t batches = 0;
        for (int64_t lo = 0; lo < n; lo += cfg.batch) {
            int64_t hi = std::min(n, lo + cfg.batch);
            int64_t b = hi - lo;
            Tensor x0 = batch_rows(data.points, order, lo, hi);
            std::vector<int32_t> ts(static_cast<size_t>(b));
            for (auto& t : ts)
                t = 1 + static_cast<int32_t>(noise_rng.next_u64() % static_cast<uint64_t>(schedule.T));
            std::vector<double> eps(static_cast<size_t>(b * d));
            noise_rng.fill_normal(eps);
            Tensor eps_t = Tensor::from({b, d}, std::move(eps));
            std::vector<double> tcol(static_cast<size_t>(b));
            for (int64_t i = 0; i < b; ++i)
                tcol[static_cast<size_t>(i)] = static_cast<double>(ts[static_cast<size_t>(i)]) / schedule.T;
            Tensor tcol_t = Tensor::from({b, 1}, std::move(tcol));

            Tape tape;
            for (Tensor* p : net.params()) tape.leaf(*p, true);
            Tensor c1 = ops::gather_t(tape, sqrt_ab_t, ts);
            Tensor c2 = ops::gather_t(tape, sqrt_1m_ab_t, ts);
            Tensor xt = ops::add(tape, ops::rowscale(tape, tape.constant(x0), c1),
                                 ops::rowscale(tape, tape.constant(eps_t), c2));
            Tensor input = ops::concat(tape, xt, tape.constant(tcol_t));
            Tensor pred = net.forward(tape, input);
            Tensor diff = ops::sub(tape, pred, tape.constant(eps_t));
            Tensor loss = ops::scale(tape, ops::sum(tape, ops::mul(tape, diff, diff)),
                                     1.0 / static_cast<double>(b));
            GradMap gm = tape.backward(loss, Tensor{});
            sgd_step(net.params(), tape, gm, cfg.lr);
            epoch_loss += loss.item();
            ++batches;
        }
        local.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    }
    local.final_loss = local.epoch_loss.empty() ? 0.0 : local.epoch_loss.back();
    if (metrics) *metrics = local;
    for (Tensor* p : net.params()) p->set_requires_grad(false);
    return net;
}

std::vector<Tensor> ebm_param_gradient(const Mlp& energy, const Tensor& positives,
                                       const Tensor& negatives) {
    Mlp net = energy;  // shares parameter storage
    for (Tensor* p : net.params()) p->set_requires_grad(true);
    Tape tape;
    for (Tensor* p : net.params()) tape.leaf(*p, true);
    Tensor upos = ops::sum(tape, net.forward(tape, positives));
    Tensor uneg = ops::sum(tape, net.forward(tape, negatives));
    Tensor obj = ops::sub(tape, ops::scale(tape, upos, 1.0 / static_cast<double>(positives.rows())),
                          ops::scale(tape, uneg, 1.0 / static_cast<double>(negatives.rows())));
    GradMap gm = tape.backward(obj, Tensor{});
    std::vector<Tensor> grads;
    for (Tensor* p : net.params()) {
        Tensor g = gm.find(*p);
        grads.push_back(g.defined() ? g : Tensor::zeros(p->dims()));
    }
    return grads;
}

namespace {

/// One numeric Langevin chain (training-side): x <- x - (eta^2/2) grad U + eta z.
Tensor langevin_chain(const Mlp& energy, Tensor x, int steps, double eta, Rng& rng,
                      double divergence_abort) {
    int64_t b = x.rows();
    int64_t d = x.cols();
    for (int k = 0; k < steps; ++k) {
        Tape tape;
        Tensor xl = tape.leaf(x, true);
        Tensor u = ops::sum(tape, energy.forward(tape, xl));
        GradMap gm = tape.backward(u, Tensor{});
        Tensor g = gm.at(xl);
        std::vector<double> next(static_cast<size_t>(b * d));
        auto xd = x.data();
        auto gd = g.data();
        double coef = eta * eta / 2.0;
        for (size_t i = 0; i < next.size(); ++i) next[i] = xd[i] - coef * gd[i] + eta * rng.normal();
        x = Tensor::from({b, d}, std::move(next));
        for (double v : x.data())
            if (std::abs(v) > divergence_abort)
                throw std::runtime_error("train_ebm: Langevin chain diverged at step " + std::to_string(k));
    }
    return x;
}

}  // namespace

Mlp train_ebm(const SyntheticDataset& data, const EbmTrainConfig& cfg,
              std::vector<int64_t> hidden, Act act, TrainMetrics* metrics, ActParams actp) {
    int64_t d = data.dim();
    std::vector<int64_t> dims{d};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(1);
    Rng rng(cfg.base.seed);
    Rng init_rng = rng.derive(0);
    Mlp net = Mlp::init(dims, act, init_rng, actp);

    TrainMetrics local;
    int64_t n = data.size();
    for (int epoch = 0; epoch < cfg.base.epochs; ++epoch) {
        Rng erng = rng.derive(1 + static_cast<uint64_t>(epoch));
        auto order = epoch_order(n, erng.derive(0));
        Rng chain_rng = erng.derive(1);
        double epoch_energy = 0.0;
        int64_t batches = 0;
        for (int64_t lo = 0; lo < n; lo += cfg.base.batch) {
            int64_t hi = std::min(n, lo + cfg.base.batch);
            Tensor pos = batch_rows(data.points, order, lo, hi);
            std::vector<double> neg0(pos.data().begin(), pos.data().end());
            for (double& v : neg0) v += chain_rng.uniform(-cfg.init_noise, cfg.init_noise);
            Tensor neg = Tensor::from(pos.dims(), std::move(neg0));
            neg = langevin_chain(net, neg, cfg.langevin_steps, cfg.langevin_eta, chain_rng,
                                 cfg.divergence_abort);
            std::vector<Tensor> grads = ebm_param_gradient(net, pos, neg);
            auto params = net.params();
            for (size_t i = 0; i < params.size(); ++i) {
                auto pd = params[i]->mutable_data();
                auto gd = grads[i].data();
                for (size_t j = 0; j < pd.size(); ++j) pd[j] -= cfg.base.lr * gd[j];
            }
            Tensor upos = energy_values(net, pos);
            for (double v : upos.data()) {
                if (std::abs(v) > cfg.divergence_abort)
                    throw std::runtime_error("train_ebm: energy diverged (|U| > " +
                                             std::to_string(cfg.divergence_abort) + ")");
                epoch_energy += v;
            }
            ++batches;
        }
        local.epoch_loss.push_back(epoch_energy / static_cast<double>(n));
        (void)batches;
    }
    local.final_loss = local.epoch_loss.empty() ? 0.0 : local.epoch_loss.back();
    if (metrics) *metrics = local;
    for (Tensor* p : net.params()) p->set_requires_grad(false);
    return net;
}

double classifier_accuracy(const Mlp& classifier, const SyntheticDataset& data) {
    Tensor logits = classifier.forward_detached(data.points);
    int64_t classes = logits.dims()[1];
    int64_t correct = 0;
    for (int64_t i = 0; i < data.size(); ++i) {
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
            if (logits.at2(i, c) > logits.at2(i, best)) best = c;
        if (best == data.labels[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

Tensor energy_values(const Mlp& energy, const Tensor& x) { return energy.forward_detached(x); }

}  // namespace purigrad::models
