#include "purigrad/attack.hpp"

#include <algorithm>
#include <cmath>

#include "purigrad/parallel.hpp"

namespace purigrad::attacks {

namespace {

constexpr uint64_t kRandomStartStream = 0xA11CE;

Tensor row_of(const Tensor& X, int64_t r) {
    int64_t d = X.cols();
    std::vector<double> row(X.data().begin() + r * d, X.data().begin() + (r + 1) * d);
    return Tensor::from({d}, std::move(row));
}

void set_row(Tensor& X, int64_t r, std::span<const double> values) {
    int64_t d = X.cols();
    std::copy_n(values.begin(), static_cast<size_t>(d), X.mutable_data().begin() + r * d);
}

double row_check_loss(std::span<const double> logits, int32_t label) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return std::log(z) + mx - logits[static_cast<size_t>(label)];
}

int32_t row_argmax(std::span<const double> logits) {
    int32_t best = 0;
    for (size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[static_cast<size_t>(best)]) best = static_cast<int32_t>(c);
    return best;
}

grad::GradReport dispatch_grad(const Tensor& X, const Defense& defense,
                               const grad::LossHead& head, std::vector<Rng> streams,
                               grad::Method method, int tail_steps, size_t naive_cap) {
    switch (method) {
        case grad::Method::checkpointed:
            return grad::checkpointed_grad(X, defense.purifier, head, std::move(streams));
        case grad::Method::naive:
            return grad::naive_grad(X, defense.purifier, head, std::move(streams), naive_cap);
        case grad::Method::bpda:
            return grad::bpda_grad(X, defense.purifier, head, std::move(streams));
        case grad::Method::final_state: {
            int tail = tail_steps < 0 ? defense.purifier.num_steps() / 2 : tail_steps;
            return grad::final_state_grad(X, defense.purifier, head, std::move(streams), tail);
        }
    }
    throw std::logic_error("unreachable gradient method");
}

/// Replicate h of row r purifies with stream per_row_base[r].derive(h).
/// Replicates may run on the worker pool; the pairwise mean over indexed
/// slots keeps the result schedule-invariant.
Tensor eot_gradient_with_streams(const Tensor& X, const Defense& defense,
                                 const std::vector<int32_t>& labels, int h_adv,
                                 const std::vector<Rng>& per_row_base, grad::Method method,
                                 int tail_steps, size_t naive_cap) {
    grad::LossHead head = grad::xent_head(defense.classifier, labels);
    std::vector<Tensor> slots(static_cast<size_t>(h_adv));
    parallel_for(h_adv, default_workers(), [&](int h) {
        std::vector<Rng> streams;
        streams.reserve(per_row_base.size());
        for (const Rng& base : per_row_base) streams.push_back(base.derive(static_cast<uint64_t>(h)));
        slots[static_cast<size_t>(h)] =
            dispatch_grad(X, defense, head, std::move(streams), method, tail_steps, naive_cap).gradient;
    });
    return pairwise_mean(std::move(slots));
}

struct CheckResult {
    std::vector<int32_t> predictions;
    std::vector<double> losses;
};

/// One fresh single-replicate defended classification of the current batch.
CheckResult defended_check(const Tensor& X, const Defense& defense,
                           const std::vector<int32_t>& labels, const std::vector<Rng>& streams) {
    auto [purified, rec] = purifiers::purify(defense.purifier, X, streams);
    (void)rec;
    Tensor logits = defense.classifier.forward_detached(purified);
    int64_t b = X.rows();
    int64_t c = logits.cols();
    CheckResult out;
    for (int64_t r = 0; r < b; ++r) {
        std::span<const double> row = logits.data().subspan(static_cast<size_t>(r * c), static_cast<size_t>(c));
        out.predictions.push_back(row_argmax(row));
        out.losses.push_back(row_check_loss(row, labels[static_cast<size_t>(r)]));
    }
    return out;
}

std::vector<AdversarialRecord> run_attack(const Tensor& X_in, const std::vector<int32_t>& labels,
                                          const Defense& defense, const AttackConfig& cfg,
                                          std::vector<uint64_t> ids, bool adaptive) {
    cfg.validate();
    Tensor X0 = X_in.rank() == 1
                    ? Tensor::from({1, X_in.dims()[0]}, {X_in.data().begin(), X_in.data().end()})
                    : X_in.clone();
    int64_t b = X0.rows();
    int64_t d = X0.cols();
    if (static_cast<int64_t>(labels.size()) != b)
        throw std::invalid_argument("attack: label count does not match batch rows");
    if (ids.empty())
        for (int64_t i = 0; i < b; ++i) ids.push_back(static_cast<uint64_t>(i));

    Rng root(cfg.seed);
    std::vector<Rng> img_base;
    for (int64_t i = 0; i < b; ++i) img_base.push_back(root.derive(ids[static_cast<size_t>(i)]));

    Tensor X = X0.clone();
    if (cfg.random_start && cfg.epsilon > 0.0) {
        for (int64_t i = 0; i < b; ++i) {
            Rng start = img_base[static_cast<size_t>(i)].derive(kRandomStartStream);
            auto xd = X.mutable_data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d));
            for (double& v : xd) v += start.uniform(-cfg.epsilon, cfg.epsilon);
        }
        X = cfg.norm == Norm::linf ? project_linf(X, X0, cfg.epsilon) : project_l2(X, X0, cfg.epsilon);
    }

    std::vector<AdversarialRecord> records(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        AdversarialRecord& r = records[static_cast<size_t>(i)];
        r.original = row_of(X0, i);
        r.label = labels[static_cast<size_t>(i)];
        r.image_id = ids[static_cast<size_t>(i)];
    }

    std::vector<double> step(static_cast<size_t>(b), adaptive ? 2.0 * cfg.epsilon : cfg.step_size);
    std::vector<double> best_loss(static_cast<size_t>(b), -std::numeric_limits<double>::infinity());
    std::vector<double> ckpt_best(static_cast<size_t>(b), -std::numeric_limits<double>::infinity());
    Tensor best_x = X.clone();
    Tensor prev_x = X.clone();
    int window = std::max(static_cast<int>(std::ceil(0.22 * cfg.iterations)), 1);

    for (int j = 0; j < cfg.iterations; ++j) {
        std::vector<Rng> iter_base;
        for (int64_t i = 0; i < b; ++i)
            iter_base.push_back(img_base[static_cast<size_t>(i)].derive(static_cast<uint64_t>(j)));

        Tensor g = eot_gradient_with_streams(X, defense, labels, cfg.eot_replicates, iter_base,
                                             cfg.grad_method, cfg.tail_steps, cfg.naive_cap_bytes);
        for (double v : g.data())
            if (!std::isfinite(v))
                throw std::runtime_error("attack: non-finite gradient at iteration " + std::to_string(j));

        Tensor proposal = X.clone();
        for (int64_t i = 0; i < b; ++i) {
            auto gs = g.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d));
            auto xs = proposal.mutable_data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d));
            double eta = step[static_cast<size_t>(i)];
            if (cfg.norm == Norm::linf) {
                for (int64_t k = 0; k < d; ++k) {
                    double s = gs[static_cast<size_t>(k)] > 0.0 ? 1.0 : (gs[static_cast<size_t>(k)] < 0.0 ? -1.0 : 0.0);
                    xs[static_cast<size_t>(k)] += eta * s;
                }
            } else {
                double nrm = 0.0;
                for (double v : gs) nrm += v * v;
                nrm = std::sqrt(nrm);
                if (nrm > 0.0)
                    for (int64_t k = 0; k < d; ++k) xs[static_cast<size_t>(k)] += eta * gs[static_cast<size_t>(k)] / nrm;
            }
        }
        std::vector<char> distorted(static_cast<size_t>(b), 0);
        Tensor Z = cfg.norm == Norm::linf ? project_linf(proposal, X0, cfg.epsilon)
                                          : project_l2(proposal, X0, cfg.epsilon, &distorted);

        Tensor X_next;
        if (!adaptive || j == 0) {
            X_next = Z;  // momentum is inert at the first step
        } else {
            X_next = X.clone();
            double alpha = cfg.momentum;
            for (int64_t i = 0; i < b; ++i) {
                for (int64_t k = 0; k < d; ++k) {
                    size_t at = static_cast<size_t>(i * d + k);
                    X_next.mutable_data()[at] = X.data()[at] + alpha * (Z.data()[at] - X.data()[at]) +
                                                (1.0 - alpha) * (X.data()[at] - prev_x.data()[at]);
                }
            }
            std::vector<char> dist2(static_cast<size_t>(b), 0);
            X_next = cfg.norm == Norm::linf ? project_linf(X_next, X0, cfg.epsilon)
                                            : project_l2(X_next, X0, cfg.epsilon, &dist2);
            for (int64_t i = 0; i < b; ++i)
                distorted[static_cast<size_t>(i)] = distorted[static_cast<size_t>(i)] || dist2[static_cast<size_t>(i)];
        }
        prev_x = X;
        X = X_next;
        for (int64_t i = 0; i < b; ++i)
            records[static_cast<size_t>(i)].l2_clamp_distortion |= distorted[static_cast<size_t>(i)] != 0;

        // attack-process bookkeeping from one fresh purification replicate
        std::vector<Rng> check_streams;
        for (int64_t i = 0; i < b; ++i)
            check_streams.push_back(iter_base[static_cast<size_t>(i)].derive(static_cast<uint64_t>(cfg.eot_replicates)));
        CheckResult check = defended_check(X, defense, labels, check_streams);

        for (int64_t i = 0; i < b; ++i) {
            size_t ui = static_cast<size_t>(i);
            AdversarialRecord& r = records[ui];
            r.loss_trace.push_back(check.losses[ui]);
            r.step_trace.push_back(step[ui]);
            bool broken = check.predictions[ui] != labels[ui];
            if (broken) {
                if (!r.first_broken) {
                    r.first_broken = row_of(X, i);
                    r.first_broken_iter = j;
                }
                if (!r.loss_optimized || check.losses[ui] > r.loss_optimized_value) {
                    r.loss_optimized = row_of(X, i);
                    r.loss_optimized_value = check.losses[ui];
                    r.loss_optimized_iter = j;
                }
            }
            if (check.losses[ui] > best_loss[ui]) {
                best_loss[ui] = check.losses[ui];
                set_row(best_x, i, X.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d)));
            }
        }

        if (adaptive && (j + 1) % window == 0) {
            for (int64_t i = 0; i < b; ++i) {
                size_t ui = static_cast<size_t>(i);
                if (!(best_loss[ui] > ckpt_best[ui])) {
                    step[ui] /= 2.0;
                    set_row(X, i, best_x.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d)));
                    set_row(prev_x, i, best_x.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d)));
                }
                ckpt_best[ui] = best_loss[ui];
            }
        }
    }

    for (int64_t i = 0; i < b; ++i) records[static_cast<size_t>(i)].final_state = row_of(X, i);
    return records;
}

}  // namespace

const char* norm_name(Norm n) { return n == Norm::linf ? "linf" : "l2"; }

Norm norm_from_name(const std::string& name) {
    if (name == "linf") return Norm::linf;
    if (name == "l2") return Norm::l2;
    throw std::invalid_argument("unknown norm '" + name + "'");
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("attack: epsilon must be >= 0");
    if (iterations < 1) throw std::invalid_argument("attack: need at least one iteration");
    if (eot_replicates < 1) throw std::invalid_argument("attack: H_adv must be >= 1");
    if (step_rule == StepRule::adaptive && !(momentum >= 0.0 && momentum <= 1.0))
        throw std::invalid_argument("attack: momentum must lie in [0,1]");
}

Tensor project_linf(const Tensor& x, const Tensor& x0, double epsilon) {
    if (!x.same_shape(x0)) throw std::invalid_argument("project_linf: shape mismatch");
    std::vector<double> out(x.data().begin(), x.data().end());
    auto ref = x0.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double lo = std::max(ref[i] - epsilon, 0.0);
        double hi = std::min(ref[i] + epsilon, 1.0);
        out[i] = std::min(std::max(out[i], lo), hi);
    }
    return Tensor::from(x.dims(), std::move(out));
}

Tensor project_l2(const Tensor& x, const Tensor& x0, double epsilon, std::vector<char>* distorted) {
    if (!x.same_shape(x0)) throw std::invalid_argument("project_l2: shape mismatch");
    int64_t b = x.rows();
    int64_t d = x.cols();
    std::vector<double> out(x.data().begin(), x.data().end());
    auto ref = x0.data();
    if (distorted) distorted->assign(static_cast<size_t>(b), 0);
    for (int64_t r = 0; r < b; ++r) {
        double nrm = 0.0;
        for (int64_t k = 0; k < d; ++k) {
            double diff = out[static_cast<size_t>(r * d + k)] - ref[static_cast<size_t>(r * d + k)];
            nrm += diff * diff;
        }
        nrm = std::sqrt(nrm);
        double factor = nrm > epsilon && nrm > 0.0 ? epsilon / nrm : 1.0;
        for (int64_t k = 0; k < d; ++k) {
            size_t at = static_cast<size_t>(r * d + k);
            double v = ref[at] + factor * (out[at] - ref[at]);
            double clamped = std::min(std::max(v, 0.0), 1.0);
            if (clamped != v && distorted) (*distorted)[static_cast<size_t>(r)] = 1;
            out[at] = clamped;
        }
    }
    return Tensor::from(x.dims(), std::move(out));
}

Tensor eot_gradient(const Tensor& x, const Defense& defense, const std::vector<int32_t>& labels,
                    int h_adv, const Rng& rng, grad::Method method, int tail_steps,
                    size_t naive_cap) {
    if (h_adv < 1) throw std::invalid_argument("eot_gradient: H_adv must be >= 1");
    int64_t rows = x.rank() == 2 ? x.dims()[0] : 1;
    std::vector<Rng> per_row_base = purifiers::row_streams_for(rng, rows);
    return eot_gradient_with_streams(x, defense, labels, h_adv, per_row_base, method, tail_steps,
                                     naive_cap);
}

std::vector<AdversarialRecord> pgd_attack_batch(const Tensor& X, const std::vector<int32_t>& labels,
                                                const Defense& defense, const AttackConfig& config,
                                                const std::vector<uint64_t>& image_ids) {
    AttackConfig cfg = config;
    cfg.step_rule = StepRule::fixed;
    return run_attack(X, labels, defense, cfg, image_ids, /*adaptive=*/false);
}

std::vector<AdversarialRecord> apgd_attack_batch(const Tensor& X, const std::vector<int32_t>& labels,
                                                 const Defense& defense, const AttackConfig& config,
                                                 const std::vector<uint64_t>& image_ids) {
    AttackConfig cfg = config;
    cfg.step_rule = StepRule::adaptive;
    return run_attack(X, labels, defense, cfg, image_ids, /*adaptive=*/true);
}

AdversarialRecord pgd_attack(const Tensor& x, int32_t label, const Defense& defense,
                             const AttackConfig& config) {
    return pgd_attack_batch(x, {label}, defense, config)[0];
}

AdversarialRecord apgd_attack(const Tensor& x, int32_t label, const Defense& defense,
                              const AttackConfig& config) {
    return apgd_attack_batch(x, {label}, defense, config)[0];
}

}  // namespace purigrad::attacks
