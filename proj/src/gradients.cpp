#include "purigrad/gradients.hpp"

#include <chrono>

namespace purigrad::grad {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

/// Loss stage: bind the final state, evaluate the head, return (loss value,
/// seed = dLoss/d final_state).
std::pair<double, Tensor> loss_stage(const Tensor& x_final, const LossHead& head,
                                     MemoryMeter* meter) {
    Tape tape(meter);
    Tensor leaf = tape.leaf(x_final, true);
    Tensor loss = head(tape, leaf);
    if (loss.numel() != 1) throw std::invalid_argument("loss head must produce a scalar");
    GradMap gm = tape.backward(loss, Tensor{});
    Tensor seed = gm.find(leaf);
    if (!seed.defined()) seed = Tensor::zeros(x_final.dims());
    return {loss.item(), seed};
}

}  // namespace

const char* method_name(Method m) {
    switch (m) {
        case Method::checkpointed: return "checkpointed";
        case Method::naive: return "naive";
        case Method::bpda: return "bpda";
        case Method::final_state: return "final_state";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    if (name == "checkpointed") return Method::checkpointed;
    if (name == "naive") return Method::naive;
    if (name == "bpda") return Method::bpda;
    if (name == "final_state") return Method::final_state;
    throw std::invalid_argument("unknown gradient method '" + name + "'");
}

LossHead xent_head(const models::Mlp& classifier, std::vector<int32_t> labels) {
    return [classifier, labels = std::move(labels)](Tape& tape, const Tensor& x_final) {
        Tensor boxed = ops::clamp(tape, x_final, 0.0, 1.0);
        Tensor logits = classifier.forward(tape, boxed);
        Tensor ce = ops::softmax_cross_entropy(tape, logits, labels);
        return ops::sum(tape, ce);
    };
}

LossHead linear_head(Tensor c) {
    return [c = std::move(c)](Tape& tape, const Tensor& x_final) {
        Tensor boxed = ops::clamp(tape, x_final, 0.0, 1.0);
        return ops::sum(tape, ops::mul(tape, boxed, tape.constant(c)));
    };
}

GradReport checkpointed_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                             std::vector<Rng> row_streams) {
    auto t0 = Clock::now();
    MemoryMeter meter;
    auto [purified, rec] = purifiers::purify(p, x, std::move(row_streams), &meter);
    (void)purified;

    auto [loss, seed] = loss_stage(rec.final_state(), head, &meter);
    for (int i = rec.num_steps() - 1; i >= 0; --i) {
        Tape tape(&meter);
        purifiers::ReplayedStep step = purifiers::replay_step_on(tape, p, rec, i);
        double drift = max_abs_diff(step.output.detach(), rec.states[static_cast<size_t>(i) + 1]);
        if (drift > kReplayTolerance)
            throw ReplayMismatch("checkpointed_grad: replayed step " + std::to_string(i) +
                                 " deviates from stored state by " + std::to_string(drift));
        GradMap gm = tape.backward(step.output, seed);
        seed = gm.at(step.input);
    }

    GradReport rep;
    rep.gradient = seed;
    rep.loss = loss;
    rep.peak_graph_bytes = meter.peak_bytes();
    rep.wall_ms = ms_since(t0);
    rep.method = Method::checkpointed;
    return rep;
}

GradReport naive_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                      std::vector<Rng> row_streams, size_t cap_bytes) {
    auto t0 = Clock::now();
    MemoryMeter meter;
    meter.set_cap(cap_bytes);
    Tape tape(&meter);
    Tensor x_leaf = tape.leaf(x.detach(), true);
    Tensor state = x_leaf;
    if (p.cfg.kind == purifiers::Kind::ddpm || p.cfg.kind == purifiers::Kind::vpsde) {
        for (double v : x.data())
            if (v < -1e-9 || v > 1.0 + 1e-9)
                throw std::invalid_argument("naive_grad: input outside [0,1] beyond 1e-9");
    }
    int n = p.num_steps();
    for (int i = 0; i < n; ++i) {
        Tensor noise = p.draw_noise(i, x.dims(), row_streams);
        state = p.build_step(tape, state, tape.constant(noise), i);
        if (p.cfg.kind == purifiers::Kind::langevin) {
            for (double v : state.data())
                if (std::abs(v) > 1e3)
                    throw std::runtime_error("naive_grad: langevin diverged at step " + std::to_string(i));
        }
    }
    Tensor loss = head(tape, state);
    if (loss.numel() != 1) throw std::invalid_argument("loss head must produce a scalar");
    GradMap gm = tape.backward(loss, Tensor{});
    Tensor g = gm.find(x_leaf);

    GradReport rep;
    rep.gradient = g.defined() ? g : Tensor::zeros(x.dims());
    rep.loss = loss.item();
    rep.peak_graph_bytes = meter.peak_bytes();
    rep.wall_ms = ms_since(t0);
    rep.method = Method::naive;
    return rep;
}

GradReport bpda_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                     std::vector<Rng> row_streams) {
    auto t0 = Clock::now();
    MemoryMeter meter;
    auto [purified, rec] = purifiers::purify(p, x, std::move(row_streams), &meter);
    (void)purified;
    auto [loss, seed] = loss_stage(rec.final_state(), head, &meter);

    GradReport rep;
    rep.gradient = seed;  // chain treated as the identity
    rep.loss = loss;
    rep.peak_graph_bytes = meter.peak_bytes();
    rep.wall_ms = ms_since(t0);
    rep.method = Method::bpda;
    return rep;
}

GradReport final_state_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                            std::vector<Rng> row_streams, int tail_steps) {
    auto t0 = Clock::now();
    MemoryMeter meter;
    auto [purified, rec] = purifiers::purify(p, x, std::move(row_streams), &meter);
    (void)purified;
    int n = rec.num_steps();
    if (tail_steps < 0 || tail_steps > n)
        throw std::invalid_argument("final_state_grad: tail_steps " + std::to_string(tail_steps) +
                                    " outside [0, " + std::to_string(n) + "]");

    auto [loss, seed] = loss_stage(rec.final_state(), head, &meter);
    for (int i = n - 1; i >= n - tail_steps; --i) {
        Tape tape(&meter);
        purifiers::ReplayedStep step = purifiers::replay_step_on(tape, p, rec, i);
        double drift = max_abs_diff(step.output.detach(), rec.states[static_cast<size_t>(i) + 1]);
        if (drift > kReplayTolerance)
            throw ReplayMismatch("final_state_grad: replayed step " + std::to_string(i) +
                                 " deviates from stored state by " + std::to_string(drift));
        GradMap gm = tape.backward(step.output, seed);
        seed = gm.at(step.input);
    }

    GradReport rep;
    rep.gradient = seed;
    rep.loss = loss;
    rep.peak_graph_bytes = meter.peak_bytes();
    rep.wall_ms = ms_since(t0);
    rep.method = Method::final_state;
    return rep;
}

GradReport checkpointed_grad(const Tensor& x, const purifiers::Purifier& p,
                             const models::Mlp& classifier, const std::vector<int32_t>& labels,
                             const Rng& rng) {
    return checkpointed_grad(x, p, xent_head(classifier, labels),
                             purifiers::row_streams_for(rng, x.rows()));
}

GradReport naive_grad(const Tensor& x, const purifiers::Purifier& p, const models::Mlp& classifier,
                      const std::vector<int32_t>& labels, const Rng& rng, size_t cap_bytes) {
    return naive_grad(x, p, xent_head(classifier, labels), purifiers::row_streams_for(rng, x.rows()),
                      cap_bytes);
}

GradReport bpda_grad(const Tensor& x, const purifiers::Purifier& p, const models::Mlp& classifier,
                     const std::vector<int32_t>& labels, const Rng& rng) {
    return bpda_grad(x, p, xent_head(classifier, labels), purifiers::row_streams_for(rng, x.rows()));
}

GradReport final_state_grad(const Tensor& x, const purifiers::Purifier& p,
                            const models::Mlp& classifier, const std::vector<int32_t>& labels,
                            const Rng& rng, int tail_steps) {
    return final_state_grad(x, p, xent_head(classifier, labels),
                            purifiers::row_streams_for(rng, x.rows()), tail_steps);
}

}  // namespace purigrad::grad
