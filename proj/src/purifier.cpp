#include "purigrad/purifier.hpp"

#include <algorithm>
#include <cmath>

namespace purigrad::purifiers {

const char* kind_name(Kind kind) {
    switch (kind) {
        case Kind::identity: return "identity";
        case Kind::ddpm: return "ddpm";
        case Kind::vpsde: return "vpsde";
        case Kind::langevin: return "langevin";
    }
    return "?";
}

Kind kind_from_name(const std::string& name) {
    if (name == "identity") return Kind::identity;
    if (name == "ddpm") return Kind::ddpm;
    if (name == "vpsde") return Kind::vpsde;
    if (name == "langevin") return Kind::langevin;
    throw std::invalid_argument("unknown purifier kind '" + name + "'");
}

EpsFn eps_from_mlp(const models::Mlp& denoiser, int schedule_T) {
    return [denoiser, schedule_T](Tape& tape, const Tensor& x, int t) {
        Tensor tcol = Tensor::full({x.rows(), 1}, static_cast<double>(t) / schedule_T);
        Tensor input = ops::concat(tape, x, tape.constant(tcol));
        return denoiser.forward(tape, input);
    };
}

EpsFn eps_zero() {
    return [](Tape& tape, const Tensor& x, int) {
        return tape.constant(Tensor::zeros(x.dims()));
    };
}

EnergyFn energy_from_mlp(const models::Mlp& energy_net) {
    return [energy_net](Tape& tape, const Tensor& x) { return energy_net.forward(tape, x); };
}

EnergyFn energy_quadratic() {
    return [](Tape& tape, const Tensor& x) {
        return ops::scale(tape, ops::sum(tape, ops::mul(tape, x, x)), 0.5);
    };
}

namespace {

void check_config(const Purifier& p) {
    const PurifierConfig& c = p.cfg;
    switch (c.kind) {
        case Kind::identity:
            return;
        case Kind::ddpm:
        case Kind::vpsde:
            if (c.noising_depth < 1 || c.noising_depth > p.schedule.T)
                throw std::invalid_argument("purifier: noising depth t*=" +
                                            std::to_string(c.noising_depth) + " outside [1, T=" +
                                            std::to_string(p.schedule.T) + "]");
            if (!p.eps) throw std::invalid_argument("purifier: diffusion kind without noise predictor");
            return;
        case Kind::langevin:
            if (c.langevin_steps < 0)
                throw std::invalid_argument("purifier: langevin steps must be >= 0");
            if (c.eta < 0.0)
                throw std::invalid_argument("purifier: langevin eta must be non-negative");
            if (!p.energy) throw std::invalid_argument("purifier: langevin kind without energy");
            return;
    }
}

void check_unit_box(const Tensor& x) {
    for (double v : x.data()) {
        if (v < -1e-9 || v > 1.0 + 1e-9)
            throw std::invalid_argument("purifier input outside [0,1] beyond 1e-9 (value " +
                                        std::to_string(v) + ")");
    }
}

}  // namespace

Purifier Purifier::identity() {
    Purifier p;
    p.cfg.kind = Kind::identity;
    return p;
}

Purifier Purifier::ddpm(PurifierConfig cfg, models::NoiseSchedule schedule, EpsFn eps) {
    Purifier p;
    cfg.kind = Kind::ddpm;
    p.cfg = cfg;
    p.schedule = std::move(schedule);
    p.eps = std::move(eps);
    check_config(p);
    return p;
}

Purifier Purifier::ddpm(PurifierConfig cfg, models::NoiseSchedule schedule, const models::Mlp& denoiser) {
    EpsFn f = eps_from_mlp(denoiser, schedule.T);
    return ddpm(cfg, std::move(schedule), std::move(f));
}

Purifier Purifier::vpsde(PurifierConfig cfg, models::NoiseSchedule schedule, EpsFn eps) {
    Purifier p;
    cfg.kind = Kind::vpsde;
    p.cfg = cfg;
    p.schedule = std::move(schedule);
    p.eps = std::move(eps);
    check_config(p);
    return p;
}

Purifier Purifier::vpsde(PurifierConfig cfg, models::NoiseSchedule schedule, const models::Mlp& denoiser) {
    EpsFn f = eps_from_mlp(denoiser, schedule.T);
    return vpsde(cfg, std::move(schedule), std::move(f));
}

Purifier Purifier::langevin(PurifierConfig cfg, EnergyFn energy) {
    Purifier p;
    cfg.kind = Kind::langevin;
    p.cfg = cfg;
    p.energy = std::move(energy);
    check_config(p);
    return p;
}

Purifier Purifier::langevin(PurifierConfig cfg, const models::Mlp& energy_net) {
    return langevin(cfg, energy_from_mlp(energy_net));
}

int Purifier::num_steps() const {
    switch (cfg.kind) {
        case Kind::identity: return 0;
        case Kind::ddpm:
        case Kind::vpsde: return cfg.noising_depth + 1;  // forward noising + t* reverse updates
        case Kind::langevin: return cfg.langevin_steps;
    }
    return 0;
}

Tensor Purifier::build_step(Tape& tape, const Tensor& state, const Tensor& noise, int i) const {
    switch (cfg.kind) {
        case Kind::identity:
            throw std::logic_error("identity purifier has no steps");
        case Kind::ddpm: {
            int tstar = cfg.noising_depth;
            if (i == 0) {
                double ab = schedule.alpha_bar_at(tstar);
                return ops::add(tape, ops::scale(tape, state, std::sqrt(ab)),
                                ops::scale(tape, noise, std::sqrt(1.0 - ab)));
            }
            int t = tstar - i + 1;
            double alpha = schedule.alpha_at(t);
            double ab = schedule.alpha_bar_at(t);
            double sigma = schedule.sigma_at(t);
            Tensor eps_hat = eps(tape, state, t);
            Tensor inner = ops::sub(tape, state,
                                    ops::scale(tape, eps_hat, (1.0 - alpha) / std::sqrt(1.0 - ab)));
            Tensor det = ops::scale(tape, inner, 1.0 / std::sqrt(alpha));
            return ops::add(tape, det, ops::scale(tape, noise, sigma));
        }
        case Kind::vpsde: {
            int tstar = cfg.noising_depth;
            if (i == 0) {
                double ab = schedule.alpha_bar_at(tstar);
                return ops::add(tape, ops::scale(tape, state, std::sqrt(ab)),
                                ops::scale(tape, noise, std::sqrt(1.0 - ab)));
            }
            // Euler-Maruyama on the reverse-time SDE; beta_t plays beta(t)*dt
            // on the discrete grid, so one update per schedule index.
            int t = tstar - i + 1;
            double bdt = schedule.beta_at(t);
            double ab = schedule.alpha_bar_at(t);
            Tensor eps_hat = eps(tape, state, t);
            Tensor score = ops::scale(tape, eps_hat, -1.0 / std::sqrt(1.0 - ab));
            Tensor drift = ops::add(tape, ops::scale(tape, state, 0.5 * bdt),
                                    ops::scale(tape, score, bdt));
            return ops::add(tape, ops::add(tape, state, drift),
                            ops::scale(tape, noise, std::sqrt(bdt)));
        }
        case Kind::langevin: {
            Tensor bound = tape.bind(state);
            Tensor u = ops::sum(tape, energy(tape, bound));
            int32_t stop = bound.node();
            GradMap gm = tape.backward(u, Tensor{}, /*record_second_order=*/true, {&stop, 1});
            Tensor g = gm.at(bound);
            Tensor moved = ops::sub(tape, bound, ops::scale(tape, g, cfg.eta * cfg.eta / 2.0));
            return ops::add(tape, moved, ops::scale(tape, noise, cfg.eta));
        }
    }
    throw std::logic_error("unreachable purifier kind");
}

Tensor Purifier::draw_noise(int i, const Shape& dims, std::vector<Rng>& row_streams) const {
    (void)i;
    int64_t rows = dims.size() == 2 ? dims[0] : 1;
    int64_t cols = dims.size() == 2 ? dims[1] : dims[0];
    std::vector<double> z(static_cast<size_t>(rows * cols), 0.0);
    if (!cfg.zero_noise) {
        for (int64_t r = 0; r < rows; ++r) {
            std::span<double> row(z.data() + r * cols, static_cast<size_t>(cols));
            row_streams[static_cast<size_t>(r)].fill_normal(row);
        }
    }
    return Tensor::from(dims, std::move(z));
}

std::vector<Rng> row_streams_for(const Rng& rng, int64_t rows) {
    std::vector<Rng> streams;
    streams.reserve(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) streams.push_back(rng.derive(static_cast<uint64_t>(r)));
    return streams;
}

std::pair<Tensor, TrajectoryRecord> purify(const Purifier& p, const Tensor& x,
                                           std::vector<Rng> row_streams, MemoryMeter* meter) {
    check_config(p);
    if (p.cfg.kind == Kind::ddpm || p.cfg.kind == Kind::vpsde) check_unit_box(x);
    int64_t rows = x.rank() == 2 ? x.dims()[0] : 1;
    if (static_cast<int64_t>(row_streams.size()) != rows)
        throw std::invalid_argument("purify: need one noise stream per batch row");

    TrajectoryRecord rec;
    rec.kind = p.cfg.kind;
    Tensor state = x.detach();
    rec.states.push_back(state);
    int n = p.num_steps();
    for (int i = 0; i < n; ++i) {
        Tensor noise = p.draw_noise(i, x.dims(), row_streams);
        Tape tape(meter);
        bool needs_grad = p.cfg.kind == Kind::langevin;  // inner grad is the dynamics
        Tensor bound = tape.leaf(state, needs_grad);
        Tensor out = p.build_step(tape, bound, tape.constant(noise), i);
        state = out.detach();

        StepMeta meta;
        if (p.cfg.kind == Kind::langevin) {
            meta = {i, p.cfg.eta, false};
            for (double v : state.data())
                if (std::abs(v) > 1e3)
                    throw std::runtime_error("langevin purification diverged at step " +
                                             std::to_string(i));
        } else if (i == 0) {
            meta = {p.cfg.noising_depth, 0.0, true};
        } else {
            int t = p.cfg.noising_depth - i + 1;
            double ss = p.cfg.kind == Kind::ddpm ? p.schedule.sigma_at(t)
                                                 : std::sqrt(p.schedule.beta_at(t));
            meta = {t, ss, false};
        }
        rec.meta.push_back(meta);
        rec.noises.push_back(noise);
        rec.states.push_back(state);
    }

    // Final clamp to the image box; the trajectory itself is never clamped.
    std::vector<double> clamped(state.data().begin(), state.data().end());
    for (double& v : clamped) v = std::min(std::max(v, 0.0), 1.0);
    return {Tensor::from(x.dims(), std::move(clamped)), std::move(rec)};
}

std::pair<Tensor, TrajectoryRecord> purify(const Purifier& p, const Tensor& x, const Rng& rng) {
    int64_t rows = x.rank() == 2 ? x.dims()[0] : 1;
    return purify(p, x, row_streams_for(rng, rows));
}

ReplayedStep replay_step_on(Tape& tape, const Purifier& p, const TrajectoryRecord& rec, int i) {
    if (i < 0 || i >= rec.num_steps())
        throw std::out_of_range("replay_step: index " + std::to_string(i) + " outside [0, " +
                                std::to_string(rec.num_steps()) + ")");
    Tensor input = tape.leaf(rec.states[static_cast<size_t>(i)], true);
    Tensor noise = tape.constant(rec.noises[static_cast<size_t>(i)]);
    Tensor output = p.build_step(tape, input, noise, i);
    return {input, output};
}

Tensor replay_step(const Purifier& p, const TrajectoryRecord& rec, int i) {
    Tape tape;
    return replay_step_on(tape, p, rec, i).output.detach();
}

}  // namespace purigrad::purifiers
