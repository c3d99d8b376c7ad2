#pragma once

#include <functional>
#include <utility>

#include "purigrad/models.hpp"
#include "purigrad/ops.hpp"
#include "purigrad/rng.hpp"
#include "purigrad/tape.hpp"
#include "purigrad/tensor.hpp"

namespace purigrad::purifiers {

enum class Kind : uint8_t { identity, ddpm, vpsde, langevin };

const char* kind_name(Kind kind);
Kind kind_from_name(const std::string& name);

struct PurifierConfig {
    Kind kind = Kind::identity;
    int noising_depth = 15;   // t* for the diffusion kinds (<= schedule T)
    int langevin_steps = 60;  // K
    double eta = 0.05;        // Langevin step size
    bool zero_noise = false;  // diagnostics: z == 0 everywhere
};

/// eps_hat(x, t) on a tape; t is the discrete schedule index.
using EpsFn = std::function<Tensor(Tape&, const Tensor&, int)>;
/// Per-sample energies U(x) as [B,1] (or [B]) on a tape.
using EnergyFn = std::function<Tensor(Tape&, const Tensor&)>;

struct StepMeta {
    int t_or_k = 0;          // schedule index t (diffusion) or step k (langevin)
    double step_size = 0.0;  // sigma_t / sqrt(beta_t) / eta
    bool is_noising = false;
};

/// Detached per-step states and noises saved during forward purification.
/// states has one more entry than noises; replaying step i from states[i]
/// with noises[i] reproduces states[i+1] bitwise.
struct TrajectoryRecord {
    Kind kind = Kind::identity;
    std::vector<Tensor> states;
    std::vector<Tensor> noises;
    std::vector<StepMeta> meta;

    int num_steps() const { return static_cast<int>(noises.size()); }
    const Tensor& input() const { return states.front(); }
    const Tensor& final_state() const { return states.back(); }
};

struct Purifier {
    PurifierConfig cfg;
    models::NoiseSchedule schedule;  // diffusion kinds
    EpsFn eps;                       // diffusion kinds
    EnergyFn energy;                 // langevin

    static Purifier identity();
    static Purifier ddpm(PurifierConfig cfg, models::NoiseSchedule schedule, EpsFn eps);
    static Purifier ddpm(PurifierConfig cfg, models::NoiseSchedule schedule, const models::Mlp& denoiser);
    static Purifier vpsde(PurifierConfig cfg, models::NoiseSchedule schedule, EpsFn eps);
    static Purifier vpsde(PurifierConfig cfg, models::NoiseSchedule schedule, const models::Mlp& denoiser);
    static Purifier langevin(PurifierConfig cfg, EnergyFn energy);
    static Purifier langevin(PurifierConfig cfg, const models::Mlp& energy_net);

    int num_steps() const;
    /// The langevin state leaf must require grad (its inner gradient is
    /// computed with a recorded backward pass on `tape`).
    Tensor build_step(Tape& tape, const Tensor& state, const Tensor& noise, int i) const;
    Tensor draw_noise(int i, const Shape& dims, std::vector<Rng>& row_streams) const;
};

EpsFn eps_from_mlp(const models::Mlp& denoiser, int schedule_T);
EpsFn eps_zero();
EnergyFn energy_from_mlp(const models::Mlp& energy_net);
/// U(x) = 0.5 ||x||^2 per sample (analytic oracle energy; grad U = x).
EnergyFn energy_quadratic();

/// Row-stratified noise streams: row r of the batch consumes only
/// row_streams[r], so a sample's trajectory depends on its own stream alone.
/// The per-step forward tapes are scoped to `meter` when one is given.
std::pair<Tensor, TrajectoryRecord> purify(const Purifier& p, const Tensor& x,
                                           std::vector<Rng> row_streams,
                                           MemoryMeter* meter = nullptr);
/// Convenience: derives one stream per row as rng.derive(row).
std::pair<Tensor, TrajectoryRecord> purify(const Purifier& p, const Tensor& x, const Rng& rng);

std::vector<Rng> row_streams_for(const Rng& rng, int64_t rows);

struct ReplayedStep {
    Tensor input;   // re-attached states[i] leaf (requires_grad)
    Tensor output;  // recomputed states[i+1]
};

/// Rebuilds step i on `tape` with gradients flowing output -> input.
ReplayedStep replay_step_on(Tape& tape, const Purifier& p, const TrajectoryRecord& rec, int i);

/// Spec-level form: fresh tape, returns the recomputed state (bitwise equal
/// to the stored one).
Tensor replay_step(const Purifier& p, const TrajectoryRecord& rec, int i);

}  // namespace purigrad::purifiers
