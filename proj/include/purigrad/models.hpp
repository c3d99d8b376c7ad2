#pragma once

#include <optional>
#include <string>
#include <vector>

#include "purigrad/ops.hpp"
#include "purigrad/rng.hpp"
#include "purigrad/tape.hpp"
#include "purigrad/tensor.hpp"

namespace purigrad::models {

enum class Act : uint8_t { silu, leaky_relu, soft_leaky_relu };

const char* act_name(Act act);
Act act_from_name(const std::string& name);

struct ActParams {
    double slope = 0.05;  // leaky_relu
    double a = 0.49;      // soft_leaky_relu leakiness
    double e = 0.01;      // soft_leaky_relu smoothing
};

/// Fully connected net; hidden layers use `act`, the last layer is linear.
struct Mlp {
    std::vector<int64_t> layer_dims;
    std::vector<Tensor> weights;  // [out,in] per layer
    std::vector<Tensor> biases;   // [out] per layer
    Act act = Act::silu;
    ActParams actp;

    static Mlp init(std::vector<int64_t> dims, Act act, Rng& rng, ActParams actp = {});

    Tensor forward(Tape& tape, const Tensor& x) const;
    /// Forward without recording (kernels only, throwaway tape inside).
    Tensor forward_detached(const Tensor& x) const;

    int64_t in_dim() const { return layer_dims.front(); }
    int64_t out_dim() const { return layer_dims.back(); }
    size_t n_layers() const { return weights.size(); }

    std::vector<Tensor*> params();
    std::vector<const Tensor*> params() const;
};

/// beta/alpha/alpha_bar/sigma per step; alpha_bar is indexed 0..T with
/// alpha_bar[0] = 1 so that sigma[1] = 0.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // 1..T stored at [t-1]
    std::vector<double> alpha;      // 1..T stored at [t-1]
    std::vector<double> alpha_bar;  // 0..T stored at [t]
    std::vector<double> sigma;      // 1..T stored at [t-1]

    static NoiseSchedule make(int T, double beta_start, double beta_end);

    double beta_at(int t) const { return beta[static_cast<size_t>(t - 1)]; }
    double alpha_at(int t) const { return alpha[static_cast<size_t>(t - 1)]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<size_t>(t)]; }
    double sigma_at(int t) const { return sigma[static_cast<size_t>(t - 1)]; }
};

struct MixtureSpec {
    int64_t dim = 16;
    int classes = 4;
    int components = 8;  // distributed round-robin over classes
    double sigma = 0.06;
    double mean_lo = 0.2;
    double mean_hi = 0.8;
    double min_mean_dist = 0.55;
    uint64_t seed = 1;
    // test hook: explicit means (row per component) with component->class map
    std::optional<Tensor> means;
    std::vector<int> component_class;
};

struct SyntheticDataset {
    Tensor points;  // [N, dim], every coordinate in [0,1]
    std::vector<int32_t> labels;
    MixtureSpec spec;

    int64_t size() const { return points.dims()[0]; }
    int64_t dim() const { return points.dims()[1]; }
};

/// Deterministic given (spec.seed, n, stream). `stream` separates train/eval
/// draws from one spec.
SyntheticDataset make_dataset(const MixtureSpec& spec, int64_t n, uint64_t stream = 0);

struct TrainConfig {
    int epochs = 200;
    double lr = 0.2;
    int batch = 128;
    uint64_t seed = 7;
};

struct TrainMetrics {
    double final_loss = 0.0;
    double train_accuracy = 0.0;  // classifier only
    bool converged = true;
    std::vector<double> epoch_loss;
};

Mlp train_classifier(const SyntheticDataset& data, const TrainConfig& cfg,
                     std::vector<int64_t> hidden = {64, 64}, Act act = Act::silu,
                     TrainMetrics* metrics = nullptr);

/// Minimizes E||eps - eps_hat(x_t, t)||^2 with x_t = sqrt(ab_t) x0 +
/// sqrt(1-ab_t) eps, t uniform on [1,T]; time enters as an appended t/T
/// coordinate.
Mlp train_denoiser(const SyntheticDataset& data, const NoiseSchedule& schedule,
                   const TrainConfig& cfg, std::vector<int64_t> hidden = {64, 64},
                   Act act = Act::silu, TrainMetrics* metrics = nullptr);

struct EbmTrainConfig {
    TrainConfig base{.epochs = 40, .lr = 0.02, .batch = 128, .seed = 11};
    int langevin_steps = 40;
    double langevin_eta = 0.05;
    double init_noise = 0.3;       // uniform amplitude added to data for chain starts
    double divergence_abort = 1e6;
};

Mlp train_ebm(const SyntheticDataset& data, const EbmTrainConfig& cfg,
              std::vector<int64_t> hidden = {64, 64}, Act act = Act::soft_leaky_relu,
              TrainMetrics* metrics = nullptr, ActParams actp = {});

/// Contrastive-divergence parameter gradient: mean grad_theta U(pos) - mean
/// grad_theta U(neg). Exposed for its cancellation property.
std::vector<Tensor> ebm_param_gradient(const Mlp& energy, const Tensor& positives,
                                       const Tensor& negatives);

double classifier_accuracy(const Mlp& classifier, const SyntheticDataset& data);

/// Per-sample energies [B,1] evaluated without recording.
Tensor energy_values(const Mlp& energy, const Tensor& x);

}  // namespace purigrad::models
