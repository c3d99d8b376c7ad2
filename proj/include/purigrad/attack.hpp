#pragma once

#include <optional>

#include "purigrad/gradients.hpp"

namespace purigrad::attacks {

enum class Norm : uint8_t { linf, l2 };
enum class StepRule : uint8_t { fixed, adaptive };

const char* norm_name(Norm n);
Norm norm_from_name(const std::string& name);

struct AttackConfig {
    Norm norm = Norm::linf;
    double epsilon = 0.1;     // input-space units on [0,1]^D
    double step_size = 0.025;
    int iterations = 40;
    int eot_replicates = 20;  // H_adv
    grad::Method grad_method = grad::Method::checkpointed;
    StepRule step_rule = StepRule::fixed;
    double momentum = 0.75;   // adaptive only
    int tail_steps = -1;      // final_state method; -1 = half the chain
    bool random_start = false;
    uint64_t seed = 0;
    size_t naive_cap_bytes = grad::kDefaultNaiveCap;

    void validate() const;
};

struct Defense {
    purifiers::Purifier purifier;
    models::Mlp classifier;
};

struct AdversarialRecord {
    Tensor original;
    int32_t label = 0;
    uint64_t image_id = 0;
    std::optional<Tensor> first_broken;
    int first_broken_iter = -1;
    Tensor final_state;
    std::optional<Tensor> loss_optimized;
    double loss_optimized_value = 0.0;
    int loss_optimized_iter = -1;
    std::vector<double> loss_trace;   // single-replicate check loss per iteration
    std::vector<double> step_trace;   // step size per iteration (adaptive rule)
    bool l2_clamp_distortion = false;
};

/// Elementwise clamp of x into [x0-eps, x0+eps] and then into [0,1].
Tensor project_linf(const Tensor& x, const Tensor& x0, double epsilon);
/// Per-row ball projection (rescale the difference to norm eps when outside)
/// followed by one clamp to [0,1]; `distorted` is set per row when the clamp
/// moved a projected point.
Tensor project_l2(const Tensor& x, const Tensor& x0, double epsilon,
                  std::vector<char>* distorted = nullptr);

/// Mean over H_adv purification replicates of the per-trajectory input
/// gradient. Replicate h uses stream rng.derive(h); the mean is accumulated
/// pairwise so it is independent of replicate execution order.
Tensor eot_gradient(const Tensor& x, const Defense& defense, const std::vector<int32_t>& labels,
                    int h_adv, const Rng& rng, grad::Method method, int tail_steps = -1,
                    size_t naive_cap = grad::kDefaultNaiveCap);

/// Batched attack over an image set; per-image substreams are derived from
/// (config.seed, image_id, iteration, replicate), so each record depends
/// only on its own image and the shared models.
std::vector<AdversarialRecord> pgd_attack_batch(const Tensor& X, const std::vector<int32_t>& labels,
                                                const Defense& defense, const AttackConfig& config,
                                                const std::vector<uint64_t>& image_ids = {});
std::vector<AdversarialRecord> apgd_attack_batch(const Tensor& X, const std::vector<int32_t>& labels,
                                                 const Defense& defense, const AttackConfig& config,
                                                 const std::vector<uint64_t>& image_ids = {});

AdversarialRecord pgd_attack(const Tensor& x, int32_t label, const Defense& defense,
                             const AttackConfig& config);
AdversarialRecord apgd_attack(const Tensor& x, int32_t label, const Defense& defense,
                              const AttackConfig& config);

}  // namespace purigrad::attacks
