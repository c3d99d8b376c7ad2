#pragma once

#include "purigrad/models.hpp"
#include "purigrad/purifier.hpp"

namespace purigrad::grad {

enum class Method : uint8_t { checkpointed, naive, bpda, final_state };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct GradReport {
    Tensor gradient;  // dL/dx at the purifier input
    double loss = 0.0;
    size_t peak_graph_bytes = 0;
    double wall_ms = 0.0;
    Method method = Method::checkpointed;
};

/// Builds the scalar loss at the purifier's final (pre-clamp) state on the
/// given tape; the deployed clamp belongs to the head.
using LossHead = std::function<Tensor(Tape&, const Tensor& x_final)>;

/// sum over the batch of cross-entropy(f(clamp01(x)), label).
LossHead xent_head(const models::Mlp& classifier, std::vector<int32_t> labels);
/// sum(c .* clamp01(x)) — closed-form oracle head.
LossHead linear_head(Tensor c);

inline constexpr size_t kDefaultNaiveCap = size_t{1} << 31;  // 2 GiB of graph payloads
inline constexpr double kReplayTolerance = 1e-12;

/// Exact dL/dx with O(1) stored-graph memory: detached forward trajectory,
/// then per step (last to first) re-attach, replay, and propagate the seed
/// by the chain rule. Never keeps two step subgraphs live at once; every
/// replayed state is checked against the stored one.
GradReport checkpointed_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                             std::vector<Rng> row_streams);

/// Single tape over the whole purification + loss; exact but with graph
/// memory growing in the step count. Throws MemoryMeter::OutOfBudget past
/// `cap_bytes`.
GradReport naive_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                      std::vector<Rng> row_streams, size_t cap_bytes = kDefaultNaiveCap);

/// Forward purification as deployed, backward treating the chain as the
/// identity: the loss gradient at the final state is the input gradient.
GradReport bpda_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                     std::vector<Rng> row_streams);

/// Backpropagates through only the last `tail_steps` purification steps and
/// copies the seed through the rest.
GradReport final_state_grad(const Tensor& x, const purifiers::Purifier& p, const LossHead& head,
                            std::vector<Rng> row_streams, int tail_steps);

// Classifier/label convenience forms (single noise stream, rows derived).
GradReport checkpointed_grad(const Tensor& x, const purifiers::Purifier& p,
                             const models::Mlp& classifier, const std::vector<int32_t>& labels,
                             const Rng& rng);
GradReport naive_grad(const Tensor& x, const purifiers::Purifier& p, const models::Mlp& classifier,
                      const std::vector<int32_t>& labels, const Rng& rng,
                      size_t cap_bytes = kDefaultNaiveCap);
GradReport bpda_grad(const Tensor& x, const purifiers::Purifier& p, const models::Mlp& classifier,
                     const std::vector<int32_t>& labels, const Rng& rng);
GradReport final_state_grad(const Tensor& x, const purifiers::Purifier& p,
                            const models::Mlp& classifier, const std::vector<int32_t>& labels,
                            const Rng& rng, int tail_steps);

struct ReplayMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace purigrad::grad
