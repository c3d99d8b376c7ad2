#pragma once

#include <optional>

#include "purigrad/attack.hpp"

namespace purigrad::bench {

struct BenchRow {
    std::string method;
    std::string purifier_kind;
    int steps = 0;
    size_t peak_graph_bytes = 0;
    double wall_ms = 0.0;  // median over repeats
    std::optional<double> grad_max_abs_diff_vs_naive;
    uint64_t seed = 0;
    bool out_of_budget = false;
};

/// Builds a purifier of the sweep kind with the requested step count
/// (Langevin K, or a fresh schedule with t* = steps for diffusion kinds).
using PurifierFactory = std::function<purifiers::Purifier(int steps)>;

struct BenchContext {
    PurifierFactory make_purifier;
    std::string purifier_kind;
    models::Mlp classifier;
    Tensor input;  // [B,D] probe batch
    std::vector<int32_t> labels;
    uint64_t seed = 0;
    int repeats = 3;  // median wall time over this many runs
};

/// One row per (method, steps); naive rows past the byte cap are recorded as
/// out-of-budget data, not failures.
std::vector<BenchRow> run_memory_sweep(const BenchContext& ctx, const std::vector<int>& step_list,
                                       const std::vector<grad::Method>& methods, size_t cap_bytes);

/// Gradient difference of each non-naive method against the naive full-graph
/// oracle, per purifier kind and step count.
std::vector<BenchRow> run_equivalence_sweep(const std::vector<BenchContext>& contexts,
                                            const std::vector<int>& step_list, int repeats,
                                            uint64_t seed);

}  // namespace purigrad::bench
