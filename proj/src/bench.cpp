#include "purigrad/bench.hpp"

#include <algorithm>

namespace purigrad::bench {

namespace {

grad::GradReport run_method(const BenchContext& ctx, const purifiers::Purifier& p,
                            grad::Method method, uint64_t run_seed, size_t cap_bytes) {
    Rng rng(run_seed);
    auto streams = purifiers::row_streams_for(rng, ctx.input.rows());
    grad::LossHead head = grad::xent_head(ctx.classifier, ctx.labels);
    switch (method) {
        case grad::Method::checkpointed:
            return grad::checkpointed_grad(ctx.input, p, head, std::move(streams));
        case grad::Method::naive:
            return grad::naive_grad(ctx.input, p, head, std::move(streams), cap_bytes);
        case grad::Method::bpda:
            return grad::bpda_grad(ctx.input, p, head, std::move(streams));
        case grad::Method::final_state:
            return grad::final_state_grad(ctx.input, p, head, std::move(streams), p.num_steps() / 2);
    }
    throw std::logic_error("unreachable method");
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<BenchRow> run_memory_sweep(const BenchContext& ctx, const std::vector<int>& step_list,
                                       const std::vector<grad::Method>& methods, size_t cap_bytes) {
    if (step_list.empty()) throw std::invalid_argument("run_memory_sweep: empty step list");
    if (!std::is_sorted(step_list.begin(), step_list.end()))
        throw std::invalid_argument("run_memory_sweep: step list must be ascending");
    if (methods.empty()) throw std::invalid_argument("run_memory_sweep: no methods selected");

    std::vector<BenchRow> rows;
    for (grad::Method m : methods) {
        for (int steps : step_list) {
            purifiers::Purifier p = ctx.make_purifier(steps);
            BenchRow row;
            row.method = grad::method_name(m);
            row.purifier_kind = ctx.purifier_kind;
            row.steps = steps;
            row.seed = ctx.seed;
            std::vector<double> times;
            try {
                for (int r = 0; r < std::max(ctx.repeats, 1); ++r) {
                    grad::GradReport rep = run_method(ctx, p, m, ctx.seed, cap_bytes);
                    row.peak_graph_bytes = rep.peak_graph_bytes;
                    times.push_back(rep.wall_ms);
                }
                row.wall_ms = median(times);
            } catch (const MemoryMeter::OutOfBudget&) {
                row.out_of_budget = true;  // the paper's missing bars
                row.peak_graph_bytes = 0;
                row.wall_ms = 0.0;
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::vector<BenchRow> run_equivalence_sweep(const std::vector<BenchContext>& contexts,
                                            const std::vector<int>& step_list, int repeats,
                                            uint64_t seed) {
    if (contexts.empty()) throw std::invalid_argument("run_equivalence_sweep: no purifier contexts");
    std::vector<BenchRow> rows;
    const grad::Method methods[] = {grad::Method::checkpointed, grad::Method::bpda,
                                    grad::Method::final_state};
    for (const BenchContext& ctx : contexts) {
        for (int steps : step_list) {
            purifiers::Purifier p = ctx.make_purifier(steps);
            for (int r = 0; r < std::max(repeats, 1); ++r) {
                uint64_t run_seed = Rng::child_seed(seed, static_cast<uint64_t>(r));
                grad::GradReport oracle =
                    run_method(ctx, p, grad::Method::naive, run_seed, grad::kDefaultNaiveCap);
                for (grad::Method m : methods) {
                    grad::GradReport rep = run_method(ctx, p, m, run_seed, grad::kDefaultNaiveCap);
                    BenchRow row;
                    row.method = grad::method_name(m);
                    row.purifier_kind = ctx.purifier_kind;
                    row.steps = steps;
                    row.seed = run_seed;
                    row.peak_graph_bytes = rep.peak_graph_bytes;
                    row.wall_ms = rep.wall_ms;
                    row.grad_max_abs_diff_vs_naive = max_abs_diff(rep.gradient, oracle.gradient);
                    rows.push_back(std::move(row));
                }
            }
        }
    }
    return rows;
}

}  // namespace purigrad::bench
