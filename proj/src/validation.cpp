#include "purigrad/validation.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>

#include "purigrad/parallel.hpp"

namespace purigrad::validation {

namespace {

constexpr uint64_t kStabilityStream = 0x57AB;

int32_t argmax_row(std::span<const double> row) {
    int32_t best = 0;
    for (size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[static_cast<size_t>(best)]) best = static_cast<int32_t>(c);
    return best;
}

double sample_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

double mean_of(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m += x;
    return v.empty() ? 0.0 : m / static_cast<double>(v.size());
}

/// Per-replicate classifier logits of the purified batch; replicate h of row
/// r purifies with streams[r].derive(h). Replicates run on the worker pool
/// into indexed slots.
std::vector<Tensor> replicate_logits(const Tensor& x, const attacks::Defense& defense, int max_hd,
                                     const std::vector<Rng>& row_base) {
    std::vector<Tensor> out(static_cast<size_t>(max_hd));
    parallel_for(max_hd, default_workers(), [&](int h) {
        std::vector<Rng> streams;
        streams.reserve(row_base.size());
        for (const Rng& r : row_base) streams.push_back(r.derive(static_cast<uint64_t>(h)));
        auto [purified, rec] = purifiers::purify(defense.purifier, x, std::move(streams));
        (void)rec;
        out[static_cast<size_t>(h)] = defense.classifier.forward_detached(purified);
    });
    return out;
}

Tensor prefix_mean(const std::vector<Tensor>& slots, int hd) {
    std::vector<Tensor> pre(slots.begin(), slots.begin() + hd);
    return pairwise_mean(std::move(pre));
}

std::vector<int32_t> predictions_from(const std::vector<Tensor>& slots, int hd, Aggregation agg,
                                      const Tensor& mean_logits) {
    int64_t b = mean_logits.rows();
    int64_t c = mean_logits.cols();
    std::vector<int32_t> preds(static_cast<size_t>(b));
    if (agg == Aggregation::mean_logits) {
        for (int64_t r = 0; r < b; ++r)
            preds[static_cast<size_t>(r)] =
                argmax_row(mean_logits.data().subspan(static_cast<size_t>(r * c), static_cast<size_t>(c)));
        return preds;
    }
    for (int64_t r = 0; r < b; ++r) {
        std::vector<int> votes(static_cast<size_t>(c), 0);
        for (int h = 0; h < hd; ++h) {
            auto row = slots[static_cast<size_t>(h)].data().subspan(static_cast<size_t>(r * c),
                                                                    static_cast<size_t>(c));
            votes[static_cast<size_t>(argmax_row(row))] += 1;
        }
        int32_t best = 0;
        for (int64_t k = 1; k < c; ++k)
            if (votes[static_cast<size_t>(k)] > votes[static_cast<size_t>(best)]) best = static_cast<int32_t>(k);
        preds[static_cast<size_t>(r)] = best;  // ties break toward the lower class index
    }
    return preds;
}

}  // namespace

const char* aggregation_name(Aggregation a) {
    return a == Aggregation::mean_logits ? "mean_logits" : "majority_vote";
}

Aggregation aggregation_from_name(const std::string& name) {
    if (name == "mean_logits") return Aggregation::mean_logits;
    if (name == "majority_vote") return Aggregation::majority_vote;
    throw std::invalid_argument("unknown aggregation '" + name + "'");
}

const char* policy_name(Policy p) {
    switch (p) {
        case Policy::first_broken: return "first_broken";
        case Policy::final: return "final";
        case Policy::loss_optimized: return "loss_optimized";
    }
    return "?";
}

Policy policy_from_name(const std::string& name) {
    if (name == "first_broken") return Policy::first_broken;
    if (name == "final") return Policy::final;
    if (name == "loss_optimized") return Policy::loss_optimized;
    throw std::invalid_argument("unknown state policy '" + name + "'");
}

Tensor expected_logits(const Tensor& x, const attacks::Defense& defense, int hd, const Rng& rng) {
    if (hd < 1) throw std::invalid_argument("expected_logits: H_d must be >= 1");
    int64_t rows = x.rank() == 2 ? x.dims()[0] : 1;
    std::vector<Rng> row_base = purifiers::row_streams_for(rng, rows);
    std::vector<Tensor> slots = replicate_logits(x, defense, hd, row_base);
    return pairwise_mean(std::move(slots));
}

std::vector<int32_t> expected_predictions(const Tensor& x, const attacks::Defense& defense, int hd,
                                          const Rng& rng, Aggregation agg) {
    int64_t rows = x.rank() == 2 ? x.dims()[0] : 1;
    std::vector<Rng> row_base = purifiers::row_streams_for(rng, rows);
    std::vector<Tensor> slots = replicate_logits(x, defense, hd, row_base);
    Tensor mean = prefix_mean(slots, hd);
    return predictions_from(slots, hd, agg, mean);
}

const Tensor& select_state(const attacks::AdversarialRecord& rec, Policy policy, bool* fell_back) {
    if (fell_back) *fell_back = false;
    switch (policy) {
        case Policy::final:
            return rec.final_state;
        case Policy::first_broken:
            if (rec.first_broken) return *rec.first_broken;
            break;
        case Policy::loss_optimized:
            if (rec.loss_optimized) return *rec.loss_optimized;
            break;
    }
    if (fell_back) *fell_back = true;
    return rec.final_state;
}

double welch_p_value(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2)
        throw std::invalid_argument("welch_p_value: need at least two samples per side");
    auto constant = [](std::span<const double> v) {
        for (double x : v)
            if (x != v[0]) return false;
        return true;
    };
    if (constant(a) && constant(b)) return a[0] == b[0] ? 1.0 : 0.0;
    double ma = mean_of(a), mb = mean_of(b);
    double va = 0.0, vb = 0.0;
    for (double x : a) va += (x - ma) * (x - ma);
    for (double x : b) vb += (x - mb) * (x - mb);
    va /= static_cast<double>(a.size() - 1);
    vb /= static_cast<double>(b.size() - 1);
    double sa = va / static_cast<double>(a.size());
    double sb = vb / static_cast<double>(b.size());
    if (sa + sb == 0.0) return ma == mb ? 1.0 : 0.0;
    double t = (ma - mb) / std::sqrt(sa + sb);
    double df = (sa + sb) * (sa + sb) /
                (sa * sa / static_cast<double>(a.size() - 1) + sb * sb / static_cast<double>(b.size() - 1));
    boost::math::students_t_distribution<double> dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

double stability_test(const Tensor& x, int32_t label, const attacks::Defense& defense, int hd,
                      int trials, const Rng& rng) {
    if (trials < 2) throw std::invalid_argument("stability_test: trials must be >= 2");
    std::vector<double> correct(static_cast<size_t>(trials));
    std::vector<double> top_incorrect(static_cast<size_t>(trials));
    for (int t = 0; t < trials; ++t) {
        Tensor agg = expected_logits(x, defense, hd, rng.derive(static_cast<uint64_t>(t)));
        auto row = agg.data();
        double best_wrong = -std::numeric_limits<double>::infinity();
        for (size_t c = 0; c < row.size(); ++c)
            if (static_cast<int32_t>(c) != label) best_wrong = std::max(best_wrong, row[c]);
        correct[static_cast<size_t>(t)] = row[static_cast<size_t>(label)];
        top_incorrect[static_cast<size_t>(t)] = best_wrong;
    }
    return welch_p_value(correct, top_incorrect);
}

ValidationReport validate_records(const std::vector<attacks::AdversarialRecord>& records,
                                  const attacks::Defense& defense, const ValidationConfig& cfg) {
    if (cfg.trials < 1) throw std::invalid_argument("validate_records: trials must be >= 1");
    if (cfg.hd_sweep.empty()) throw std::invalid_argument("validate_records: empty H_d sweep");
    for (int hd : cfg.hd_sweep)
        if (hd < 1) throw std::invalid_argument("validate_records: H_d must be >= 1");

    ValidationReport report;
    report.aggregation = cfg.aggregation;
    report.policy = cfg.policy;
    report.trials = cfg.trials;

    std::vector<const attacks::AdversarialRecord*> usable;
    for (const auto& rec : records) {
        if (!rec.original.defined() || !rec.final_state.defined()) {
            report.skipped_records += 1;
            continue;
        }
        usable.push_back(&rec);
    }
    if (usable.empty()) throw std::invalid_argument("validate_records: no usable records");

    int64_t n = static_cast<int64_t>(usable.size());
    int64_t d = usable.front()->original.numel();
    std::vector<double> orig(static_cast<size_t>(n * d));
    std::vector<double> adv(static_cast<size_t>(n * d));
    std::vector<int32_t> labels(static_cast<size_t>(n));
    std::vector<uint64_t> ids(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const auto& rec = *usable[static_cast<size_t>(i)];
        bool fb = false;
        const Tensor& sel = select_state(rec, cfg.policy, &fb);
        report.fallback_count += fb ? 1 : 0;
        std::copy_n(rec.original.data().begin(), d, orig.begin() + i * d);
        std::copy_n(sel.data().begin(), d, adv.begin() + i * d);
        labels[static_cast<size_t>(i)] = rec.label;
        ids[static_cast<size_t>(i)] = rec.image_id;
    }
    Tensor X_orig = Tensor::from({n, d}, std::move(orig));
    Tensor X_adv = Tensor::from({n, d}, std::move(adv));

    // OA: undefended accuracy on the originals
    {
        Tensor logits = defense.classifier.forward_detached(X_orig);
        int64_t c = logits.cols();
        int64_t correct = 0;
        for (int64_t i = 0; i < n; ++i) {
            auto row = logits.data().subspan(static_cast<size_t>(i * c), static_cast<size_t>(c));
            if (argmax_row(row) == labels[static_cast<size_t>(i)]) ++correct;
        }
        report.oa = static_cast<double>(correct) / static_cast<double>(n);
    }

    int max_hd = *std::max_element(cfg.hd_sweep.begin(), cfg.hd_sweep.end());
    Rng root(cfg.seed);

    std::vector<HdReport> per_hd(cfg.hd_sweep.size());
    for (size_t k = 0; k < cfg.hd_sweep.size(); ++k) per_hd[k].hd = cfg.hd_sweep[k];
    std::vector<PerImageRow> rows;

    for (int trial = 0; trial < cfg.trials; ++trial) {
        Rng trng = root.derive(static_cast<uint64_t>(trial));
        // natural and adversarial purifications share replicate streams
        // (common random numbers), so an eps=0 record scores AA == NA exactly
        std::vector<Rng> row_base;
        for (int64_t i = 0; i < n; ++i) row_base.push_back(trng.derive(ids[static_cast<size_t>(i)]));
        std::vector<Tensor> na_slots = replicate_logits(X_orig, defense, max_hd, row_base);
        std::vector<Tensor> aa_slots = replicate_logits(X_adv, defense, max_hd, row_base);

        for (size_t k = 0; k < cfg.hd_sweep.size(); ++k) {
            int hd = cfg.hd_sweep[k];
            Tensor na_mean = prefix_mean(na_slots, hd);
            Tensor aa_mean = prefix_mean(aa_slots, hd);
            std::vector<int32_t> na_pred = predictions_from(na_slots, hd, cfg.aggregation, na_mean);
            std::vector<int32_t> aa_pred = predictions_from(aa_slots, hd, cfg.aggregation, aa_mean);
            int64_t c = na_mean.cols();
            int64_t na_ok = 0, aa_ok = 0;
            for (int64_t i = 0; i < n; ++i) {
                size_t ui = static_cast<size_t>(i);
                bool nc = na_pred[ui] == labels[ui];
                bool ac = aa_pred[ui] == labels[ui];
                na_ok += nc;
                aa_ok += ac;
                auto arow = aa_mean.data().subspan(static_cast<size_t>(i * c), static_cast<size_t>(c));
                double best_wrong = -std::numeric_limits<double>::infinity();
                for (int64_t cc = 0; cc < c; ++cc)
                    if (static_cast<int32_t>(cc) != labels[ui])
                        best_wrong = std::max(best_wrong, arow[static_cast<size_t>(cc)]);
                PerImageRow row;
                row.image_id = ids[ui];
                row.hd = hd;
                row.trial = trial;
                row.na_correct = nc;
                row.aa_correct = ac;
                row.correct_logit = arow[static_cast<size_t>(labels[ui])];
                row.top_incorrect_logit = best_wrong;
                rows.push_back(row);
            }
            per_hd[k].trial_na.push_back(static_cast<double>(na_ok) / static_cast<double>(n));
            per_hd[k].trial_aa.push_back(static_cast<double>(aa_ok) / static_cast<double>(n));

            if (trial == 0) {
                // fraction of replicates agreeing with the aggregate (adversarial state)
                double agree_sum = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    int agree = 0;
                    for (int h = 0; h < hd; ++h) {
                        auto row = aa_slots[static_cast<size_t>(h)].data().subspan(
                            static_cast<size_t>(i * c), static_cast<size_t>(c));
                        if (argmax_row(row) == aa_pred[static_cast<size_t>(i)]) ++agree;
                    }
                    agree_sum += static_cast<double>(agree) / static_cast<double>(hd);
                }
                per_hd[k].prediction_stability = agree_sum / static_cast<double>(n);
            }
        }
    }

    // per-image Welch p-values between correct and top-incorrect aggregated
    // logits across stability trials (adversarial state)
    std::vector<std::vector<double>> p_by_hd(cfg.hd_sweep.size());
    if (cfg.stability_trials >= 2) {
        Rng srng = root.derive(kStabilityStream);
        std::vector<std::vector<Tensor>> trial_slots;  // [stab_trial][replicate]
        for (int t = 0; t < cfg.stability_trials; ++t) {
            Rng trng = srng.derive(static_cast<uint64_t>(t));
            std::vector<Rng> base;
            for (int64_t i = 0; i < n; ++i) base.push_back(trng.derive(ids[static_cast<size_t>(i)]));
            trial_slots.push_back(replicate_logits(X_adv, defense, max_hd, base));
        }
        for (size_t k = 0; k < cfg.hd_sweep.size(); ++k) {
            int hd = cfg.hd_sweep[k];
            p_by_hd[k].resize(static_cast<size_t>(n));
            int64_t c = trial_slots[0][0].cols();
            for (int64_t i = 0; i < n; ++i) {
                std::vector<double> correct(static_cast<size_t>(cfg.stability_trials));
                std::vector<double> wrong(static_cast<size_t>(cfg.stability_trials));
                for (int t = 0; t < cfg.stability_trials; ++t) {
                    Tensor agg = prefix_mean(trial_slots[static_cast<size_t>(t)], hd);
                    auto row = agg.data().subspan(static_cast<size_t>(i * c), static_cast<size_t>(c));
                    double best_wrong = -std::numeric_limits<double>::infinity();
                    for (int64_t cc = 0; cc < c; ++cc)
                        if (static_cast<int32_t>(cc) != labels[static_cast<size_t>(i)])
                            best_wrong = std::max(best_wrong, row[static_cast<size_t>(cc)]);
                    correct[static_cast<size_t>(t)] = row[static_cast<size_t>(labels[static_cast<size_t>(i)])];
                    wrong[static_cast<size_t>(t)] = best_wrong;
                }
                p_by_hd[k][static_cast<size_t>(i)] = welch_p_value(correct, wrong);
            }
            int64_t stable = 0;
            for (double p : p_by_hd[k])
                if (p < 1e-4) ++stable;
            per_hd[k].stable_fraction = static_cast<double>(stable) / static_cast<double>(n);
        }
        for (auto& row : rows) {
            for (size_t k = 0; k < cfg.hd_sweep.size(); ++k) {
                if (row.hd == cfg.hd_sweep[k]) {
                    auto it = std::find(ids.begin(), ids.end(), row.image_id);
                    row.p_value = p_by_hd[k][static_cast<size_t>(it - ids.begin())];
                }
            }
        }
    }

    for (auto& hr : per_hd) {
        hr.na_mean = mean_of(hr.trial_na);
        hr.na_std = sample_std(hr.trial_na);
        hr.aa_mean = mean_of(hr.trial_aa);
        hr.aa_std = sample_std(hr.trial_aa);
    }
    report.per_hd = std::move(per_hd);
    report.rows = std::move(rows);
    return report;
}

}  // namespace purigrad::validation
