#pragma once

#include <limits>

#include "purigrad/attack.hpp"

namespace purigrad::validation {

enum class Aggregation : uint8_t { mean_logits, majority_vote };
enum class Policy : uint8_t { first_broken, final, loss_optimized };

const char* aggregation_name(Aggregation a);
Aggregation aggregation_from_name(const std::string& name);
const char* policy_name(Policy p);
Policy policy_from_name(const std::string& name);

struct ValidationConfig {
    std::vector<int> hd_sweep{1, 10, 50};
    int trials = 3;
    Aggregation aggregation = Aggregation::mean_logits;
    Policy policy = Policy::final;
    uint64_t seed = 0;
    int stability_trials = 0;  // 0 disables the per-image p-value column
};

struct PerImageRow {
    uint64_t image_id = 0;
    int hd = 0;
    int trial = 0;
    bool na_correct = false;
    bool aa_correct = false;
    double correct_logit = 0.0;        // aggregated, adversarial state
    double top_incorrect_logit = 0.0;  // aggregated, adversarial state
    double p_value = std::numeric_limits<double>::quiet_NaN();
};

struct HdReport {
    int hd = 0;
    std::vector<double> trial_na;
    std::vector<double> trial_aa;
    double na_mean = 0.0, na_std = 0.0;
    double aa_mean = 0.0, aa_std = 0.0;
    /// mean over images of the fraction of replicates agreeing with the
    /// aggregate prediction (trial 0, adversarial state)
    double prediction_stability = 0.0;
    /// fraction of images with Welch p < 1e-4 (when stability_trials > 0)
    double stable_fraction = std::numeric_limits<double>::quiet_NaN();
};

struct ValidationReport {
    double oa = 0.0;  // undefended accuracy on the originals
    std::vector<HdReport> per_hd;
    std::vector<PerImageRow> rows;
    Aggregation aggregation = Aggregation::mean_logits;
    Policy policy = Policy::final;
    int trials = 0;
    int64_t skipped_records = 0;
    int64_t fallback_count = 0;  // records where the requested state was absent
};

/// Mean classifier logits over hd purification replicates; replicate h of
/// row r uses stream rng.derive(r).derive(h), and the mean is accumulated
/// pairwise (execution-order independent).
Tensor expected_logits(const Tensor& x, const attacks::Defense& defense, int hd, const Rng& rng);

/// Aggregated prediction per row under either aggregation.
std::vector<int32_t> expected_predictions(const Tensor& x, const attacks::Defense& defense, int hd,
                                          const Rng& rng, Aggregation agg);

const Tensor& select_state(const attacks::AdversarialRecord& rec, Policy policy,
                           bool* fell_back = nullptr);

/// The decoupled validation pass over saved attack records. Uses nested
/// replicate substreams child(seed, trial).child(image_id).child(replicate),
/// so the hd sweep shares replicate prefixes.
ValidationReport validate_records(const std::vector<attacks::AdversarialRecord>& records,
                                  const attacks::Defense& defense, const ValidationConfig& cfg);

/// Welch two-sample t-test p-value between the aggregated correct-class
/// logit and the highest incorrect-class logit over `trials` repeated
/// purifications with hd replicates each.
double stability_test(const Tensor& x, int32_t label, const attacks::Defense& defense, int hd,
                      int trials, const Rng& rng);

double welch_p_value(std::span<const double> a, std::span<const double> b);

}  // namespace purigrad::validation
