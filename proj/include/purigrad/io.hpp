#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "purigrad/attack.hpp"
#include "purigrad/bench.hpp"
#include "purigrad/validation.hpp"

namespace purigrad::io {

namespace fs = std::filesystem;

// ---- binary tensor files ---------------------------------------------------
// magic "MEFA" | u32 version | u32 dtype (1 = f64) | u32 rank | u64 dims[rank]
// | payload: little-endian f64, row-major.
namespace tensorfile {
inline constexpr char kMagic[4] = {'M', 'E', 'F', 'A'};
inline constexpr uint32_t kVersion = 1;
inline constexpr uint32_t kDtypeF64 = 1;

void save(const fs::path& path, const Tensor& t);
Tensor load(const fs::path& path);
}  // namespace tensorfile

/// Write-temp-then-rename; interrupted runs never leave half-written files.
void atomic_write(const fs::path& path, const std::string& bytes);

std::string read_file(const fs::path& path);

/// Shortest round-trip decimal form of a double (deterministic bytes).
std::string fmt_double(double v);

uint64_t fnv1a64(std::string_view s);

// ---- run configuration -----------------------------------------------------

struct DatasetSection {
    int64_t dim = 16;
    int classes = 4;
    int components = 8;
    double sigma = 0.06;
    double mean_lo = 0.2;
    double mean_hi = 0.8;
    double min_mean_dist = 0.55;
    int64_t train_size = 2048;
    int64_t eval_size = 512;
};

struct ScheduleSection {
    int steps = 50;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

struct ModelSection {
    std::vector<int64_t> hidden{64, 64};
    std::string activation = "silu";
    int epochs = 60;
    double lr = 0.2;
    int batch = 128;
};

struct EnergySection : ModelSection {
    double soft_a = 0.49;
    double soft_e = 0.01;
    double leaky_slope = 0.05;
    int langevin_steps = 40;
    double langevin_eta = 0.05;
    double init_noise = 0.3;
};

struct PurifierSection {
    std::string kind = "langevin";
    int noising_depth = 15;
    int langevin_steps = 60;
    double eta = 0.05;
};

struct AttackSection {
    std::string norm = "linf";
    double epsilon = 0.1;
    double step_size = 0.025;
    int iterations = 40;
    int eot_replicates = 20;
    std::string grad_method = "checkpointed";
    std::string step_rule = "fixed";
    double momentum = 0.75;
    int tail_steps = -1;
    bool random_start = false;
    int64_t num_images = 512;
};

struct ValidationSection {
    std::vector<int> hd_sweep{1, 10, 50};
    int trials = 3;
    std::string aggregation = "mean_logits";
    std::string policy = "final";
    int stability_trials = 0;
};

struct BenchSection {
    std::string purifier_kind = "langevin";
    std::vector<int> step_list{10, 50, 100, 500};
    std::vector<std::string> methods{"checkpointed", "naive"};
    uint64_t cap_bytes = 100000000;
    int repeats = 3;
    std::vector<int> equivalence_steps{5, 10};
    int equivalence_repeats = 1;
    int probe_batch = 16;  // rows in the timing/memory probe input
};

struct TrainSection {
    std::vector<std::string> models{"classifier", "denoiser", "energy"};
};

/// Whole-run configuration; a single key-value file with [section] headers.
/// All substreams derive from base_seed (see docs/FORMATS.md).
struct RunConfig {
    uint64_t base_seed = 42;
    bool base_seed_explicit = false;  // set when the parsed file carried one
    DatasetSection dataset;
    ScheduleSection schedule;
    TrainSection train;
    ModelSection classifier;
    ModelSection denoiser;
    EnergySection energy;
    PurifierSection purifier;
    AttackSection attack;
    ValidationSection validation;
    BenchSection bench;

    static RunConfig parse_file(const fs::path& path);
    static RunConfig parse_string(const std::string& text);
    std::string serialize() const;

    uint64_t models_hash() const;   // dataset + schedule + model sections
    uint64_t defense_hash() const;  // models_hash + purifier
    uint64_t attack_hash() const;   // defense_hash + attack

    // derived rng streams
    uint64_t dataset_seed() const;
    uint64_t classifier_seed() const;
    uint64_t denoiser_seed() const;
    uint64_t energy_seed() const;
    uint64_t attack_seed() const;
    uint64_t validation_seed() const;
    uint64_t bench_seed() const;
};

// ---- model persistence -----------------------------------------------------

void save_mlp(const fs::path& dir, const std::string& name, const models::Mlp& mlp);
models::Mlp load_mlp(const fs::path& dir, const std::string& name);
bool mlp_exists(const fs::path& dir, const std::string& name);

// ---- adversarial record persistence ----------------------------------------

void save_record(const fs::path& dir, const attacks::AdversarialRecord& rec, uint64_t config_hash,
                 uint64_t seed);

struct LoadedRecords {
    std::vector<attacks::AdversarialRecord> records;
    uint64_t config_hash = 0;
    int64_t skipped = 0;  // partial records skipped with a warning
};

LoadedRecords load_records(const fs::path& dir);

// ---- report emission -------------------------------------------------------

std::string validation_rows_csv(const validation::ValidationReport& report);
std::string validation_report_json(const validation::ValidationReport& report);
std::string bench_rows_csv(const std::vector<bench::BenchRow>& rows);
std::string bench_plot_json(const std::vector<bench::BenchRow>& rows);

inline constexpr const char* kVersionString = "purigrad 0.1.0";

}  // namespace purigrad::io
