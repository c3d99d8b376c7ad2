#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

#include "purigrad/io.hpp"
#include "purigrad/parallel.hpp"

using namespace purigrad;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
    int workers = 1;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_config = true) {
    auto* copt = cmd->add_option("--config", args.config_path, "run configuration file");
    if (needs_config) copt->required();
    cmd->add_option("--out", args.out_dir, "output directory")->required();
    cmd->add_option("--seed", args.seed, "override [run] base_seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--workers", args.workers, "replicate-level worker threads");
    cmd->add_flag("--force", args.force, "skip config-hash checks");
}

io::RunConfig load_config(const CommonArgs& args) {
    io::RunConfig cfg = io::RunConfig::parse_file(args.config_path);
    if (args.seed_set) {
        cfg.base_seed = args.seed;
        cfg.base_seed_explicit = true;
    }
    if (!cfg.base_seed_explicit)
        throw std::runtime_error("no base seed: set [run] base_seed in the config or pass --seed");
    set_default_workers(args.workers);
    return cfg;
}

models::MixtureSpec dataset_spec(const io::RunConfig& cfg) {
    models::MixtureSpec spec;
    spec.dim = cfg.dataset.dim;
    spec.classes = cfg.dataset.classes;
    spec.components = cfg.dataset.components;
    spec.sigma = cfg.dataset.sigma;
    spec.mean_lo = cfg.dataset.mean_lo;
    spec.mean_hi = cfg.dataset.mean_hi;
    spec.min_mean_dist = cfg.dataset.min_mean_dist;
    spec.seed = cfg.dataset_seed();
    return spec;
}

models::NoiseSchedule schedule_of(const io::RunConfig& cfg) {
    return models::NoiseSchedule::make(cfg.schedule.steps, cfg.schedule.beta_start,
                                       cfg.schedule.beta_end);
}

fs::path models_dir(const CommonArgs& args) { return fs::path(args.out_dir) / "models"; }

void check_models_hash(const fs::path& dir, const io::RunConfig& cfg, bool force) {
    json manifest = json::parse(io::read_file(dir / "manifest.json"));
    uint64_t have = manifest.at("config_hash").get<uint64_t>();
    if (have != cfg.models_hash()) {
        std::string msg = "model manifest hash " + std::to_string(have) +
                          " does not match this config (" + std::to_string(cfg.models_hash()) + ")";
        if (!force) throw std::runtime_error(msg + "; pass --force to proceed");
        std::cerr << "warning: " << msg << " (forced)\n";
    }
}

attacks::Defense build_defense(const io::RunConfig& cfg, const fs::path& mdir) {
    purifiers::PurifierConfig pcfg;
    pcfg.kind = purifiers::kind_from_name(cfg.purifier.kind);
    pcfg.noising_depth = cfg.purifier.noising_depth;
    pcfg.langevin_steps = cfg.purifier.langevin_steps;
    pcfg.eta = cfg.purifier.eta;

    models::Mlp classifier = io::load_mlp(mdir, "classifier");
    switch (pcfg.kind) {
        case purifiers::Kind::identity:
            return {purifiers::Purifier::identity(), std::move(classifier)};
        case purifiers::Kind::ddpm:
            return {purifiers::Purifier::ddpm(pcfg, schedule_of(cfg), io::load_mlp(mdir, "denoiser")),
                    std::move(classifier)};
        case purifiers::Kind::vpsde:
            return {purifiers::Purifier::vpsde(pcfg, schedule_of(cfg), io::load_mlp(mdir, "denoiser")),
                    std::move(classifier)};
        case purifiers::Kind::langevin:
            return {purifiers::Purifier::langevin(pcfg, io::load_mlp(mdir, "energy")),
                    std::move(classifier)};
    }
    throw std::logic_error("unreachable purifier kind");
}

attacks::AttackConfig attack_config(const io::RunConfig& cfg) {
    attacks::AttackConfig a;
    a.norm = attacks::norm_from_name(cfg.attack.norm);
    a.epsilon = cfg.attack.epsilon;
    a.step_size = cfg.attack.step_size;
    a.iterations = cfg.attack.iterations;
    a.eot_replicates = cfg.attack.eot_replicates;
    a.grad_method = grad::method_from_name(cfg.attack.grad_method);
    a.step_rule = cfg.attack.step_rule == "adaptive" ? attacks::StepRule::adaptive
                                                     : attacks::StepRule::fixed;
    a.momentum = cfg.attack.momentum;
    a.tail_steps = cfg.attack.tail_steps;
    a.random_start = cfg.attack.random_start;
    a.seed = cfg.attack_seed();
    return a;
}

void write_manifest(const fs::path& dir, const io::RunConfig& cfg, const std::string& stage,
                    json extra) {
    json m;
    m["version"] = io::kVersionString;
    m["stage"] = stage;
    m["config"] = cfg.serialize();
    m["config_hash"] = io::fnv1a64(cfg.serialize());
    m["base_seed"] = cfg.base_seed;
    for (auto& [k, v] : extra.items()) m[k] = v;
    io::atomic_write(dir / "manifest.json", m.dump(2) + "\n");
}

int cmd_train(const CommonArgs& args) {
    io::RunConfig cfg = load_config(args);
    fs::path mdir = models_dir(args);
    fs::create_directories(mdir);
    models::MixtureSpec spec = dataset_spec(cfg);
    models::SyntheticDataset train = models::make_dataset(spec, cfg.dataset.train_size, 0);
    models::SyntheticDataset eval = models::make_dataset(spec, cfg.dataset.eval_size, 1);

    json metrics;
    for (const std::string& name : cfg.train.models) {
        if (name == "classifier") {
            models::TrainConfig tc{cfg.classifier.epochs, cfg.classifier.lr, cfg.classifier.batch,
                                   cfg.classifier_seed()};
            models::TrainMetrics m;
            models::Mlp net = models::train_classifier(
                train, tc, cfg.classifier.hidden, models::act_from_name(cfg.classifier.activation), &m);
            io::save_mlp(mdir, "classifier", net);
            double eval_acc = models::classifier_accuracy(net, eval);
            metrics["classifier"] = {{"train_accuracy", m.train_accuracy},
                                     {"eval_accuracy", eval_acc},
                                     {"final_loss", m.final_loss},
                                     {"converged", m.converged}};
            std::cout << "classifier: train acc " << m.train_accuracy << ", eval acc " << eval_acc
                      << "\n";
        } else if (name == "denoiser") {
            models::TrainConfig tc{cfg.denoiser.epochs, cfg.denoiser.lr, cfg.denoiser.batch,
                                   cfg.denoiser_seed()};
            models::TrainMetrics m;
            models::Mlp net =
                models::train_denoiser(train, schedule_of(cfg), tc, cfg.denoiser.hidden,
                                       models::act_from_name(cfg.denoiser.activation), &m);
            io::save_mlp(mdir, "denoiser", net);
            metrics["denoiser"] = {{"final_loss", m.final_loss}};
            std::cout << "denoiser: final loss " << m.final_loss << "\n";
        } else if (name == "energy") {
            models::EbmTrainConfig ec;
            ec.base = {cfg.energy.epochs, cfg.energy.lr, cfg.energy.batch, cfg.energy_seed()};
            ec.langevin_steps = cfg.energy.langevin_steps;
            ec.langevin_eta = cfg.energy.langevin_eta;
            ec.init_noise = cfg.energy.init_noise;
            models::ActParams actp{cfg.energy.leaky_slope, cfg.energy.soft_a, cfg.energy.soft_e};
            models::TrainMetrics m;
            models::Mlp net = models::train_ebm(train, ec, cfg.energy.hidden,
                                                models::act_from_name(cfg.energy.activation), &m, actp);
            io::save_mlp(mdir, "energy", net);
            metrics["energy"] = {{"final_mean_energy", m.final_loss}};
            std::cout << "energy: final mean data energy " << m.final_loss << "\n";
        } else {
            throw std::runtime_error("unknown model '" + name + "' in [train] models");
        }
    }
    json extra;
    extra["config_hash"] = cfg.models_hash();
    extra["models"] = cfg.train.models;
    write_manifest(mdir, cfg, "train", extra);
    io::atomic_write(mdir / "training_metrics.json", metrics.dump(2) + "\n");
    std::cout << "models written to " << mdir.string() << "\n";
    return 0;
}

int cmd_attack(const CommonArgs& args) {
    io::RunConfig cfg = load_config(args);
    fs::path mdir = models_dir(args);
    check_models_hash(mdir, cfg, args.force);
    attacks::Defense defense = build_defense(cfg, mdir);
    models::MixtureSpec spec = dataset_spec(cfg);
    models::SyntheticDataset eval = models::make_dataset(spec, cfg.dataset.eval_size, 1);

    int64_t n = std::min<int64_t>(cfg.attack.num_images, eval.size());
    std::vector<double> pts(eval.points.data().begin(),
                            eval.points.data().begin() + n * eval.dim());
    Tensor X = Tensor::from({n, eval.dim()}, std::move(pts));
    std::vector<int32_t> labels(eval.labels.begin(), eval.labels.begin() + n);

    attacks::AttackConfig acfg = attack_config(cfg);
    std::vector<attacks::AdversarialRecord> records =
        acfg.step_rule == attacks::StepRule::adaptive
            ? attacks::apgd_attack_batch(X, labels, defense, acfg)
            : attacks::pgd_attack_batch(X, labels, defense, acfg);

    fs::path rdir = fs::path(args.out_dir) / "records";
    fs::create_directories(rdir);
    int64_t broken = 0;
    for (const auto& rec : records) {
        io::save_record(rdir, rec, cfg.attack_hash(), acfg.seed);
        broken += rec.first_broken.has_value();
    }
    json summary;
    summary["images"] = n;
    summary["attack_process_first_broken"] = broken;  // non-authoritative; validate for AA
    summary["grad_method"] = cfg.attack.grad_method;
    io::atomic_write(rdir / "summary.json", summary.dump(2) + "\n");
    json extra;
    extra["config_hash"] = cfg.attack_hash();
    extra["attack_seed"] = acfg.seed;
    write_manifest(rdir, cfg, "attack", extra);
    std::cout << "attack-process first-broken count: " << broken << "/" << n
              << " (validate for authoritative AA)\n";
    std::cout << "records written to " << rdir.string() << "\n";
    return 0;
}

int cmd_validate(const CommonArgs& args, const std::string& records_dir) {
    io::RunConfig cfg = load_config(args);
    fs::path mdir = models_dir(args);
    check_models_hash(mdir, cfg, args.force);
    attacks::Defense defense = build_defense(cfg, mdir);

    fs::path rdir = records_dir.empty() ? fs::path(args.out_dir) / "records" : fs::path(records_dir);
    io::LoadedRecords loaded = io::load_records(rdir);
    if (loaded.records.empty()) throw std::runtime_error("no records in " + rdir.string());
    if (loaded.config_hash != cfg.attack_hash()) {
        std::string msg = "records were produced under config hash " +
                          std::to_string(loaded.config_hash) + ", this config hashes to " +
                          std::to_string(cfg.attack_hash());
        if (!args.force) throw std::runtime_error(msg + "; pass --force to proceed");
        std::cerr << "warning: " << msg << " (forced)\n";
    }

    validation::ValidationConfig vcfg;
    vcfg.hd_sweep = cfg.validation.hd_sweep;
    vcfg.trials = cfg.validation.trials;
    vcfg.aggregation = validation::aggregation_from_name(cfg.validation.aggregation);
    vcfg.policy = validation::policy_from_name(cfg.validation.policy);
    vcfg.stability_trials = cfg.validation.stability_trials;
    vcfg.seed = cfg.validation_seed();

    validation::ValidationReport rep = validation::validate_records(loaded.records, defense, vcfg);
    rep.skipped_records += loaded.skipped;

    fs::path vdir = fs::path(args.out_dir) / "validation";
    fs::create_directories(vdir);
    io::atomic_write(vdir / "report.json", io::validation_report_json(rep));
    io::atomic_write(vdir / "rows.csv", io::validation_rows_csv(rep));
    json extra;
    extra["config_hash"] = cfg.attack_hash();
    extra["validation_seed"] = vcfg.seed;
    write_manifest(vdir, cfg, "validate", extra);

    std::cout << "OA " << rep.oa << "\n";
    for (const auto& hr : rep.per_hd) {
        std::cout << "H_d=" << hr.hd << ": NA " << hr.na_mean << " +- " << hr.na_std << ", AA "
                  << hr.aa_mean << " +- " << hr.aa_std;
        if (!std::isnan(hr.stable_fraction)) std::cout << ", stable frac " << hr.stable_fraction;
        std::cout << "\n";
    }
    std::cout << "reports written to " << vdir.string() << "\n";
    return 0;
}

int cmd_bench(const CommonArgs& args) {
    io::RunConfig cfg = load_config(args);
    fs::path mdir = models_dir(args);
    check_models_hash(mdir, cfg, args.force);

    models::MixtureSpec spec = dataset_spec(cfg);
    models::SyntheticDataset eval = models::make_dataset(spec, cfg.dataset.eval_size, 1);
    int64_t rows = std::min<int64_t>(cfg.bench.probe_batch, eval.size());
    std::vector<double> pts(eval.points.data().begin(), eval.points.data().begin() + rows * eval.dim());
    Tensor probe = Tensor::from({rows, eval.dim()}, std::move(pts));
    std::vector<int32_t> labels(eval.labels.begin(), eval.labels.begin() + rows);

    auto context_for = [&](const std::string& kind) {
        bench::BenchContext ctx;
        ctx.purifier_kind = kind;
        ctx.classifier = io::load_mlp(mdir, "classifier");
        ctx.input = probe;
        ctx.labels = labels;
        ctx.seed = cfg.bench_seed();
        ctx.repeats = cfg.bench.repeats;
        if (kind == "langevin") {
            models::Mlp energy = io::load_mlp(mdir, "energy");
            double eta = cfg.purifier.eta;
            ctx.make_purifier = [energy, eta](int steps) {
                purifiers::PurifierConfig pc;
                pc.langevin_steps = steps;
                pc.eta = eta;
                return purifiers::Purifier::langevin(pc, energy);
            };
        } else if (kind == "ddpm" || kind == "vpsde") {
            models::Mlp denoiser = io::load_mlp(mdir, "denoiser");
            double b0 = cfg.schedule.beta_start, b1 = cfg.schedule.beta_end;
            bool is_ddpm = kind == "ddpm";
            ctx.make_purifier = [denoiser, b0, b1, is_ddpm](int steps) {
                models::NoiseSchedule sched = models::NoiseSchedule::make(steps, b0, b1);
                purifiers::PurifierConfig pc;
                pc.noising_depth = steps;
                return is_ddpm ? purifiers::Purifier::ddpm(pc, sched, denoiser)
                               : purifiers::Purifier::vpsde(pc, sched, denoiser);
            };
        } else {
            throw std::runtime_error("bench: unsupported purifier kind '" + kind + "'");
        }
        return ctx;
    };

    std::vector<grad::Method> methods;
    for (const auto& m : cfg.bench.methods) methods.push_back(grad::method_from_name(m));

    bench::BenchContext ctx = context_for(cfg.bench.purifier_kind);
    auto memory_rows = bench::run_memory_sweep(ctx, cfg.bench.step_list, methods, cfg.bench.cap_bytes);
    auto equiv_rows = bench::run_equivalence_sweep({ctx}, cfg.bench.equivalence_steps,
                                                   cfg.bench.equivalence_repeats, cfg.bench_seed());

    fs::path bdir = fs::path(args.out_dir) / "bench";
    fs::create_directories(bdir);
    io::atomic_write(bdir / "memory.csv", io::bench_rows_csv(memory_rows));
    io::atomic_write(bdir / "equivalence.csv", io::bench_rows_csv(equiv_rows));
    std::vector<bench::BenchRow> all = memory_rows;
    all.insert(all.end(), equiv_rows.begin(), equiv_rows.end());
    io::atomic_write(bdir / "plot.json", io::bench_plot_json(all));
    json extra;
    extra["config_hash"] = cfg.defense_hash();
    write_manifest(bdir, cfg, "bench", extra);

    for (const auto& r : memory_rows) {
        std::cout << r.method << " steps=" << r.steps;
        if (r.out_of_budget)
            std::cout << ": out of byte budget\n";
        else
            std::cout << ": peak " << r.peak_graph_bytes << " B, median " << r.wall_ms << " ms\n";
    }
    std::cout << "bench outputs written to " << bdir.string() << "\n";
    return 0;
}

int cmd_report(const CommonArgs& args) {
    fs::path out(args.out_dir);
    json summary;
    fs::path vjson = out / "validation" / "report.json";
    if (fs::exists(vjson)) {
        json v = json::parse(io::read_file(vjson));
        summary["validation"] = v;
        std::cout << "validation (policy " << v["policy"].get<std::string>() << ", "
                  << v["trials"].get<int>() << " trials)\n";
        std::cout << "  OA: " << v["oa"].get<double>() << "\n";
        std::cout << "  H_d      NA mean    NA std     AA mean    AA std\n";
        for (const auto& hr : v["per_hd"]) {
            std::printf("  %-8d %-10.4f %-10.4f %-10.4f %-10.4f\n", hr["hd"].get<int>(),
                        hr["na_mean"].get<double>(), hr["na_std"].get<double>(),
                        hr["aa_mean"].get<double>(), hr["aa_std"].get<double>());
        }
    }
    for (const char* name : {"memory", "equivalence"}) {
        fs::path csv = out / "bench" / (std::string(name) + ".csv");
        if (fs::exists(csv)) {
            summary["bench_" + std::string(name) + "_csv"] = io::read_file(csv);
            std::cout << "bench/" << name << ".csv:\n" << io::read_file(csv);
        }
    }
    fs::path rsum = out / "records" / "summary.json";
    if (fs::exists(rsum)) summary["attack_summary"] = json::parse(io::read_file(rsum));
    if (summary.empty()) {
        std::cerr << "nothing to report under " << out.string() << "\n";
        return 1;
    }
    io::atomic_write(out / "summary.json", summary.dump(2) + "\n");
    std::cout << "merged summary written to " << (out / "summary.json").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"exact-gradient evaluation of stochastic purification defenses"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string records_dir;

    CLI::App* train = app.add_subcommand("train", "train classifier / denoiser / energy models");
    add_common(train, args);
    CLI::App* attack = app.add_subcommand("attack", "run the white-box attack over the eval set");
    add_common(attack, args);
    CLI::App* validate = app.add_subcommand("validate", "re-evaluate saved adversarial records");
    add_common(validate, args);
    validate->add_option("--records", records_dir, "records directory (default <out>/records)");
    CLI::App* bench = app.add_subcommand("bench", "memory/time and gradient-equivalence sweeps");
    add_common(bench, args);
    CLI::App* report = app.add_subcommand("report", "merge reports into a summary table");
    report->add_option("--out", args.out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (train->parsed()) return cmd_train(args);
        if (attack->parsed()) return cmd_attack(args);
        if (validate->parsed()) return cmd_validate(args, records_dir);
        if (bench->parsed()) return cmd_bench(args);
        if (report->parsed()) return cmd_report(args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
