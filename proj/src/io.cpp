#include "purigrad/io.hpp"

#include <json.hpp>

#include <charconv>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

namespace purigrad::io {

using nlohmann::json;

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Cursor {
    const std::string& buf;
    size_t at = 0;
    const fs::path& path;

    void need(size_t n) const {
        if (at + n > buf.size())
            throw std::runtime_error("tensor file truncated: " + path.string());
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[at + static_cast<size_t>(i)])) << (8 * i);
        at += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[at + static_cast<size_t>(i)])) << (8 * i);
        at += 8;
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

}  // namespace

namespace tensorfile {

void save(const fs::path& path, const Tensor& t) {
    std::string out;
    out.reserve(20 + static_cast<size_t>(t.numel()) * 8 + t.dims().size() * 8);
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, kDtypeF64);
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.dims()) put_u64(out, static_cast<uint64_t>(d));
    for (double v : t.data()) put_f64(out, v);
    atomic_write(path, out);
}

Tensor load(const fs::path& path) {
    std::string buf = read_file(path);
    if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("not a tensor file (bad magic): " + path.string());
    Cursor c{buf, 4, path};
    uint32_t version = c.u32();
    if (version != kVersion)
        throw std::runtime_error("unsupported tensor file version " + std::to_string(version) +
                                 ": " + path.string());
    uint32_t dtype = c.u32();
    if (dtype != kDtypeF64)
        throw std::runtime_error("unsupported dtype code " + std::to_string(dtype) + ": " +
                                 path.string());
    uint32_t rank = c.u32();
    Shape dims;
    for (uint32_t i = 0; i < rank; ++i) dims.push_back(static_cast<int64_t>(c.u64()));
    int64_t n = shape_numel(dims);
    if (buf.size() - c.at != static_cast<size_t>(n) * 8)
        throw std::runtime_error("tensor payload length mismatch: " + path.string());
    std::vector<double> data(static_cast<size_t>(n));
    for (double& v : data) v = c.f64();
    return Tensor::from(std::move(dims), std::move(data));
}

}  // namespace tensorfile

void atomic_write(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for writing: " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

// ---- config ----------------------------------------------------------------

namespace {

struct KV {
    std::map<std::string, std::map<std::string, std::string>> sections;
    std::map<std::string, std::map<std::string, bool>> consumed;

    static KV parse(const std::string& text) {
        KV kv;
        std::istringstream is(text);
        std::string line;
        std::string section;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            size_t a = line.find_first_not_of(" \t\r");
            if (a == std::string::npos) continue;
            size_t b = line.find_last_not_of(" \t\r");
            std::string s = line.substr(a, b - a + 1);
            if (s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw std::runtime_error("config line " + std::to_string(lineno) + ": bad section header");
                section = s.substr(1, s.size() - 2);
                kv.sections[section];
                continue;
            }
            size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
            std::string key = s.substr(0, eq);
            std::string val = s.substr(eq + 1);
            auto trim = [](std::string& t) {
                size_t x = t.find_first_not_of(" \t");
                size_t y = t.find_last_not_of(" \t");
                t = x == std::string::npos ? "" : t.substr(x, y - x + 1);
            };
            trim(key);
            trim(val);
            if (section.empty())
                throw std::runtime_error("config line " + std::to_string(lineno) + ": key outside a section");
            kv.sections[section][key] = val;
        }
        return kv;
    }

    bool has(const std::string& sec, const std::string& key) {
        auto s = sections.find(sec);
        return s != sections.end() && s->second.count(key) > 0;
    }
    std::string get(const std::string& sec, const std::string& key) {
        consumed[sec][key] = true;
        return sections.at(sec).at(key);
    }

    void check_all_consumed() const {
        for (const auto& [sec, keys] : sections) {
            for (const auto& [key, val] : keys) {
                (void)val;
                auto cs = consumed.find(sec);
                if (cs == consumed.end() || cs->second.count(key) == 0)
                    throw std::runtime_error("config: unknown key [" + sec + "] " + key);
            }
        }
    }
};

template <typename T>
T parse_num(const std::string& s, const char* what) {
    T out{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if constexpr (std::is_floating_point_v<T>) {
        // from_chars<double> handles decimal and scientific forms
    }
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw std::runtime_error(std::string("config: cannot parse ") + what + " from '" + s + "'");
    return out;
}

bool parse_bool(const std::string& s, const char* what) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw std::runtime_error(std::string("config: cannot parse bool ") + what + " from '" + s + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* what) {
    std::vector<T> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) {
        size_t a = cur.find_first_not_of(" \t");
        size_t b = cur.find_last_not_of(" \t");
        if (a == std::string::npos) continue;
        out.push_back(parse_num<T>(cur.substr(a, b - a + 1), what));
    }
    return out;
}

std::vector<std::string> parse_str_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) {
        size_t a = cur.find_first_not_of(" \t");
        size_t b = cur.find_last_not_of(" \t");
        if (a != std::string::npos) out.push_back(cur.substr(a, b - a + 1));
    }
    return out;
}

template <typename T>
std::string join_list(const std::vector<T>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        if constexpr (std::is_same_v<T, std::string>)
            out += v[i];
        else if constexpr (std::is_floating_point_v<T>)
            out += fmt_double(v[i]);
        else
            out += std::to_string(v[i]);
    }
    return out;
}

#define GET_NUM(kv, sec, field, key) \
    if (kv.has(sec, key)) field = parse_num<std::remove_reference_t<decltype(field)>>(kv.get(sec, key), key)
#define GET_BOOL(kv, sec, field, key) \
    if (kv.has(sec, key)) field = parse_bool(kv.get(sec, key), key)
#define GET_STR(kv, sec, field, key) \
    if (kv.has(sec, key)) field = kv.get(sec, key)

void read_model_section(KV& kv, const std::string& sec, ModelSection& m) {
    if (kv.has(sec, "hidden")) m.hidden = parse_list<int64_t>(kv.get(sec, "hidden"), "hidden");
    GET_STR(kv, sec, m.activation, "activation");
    GET_NUM(kv, sec, m.epochs, "epochs");
    GET_NUM(kv, sec, m.lr, "lr");
    GET_NUM(kv, sec, m.batch, "batch");
}

void write_model_section(std::ostringstream& os, const ModelSection& m) {
    os << "hidden = " << join_list(m.hidden) << "\n";
    os << "activation = " << m.activation << "\n";
    os << "epochs = " << m.epochs << "\n";
    os << "lr = " << fmt_double(m.lr) << "\n";
    os << "batch = " << m.batch << "\n";
}

}  // namespace

RunConfig RunConfig::parse_file(const fs::path& path) { return parse_string(read_file(path)); }

RunConfig RunConfig::parse_string(const std::string& text) {
    KV kv = KV::parse(text);
    RunConfig c;
    if (kv.has("run", "base_seed")) {
        c.base_seed = parse_num<uint64_t>(kv.get("run", "base_seed"), "base_seed");
        c.base_seed_explicit = true;
    }

    GET_NUM(kv, "dataset", c.dataset.dim, "dim");
    GET_NUM(kv, "dataset", c.dataset.classes, "classes");
    GET_NUM(kv, "dataset", c.dataset.components, "components");
    GET_NUM(kv, "dataset", c.dataset.sigma, "sigma");
    GET_NUM(kv, "dataset", c.dataset.mean_lo, "mean_lo");
    GET_NUM(kv, "dataset", c.dataset.mean_hi, "mean_hi");
    GET_NUM(kv, "dataset", c.dataset.min_mean_dist, "min_mean_dist");
    GET_NUM(kv, "dataset", c.dataset.train_size, "train_size");
    GET_NUM(kv, "dataset", c.dataset.eval_size, "eval_size");

    GET_NUM(kv, "schedule", c.schedule.steps, "steps");
    GET_NUM(kv, "schedule", c.schedule.beta_start, "beta_start");
    GET_NUM(kv, "schedule", c.schedule.beta_end, "beta_end");

    if (kv.has("train", "models")) c.train.models = parse_str_list(kv.get("train", "models"));

    read_model_section(kv, "classifier", c.classifier);
    read_model_section(kv, "denoiser", c.denoiser);
    read_model_section(kv, "energy", c.energy);
    GET_NUM(kv, "energy", c.energy.soft_a, "soft_a");
    GET_NUM(kv, "energy", c.energy.soft_e, "soft_e");
    GET_NUM(kv, "energy", c.energy.leaky_slope, "leaky_slope");
    GET_NUM(kv, "energy", c.energy.langevin_steps, "langevin_steps");
    GET_NUM(kv, "energy", c.energy.langevin_eta, "langevin_eta");
    GET_NUM(kv, "energy", c.energy.init_noise, "init_noise");

    GET_STR(kv, "purifier", c.purifier.kind, "kind");
    GET_NUM(kv, "purifier", c.purifier.noising_depth, "noising_depth");
    GET_NUM(kv, "purifier", c.purifier.langevin_steps, "langevin_steps");
    GET_NUM(kv, "purifier", c.purifier.eta, "eta");

    GET_STR(kv, "attack", c.attack.norm, "norm");
    GET_NUM(kv, "attack", c.attack.epsilon, "epsilon");
    GET_NUM(kv, "attack", c.attack.step_size, "step_size");
    GET_NUM(kv, "attack", c.attack.iterations, "iterations");
    GET_NUM(kv, "attack", c.attack.eot_replicates, "eot_replicates");
    GET_STR(kv, "attack", c.attack.grad_method, "grad_method");
    GET_STR(kv, "attack", c.attack.step_rule, "step_rule");
    GET_NUM(kv, "attack", c.attack.momentum, "momentum");
    GET_NUM(kv, "attack", c.attack.tail_steps, "tail_steps");
    GET_BOOL(kv, "attack", c.attack.random_start, "random_start");
    GET_NUM(kv, "attack", c.attack.num_images, "num_images");

    if (kv.has("validation", "hd_sweep"))
        c.validation.hd_sweep = parse_list<int>(kv.get("validation", "hd_sweep"), "hd_sweep");
    GET_NUM(kv, "validation", c.validation.trials, "trials");
    GET_STR(kv, "validation", c.validation.aggregation, "aggregation");
    GET_STR(kv, "validation", c.validation.policy, "policy");
    GET_NUM(kv, "validation", c.validation.stability_trials, "stability_trials");

    GET_STR(kv, "bench", c.bench.purifier_kind, "purifier_kind");
    if (kv.has("bench", "step_list"))
        c.bench.step_list = parse_list<int>(kv.get("bench", "step_list"), "step_list");
    if (kv.has("bench", "methods")) c.bench.methods = parse_str_list(kv.get("bench", "methods"));
    GET_NUM(kv, "bench", c.bench.cap_bytes, "cap_bytes");
    GET_NUM(kv, "bench", c.bench.repeats, "repeats");
    if (kv.has("bench", "equivalence_steps"))
        c.bench.equivalence_steps = parse_list<int>(kv.get("bench", "equivalence_steps"), "equivalence_steps");
    GET_NUM(kv, "bench", c.bench.equivalence_repeats, "equivalence_repeats");
    GET_NUM(kv, "bench", c.bench.probe_batch, "probe_batch");

    kv.check_all_consumed();
    return c;
}

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "[run]\n";
    os << "base_seed = " << base_seed << "\n";
    os << "\n[dataset]\n";
    os << "dim = " << dataset.dim << "\n";
    os << "classes = " << dataset.classes << "\n";
    os << "components = " << dataset.components << "\n";
    os << "sigma = " << fmt_double(dataset.sigma) << "\n";
    os << "mean_lo = " << fmt_double(dataset.mean_lo) << "\n";
    os << "mean_hi = " << fmt_double(dataset.mean_hi) << "\n";
    os << "min_mean_dist = " << fmt_double(dataset.min_mean_dist) << "\n";
    os << "train_size = " << dataset.train_size << "\n";
    os << "eval_size = " << dataset.eval_size << "\n";
    os << "\n[schedule]\n";
    os << "steps = " << schedule.steps << "\n";
    os << "beta_start = " << fmt_double(schedule.beta_start) << "\n";
    os << "beta_end = " << fmt_double(schedule.beta_end) << "\n";
    os << "\n[train]\n";
    os << "models = " << join_list(train.models) << "\n";
    os << "\n[classifier]\n";
    write_model_section(os, classifier);
    os << "\n[denoiser]\n";
    write_model_section(os, denoiser);
    os << "\n[energy]\n";
    write_model_section(os, energy);
    os << "soft_a = " << fmt_double(energy.soft_a) << "\n";
    os << "soft_e = " << fmt_double(energy.soft_e) << "\n";
    os << "leaky_slope = " << fmt_double(energy.leaky_slope) << "\n";
    os << "langevin_steps = " << energy.langevin_steps << "\n";
    os << "langevin_eta = " << fmt_double(energy.langevin_eta) << "\n";
    os << "init_noise = " << fmt_double(energy.init_noise) << "\n";
    os << "\n[purifier]\n";
    os << "kind = " << purifier.kind << "\n";
    os << "noising_depth = " << purifier.noising_depth << "\n";
    os << "langevin_steps = " << purifier.langevin_steps << "\n";
    os << "eta = " << fmt_double(purifier.eta) << "\n";
    os << "\n[attack]\n";
    os << "norm = " << attack.norm << "\n";
    os << "epsilon = " << fmt_double(attack.epsilon) << "\n";
    os << "step_size = " << fmt_double(attack.step_size) << "\n";
    os << "iterations = " << attack.iterations << "\n";
    os << "eot_replicates = " << attack.eot_replicates << "\n";
    os << "grad_method = " << attack.grad_method << "\n";
    os << "step_rule = " << attack.step_rule << "\n";
    os << "momentum = " << fmt_double(attack.momentum) << "\n";
    os << "tail_steps = " << attack.tail_steps << "\n";
    os << "random_start = " << (attack.random_start ? "true" : "false") << "\n";
    os << "num_images = " << attack.num_images << "\n";
    os << "\n[validation]\n";
    os << "hd_sweep = " << join_list(validation.hd_sweep) << "\n";
    os << "trials = " << validation.trials << "\n";
    os << "aggregation = " << validation.aggregation << "\n";
    os << "policy = " << validation.policy << "\n";
    os << "stability_trials = " << validation.stability_trials << "\n";
    os << "\n[bench]\n";
    os << "purifier_kind = " << bench.purifier_kind << "\n";
    os << "step_list = " << join_list(bench.step_list) << "\n";
    os << "methods = " << join_list(bench.methods) << "\n";
    os << "cap_bytes = " << bench.cap_bytes << "\n";
    os << "repeats = " << bench.repeats << "\n";
    os << "equivalence_steps = " << join_list(bench.equivalence_steps) << "\n";
    os << "equivalence_repeats = " << bench.equivalence_repeats << "\n";
    os << "probe_batch = " << bench.probe_batch << "\n";
    return os.str();
}

namespace {

std::string section_slice(const std::string& serialized, const std::vector<std::string>& headers) {
    // canonical hash input: the serialized form filtered to the given sections
    std::istringstream is(serialized);
    std::string line, out, current;
    while (std::getline(is, line)) {
        if (!line.empty() && line.front() == '[') current = line;
        for (const auto& h : headers)
            if (current == "[" + h + "]" && !line.empty()) out += line + "\n";
    }
    return out;
}

}  // namespace

uint64_t RunConfig::models_hash() const {
    return fnv1a64(section_slice(serialize(), {"run", "dataset", "schedule", "classifier",
                                               "denoiser", "energy"}));
}

uint64_t RunConfig::defense_hash() const {
    return fnv1a64(section_slice(serialize(), {"run", "dataset", "schedule", "classifier",
                                               "denoiser", "energy", "purifier"}));
}

uint64_t RunConfig::attack_hash() const {
    return fnv1a64(section_slice(serialize(), {"run", "dataset", "schedule", "classifier",
                                               "denoiser", "energy", "purifier", "attack"}));
}

uint64_t RunConfig::dataset_seed() const { return Rng::child_seed(base_seed, 1); }
uint64_t RunConfig::classifier_seed() const { return Rng::child_seed(base_seed, 2); }
uint64_t RunConfig::denoiser_seed() const { return Rng::child_seed(base_seed, 3); }
uint64_t RunConfig::energy_seed() const { return Rng::child_seed(base_seed, 4); }
uint64_t RunConfig::attack_seed() const { return Rng::child_seed(base_seed, 5); }
uint64_t RunConfig::validation_seed() const { return Rng::child_seed(base_seed, 6); }
uint64_t RunConfig::bench_seed() const { return Rng::child_seed(base_seed, 7); }

// ---- model persistence -----------------------------------------------------

void save_mlp(const fs::path& dir, const std::string& name, const models::Mlp& mlp) {
    fs::create_directories(dir);
    json manifest;
    manifest["name"] = name;
    manifest["layer_dims"] = mlp.layer_dims;
    manifest["activation"] = models::act_name(mlp.act);
    manifest["act_params"] = {{"slope", mlp.actp.slope}, {"a", mlp.actp.a}, {"e", mlp.actp.e}};
    std::vector<std::string> files;
    for (size_t l = 0; l < mlp.weights.size(); ++l) {
        std::string wf = name + "_layer" + std::to_string(l) + "_w.mt";
        std::string bf = name + "_layer" + std::to_string(l) + "_b.mt";
        tensorfile::save(dir / wf, mlp.weights[l]);
        tensorfile::save(dir / bf, mlp.biases[l]);
        files.push_back(wf);
        files.push_back(bf);
    }
    manifest["files"] = files;
    atomic_write(dir / (name + ".json"), manifest.dump(2) + "\n");
}

models::Mlp load_mlp(const fs::path& dir, const std::string& name) {
    json manifest = json::parse(read_file(dir / (name + ".json")));
    models::Mlp mlp;
    mlp.layer_dims = manifest.at("layer_dims").get<std::vector<int64_t>>();
    mlp.act = models::act_from_name(manifest.at("activation").get<std::string>());
    mlp.actp.slope = manifest.at("act_params").at("slope").get<double>();
    mlp.actp.a = manifest.at("act_params").at("a").get<double>();
    mlp.actp.e = manifest.at("act_params").at("e").get<double>();
    for (size_t l = 0; l + 1 < mlp.layer_dims.size(); ++l) {
        mlp.weights.push_back(tensorfile::load(dir / (name + "_layer" + std::to_string(l) + "_w.mt")));
        mlp.biases.push_back(tensorfile::load(dir / (name + "_layer" + std::to_string(l) + "_b.mt")));
    }
    return mlp;
}

bool mlp_exists(const fs::path& dir, const std::string& name) {
    return fs::exists(dir / (name + ".json"));
}

// ---- adversarial records ---------------------------------------------------

namespace {

std::string rec_stem(uint64_t image_id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "rec_%06llu", static_cast<unsigned long long>(image_id));
    return buf;
}

}  // namespace

void save_record(const fs::path& dir, const attacks::AdversarialRecord& rec, uint64_t config_hash,
                 uint64_t seed) {
    fs::create_directories(dir);
    std::string stem = rec_stem(rec.image_id);
    tensorfile::save(dir / (stem + "_original.mt"), rec.original);
    tensorfile::save(dir / (stem + "_final.mt"), rec.final_state);
    json meta;
    meta["image_id"] = rec.image_id;
    meta["label"] = rec.label;
    meta["config_hash"] = config_hash;
    meta["seed"] = seed;
    meta["first_broken_iter"] = rec.first_broken_iter;
    meta["loss_optimized_iter"] = rec.loss_optimized_iter;
    meta["loss_optimized_value"] = rec.loss_optimized_value;
    meta["loss_trace"] = rec.loss_trace;
    meta["step_trace"] = rec.step_trace;
    meta["l2_clamp_distortion"] = rec.l2_clamp_distortion;
    meta["has_first_broken"] = rec.first_broken.has_value();
    meta["has_loss_optimized"] = rec.loss_optimized.has_value();
    if (rec.first_broken) tensorfile::save(dir / (stem + "_first_broken.mt"), *rec.first_broken);
    if (rec.loss_optimized) tensorfile::save(dir / (stem + "_loss_optimized.mt"), *rec.loss_optimized);
    atomic_write(dir / (stem + ".json"), meta.dump(2) + "\n");
}

LoadedRecords load_records(const fs::path& dir) {
    LoadedRecords out;
    std::vector<fs::path> metas;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const fs::path& p = entry.path();
        if (p.extension() == ".json" && p.filename().string().rfind("rec_", 0) == 0)
            metas.push_back(p);
    }
    std::sort(metas.begin(), metas.end());
    bool first = true;
    for (const fs::path& mp : metas) {
        try {
            json meta = json::parse(read_file(mp));
            attacks::AdversarialRecord rec;
            rec.image_id = meta.at("image_id").get<uint64_t>();
            rec.label = meta.at("label").get<int32_t>();
            rec.first_broken_iter = meta.at("first_broken_iter").get<int>();
            rec.loss_optimized_iter = meta.at("loss_optimized_iter").get<int>();
            rec.loss_optimized_value = meta.at("loss_optimized_value").get<double>();
            rec.loss_trace = meta.at("loss_trace").get<std::vector<double>>();
            rec.step_trace = meta.at("step_trace").get<std::vector<double>>();
            rec.l2_clamp_distortion = meta.at("l2_clamp_distortion").get<bool>();
            std::string stem = rec_stem(rec.image_id);
            rec.original = tensorfile::load(dir / (stem + "_original.mt"));
            rec.final_state = tensorfile::load(dir / (stem + "_final.mt"));
            if (meta.at("has_first_broken").get<bool>())
                rec.first_broken = tensorfile::load(dir / (stem + "_first_broken.mt"));
            if (meta.at("has_loss_optimized").get<bool>())
                rec.loss_optimized = tensorfile::load(dir / (stem + "_loss_optimized.mt"));
            uint64_t h = meta.at("config_hash").get<uint64_t>();
            if (first) {
                out.config_hash = h;
                first = false;
            } else if (h != out.config_hash) {
                throw std::runtime_error("mixed config hashes in records directory");
            }
            out.records.push_back(std::move(rec));
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping partial record " << mp.filename().string() << ": "
                      << e.what() << "\n";
            out.skipped += 1;
        }
    }
    return out;
}

// ---- reports ---------------------------------------------------------------

std::string validation_rows_csv(const validation::ValidationReport& report) {
    std::ostringstream os;
    os << "image_id,policy,hd,trial,na_correct,aa_correct,correct_logit,top_incorrect_logit,p_value\n";
    for (const auto& r : report.rows) {
        os << r.image_id << "," << validation::policy_name(report.policy) << "," << r.hd << ","
           << r.trial << "," << (r.na_correct ? 1 : 0) << "," << (r.aa_correct ? 1 : 0) << ","
           << fmt_double(r.correct_logit) << "," << fmt_double(r.top_incorrect_logit) << ",";
        if (!std::isnan(r.p_value)) os << fmt_double(r.p_value);
        os << "\n";
    }
    return os.str();
}

std::string validation_report_json(const validation::ValidationReport& report) {
    json j;
    j["oa"] = report.oa;
    j["aggregation"] = validation::aggregation_name(report.aggregation);
    j["policy"] = validation::policy_name(report.policy);
    j["trials"] = report.trials;
    j["skipped_records"] = report.skipped_records;
    j["fallback_count"] = report.fallback_count;
    json hds = json::array();
    for (const auto& hr : report.per_hd) {
        json h;
        h["hd"] = hr.hd;
        h["na_mean"] = hr.na_mean;
        h["na_std"] = hr.na_std;
        h["aa_mean"] = hr.aa_mean;
        h["aa_std"] = hr.aa_std;
        h["trial_na"] = hr.trial_na;
        h["trial_aa"] = hr.trial_aa;
        h["prediction_stability"] = hr.prediction_stability;
        if (!std::isnan(hr.stable_fraction)) h["stable_fraction"] = hr.stable_fraction;
        hds.push_back(h);
    }
    j["per_hd"] = hds;
    return j.dump(2) + "\n";
}

std::string bench_rows_csv(const std::vector<bench::BenchRow>& rows) {
    std::ostringstream os;
    os << "method,purifier_kind,steps,peak_graph_bytes,wall_ms,grad_max_abs_diff_vs_naive,seed,out_of_budget\n";
    for (const auto& r : rows) {
        os << r.method << "," << r.purifier_kind << "," << r.steps << "," << r.peak_graph_bytes << ","
           << fmt_double(r.wall_ms) << ",";
        if (r.grad_max_abs_diff_vs_naive) os << fmt_double(*r.grad_max_abs_diff_vs_naive);
        os << "," << r.seed << "," << (r.out_of_budget ? 1 : 0) << "\n";
    }
    return os.str();
}

std::string bench_plot_json(const std::vector<bench::BenchRow>& rows) {
    json j;
    json arr = json::array();
    for (const auto& r : rows) {
        json row;
        row["method"] = r.method;
        row["purifier_kind"] = r.purifier_kind;
        row["steps"] = r.steps;
        row["peak_graph_bytes"] = r.peak_graph_bytes;
        row["wall_ms"] = r.wall_ms;
        if (r.grad_max_abs_diff_vs_naive) row["grad_max_abs_diff_vs_naive"] = *r.grad_max_abs_diff_vs_naive;
        row["seed"] = r.seed;
        row["out_of_budget"] = r.out_of_budget;
        arr.push_back(row);
    }
    j["rows"] = arr;
    return j.dump(2) + "\n";
}

}  // namespace purigrad::io
