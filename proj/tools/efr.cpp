// efr: command-line front end for generating data, training, solving and
// evaluating edge-based transformer routing policies.

#include "efr/baselines.hpp"
#include "efr/error.hpp"
#include "efr/inference.hpp"
#include "efr/training.hpp"
#include "efr/vrplib_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace efr;

namespace {

// Raised for bad configuration values or conflicting options; exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("EFR_SEED");
    if (!v || !*v) return std::nullopt;
    try {
        std::size_t pos = 0;
        const auto s = std::stoull(v, &pos);
        if (pos != std::string(v).size()) throw std::invalid_argument(v);
        return s;
    } catch (const std::exception&) {
        throw UsageError(std::string("EFR_SEED must be a non-negative integer, got '") + v + "'");
    }
}

// Model and training settings resolved from defaults, a config file and flags.
struct Settings {
    ModelConfig model;
    TrainConfig train;

    void apply(const std::string& key, const std::string& value) {
        try {
            if (key == "problem") {
                model.problem = parse_problem_kind(value);
                train.problem = model.problem;
            } else if (!apply_key_value(model, key, value) && !apply_key_value(train, key, value)) {
                throw UsageError("unknown config key '" + key + "'");
            }
        } catch (const UsageError&) {
            throw;
        } catch (const std::exception& e) {
            throw UsageError("bad value for '" + key + "': " + e.what());
        }
    }

    void apply_file(const std::string& path) {
        std::istringstream in(read_text_file(path));
        std::string line;
        int no = 0;
        while (std::getline(in, line)) {
            ++no;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw UsageError(path + ":" + std::to_string(no) + ": expected key = value");
            apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    json effective() const {
        json j;
        j["model"] = to_key_values(model);
        j["train"] = to_key_values(train);
        return j;
    }
};

// Options shared by `train` and `ablate`.
struct TrainArgs {
    std::string config;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flags;  // key -> value, filled by named flags
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string resume;
    std::string log;
};

void add_train_options(CLI::App* cmd, TrainArgs& a) {
    cmd->add_option("--config", a.config, "flat key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", a.sets, "override one config key (KEY=VALUE), repeatable");
    cmd->add_option("--seed", a.seed, "master seed (beats EFR_SEED and the config file)");
    cmd->add_option("--out", a.out, "checkpoint to write after every epoch")->required();
    cmd->add_option("--resume", a.resume, "continue from this checkpoint")->check(CLI::ExistingFile);
    cmd->add_option("--log", a.log, "JSON-lines training log (default: stdout)");
    // common keys get their own flags; everything else goes through --set
    static const std::vector<std::pair<std::string, std::string>> named = {
        {"--problem", "problem"},       {"--n", "n"},
        {"--epochs", "epochs"},         {"--instances-per-epoch", "instances_per_epoch"},
        {"--batch-size", "batch_size"}, {"--lr", "lr"},
        {"--distribution", "distribution"}, {"--input-variant", "variant"},
        {"--embed-dim", "embed_dim"},   {"--heads", "heads"},
        {"--ff-dim", "ff_dim"},         {"--k", "k"},
        {"--gradient-clip", "gradient_clip"},
    };
    for (const auto& [flag, key] : named) {
        cmd->add_option_function<std::string>(flag, [&a, key = key](const std::string& v) { a.flags[key] = v; },
                                              "config key '" + key + "'");
    }
}

Settings resolve(const TrainArgs& a, const std::optional<Settings>& base) {
    Settings s = base.value_or(Settings{});
    if (!a.config.empty()) s.apply_file(a.config);
    if (auto e = env_seed()) s.train.seed = *e;
    for (const auto& kv : a.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
        s.apply(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    for (const auto& [k, v] : a.flags) s.apply(k, v);
    if (a.seed) s.train.seed = *a.seed;
    return s;
}

class Log {
  public:
    explicit Log(const std::string& path) {
        if (!path.empty()) {
            file_.open(path, std::ios::app);
            if (!file_) throw IoError("cannot open log file '" + path + "'");
        }
    }
    void write(const json& j) {
        std::ostream& os = file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout;
        os << j.dump() << '\n';
        os.flush();
    }

  private:
    std::ofstream file_;
};

std::map<std::string, std::string> checkpoint_metadata(const TrainConfig& tc, int next_epoch) {
    std::map<std::string, std::string> meta;
    for (const auto& [k, v] : to_key_values(tc)) meta["train." + k] = v;
    meta["next_epoch"] = std::to_string(next_epoch);
    return meta;
}

// Trains per `a`, with `variant` applied to the model; returns the checkpoint path.
std::string run_training(const TrainArgs& a, std::optional<Ablation> variant) {
    Settings s;
    std::optional<Checkpoint<float>> ck;
    int next_epoch = 0;
    if (!a.resume.empty()) {
        ck = load_checkpoint<float>(a.resume);
        Settings base;
        base.model = ck->model;
        base.train.problem = ck->model.problem;
        for (const auto& [k, v] : ck->metadata)
            if (k.rfind("train.", 0) == 0) apply_key_value(base.train, k.substr(6), v);
        if (auto it = ck->metadata.find("next_epoch"); it != ck->metadata.end()) next_epoch = std::stoi(it->second);
        s = resolve(a, base);
        if (to_key_values(s.model) != to_key_values(ck->model))
            throw UsageError("model settings cannot change when resuming from a checkpoint");
    } else {
        s = resolve(a, std::nullopt);
    }
    try {
        if (variant) s.model = ablate(s.model, *variant);
        s.model.validate();
        s.train.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    if (ck && variant && s.model.ablation != ck->model.ablation)
        throw UsageError("the resumed checkpoint was trained with a different ablation");
    if (s.model.problem != s.train.problem) throw UsageError("model and training problem kinds differ");

    Log log(a.log);
    log.write({{"event", "config"}, {"settings", s.effective()}, {"resume", a.resume}, {"out", a.out}});
    ModelParams<float> params = ck ? std::move(ck->params) : init_params<float>(s.model, s.train.seed);
    Trainer<float> trainer(s.model, s.train, std::move(params));
    if (ck && ck->adam) trainer.adam = std::move(*ck->adam);
    for (int e = next_epoch; e < s.train.epochs; ++e) {
        const EpochStats st = trainer.train_epoch(e);
        save_checkpoint(a.out, trainer.model, trainer.params, checkpoint_metadata(s.train, e + 1), &trainer.adam);
        log.write({{"event", "epoch"},
                   {"epoch", st.epoch},
                   {"mean_length", st.mean_length},
                   {"mean_reward", st.mean_reward},
                   {"loss", st.loss},
                   {"lr", st.lr},
                   {"instances", st.instances},
                   {"seconds", st.seconds},
                   {"checkpoint", a.out}});
    }
    if (next_epoch >= s.train.epochs)
        save_checkpoint(a.out, trainer.model, trainer.params, checkpoint_metadata(s.train, next_epoch), &trainer.adam);
    return a.out;
}

// Instances from an efr-inst-1 file, a TSPLIB/CVRPLIB file or a directory of either.
std::vector<ProblemInstance> load_instances(const std::string& path) {
    auto load_file = [](const fs::path& p, std::vector<ProblemInstance>& out) {
        const std::string text = read_text_file(p.string());
        const auto first = text.find_first_not_of(" \t\r\n");
        if (first != std::string::npos && text[first] == '{') {
            auto v = instances_from_json(text);
            out.insert(out.end(), v.begin(), v.end());
            return;
        }
        auto [inst, meta] = parse_library(text);
        if (inst.id.empty()) inst.id = p.stem().string();
        out.push_back(std::move(inst));
    };
    std::vector<ProblemInstance> out;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const std::string ext = f.extension().string();
            if (ext == ".json" || ext == ".tsp" || ext == ".atsp" || ext == ".vrp") load_file(f, out);
        }
        if (out.empty()) throw DataError("no instance files found in '" + path + "'");
    } else {
        load_file(path, out);
    }
    return out;
}

std::map<std::string, double> load_references(const std::string& path) {
    std::map<std::string, double> out;
    try {
        const json j = json::parse(read_text_file(path));
        for (const auto& [k, v] : j.items()) out[k] = v.get<double>();
    } catch (const json::exception& e) {
        throw DataError("reference file '" + path + "' must be a JSON object of id -> length: " + e.what());
    }
    return out;
}

void print_row(const SolveReport& r) {
    std::printf("%-24s %-28s x%-4d %12.6f", r.instance_id.c_str(), r.method.c_str(), r.augmentations, r.length);
    if (r.gap) std::printf(" %12.6f %9.4f%%", *r.reference_length, *r.gap);
    std::printf(" %9.3fs %s\n", r.seconds, r.feasible ? "ok" : "INFEASIBLE");
}

struct EvalArgs {
    std::string checkpoint;
    std::string set;
    std::string reference = "exact";
    std::string references;
    int aug = 1;
    std::optional<std::uint64_t> seed;
    int workers = 1;
    std::string report;
    bool per_instance = false;
};

void add_eval_options(CLI::App* cmd, EvalArgs& a, bool need_checkpoint) {
    auto* c = cmd->add_option("--checkpoint", a.checkpoint, "trained model")->check(CLI::ExistingFile);
    if (need_checkpoint) c->required();
    cmd->add_option("--set", a.set, "instances: efr-inst-1 file, library file or directory");
    cmd->add_option("--reference", a.reference, "exact | two_opt | file")
        ->check(CLI::IsMember({"exact", "two_opt", "file"}));
    cmd->add_option("--references", a.references, "JSON object of instance id -> reference length");
    cmd->add_option("--aug", a.aug, "augmentations per instance")->check(CLI::PositiveNumber);
    cmd->add_option("--eval-seed", a.seed, "augmentation master seed (beats EFR_SEED)");
    cmd->add_option("--workers", a.workers, "solver threads")->check(CLI::PositiveNumber);
    cmd->add_option("--report", a.report, "append JSON-lines reports to this file");
    cmd->add_flag("--per-instance", a.per_instance, "print one row per instance");
}

int run_eval(const EvalArgs& a, const std::string& checkpoint) {
    if (a.set.empty()) throw UsageError("--set is required");
    Checkpoint<float> ck = load_checkpoint<float>(checkpoint);
    const std::vector<ProblemInstance> instances = load_instances(a.set);
    EvalOptions opt;
    opt.n_aug = a.aug;
    opt.seed = a.seed ? *a.seed : env_seed().value_or(0);
    opt.workers = a.workers;
    opt.reference = parse_reference_kind(a.reference);
    if (opt.reference == ReferenceKind::File) {
        if (a.references.empty()) throw UsageError("--reference file needs --references");
        opt.file_references = load_references(a.references);
    }
    try {
        check_augmentation(ck.model, a.aug);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    EvalReport rep = evaluate(ck.model, ck.params, instances, opt);
    std::map<std::string, std::string> config = to_key_values(ck.model);
    config["checkpoint"] = checkpoint;
    config["set"] = a.set;
    config["n_aug"] = std::to_string(opt.n_aug);
    config["seed"] = std::to_string(opt.seed);
    config["reference"] = a.reference;
    config["workers"] = std::to_string(opt.workers);
    for (auto& r : rep.instances) {
        r.config = config;
        if (!a.report.empty()) write_report(r, a.report);
        if (a.per_instance) print_row(r);
    }
    for (const auto& [k, v] : config) rep.aggregate.config.emplace(k, v);
    rep.aggregate.config["instances"] = std::to_string(instances.size());
    if (!a.report.empty()) write_report(rep.aggregate, a.report);
    std::printf("%-24s %-28s %-5s %12s %12s %10s %10s\n", "set", "method", "aug", "mean_len", "mean_ref",
                "mean_gap", "seconds");
    std::printf("%-24s %-28s x%-4d %12.6f %12.6f %9.4f%% %9.3fs\n", fs::path(a.set).filename().string().c_str(),
                rep.aggregate.method.c_str(), opt.n_aug, rep.aggregate.length, rep.mean_reference,
                rep.aggregate.gap.value_or(0.0), rep.aggregate.seconds);
    return rep.aggregate.feasible ? 0 : 2;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"efr: edge-based transformer policies for TSP, ATSP and CVRP"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "write random instances to an efr-inst-1 file");
    std::string g_kind = "tsp", g_dist = "uniform", g_out;
    int g_n = 20, g_count = 100;
    std::optional<std::uint64_t> g_seed;
    gen->add_option("--kind", g_kind, "tsp | cvrp | atsp")->check(CLI::IsMember({"tsp", "cvrp", "atsp"}));
    gen->add_option("--n", g_n, "nodes (customers for cvrp)")->check(CLI::Range(2, 100000));
    gen->add_option("--count", g_count, "number of instances")->check(CLI::NonNegativeNumber);
    gen->add_option("--distribution", g_dist, "uniform | explosion | grid | implosion");
    gen->add_option("--seed", g_seed, "master seed (beats EFR_SEED)");
    gen->add_option("--out", g_out, "output file")->required();

    // train
    auto* train = app.add_subcommand("train", "train a policy with REINFORCE and a shared baseline");
    TrainArgs t_args;
    add_train_options(train, t_args);

    // solve
    auto* solve = app.add_subcommand("solve", "solve instances with a trained policy");
    std::string s_ckpt, s_in, s_report;
    int s_aug = 1, s_workers = 1;
    std::optional<std::uint64_t> s_seed;
    solve->add_option("--checkpoint", s_ckpt, "trained model")->required()->check(CLI::ExistingFile);
    solve->add_option("--instances", s_in, "efr-inst-1 file, library file or directory")
        ->required()
        ->check(CLI::ExistingPath);
    solve->add_option("--aug", s_aug, "augmentations per instance")->check(CLI::PositiveNumber);
    solve->add_option("--seed", s_seed, "augmentation master seed (beats EFR_SEED)");
    solve->add_option("--workers", s_workers, "solver threads")->check(CLI::PositiveNumber);
    solve->add_option("--report", s_report, "append JSON-lines reports to this file");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a policy against reference solutions");
    EvalArgs e_args;
    add_eval_options(eval, e_args, true);

    // ablate
    auto* abl = app.add_subcommand("ablate", "train a variant with one component removed, then evaluate it");
    std::string a_variant;
    TrainArgs a_train;
    EvalArgs a_eval;
    abl->add_option("--variant", a_variant, "full | no_precoder | no_node_encoder | no_graph_encoder | no_gcn")
        ->required()
        ->check(CLI::IsMember({"full", "no_precoder", "no_node_encoder", "no_graph_encoder", "no_gcn"}));
    add_train_options(abl, a_train);
    abl->add_option("--eval-set", a_eval.set, "instances to evaluate after training");
    abl->add_option("--reference", a_eval.reference, "exact | two_opt | file")
        ->check(CLI::IsMember({"exact", "two_opt", "file"}));
    abl->add_option("--references", a_eval.references, "JSON object of instance id -> reference length");
    abl->add_option("--aug", a_eval.aug, "augmentations per instance")->check(CLI::PositiveNumber);
    abl->add_option("--workers", a_eval.workers, "solver threads")->check(CLI::PositiveNumber);
    abl->add_option("--report", a_eval.report, "append JSON-lines reports to this file");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
    std::string gc_kind = "tsp", gc_variant = "edge_input";
    std::uint64_t gc_seed = 1;
    int gc_seeds = 1;
    bool gc_verbose = false;
    gc->add_option("--kind", gc_kind, "tsp | cvrp | atsp")->check(CLI::IsMember({"tsp", "cvrp", "atsp"}));
    gc->add_option("--variant", gc_variant, "edge_input | node_input")
        ->check(CLI::IsMember({"edge_input", "node_input"}));
    gc->add_option("--seed", gc_seed, "first seed");
    gc->add_option("--seeds", gc_seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);
    gc->add_flag("--verbose", gc_verbose, "print every parameter array");

    // parse
    auto* parse = app.add_subcommand("parse", "convert a TSPLIB or CVRPLIB file to efr-inst-1");
    std::string p_in, p_out, p_tour;
    parse->add_option("--in", p_in, "library file")->required()->check(CLI::ExistingFile);
    parse->add_option("--out", p_out, "efr-inst-1 output file");
    parse->add_option("--tour", p_tour, "published tour or solution to score")->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        const ProblemKind kind = parse_problem_kind(g_kind);
        Distribution dist;
        try {
            dist = parse_distribution(g_dist);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        const std::uint64_t seed = g_seed ? *g_seed : env_seed().value_or(1);
        std::vector<ProblemInstance> out;
        out.reserve(static_cast<std::size_t>(g_count));
        for (int i = 0; i < g_count; ++i) {
            const std::uint64_t s = splitmix64(seed + static_cast<std::uint64_t>(i));
            ProblemInstance inst =
                kind == ProblemKind::ATSP ? generate_atsp_instance(g_n, s) : generate_instance(kind, g_n, dist, s);
            inst.id = g_kind + std::to_string(g_n) + "-" + std::to_string(seed) + "-" + std::to_string(i);
            out.push_back(std::move(inst));
        }
        write_instances(g_out, out);
        std::printf("wrote %d %s instances (n=%d, %s, seed %llu) to %s\n", g_count, g_kind.c_str(), g_n,
                    g_dist.c_str(), static_cast<unsigned long long>(seed), g_out.c_str());
        return 0;
    }
    if (train->parsed()) {
        run_training(t_args, std::nullopt);
        return 0;
    }
    if (solve->parsed()) {
        Checkpoint<float> ck = load_checkpoint<float>(s_ckpt);
        try {
            check_augmentation(ck.model, s_aug);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
        const std::uint64_t seed = s_seed ? *s_seed : env_seed().value_or(0);
        const std::vector<ProblemInstance> instances = load_instances(s_in);
        std::vector<SolveReport> reports = solve_all(ck.model, ck.params, instances, s_aug, seed, s_workers);
        std::map<std::string, std::string> config = to_key_values(ck.model);
        config["checkpoint"] = s_ckpt;
        config["n_aug"] = std::to_string(s_aug);
        config["seed"] = std::to_string(seed);
        config["workers"] = std::to_string(s_workers);
        bool feasible = true;
        for (std::size_t i = 0; i < reports.size(); ++i) {
            SolveReport& r = reports[i];
            r.config = config;
            if (auto it = instances[i].meta.find("scale"); it != instances[i].meta.end())
                r.config["file_units_length"] = std::to_string(r.length * std::stod(it->second));
            if (!s_report.empty()) write_report(r, s_report);
            print_row(r);
            feasible = feasible && r.feasible;
        }
        return feasible ? 0 : 2;
    }
    if (eval->parsed()) return run_eval(e_args, e_args.checkpoint);
    if (abl->parsed()) {
        const std::string ckpt = run_training(a_train, parse_ablation(a_variant));
        if (a_eval.set.empty()) return 0;
        return run_eval(a_eval, ckpt);
    }
    if (gc->parsed()) {
        const ModelConfig cfg = gradcheck_config(parse_problem_kind(gc_kind), parse_input_variant(gc_variant));
        double worst = 0.0;
        bool ok = true;
        for (int i = 0; i < gc_seeds; ++i) {
            const std::uint64_t seed = gc_seed + static_cast<std::uint64_t>(i);
            const GradcheckReport rep = gradcheck(cfg, seed);
            if (gc_verbose)
                for (const auto& a : rep.arrays)
                    std::printf("  %-32s size %4zu |g| %10.3e rel %10.3e coords %.4f\n", a.name.c_str(), a.size,
                                a.analytic_norm, a.relative_error, a.coordinate_pass);
            std::printf("seed %llu: max relative error %.3e, coordinates within tolerance %.2f%%\n",
                        static_cast<unsigned long long>(seed), rep.max_relative_error,
                        100.0 * rep.min_coordinate_pass);
            worst = std::max(worst, rep.max_relative_error);
            ok = ok && rep.passed();
        }
        std::printf("max relative error %.3e (tolerance %.0e): %s\n", worst, GradcheckOptions{}.tolerance,
                    ok ? "pass" : "FAIL");
        return ok ? 0 : 2;
    }
    if (parse->parsed()) {
        auto [inst, meta] = parse_library(read_text_file(p_in));
        if (inst.id.empty()) inst.id = fs::path(p_in).stem().string();
        std::printf("%s: %s, %d nodes, %s", inst.id.c_str(), std::string(to_string(inst.kind)).c_str(), inst.n,
                    std::string(to_string(meta.edge_weight_type)).c_str());
        if (inst.kind == ProblemKind::CVRP) std::printf(", capacity %d", inst.capacity);
        std::printf(", scale %.6g\n", meta.scale);
        if (!p_tour.empty()) {
            const LibrarySolution sol = parse_solution_text(read_text_file(p_tour), inst);
            std::printf("tour length %.6f (normalized), %.0f (library rounding)", solution_length(inst, sol.route),
                        library_length(inst, meta, sol.route));
            if (sol.cost) std::printf(", declared cost %.0f", *sol.cost);
            std::printf("\n");
        }
        if (!p_out.empty()) write_instances(p_out, {inst});
        return 0;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\nrun 'efr --help' for usage\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
