#include "efr/inference.hpp"

#include "efr/baselines.hpp"
#include "efr/error.hpp"

#include <chrono>
#include <functional>
#include <limits>
#include <thread>

namespace efr {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Runs fn(i) for i in [0, count) on up to `workers` threads, striding the
// indices; the first exception is rethrown after all threads finish.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn) {
    const int w = std::max(1, std::min<int>(workers, static_cast<int>(count)));
    if (w == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(w);
    for (int t = 0; t < w; ++t)
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = static_cast<std::size_t>(t); i < count; i += w) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace

void check_augmentation(const ModelConfig& cfg, int n_aug) {
    if (n_aug < 1) throw ConfigError("n_aug must be at least 1");
    if (cfg.uses_precoder()) return;
    if (cfg.ablation == Ablation::NoPrecoder && n_aug > 1)
        throw ConfigError("without the precoder no additional instance augmentation is available (n_aug must be 1)");
    if (n_aug > 8) throw ConfigError("coordinate input supports at most 8 symmetry augmentations");
}

ModelInput augmentation_view(const ModelConfig& cfg, const ProblemInstance& inst, int run, std::uint64_t seed) {
    ModelInput mi;
    mi.instance = &inst;
    if (cfg.uses_precoder()) {
        const std::uint64_t s = run == 0 ? 0 : splitmix64(seed * 0x100000001b3ULL + static_cast<std::uint64_t>(run));
        mi.onehot = sample_onehot_assignment(inst.n, cfg.onehot_pool, s);
    } else {
        mi.dihedral = run;
    }
    return mi;
}

std::vector<double> AugmentedResult::prefix_best() const {
    std::vector<double> out;
    double best = std::numeric_limits<double>::infinity();
    for (double v : run_best) {
        best = std::min(best, v);
        out.push_back(best);
    }
    return out;
}

template <class T>
AugmentedResult augmented_solve(const ModelConfig& cfg, ModelParams<T>& params, const ProblemInstance& inst,
                                int n_aug, std::uint64_t seed) {
    check_augmentation(cfg, n_aug);
    const auto t0 = std::chrono::steady_clock::now();
    Policy<T> policy(cfg, params);
    AugmentedResult res;
    res.report.instance_id = inst.id;
    res.report.method = method_name(cfg);
    res.report.augmentations = n_aug;
    double best = std::numeric_limits<double>::infinity();
    for (int run = 0; run < n_aug; ++run) {
        const ModelInput mi = augmentation_view(cfg, inst, run, seed);
        const std::vector<ModelInput> batch{mi};
        const EncoderInputs in = make_encoder_inputs(batch, cfg);
        ad::Tape<T> tape(false);
        RolloutOptions<T> opt;
        opt.mode = DecodeMode::Greedy;
        const RolloutBatch<T> rb = policy.rollout(tape, in, opt);
        double run_best = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < rb.routes.size(); ++r) {
            const double len = rb.lengths[r];
            if (len < run_best) run_best = len;
            if (len < best) {
                best = len;
                res.report.route = rb.routes[r];
            }
        }
        res.run_best.push_back(run_best);
    }
    res.report.length = best;
    res.report.feasible = !check_route(inst, res.report.route).has_value();
    res.report.seconds = seconds_since(t0);
    return res;
}

std::string_view to_string(ReferenceKind r) {
    switch (r) {
    case ReferenceKind::Exact: return "exact";
    case ReferenceKind::TwoOpt: return "two_opt";
    case ReferenceKind::File: return "file";
    }
    return "?";
}

ReferenceKind parse_reference_kind(std::string_view text) {
    if (text == "exact") return ReferenceKind::Exact;
    if (text == "two_opt") return ReferenceKind::TwoOpt;
    if (text == "file") return ReferenceKind::File;
    throw ConfigError("unknown reference '" + std::string(text) + "'");
}

double reference_length(const ProblemInstance& inst, ReferenceKind kind) {
    switch (kind) {
    case ReferenceKind::Exact:
        if (inst.kind == ProblemKind::CVRP) throw ConfigError("no exact reference solver for CVRP");
        if (inst.n > kHeldKarpMaxNodes)
            throw ConfigError("exact reference needs n <= " + std::to_string(kHeldKarpMaxNodes));
        return held_karp(inst).length;
    case ReferenceKind::TwoOpt:
        if (inst.kind == ProblemKind::CVRP) return cvrp_greedy_reference(inst).length;
        return two_opt(inst, nearest_neighbor(inst, 0)).length;
    case ReferenceKind::File: break;
    }
    throw ArgumentError("file references are looked up by instance id");
}

template <class T>
std::vector<SolveReport> solve_all(const ModelConfig& cfg, ModelParams<T>& params,
                                   const std::vector<ProblemInstance>& instances, int n_aug, std::uint64_t seed,
                                   int workers) {
    check_augmentation(cfg, n_aug);
    std::vector<SolveReport> out(instances.size());
    parallel_for(instances.size(), workers,
                 [&](std::size_t i) { out[i] = augmented_solve(cfg, params, instances[i], n_aug, seed).report; });
    return out;
}

template <class T>
EvalReport evaluate(const ModelConfig& cfg, ModelParams<T>& params, const std::vector<ProblemInstance>& instances,
                    const EvalOptions& opt) {
    check_augmentation(cfg, opt.n_aug);
    EvalReport rep;
    rep.aggregate.method = method_name(cfg);
    rep.aggregate.instance_id = "aggregate";
    rep.aggregate.augmentations = opt.n_aug;
    if (instances.empty()) return rep;

    if (opt.reference == ReferenceKind::File) {
        std::string missing;
        for (const auto& inst : instances)
            if (!opt.file_references.count(inst.id)) missing += (missing.empty() ? "" : ", ") + inst.id;
        if (!missing.empty()) throw DataError("no reference length for instance(s): " + missing);
    } else if (opt.reference == ReferenceKind::Exact) {
        for (const auto& inst : instances) {
            if (inst.kind == ProblemKind::CVRP) throw ConfigError("no exact reference solver for CVRP");
            if (inst.n > kHeldKarpMaxNodes)
                throw ConfigError("exact reference needs every instance to have n <= " +
                                  std::to_string(kHeldKarpMaxNodes));
        }
    }

    rep.instances = solve_all(cfg, params, instances, opt.n_aug, opt.seed, opt.workers);
    parallel_for(instances.size(), opt.workers, [&](std::size_t i) {
        const ProblemInstance& inst = instances[i];
        const double ref = opt.reference == ReferenceKind::File ? opt.file_references.at(inst.id)
                                                                : reference_length(inst, opt.reference);
        rep.instances[i].reference_length = ref;
        rep.instances[i].gap = optimality_gap(rep.instances[i].length, ref);
    });

    double len = 0.0, gap = 0.0, ref = 0.0, secs = 0.0;
    bool feasible = true;
    for (const auto& r : rep.instances) {
        len += r.length;
        gap += *r.gap;
        ref += *r.reference_length;
        secs += r.seconds;
        feasible = feasible && r.feasible;
    }
    const double m = static_cast<double>(rep.instances.size());
    rep.aggregate.length = len / m;
    rep.aggregate.gap = gap / m;
    rep.aggregate.reference_length = ref / m;
    rep.aggregate.seconds = secs;
    rep.aggregate.feasible = feasible;
    rep.aggregate.config["gap_aggregation"] = "mean of per-instance gaps";
    rep.aggregate.config["reference"] = std::string(to_string(opt.reference));
    rep.mean_reference = ref / m;
    return rep;
}

ModelConfig ablate(const ModelConfig& cfg, Ablation variant) {
    ModelConfig out = cfg;
    if (variant == Ablation::Full) return out;
    if (cfg.ablation != Ablation::Full && cfg.ablation != variant)
        throw ConfigError("config already ablates " + std::string(to_string(cfg.ablation)));
    if (variant == Ablation::NoPrecoder) {
        if (cfg.variant == InputVariant::NodeInput)
            throw ConfigError("node_input has no precoder to remove");
        if (cfg.problem == ProblemKind::ATSP)
            throw ConfigError("no_precoder needs coordinate features, which ATSP lacks");
    }
    out.ablation = variant;
    out.validate();
    return out;
}

std::string method_name(const ModelConfig& cfg) {
    std::string m = cfg.variant == InputVariant::EdgeInput ? "eformer-edge" : "eformer-node";
    if (cfg.ablation != Ablation::Full) m += "/" + std::string(to_string(cfg.ablation));
    return m;
}

template AugmentedResult augmented_solve<float>(const ModelConfig&, ModelParams<float>&, const ProblemInstance&, int,
                                                std::uint64_t);
template AugmentedResult augmented_solve<double>(const ModelConfig&, ModelParams<double>&, const ProblemInstance&,
                                                 int, std::uint64_t);
template std::vector<SolveReport> solve_all<float>(const ModelConfig&, ModelParams<float>&,
                                                  const std::vector<ProblemInstance>&, int, std::uint64_t, int);
template std::vector<SolveReport> solve_all<double>(const ModelConfig&, ModelParams<double>&,
                                                   const std::vector<ProblemInstance>&, int, std::uint64_t, int);
template EvalReport evaluate<float>(const ModelConfig&, ModelParams<float>&, const std::vector<ProblemInstance>&,
                                    const EvalOptions&);
template EvalReport evaluate<double>(const ModelConfig&, ModelParams<double>&, const std::vector<ProblemInstance>&,
                                     const EvalOptions&);

} // namespace efr
