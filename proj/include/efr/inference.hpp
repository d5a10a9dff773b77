#pragma once

/// @file inference.hpp
/// Augmented greedy solving and batch evaluation against reference solvers.

#include "efr/model.hpp"
#include "efr/vrplib_io.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace efr {

/// Throws ConfigError when `cfg` cannot produce `n_aug` distinct views of an
/// instance: one-hot reseeding needs the precoder, coordinate input allows
/// at most the 8 square symmetries, and the no_precoder ablation allows none.
void check_augmentation(const ModelConfig& cfg, int n_aug);

/// Augmentation `run` of an instance: run 0 is the canonical view.
ModelInput augmentation_view(const ModelConfig& cfg, const ProblemInstance& inst, int run, std::uint64_t seed);

struct AugmentedResult {
    SolveReport report;
    std::vector<double> run_best;  // best multi-start length of each run
    /// Best length over the first m runs, for m = 1..n_aug.
    std::vector<double> prefix_best() const;
};

/// Greedy multi-start rollouts over `n_aug` views; keeps the best route.
/// Each run is decoded on its own, so the first m runs of a larger n_aug
/// reproduce a call with n_aug = m exactly.
template <class T>
AugmentedResult augmented_solve(const ModelConfig& cfg, ModelParams<T>& params, const ProblemInstance& inst,
                                int n_aug, std::uint64_t seed);

/// augmented_solve over a set on up to `workers` threads; results keep the
/// input order and do not depend on the worker count.
template <class T>
std::vector<SolveReport> solve_all(const ModelConfig& cfg, ModelParams<T>& params,
                                   const std::vector<ProblemInstance>& instances, int n_aug, std::uint64_t seed,
                                   int workers = 1);

enum class ReferenceKind { Exact, TwoOpt, File };

std::string_view to_string(ReferenceKind r);
ReferenceKind parse_reference_kind(std::string_view text);

/// Reference length for one instance; exact needs n <= 16 (TSP/ATSP).
double reference_length(const ProblemInstance& inst, ReferenceKind kind);

struct EvalOptions {
    int n_aug = 1;
    std::uint64_t seed = 0;
    ReferenceKind reference = ReferenceKind::Exact;
    std::map<std::string, double> file_references;  // instance id -> length
    int workers = 1;
};

struct EvalReport {
    std::vector<SolveReport> instances;
    SolveReport aggregate;  // mean length, mean of per-instance gaps, total seconds
    double mean_reference = 0.0;
};

/// Solves every instance and compares with the chosen reference. Reported
/// seconds exclude reference solving. Results keep the input order.
template <class T>
EvalReport evaluate(const ModelConfig& cfg, ModelParams<T>& params, const std::vector<ProblemInstance>& instances,
                    const EvalOptions& opt);

/// Model config with one component removed (Ablation::Full leaves it as is).
ModelConfig ablate(const ModelConfig& cfg, Ablation variant);

/// Method label used in reports, e.g. "eformer-edge" or "eformer-edge/no_gcn".
std::string method_name(const ModelConfig& cfg);

} // namespace efr
