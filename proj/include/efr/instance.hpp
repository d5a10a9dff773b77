#pragma once

/// @file instance.hpp
/// Routing instances (TSP, CVRP, ATSP), synthetic generators, k-nn
/// sparsification and solution scoring.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace efr {

enum class ProblemKind { TSP, CVRP, ATSP };
enum class Distribution { Uniform, Explosion, Grid, Implosion };

std::string_view to_string(ProblemKind kind);
std::string_view to_string(Distribution dist);
ProblemKind parse_problem_kind(std::string_view text);
Distribution parse_distribution(std::string_view text);

using Point = std::array<double, 2>;

/// One routing instance. Node 0 is the depot for CVRP.
struct ProblemInstance {
    ProblemKind kind = ProblemKind::TSP;
    int n = 0;
    std::vector<Point> coords;  // empty for pure-edge input
    std::vector<double> dist;   // row-major n*n
    std::vector<int> demands;   // CVRP only, demands[0] == 0
    int capacity = 0;           // CVRP only
    std::uint64_t seed = 0;
    std::string id;
    std::map<std::string, std::string> meta;

    double d(int i, int j) const { return dist[static_cast<std::size_t>(i) * n + j]; }
    double& d(int i, int j) { return dist[static_cast<std::size_t>(i) * n + j]; }
    bool has_coords() const { return !coords.empty(); }
    bool symmetric() const { return kind != ProblemKind::ATSP; }
    int customers() const { return kind == ProblemKind::CVRP ? n - 1 : n; }
};

/// Throws ArgumentError naming the first broken invariant.
void validate(const ProblemInstance& inst);

/// Fills `inst.dist` with pairwise Euclidean distances of `inst.coords`.
void compute_euclidean(ProblemInstance& inst);

/// Vehicle capacity convention: 20/30/40/50 at 10/20/50/100 customers,
/// piecewise-linear (rounded) in between, clamped below 10 customers.
int default_capacity(int customers);

/// Synthetic instance. For CVRP `n` counts customers, so the instance holds
/// n + 1 nodes. ATSP is only available with the uniform distribution and
/// delegates to generate_atsp_instance.
ProblemInstance generate_instance(ProblemKind kind, int n, Distribution distribution,
                                  std::uint64_t seed);

/// Random integer matrix closed under the triangle inequality, scaled to [0,1].
ProblemInstance generate_atsp_instance(int n, std::uint64_t seed);

/// Instance from an explicit matrix (no coordinates).
ProblemInstance instance_from_matrix(ProblemKind kind, int n, std::vector<double> dist);

/// Instance from coordinates; distances are Euclidean.
ProblemInstance instance_from_coords(ProblemKind kind, std::vector<Point> coords);

struct SparseGraph {
    int n = 0;
    int k = 0;
    std::vector<std::uint8_t> adj_code;  // row-major n*n in {0,1,2}
    std::vector<double> edge_weight;     // copy of dist

    int code(int i, int j) const { return adj_code[static_cast<std::size_t>(i) * n + j]; }
};

/// Marks the k smallest off-diagonal entries of each row as 1 (ties to the
/// lowest index) and the diagonal as 2. Rows are independent, so the result
/// need not be symmetric.
SparseGraph knn_sparsify(const ProblemInstance& inst, int k);

struct Solution {
    std::vector<int> route;
    double length = 0.0;
    bool feasible = false;
};

/// First violated routing constraint, or nullopt when `route` is feasible.
/// TSP/ATSP routes are permutations (closing arc implied); CVRP routes start
/// and end at the depot.
std::optional<std::string> check_route(const ProblemInstance& inst, std::span<const int> route);

/// Total traversed distance. Throws FeasibilityError on an infeasible route.
double solution_length(const ProblemInstance& inst, std::span<const int> route);

/// Length of a route without feasibility checks (indices must be valid).
double route_length_unchecked(const ProblemInstance& inst, std::span<const int> route);

Solution make_solution(const ProblemInstance& inst, std::vector<int> route);

/// SplitMix64 finalizer, used to derive independent seeds from a master seed.
std::uint64_t splitmix64(std::uint64_t x);

/// 100 * (length - reference) / reference, in percent.
double optimality_gap(double length, double reference_length);

} // namespace efr
