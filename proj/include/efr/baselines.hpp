#pragma once

/// @file baselines.hpp
/// Exact and heuristic reference solvers.

#include "efr/instance.hpp"

namespace efr {

/// Largest instance the subset dynamic program accepts.
inline constexpr int kHeldKarpMaxNodes = 16;

/// Exact TSP/ATSP tour by dynamic programming over subsets. Route starts at 0.
/// Throws CapacityError above kHeldKarpMaxNodes, UnsupportedError for CVRP.
Solution held_karp(const ProblemInstance& inst);

/// Minimum over all (n-1)! tours that start at node 0. Testing oracle for n <= 10.
Solution brute_force_tsp(const ProblemInstance& inst);

/// Greedy closest-unvisited construction; ties go to the lowest index.
Solution nearest_neighbor(const ProblemInstance& inst, int start = 0);

enum class InsertionRule { Nearest, Furthest };

/// Classic insertion: grow a cycle from node 0, picking the next city by
/// the rule and placing it at the cheapest position. Directed costs for ATSP.
Solution insertion(const ProblemInstance& inst, InsertionRule rule);

/// First-improvement 2-opt on a symmetric instance. For CVRP every route
/// segment between depot visits is improved independently.
Solution two_opt(const ProblemInstance& inst, const Solution& start);

/// Nearest feasible customer sweep with depot returns when nothing fits,
/// followed by 2-opt inside each route.
Solution cvrp_greedy_reference(const ProblemInstance& inst);

} // namespace efr
