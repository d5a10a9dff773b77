#include "efr/baselines.hpp"
#include "efr/error.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace efr;

namespace {

// Minimum over every permutation of the non-start nodes.
double exhaustive(const ProblemInstance& inst) {
    std::vector<int> rest(inst.n - 1);
    std::iota(rest.begin(), rest.end(), 1);
    double best = 1e300;
    do {
        double len = inst.d(0, rest.front()) + inst.d(rest.back(), 0);
        for (std::size_t i = 0; i + 1 < rest.size(); ++i) len += inst.d(rest[i], rest[i + 1]);
        best = std::min(best, len);
    } while (std::next_permutation(rest.begin(), rest.end()));
    return best;
}

} // namespace

TEST_CASE("held-karp matches exhaustive search") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 60; ++trial) {
        const int n = 4 + trial % 5;
        const auto inst = trial % 2 ? generate_atsp_instance(n, rng())
                                    : generate_instance(ProblemKind::TSP, n, Distribution::Uniform, rng());
        const Solution s = held_karp(inst);
        CHECK(s.route.front() == 0);
        CHECK(!check_route(inst, s.route).has_value());
        CHECK(s.length == doctest::Approx(exhaustive(inst)).epsilon(1e-12));
        CHECK(brute_force_tsp(inst).length == doctest::Approx(s.length).epsilon(1e-12));
        CHECK(solution_length(inst, s.route) == doctest::Approx(s.length).epsilon(1e-12));
    }
}

TEST_CASE("exact tours lower-bound the heuristics") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto inst = generate_instance(ProblemKind::TSP, 12, Distribution::Uniform, seed);
        const double opt = held_karp(inst).length;
        const Solution nn = nearest_neighbor(inst);
        CHECK(!check_route(inst, nn.route).has_value());
        CHECK(nn.length >= opt - 1e-12);
        for (auto rule : {InsertionRule::Nearest, InsertionRule::Furthest}) {
            const Solution ins = insertion(inst, rule);
            CHECK(!check_route(inst, ins.route).has_value());
            CHECK(ins.length >= opt - 1e-12);
        }
        const Solution improved = two_opt(inst, nn);
        CHECK(improved.length <= nn.length + 1e-12);
        CHECK(improved.length >= opt - 1e-12);
        CHECK(solution_length(inst, improved.route) == doctest::Approx(improved.length));
    }
}

TEST_CASE("reversal invariance on symmetric instances") {
    const auto inst = generate_instance(ProblemKind::TSP, 10, Distribution::Uniform, 4);
    const double opt = held_karp(inst).length;
    // reversing the coordinates order changes the labels but not the optimum
    std::vector<Point> rev(inst.coords.rbegin(), inst.coords.rend());
    const auto mirrored = instance_from_coords(ProblemKind::TSP, rev);
    CHECK(held_karp(mirrored).length == doctest::Approx(opt).epsilon(1e-12));
}

TEST_CASE("nearest neighbour breaks ties toward the lowest index") {
    const auto inst = instance_from_coords(ProblemKind::TSP, {{0.5, 0.5}, {0.6, 0.5}, {0.4, 0.5}, {0.5, 0.9}});
    const Solution s = nearest_neighbor(inst);
    REQUIRE(s.route.size() == 4);
    CHECK(s.route[0] == 0);
    CHECK(s.route[1] == 1);
}

TEST_CASE("solver limits") {
    CHECK_THROWS_AS(held_karp(generate_instance(ProblemKind::TSP, kHeldKarpMaxNodes + 1, Distribution::Uniform, 1)),
                    CapacityError);
    CHECK_THROWS_AS(held_karp(generate_instance(ProblemKind::CVRP, 5, Distribution::Uniform, 1)), UnsupportedError);
    CHECK_NOTHROW(held_karp(generate_instance(ProblemKind::TSP, 3, Distribution::Uniform, 1)));
}

TEST_CASE("CVRP greedy reference is feasible") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto inst = generate_instance(ProblemKind::CVRP, 20, Distribution::Uniform, seed);
        const Solution s = cvrp_greedy_reference(inst);
        CHECK(!check_route(inst, s.route).has_value());
        CHECK(solution_length(inst, s.route) == doctest::Approx(s.length));
        const Solution improved = two_opt(inst, s);
        CHECK(improved.length <= s.length + 1e-12);
    }
}
