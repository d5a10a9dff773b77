#include "efr/baselines.hpp"
#include "efr/error.hpp"
#include "efr/instance.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace efr;

namespace {

ProblemInstance unit_square() {
    return instance_from_coords(ProblemKind::TSP, {{0, 0}, {1, 0}, {1, 1}, {0, 1}});
}

ProblemInstance small_atsp() {
    return instance_from_matrix(ProblemKind::ATSP, 3, {0, 1, 5, 5, 0, 1, 1, 5, 0});
}

} // namespace

TEST_CASE("generated instances satisfy the structural invariants") {
    for (auto kind : {ProblemKind::TSP, ProblemKind::CVRP, ProblemKind::ATSP}) {
        for (int n : {3, 7, 20}) {
            for (std::uint64_t seed = 0; seed < 10; ++seed) {
                const ProblemInstance inst = kind == ProblemKind::ATSP
                                                 ? generate_atsp_instance(n, seed)
                                                 : generate_instance(kind, n, Distribution::Uniform, seed);
                CHECK_NOTHROW(validate(inst));
                for (int i = 0; i < inst.n; ++i) {
                    CHECK(inst.d(i, i) == 0.0);
                    for (int j = 0; j < inst.n; ++j) {
                        CHECK(inst.d(i, j) >= 0.0);
                        if (kind != ProblemKind::ATSP) CHECK(inst.d(i, j) == inst.d(j, i));
                    }
                }
                if (kind == ProblemKind::CVRP) {
                    REQUIRE(inst.n == n + 1);
                    CHECK(inst.demands[0] == 0);
                    for (int i = 1; i < inst.n; ++i) {
                        CHECK(inst.demands[i] >= 1);
                        CHECK(inst.demands[i] <= 9);
                    }
                }
            }
        }
    }
}

TEST_CASE("generation is deterministic per seed") {
    for (auto dist : {Distribution::Uniform, Distribution::Explosion, Distribution::Grid, Distribution::Implosion}) {
        const auto a = generate_instance(ProblemKind::TSP, 30, dist, 42);
        const auto b = generate_instance(ProblemKind::TSP, 30, dist, 42);
        const auto c = generate_instance(ProblemKind::TSP, 30, dist, 43);
        CHECK(a.dist == b.dist);
        CHECK(a.dist != c.dist);
        for (const auto& p : a.coords) {
            CHECK(p[0] >= 0.0);
            CHECK(p[0] <= 1.0);
            CHECK(p[1] >= 0.0);
            CHECK(p[1] <= 1.0);
        }
    }
    CHECK(generate_atsp_instance(6, 5).dist == generate_atsp_instance(6, 5).dist);
}

TEST_CASE("distances match coordinates") {
    const auto inst = generate_instance(ProblemKind::TSP, 12, Distribution::Uniform, 3);
    for (int i = 0; i < inst.n; ++i)
        for (int j = 0; j < inst.n; ++j)
            CHECK(inst.d(i, j) == doctest::Approx(std::hypot(inst.coords[i][0] - inst.coords[j][0],
                                                             inst.coords[i][1] - inst.coords[j][1]))
                                      .epsilon(1e-15));
    CHECK(unit_square().d(0, 2) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("CVRP capacity convention") {
    CHECK(generate_instance(ProblemKind::CVRP, 20, Distribution::Uniform, 1).capacity == 30);
    CHECK(default_capacity(10) == 20);
    CHECK(default_capacity(20) == 30);
    CHECK(default_capacity(50) == 40);
    CHECK(default_capacity(100) == 50);
    // linear in between, rounded
    CHECK(default_capacity(35) == 35);
    CHECK(default_capacity(75) == 45);
}

TEST_CASE("unsupported generator combinations are rejected") {
    CHECK_THROWS_AS(generate_instance(ProblemKind::ATSP, 10, Distribution::Grid, 1), ConfigError);
    CHECK_THROWS_AS(parse_distribution("spiral"), ConfigError);
}

TEST_CASE("random ATSP matrices are asymmetric") {
    int asymmetric = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto inst = generate_atsp_instance(3, s);
        bool any = false;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) any = any || inst.d(i, j) != inst.d(j, i);
        asymmetric += any;
    }
    CHECK(asymmetric == 100);
}

TEST_CASE("knn sparsification") {
    SUBCASE("ties go to the lowest index") {
        auto inst = instance_from_coords(ProblemKind::TSP, {{0, 0}, {1, 0}, {2, 0}, {3, 0}});
        const SparseGraph g = knn_sparsify(inst, 1);
        CHECK(g.code(1, 0) == 1);
        CHECK(g.code(1, 2) == 0);
        CHECK(g.code(2, 1) == 1);
        CHECK(g.code(2, 3) == 0);
    }
    SUBCASE("row structure matches a brute-force oracle") {
        std::mt19937_64 rng(11);
        for (int trial = 0; trial < 50; ++trial) {
            const int n = 4 + trial % 9;
            const auto inst = trial % 2 ? generate_atsp_instance(n, rng()) :
                                          generate_instance(ProblemKind::TSP, n, Distribution::Uniform, rng());
            const int k = 1 + static_cast<int>(rng() % (n - 1));
            const SparseGraph g = knn_sparsify(inst, k);
            for (int i = 0; i < n; ++i) {
                std::vector<int> others;
                for (int j = 0; j < n; ++j)
                    if (j != i) others.push_back(j);
                std::stable_sort(others.begin(), others.end(),
                                 [&](int a, int b) { return inst.d(i, a) < inst.d(i, b); });
                std::vector<int> expected(n, 0);
                expected[i] = 2;
                for (int m = 0; m < k; ++m) expected[others[m]] = 1;
                for (int j = 0; j < n; ++j) CHECK(g.code(i, j) == expected[j]);
            }
        }
    }
    SUBCASE("k = n - 1 connects everything") {
        const auto inst = generate_instance(ProblemKind::TSP, 6, Distribution::Uniform, 2);
        const SparseGraph g = knn_sparsify(inst, 5);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) CHECK(g.code(i, j) == (i == j ? 2 : 1));
    }
    SUBCASE("out of range k") {
        const auto inst = generate_instance(ProblemKind::TSP, 6, Distribution::Uniform, 2);
        CHECK_THROWS_AS(knn_sparsify(inst, 0), ArgumentError);
        CHECK_THROWS_AS(knn_sparsify(inst, 6), ArgumentError);
    }
}

TEST_CASE("solution length") {
    const std::vector<int> square{0, 1, 2, 3};
    CHECK(solution_length(unit_square(), square) == doctest::Approx(4.0));
    CHECK(solution_length(small_atsp(), std::vector<int>{0, 1, 2}) == 3.0);
    CHECK(solution_length(small_atsp(), std::vector<int>{0, 2, 1}) == 15.0);
    CHECK(brute_force_tsp(small_atsp()).length == 3.0);

    SUBCASE("rotation and reversal") {
        const auto inst = generate_instance(ProblemKind::TSP, 9, Distribution::Uniform, 8);
        std::vector<int> tour(9);
        std::iota(tour.begin(), tour.end(), 0);
        std::shuffle(tour.begin(), tour.end(), std::mt19937_64(1));
        const double len = solution_length(inst, tour);
        auto rotated = tour;
        std::rotate(rotated.begin(), rotated.begin() + 4, rotated.end());
        CHECK(solution_length(inst, rotated) == doctest::Approx(len).epsilon(1e-14));
        auto reversed = tour;
        std::reverse(reversed.begin(), reversed.end());
        CHECK(solution_length(inst, reversed) == doctest::Approx(len).epsilon(1e-14));

        const auto atsp = generate_atsp_instance(9, 8);
        CHECK(solution_length(atsp, tour) != doctest::Approx(solution_length(atsp, reversed)));
    }
    SUBCASE("infeasible routes") {
        CHECK_THROWS_AS(solution_length(unit_square(), std::vector<int>{0, 1, 2}), FeasibilityError);
        CHECK_THROWS_AS(solution_length(unit_square(), std::vector<int>{0, 1, 1, 3}), FeasibilityError);
        CHECK_THROWS_AS(solution_length(unit_square(), std::vector<int>{0, 1, 2, 7}), FeasibilityError);
    }
    SUBCASE("CVRP routes") {
        ProblemInstance inst = instance_from_coords(ProblemKind::CVRP, {{0, 0}, {1, 0}, {0, 1}, {1, 1}});
        inst.demands = {0, 3, 3, 3};
        inst.capacity = 6;
        CHECK(solution_length(inst, std::vector<int>{0, 1, 3, 0, 2, 0}) == doctest::Approx(2.0 + std::sqrt(2.0) + 2.0));
        CHECK(check_route(inst, std::vector<int>{0, 1, 2, 3, 0}).has_value());     // over capacity
        CHECK(check_route(inst, std::vector<int>{0, 1, 0, 0, 2, 3, 0}).has_value());  // empty trip
        CHECK(check_route(inst, std::vector<int>{0, 1, 3, 0}).has_value());        // customer 2 missing
        CHECK(check_route(inst, std::vector<int>{1, 3, 0, 2, 0}).has_value());     // not starting at the depot
        // single customer: depot -> c -> depot
        ProblemInstance one = instance_from_coords(ProblemKind::CVRP, {{0, 0}, {0.3, 0.4}});
        one.demands = {0, 5};
        one.capacity = 10;
        CHECK(solution_length(one, std::vector<int>{0, 1, 0}) == doctest::Approx(1.0));
    }
}

TEST_CASE("optimality gap") {
    CHECK(optimality_gap(7.772, 7.763) == doctest::Approx(0.1159345).epsilon(1e-6));
    CHECK(optimality_gap(3.0, 3.0) == 0.0);
    CHECK(optimality_gap(6.116, 6.117) == doctest::Approx(-0.0163479).epsilon(1e-5));
    CHECK_THROWS_AS(optimality_gap(1.0, 0.0), ArgumentError);
    CHECK_THROWS_AS(optimality_gap(1.0, -2.0), ArgumentError);
}

TEST_CASE("splitmix64 spreads consecutive seeds") {
    CHECK(splitmix64(0) != splitmix64(1));
    CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
}
