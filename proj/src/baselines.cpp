#include "efr/baselines.hpp"

#include "efr/error.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace efr {

namespace {

void require_tour_kind(const ProblemInstance& inst, const char* what) {
    if (inst.kind == ProblemKind::CVRP)
        throw UnsupportedError(std::string(what) + " handles TSP and ATSP instances only");
}

// 2-opt on route[lo..hi] where route[lo-1] and route[hi+1] (cyclically for a
// closed tour) are fixed neighbours. Reverses segments while improving.
void two_opt_segment(const ProblemInstance& inst, std::vector<int>& tour) {
    const int m = static_cast<int>(tour.size());
    if (m < 4) return;
    bool improved = true;
    while (improved) {
        improved = false;
        for (int i = 0; i < m - 1 && !improved; ++i) {
            for (int j = i + 2; j < m && !improved; ++j) {
                if (i == 0 && j == m - 1) continue;
                const int a = tour[i], b = tour[i + 1], c = tour[j], d = tour[(j + 1) % m];
                const double delta = inst.d(a, c) + inst.d(b, d) - inst.d(a, b) - inst.d(c, d);
                if (delta < -1e-12) {
                    std::reverse(tour.begin() + i + 1, tour.begin() + j + 1);
                    improved = true;
                }
            }
        }
    }
}

} // namespace

Solution held_karp(const ProblemInstance& inst) {
    require_tour_kind(inst, "held_karp");
    const int n = inst.n;
    if (n > kHeldKarpMaxNodes)
        throw CapacityError("held_karp refuses n=" + std::to_string(n) + " (limit " +
                            std::to_string(kHeldKarpMaxNodes) + ")");
    if (n <= 3) {
        std::vector<int> r(n);
        std::iota(r.begin(), r.end(), 0);
        if (n == 3 && inst.d(0, 2) + inst.d(2, 1) + inst.d(1, 0) < inst.d(0, 1) + inst.d(1, 2) + inst.d(2, 0))
            r = {0, 2, 1};
        return make_solution(inst, r);
    }
    // dp[mask][j]: shortest path from 0 through the cities in mask (bits of 1..n-1), ending at j
    const int m = n - 1;
    const std::size_t subsets = std::size_t{1} << m;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dp(subsets * m, inf);
    std::vector<std::int8_t> parent(subsets * m, -1);
    for (int j = 0; j < m; ++j) dp[(std::size_t{1} << j) * m + j] = inst.d(0, j + 1);
    for (std::size_t mask = 1; mask < subsets; ++mask) {
        for (int j = 0; j < m; ++j) {
            if (!(mask >> j & 1)) continue;
            const double cur = dp[mask * m + j];
            if (cur == inf) continue;
            for (int k = 0; k < m; ++k) {
                if (mask >> k & 1) continue;
                const std::size_t next = mask | (std::size_t{1} << k);
                const double cand = cur + inst.d(j + 1, k + 1);
                if (cand < dp[next * m + k]) {
                    dp[next * m + k] = cand;
                    parent[next * m + k] = static_cast<std::int8_t>(j);
                }
            }
        }
    }
    const std::size_t full = subsets - 1;
    int last = 0;
    double best = inf;
    for (int j = 0; j < m; ++j) {
        const double c = dp[full * m + j] + inst.d(j + 1, 0);
        if (c < best) {
            best = c;
            last = j;
        }
    }
    std::vector<int> rev;
    std::size_t mask = full;
    for (int j = last; j >= 0;) {
        rev.push_back(j + 1);
        const int p = parent[mask * m + j];
        mask &= ~(std::size_t{1} << j);
        j = p;
    }
    std::vector<int> route{0};
    route.insert(route.end(), rev.rbegin(), rev.rend());
    return make_solution(inst, route);
}

Solution brute_force_tsp(const ProblemInstance& inst) {
    require_tour_kind(inst, "brute_force_tsp");
    if (inst.n > 10) throw CapacityError("brute force is limited to 10 nodes");
    std::vector<int> perm(inst.n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best = perm;
    double best_len = route_length_unchecked(inst, perm);
    while (std::next_permutation(perm.begin() + 1, perm.end())) {
        const double len = route_length_unchecked(inst, perm);
        if (len < best_len) {
            best_len = len;
            best = perm;
        }
    }
    return make_solution(inst, best);
}

Solution nearest_neighbor(const ProblemInstance& inst, int start) {
    require_tour_kind(inst, "nearest_neighbor");
    if (start < 0 || start >= inst.n) throw ArgumentError("start node out of range");
    std::vector<char> seen(inst.n, 0);
    std::vector<int> route{start};
    seen[start] = 1;
    int cur = start;
    for (int step = 1; step < inst.n; ++step) {
        int best = -1;
        for (int j = 0; j < inst.n; ++j)
            if (!seen[j] && (best < 0 || inst.d(cur, j) < inst.d(cur, best))) best = j;
        route.push_back(best);
        seen[best] = 1;
        cur = best;
    }
    return make_solution(inst, route);
}

Solution insertion(const ProblemInstance& inst, InsertionRule rule) {
    require_tour_kind(inst, "insertion");
    const int n = inst.n;
    std::vector<int> tour{0};
    std::vector<char> in(n, 0);
    in[0] = 1;
    // distance from each outside city to the nearest tour city, in both directions
    std::vector<double> near(n);
    for (int j = 0; j < n; ++j) near[j] = std::min(inst.d(0, j), inst.d(j, 0));
    for (int added = 1; added < n; ++added) {
        int pick = -1;
        for (int j = 0; j < n; ++j) {
            if (in[j]) continue;
            if (pick < 0) pick = j;
            else if (rule == InsertionRule::Nearest ? near[j] < near[pick] : near[j] > near[pick]) pick = j;
        }
        int pos = 0;
        double best = std::numeric_limits<double>::infinity();
        const int m = static_cast<int>(tour.size());
        for (int i = 0; i < m; ++i) {
            const int a = tour[i], b = tour[(i + 1) % m];
            const double cost = m == 1 ? inst.d(a, pick) + inst.d(pick, a)
                                       : inst.d(a, pick) + inst.d(pick, b) - inst.d(a, b);
            if (cost < best) {
                best = cost;
                pos = i + 1;
            }
        }
        tour.insert(tour.begin() + pos, pick);
        in[pick] = 1;
        for (int j = 0; j < n; ++j)
            if (!in[j]) near[j] = std::min({near[j], inst.d(pick, j), inst.d(j, pick)});
    }
    return make_solution(inst, tour);
}

Solution two_opt(const ProblemInstance& inst, const Solution& start) {
    if (!inst.symmetric()) throw UnsupportedError("2-opt needs a symmetric instance");
    if (auto err = check_route(inst, start.route)) throw FeasibilityError(*err);
    if (inst.kind != ProblemKind::CVRP) {
        std::vector<int> tour = start.route;
        two_opt_segment(inst, tour);
        return make_solution(inst, tour);
    }
    std::vector<int> out{0};
    std::vector<int> seg;
    for (std::size_t i = 1; i < start.route.size(); ++i) {
        const int v = start.route[i];
        if (v != 0) {
            seg.push_back(v);
            continue;
        }
        std::vector<int> closed{0};
        closed.insert(closed.end(), seg.begin(), seg.end());
        two_opt_segment(inst, closed);
        // rotate so the depot leads, then drop it
        auto it = std::find(closed.begin(), closed.end(), 0);
        std::rotate(closed.begin(), it, closed.end());
        out.insert(out.end(), closed.begin() + 1, closed.end());
        out.push_back(0);
        seg.clear();
    }
    return make_solution(inst, out);
}

Solution cvrp_greedy_reference(const ProblemInstance& inst) {
    if (inst.kind != ProblemKind::CVRP) throw UnsupportedError("cvrp_greedy_reference needs a CVRP instance");
    const int n = inst.n;
    std::vector<char> served(n, 0);
    served[0] = 1;
    int left = n - 1;
    std::vector<int> route{0};
    int cur = 0;
    int load = 0;
    while (left > 0) {
        int best = -1;
        for (int j = 1; j < n; ++j) {
            if (served[j] || load + inst.demands[j] > inst.capacity) continue;
            if (best < 0 || inst.d(cur, j) < inst.d(cur, best)) best = j;
        }
        if (best < 0) {
            if (cur == 0) throw FeasibilityError("a customer demand exceeds the vehicle capacity");
            route.push_back(0);
            cur = 0;
            load = 0;
            continue;
        }
        route.push_back(best);
        served[best] = 1;
        load += inst.demands[best];
        cur = best;
        --left;
    }
    route.push_back(0);
    Solution s = make_solution(inst, route);
    return two_opt(inst, s);
}

} // namespace efr
