#include "efr/instance.hpp"

#include "efr/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace efr {

namespace {

constexpr double kMutationRadius = 0.3;
constexpr double kImplosionFactor = 0.5;
constexpr double kGridJitter = 0.01;
constexpr int kAtspIntMax = 1000 * 1000;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::vector<Point> uniform_points(int count, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Point> pts(count);
    for (auto& p : pts) {
        p[0] = u(rng);
        p[1] = u(rng);
    }
    return pts;
}

std::vector<Point> grid_points(int count, std::mt19937_64& rng) {
    const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
    std::vector<int> cells(static_cast<std::size_t>(side) * side);
    std::iota(cells.begin(), cells.end(), 0);
    // partial Fisher-Yates: first `count` cells are a uniform sample without replacement
    for (int i = 0; i < count; ++i) {
        std::uniform_int_distribution<int> pick(i, static_cast<int>(cells.size()) - 1);
        std::swap(cells[i], cells[pick(rng)]);
    }
    std::uniform_real_distribution<double> jitter(-kGridJitter, kGridJitter);
    std::vector<Point> pts(count);
    for (int i = 0; i < count; ++i) {
        const int cx = cells[i] % side;
        const int cy = cells[i] / side;
        pts[i][0] = clamp01((cx + 0.5) / side + jitter(rng));
        pts[i][1] = clamp01((cy + 0.5) / side + jitter(rng));
    }
    return pts;
}

// Mutates points inside a random disc; `explode` pushes them out past the rim,
// otherwise they are contracted toward the centre.
void mutate_disc(std::vector<Point>& pts, bool explode, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Point c{u(rng), u(rng)};
    for (auto& p : pts) {
        const double dx = p[0] - c[0];
        const double dy = p[1] - c[1];
        const double r = std::hypot(dx, dy);
        if (r >= kMutationRadius) continue;
        if (explode) {
            if (r == 0.0) continue;
            const double scale = (kMutationRadius + r) / r;
            p[0] = clamp01(c[0] + dx * scale);
            p[1] = clamp01(c[1] + dy * scale);
        } else {
            p[0] = c[0] + dx * kImplosionFactor;
            p[1] = c[1] + dy * kImplosionFactor;
        }
    }
}

} // namespace

std::string_view to_string(ProblemKind kind) {
    switch (kind) {
    case ProblemKind::TSP: return "tsp";
    case ProblemKind::CVRP: return "cvrp";
    case ProblemKind::ATSP: return "atsp";
    }
    return "?";
}

std::string_view to_string(Distribution dist) {
    switch (dist) {
    case Distribution::Uniform: return "uniform";
    case Distribution::Explosion: return "explosion";
    case Distribution::Grid: return "grid";
    case Distribution::Implosion: return "implosion";
    }
    return "?";
}

ProblemKind parse_problem_kind(std::string_view text) {
    if (text == "tsp" || text == "TSP") return ProblemKind::TSP;
    if (text == "cvrp" || text == "CVRP") return ProblemKind::CVRP;
    if (text == "atsp" || text == "ATSP") return ProblemKind::ATSP;
    throw ConfigError("unknown problem kind '" + std::string(text) + "'");
}

Distribution parse_distribution(std::string_view text) {
    if (text == "uniform") return Distribution::Uniform;
    if (text == "explosion") return Distribution::Explosion;
    if (text == "grid") return Distribution::Grid;
    if (text == "implosion") return Distribution::Implosion;
    throw ConfigError("unknown distribution '" + std::string(text) + "'");
}

void validate(const ProblemInstance& inst) {
    const int n = inst.n;
    if (n < 1) throw ArgumentError("instance has no nodes");
    if (inst.dist.size() != static_cast<std::size_t>(n) * n)
        throw ArgumentError("distance matrix size does not match n");
    if (inst.has_coords() && inst.coords.size() != static_cast<std::size_t>(n))
        throw ArgumentError("coordinate count does not match n");
    for (int i = 0; i < n; ++i) {
        if (inst.d(i, i) != 0.0) throw ArgumentError("nonzero diagonal at node " + std::to_string(i));
        for (int j = 0; j < n; ++j) {
            const double v = inst.d(i, j);
            if (!std::isfinite(v) || v < 0.0)
                throw ArgumentError("invalid distance at (" + std::to_string(i) + "," +
                                    std::to_string(j) + ")");
            if (inst.symmetric() && v != inst.d(j, i))
                throw ArgumentError("asymmetric distance at (" + std::to_string(i) + "," +
                                    std::to_string(j) + ") for a symmetric problem");
        }
    }
    if (inst.kind == ProblemKind::CVRP) {
        if (inst.demands.size() != static_cast<std::size_t>(n))
            throw ArgumentError("CVRP demands missing or wrong length");
        if (inst.capacity <= 0) throw ArgumentError("CVRP capacity must be positive");
        if (inst.demands[0] != 0) throw ArgumentError("depot demand must be 0");
        for (int i = 1; i < n; ++i) {
            if (inst.demands[i] < 0 || inst.demands[i] > inst.capacity)
                throw ArgumentError("demand of node " + std::to_string(i) +
                                    " outside [0, capacity]");
        }
    }
}

void compute_euclidean(ProblemInstance& inst) {
    const int n = inst.n;
    inst.dist.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double v = std::hypot(inst.coords[i][0] - inst.coords[j][0],
                                        inst.coords[i][1] - inst.coords[j][1]);
            inst.d(i, j) = v;
            inst.d(j, i) = v;
        }
    }
}

int default_capacity(int customers) {
    static constexpr std::array<std::pair<int, int>, 4> anchors{
        {{10, 20}, {20, 30}, {50, 40}, {100, 50}}};
    if (customers <= anchors.front().first) return anchors.front().second;
    for (std::size_t a = 1; a < anchors.size(); ++a) {
        if (customers <= anchors[a].first || a + 1 == anchors.size()) {
            const auto [n0, c0] = anchors[a - 1];
            const auto [n1, c1] = anchors[a];
            const double t = static_cast<double>(customers - n0) / (n1 - n0);
            return static_cast<int>(std::lround(c0 + t * (c1 - c0)));
        }
    }
    return anchors.back().second;
}

ProblemInstance instance_from_coords(ProblemKind kind, std::vector<Point> coords) {
    if (kind == ProblemKind::ATSP) throw ConfigError("ATSP instances have no coordinates");
    ProblemInstance inst;
    inst.kind = kind;
    inst.n = static_cast<int>(coords.size());
    inst.coords = std::move(coords);
    compute_euclidean(inst);
    return inst;
}

ProblemInstance instance_from_matrix(ProblemKind kind, int n, std::vector<double> dist) {
    if (dist.size() != static_cast<std::size_t>(n) * n)
        throw ArgumentError("matrix has " + std::to_string(dist.size()) + " entries, expected " +
                            std::to_string(n * n));
    ProblemInstance inst;
    inst.kind = kind;
    inst.n = n;
    inst.dist = std::move(dist);
    return inst;
}

ProblemInstance generate_instance(ProblemKind kind, int n, Distribution distribution,
                                  std::uint64_t seed) {
    if (kind == ProblemKind::ATSP) {
        if (distribution != Distribution::Uniform)
            throw ConfigError("ATSP supports only the uniform matrix generator, got '" +
                              std::string(to_string(distribution)) + "'");
        return generate_atsp_instance(n, seed);
    }
    if (kind == ProblemKind::TSP && n < 3) throw ArgumentError("TSP needs n >= 3");
    if (kind == ProblemKind::CVRP && n < 2) throw ArgumentError("CVRP needs at least 2 customers");

    std::mt19937_64 rng(seed);
    const int nodes = kind == ProblemKind::CVRP ? n + 1 : n;
    std::vector<Point> pts;
    switch (distribution) {
    case Distribution::Uniform: pts = uniform_points(nodes, rng); break;
    case Distribution::Grid: pts = grid_points(nodes, rng); break;
    case Distribution::Explosion:
        pts = uniform_points(nodes, rng);
        mutate_disc(pts, true, rng);
        break;
    case Distribution::Implosion:
        pts = uniform_points(nodes, rng);
        mutate_disc(pts, false, rng);
        break;
    }

    ProblemInstance inst = instance_from_coords(kind, std::move(pts));
    inst.seed = seed;
    inst.meta["distribution"] = std::string(to_string(distribution));
    if (distribution == Distribution::Explosion || distribution == Distribution::Implosion)
        inst.meta["mutation_radius"] = fmt_double(kMutationRadius);
    if (distribution == Distribution::Implosion)
        inst.meta["implosion_factor"] = fmt_double(kImplosionFactor);
    if (distribution == Distribution::Grid) inst.meta["grid_jitter"] = fmt_double(kGridJitter);

    if (kind == ProblemKind::CVRP) {
        inst.capacity = default_capacity(n);
        inst.demands.assign(nodes, 0);
        std::uniform_int_distribution<int> demand(1, 9);
        for (int i = 1; i < nodes; ++i) inst.demands[i] = demand(rng);
    }
    return inst;
}

ProblemInstance generate_atsp_instance(int n, std::uint64_t seed) {
    if (n < 3) throw ArgumentError("ATSP needs n >= 3");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> draw(0, kAtspIntMax - 1);
    std::vector<std::int64_t> m(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) m[i * n + j] = (i == j) ? 0 : draw(rng);
    // shortest-path closure enforces the triangle inequality
    for (int via = 0; via < n; ++via)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                m[i * n + j] = std::min(m[i * n + j], m[i * n + via] + m[via * n + j]);

    std::vector<double> dist(m.size());
    for (std::size_t e = 0; e < m.size(); ++e) dist[e] = static_cast<double>(m[e]) / kAtspIntMax;
    ProblemInstance inst = instance_from_matrix(ProblemKind::ATSP, n, std::move(dist));
    inst.seed = seed;
    inst.meta["distribution"] = "matrix";
    inst.meta["int_max"] = std::to_string(kAtspIntMax);
    return inst;
}

SparseGraph knn_sparsify(const ProblemInstance& inst, int k) {
    const int n = inst.n;
    if (k < 1 || k > n - 1)
        throw ArgumentError("k=" + std::to_string(k) + " outside [1, " + std::to_string(n - 1) + "]");
    SparseGraph g;
    g.n = n;
    g.k = k;
    g.edge_weight = inst.dist;
    g.adj_code.assign(static_cast<std::size_t>(n) * n, 0);
    std::vector<int> order;
    order.reserve(n);
    for (int i = 0; i < n; ++i) {
        order.clear();
        for (int j = 0; j < n; ++j)
            if (j != i) order.push_back(j);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return inst.d(i, a) < inst.d(i, b); });
        for (int r = 0; r < k; ++r) g.adj_code[static_cast<std::size_t>(i) * n + order[r]] = 1;
        g.adj_code[static_cast<std::size_t>(i) * n + i] = 2;
    }
    return g;
}

std::optional<std::string> check_route(const ProblemInstance& inst, std::span<const int> route) {
    const int n = inst.n;
    for (std::size_t p = 0; p < route.size(); ++p) {
        if (route[p] < 0 || route[p] >= n)
            return "node index " + std::to_string(route[p]) + " at position " + std::to_string(p) +
                   " out of range";
    }
    std::vector<int> seen(n, 0);
    if (inst.kind != ProblemKind::CVRP) {
        if (route.size() != static_cast<std::size_t>(n))
            return "tour visits " + std::to_string(route.size()) + " nodes, expected " +
                   std::to_string(n);
        for (int v : route) {
            if (seen[v]++) return "node " + std::to_string(v) + " visited twice";
        }
        return std::nullopt;
    }

    if (route.size() < 3 || route.front() != 0 || route.back() != 0)
        return "route must start and end at the depot";
    int load = 0;
    for (std::size_t p = 1; p < route.size(); ++p) {
        const int v = route[p];
        if (v == 0) {
            if (route[p - 1] == 0) return "consecutive depot visits at position " + std::to_string(p);
            load = 0;
            continue;
        }
        if (seen[v]++) return "customer " + std::to_string(v) + " visited twice";
        load += inst.demands[v];
        if (load > inst.capacity)
            return "capacity exceeded at customer " + std::to_string(v) + " (load " +
                   std::to_string(load) + " > " + std::to_string(inst.capacity) + ")";
    }
    for (int v = 1; v < n; ++v) {
        if (!seen[v]) return "customer " + std::to_string(v) + " not visited";
    }
    return std::nullopt;
}

double route_length_unchecked(const ProblemInstance& inst, std::span<const int> route) {
    if (route.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t p = 0; p + 1 < route.size(); ++p) total += inst.d(route[p], route[p + 1]);
    if (inst.kind != ProblemKind::CVRP) total += inst.d(route.back(), route.front());
    return total;
}

double solution_length(const ProblemInstance& inst, std::span<const int> route) {
    if (auto violation = check_route(inst, route)) throw FeasibilityError(*violation);
    return route_length_unchecked(inst, route);
}

Solution make_solution(const ProblemInstance& inst, std::vector<int> route) {
    Solution s;
    s.feasible = !check_route(inst, route).has_value();
    s.length = route_length_unchecked(inst, route);
    s.route = std::move(route);
    return s;
}

double optimality_gap(double length, double reference_length) {
    if (!(reference_length > 0.0))
        throw ArgumentError("reference length must be positive, got " + fmt_double(reference_length));
    return 100.0 * (length - reference_length) / reference_length;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace efr
