#include "efr/vrplib_io.hpp"

#include "efr/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace efr {

using json = nlohmann::json;

std::string_view to_string(EdgeWeightType t) {
    switch (t) {
    case EdgeWeightType::EUC_2D: return "EUC_2D";
    case EdgeWeightType::EXPLICIT: return "EXPLICIT";
    case EdgeWeightType::CEIL_2D: return "CEIL_2D";
    case EdgeWeightType::ATT: return "ATT";
    }
    return "?";
}

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string upper(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
    return s;
}

enum class Section { None, Coords, Weights, Demands, Depots, Skip };

struct RawFile {
    std::string name;
    std::string type;
    std::string comment;
    int dimension = 0;
    std::string weight_type;
    std::string weight_format = "FULL_MATRIX";
    std::optional<int> capacity;
    std::vector<std::pair<int, Point>> coords;  // (file id, xy)
    std::vector<double> weights;
    int weights_line = 0;
    std::vector<std::pair<int, long long>> demands;
    std::vector<int> depots;
    int coord_section_line = 0;
    int last_line = 0;
};

double to_number(const std::string& tok, int line) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw ParseError("expected a number, got '" + tok + "'", line);
    }
}

int to_integer(const std::string& tok, int line) {
    const double v = to_number(tok, line);
    if (v != std::floor(v) || std::abs(v) > 1e9) throw ParseError("expected an integer, got '" + tok + "'", line);
    return static_cast<int>(v);
}

RawFile scan(const std::string& text) {
    RawFile f;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    Section section = Section::None;
    bool depot_done = false;
    while (std::getline(in, raw)) {
        ++line_no;
        f.last_line = line_no;
        const std::string line = trim(raw);
        if (line.empty()) continue;
        const std::string up = upper(line);
        if (up == "EOF") break;

        // section headers and "KEY : VALUE" lines start with a letter
        if (std::isalpha(static_cast<unsigned char>(line[0]))) {
            std::string key = up, value;
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                key = upper(trim(line.substr(0, colon)));
                value = trim(line.substr(colon + 1));
            } else {
                const auto sp = line.find_first_of(" \t");
                if (sp != std::string::npos) {
                    key = upper(line.substr(0, sp));
                    value = trim(line.substr(sp));
                }
            }
            section = Section::None;
            if (key == "NAME") f.name = value;
            else if (key == "TYPE") f.type = upper(value);
            else if (key == "COMMENT") f.comment += (f.comment.empty() ? "" : " ") + value;
            else if (key == "DIMENSION") f.dimension = to_integer(value, line_no);
            else if (key == "EDGE_WEIGHT_TYPE") f.weight_type = upper(value);
            else if (key == "EDGE_WEIGHT_FORMAT") f.weight_format = upper(value);
            else if (key == "CAPACITY") f.capacity = to_integer(value, line_no);
            else if (key == "NODE_COORD_TYPE" || key == "DISPLAY_DATA_TYPE" || key == "VEHICLES") {
            } else if (key == "NODE_COORD_SECTION") {
                section = Section::Coords;
                f.coord_section_line = line_no;
            } else if (key == "EDGE_WEIGHT_SECTION") {
                section = Section::Weights;
                f.weights_line = line_no;
            } else if (key == "DEMAND_SECTION") section = Section::Demands;
            else if (key == "DEPOT_SECTION") section = Section::Depots;
            else if (key == "DISPLAY_DATA_SECTION") section = Section::Skip;
            else throw ParseError("unknown keyword '" + key + "'", line_no);
            continue;
        }

        std::istringstream toks(line);
        std::vector<std::string> t;
        for (std::string s; toks >> s;) t.push_back(s);
        switch (section) {
        case Section::Coords:
            if (t.size() != 3) throw ParseError("coordinate line needs 'id x y'", line_no);
            f.coords.push_back({to_integer(t[0], line_no), {to_number(t[1], line_no), to_number(t[2], line_no)}});
            break;
        case Section::Weights:
            for (const auto& s : t) f.weights.push_back(to_number(s, line_no));
            break;
        case Section::Demands:
            if (t.size() != 2) throw ParseError("demand line needs 'id demand'", line_no);
            f.demands.push_back({to_integer(t[0], line_no), static_cast<long long>(to_number(t[1], line_no))});
            break;
        case Section::Depots:
            for (const auto& s : t) {
                const int id = to_integer(s, line_no);
                if (id == -1) depot_done = true;
                else if (!depot_done) f.depots.push_back(id);
            }
            break;
        case Section::Skip: break;
        case Section::None: throw ParseError("data outside of any section", line_no);
        }
    }
    return f;
}

EdgeWeightType weight_type_of(const RawFile& f) {
    if (f.weight_type == "EUC_2D") return EdgeWeightType::EUC_2D;
    if (f.weight_type == "CEIL_2D") return EdgeWeightType::CEIL_2D;
    if (f.weight_type == "ATT") return EdgeWeightType::ATT;
    if (f.weight_type == "EXPLICIT") return EdgeWeightType::EXPLICIT;
    if (f.weight_type.empty()) throw ParseError("EDGE_WEIGHT_TYPE missing", f.last_line);
    throw UnsupportedError("edge weight type " + f.weight_type + " is not supported");
}

std::optional<double> optimum_from_comment(const std::string& comment) {
    const std::string up = upper(comment);
    for (const char* tag : {"OPTIMAL VALUE:", "BEST VALUE:", "OPTIMUM:", "OPTIMAL VALUE"}) {
        const auto p = up.find(tag);
        if (p == std::string::npos) continue;
        std::istringstream is(comment.substr(p + std::string(tag).size()));
        double v;
        if (is >> v) return v;
    }
    return std::nullopt;
}

// Coordinates in file order, checked against DIMENSION and ids 1..n.
std::vector<Point> ordered_coords(const RawFile& f) {
    const int n = f.dimension;
    std::vector<Point> pts(n);
    std::vector<char> seen(n, 0);
    for (const auto& [id, p] : f.coords) {
        if (id < 1 || id > n) throw ParseError("node id " + std::to_string(id) + " outside 1.." + std::to_string(n), f.coord_section_line);
        if (seen[id - 1]) throw ParseError("node " + std::to_string(id) + " listed twice", f.coord_section_line);
        seen[id - 1] = 1;
        pts[id - 1] = p;
    }
    for (int i = 0; i < n; ++i)
        if (!seen[i])
            throw ParseError("NODE_COORD_SECTION is missing node " + std::to_string(i + 1), f.last_line);
    return pts;
}

std::vector<double> explicit_matrix(const RawFile& f) {
    const int n = f.dimension;
    std::vector<double> d(static_cast<std::size_t>(n) * n, 0.0);
    std::size_t k = 0;
    auto next = [&]() {
        if (k >= f.weights.size())
            throw ParseError("EDGE_WEIGHT_SECTION ends after " + std::to_string(f.weights.size()) + " values", f.weights_line);
        return f.weights[k++];
    };
    const std::string& fm = f.weight_format;
    if (fm == "FULL_MATRIX") {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) d[i * n + j] = next();
    } else if (fm == "UPPER_ROW" || fm == "UPPER_DIAG_ROW") {
        const int off = fm == "UPPER_ROW" ? 1 : 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + off; j < n; ++j) d[i * n + j] = d[j * n + i] = next();
    } else if (fm == "LOWER_ROW" || fm == "LOWER_DIAG_ROW") {
        const int off = fm == "LOWER_ROW" ? 0 : 1;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < i + off; ++j) d[i * n + j] = d[j * n + i] = next();
    } else {
        throw UnsupportedError("EDGE_WEIGHT_FORMAT " + fm + " is not supported");
    }
    if (k != f.weights.size()) throw ParseError("EDGE_WEIGHT_SECTION has extra values", f.weights_line);
    for (int i = 0; i < n; ++i) d[i * n + i] = 0.0;
    return d;
}

// Shifts to the origin and divides by the joint extent; returns the scale.
double normalize(std::vector<Point>& pts, std::map<std::string, std::string>& meta) {
    double minx = std::numeric_limits<double>::infinity(), miny = minx;
    double maxx = -minx, maxy = -minx;
    for (const auto& p : pts) {
        minx = std::min(minx, p[0]);
        miny = std::min(miny, p[1]);
        maxx = std::max(maxx, p[0]);
        maxy = std::max(maxy, p[1]);
    }
    double scale = std::max(maxx - minx, maxy - miny);
    if (!(scale > 0.0)) scale = 1.0;
    for (auto& p : pts) {
        p[0] = (p[0] - minx) / scale;
        p[1] = (p[1] - miny) / scale;
    }
    std::ostringstream s;
    s.precision(17);
    s << scale;
    meta["scale"] = s.str();
    std::ostringstream ox, oy;
    ox.precision(17);
    oy.precision(17);
    ox << minx;
    oy << miny;
    meta["offset_x"] = ox.str();
    meta["offset_y"] = oy.str();
    meta["distance"] = "exact euclidean on normalized coordinates; multiply by scale for file units";
    return scale;
}

LibraryMeta base_meta(const RawFile& f) {
    LibraryMeta m;
    m.name = f.name;
    m.declared_dimension = f.dimension;
    m.edge_weight_type = weight_type_of(f);
    m.declared_optimum = optimum_from_comment(f.comment);
    return m;
}

} // namespace

std::pair<ProblemInstance, LibraryMeta> parse_tsplib(const std::string& text) {
    const RawFile f = scan(text);
    if (f.dimension < 3) throw ParseError("DIMENSION missing or below 3", f.last_line);
    if (!f.type.empty() && f.type != "TSP" && f.type != "ATSP")
        throw UnsupportedError("TYPE " + f.type + " is not a TSP file");
    LibraryMeta meta = base_meta(f);
    ProblemInstance inst;
    const ProblemKind kind = f.type == "ATSP" ? ProblemKind::ATSP : ProblemKind::TSP;
    if (meta.edge_weight_type == EdgeWeightType::EXPLICIT) {
        inst = instance_from_matrix(kind, f.dimension, explicit_matrix(f));
    } else {
        if (kind == ProblemKind::ATSP) throw ParseError("ATSP files need an explicit matrix", f.last_line);
        std::vector<Point> pts = ordered_coords(f);
        std::map<std::string, std::string> extra;
        meta.scale = normalize(pts, extra);
        inst = instance_from_coords(ProblemKind::TSP, std::move(pts));
        inst.meta.insert(extra.begin(), extra.end());
    }
    inst.id = f.name;
    inst.meta["edge_weight_type"] = std::string(to_string(meta.edge_weight_type));
    inst.meta["source"] = "tsplib";
    validate(inst);
    return {std::move(inst), meta};
}

std::pair<ProblemInstance, LibraryMeta> parse_cvrplib(const std::string& text) {
    const RawFile f = scan(text);
    if (f.dimension < 2) throw ParseError("DIMENSION missing or below 2", f.last_line);
    if (!f.capacity) throw ParseError("CAPACITY missing", f.last_line);
    if (*f.capacity <= 0) throw ParseError("CAPACITY must be positive", f.last_line);
    if (f.demands.empty()) throw ParseError("DEMAND_SECTION missing", f.last_line);
    LibraryMeta meta = base_meta(f);
    const int n = f.dimension;
    const int depot = f.depots.empty() ? 1 : f.depots.front();
    if (f.depots.size() > 1) throw UnsupportedError("multiple depots are not supported");
    if (depot < 1 || depot > n) throw ParseError("depot id outside the node range", f.last_line);

    // file id -> instance index with the depot first
    std::vector<int> order;
    order.push_back(depot - 1);
    for (int i = 0; i < n; ++i)
        if (i != depot - 1) order.push_back(i);

    std::vector<long long> dem(n, -1);
    for (const auto& [id, d] : f.demands) {
        if (id < 1 || id > n) throw ParseError("demand for unknown node " + std::to_string(id), f.last_line);
        dem[id - 1] = d;
    }
    for (int i = 0; i < n; ++i)
        if (dem[i] < 0) throw ParseError("DEMAND_SECTION is missing node " + std::to_string(i + 1), f.last_line);
    if (dem[depot - 1] != 0) throw ParseError("depot demand must be 0", f.last_line);

    ProblemInstance inst;
    if (meta.edge_weight_type == EdgeWeightType::EXPLICIT) {
        const std::vector<double> raw = explicit_matrix(f);
        std::vector<double> d(static_cast<std::size_t>(n) * n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) d[i * n + j] = raw[order[i] * n + order[j]];
        inst = instance_from_matrix(ProblemKind::CVRP, n, std::move(d));
    } else {
        const std::vector<Point> file_pts = ordered_coords(f);
        std::vector<Point> pts(n);
        for (int i = 0; i < n; ++i) pts[i] = file_pts[order[i]];
        std::map<std::string, std::string> extra;
        meta.scale = normalize(pts, extra);
        inst = instance_from_coords(ProblemKind::CVRP, std::move(pts));
        inst.meta.insert(extra.begin(), extra.end());
    }
    inst.capacity = *f.capacity;
    inst.demands.resize(n);
    for (int i = 0; i < n; ++i) {
        const long long d = dem[order[i]];
        if (d > inst.capacity)
            throw ParseError("demand of node " + std::to_string(order[i] + 1) + " exceeds the capacity", f.last_line);
        inst.demands[i] = static_cast<int>(d);
    }
    inst.id = f.name;
    inst.meta["edge_weight_type"] = std::string(to_string(meta.edge_weight_type));
    inst.meta["source"] = "cvrplib";
    inst.meta["depot_file_id"] = std::to_string(depot);
    validate(inst);
    return {std::move(inst), meta};
}

std::pair<ProblemInstance, LibraryMeta> parse_library(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const std::string up = upper(trim(line));
        if (up.rfind("TYPE", 0) == 0 && up.find(':') != std::string::npos) {
            const std::string v = trim(up.substr(up.find(':') + 1));
            if (v == "CVRP") return parse_cvrplib(text);
            return parse_tsplib(text);
        }
    }
    return parse_tsplib(text);
}

double library_length(const ProblemInstance& inst, const LibraryMeta& meta, std::span<const int> route) {
    if (auto err = check_route(inst, route)) throw FeasibilityError(*err);
    if (meta.edge_weight_type == EdgeWeightType::EXPLICIT) return route_length_unchecked(inst, route);
    auto metric = [&](int a, int b) {
        const double dx = (inst.coords[a][0] - inst.coords[b][0]) * meta.scale;
        const double dy = (inst.coords[a][1] - inst.coords[b][1]) * meta.scale;
        const double r = std::sqrt(dx * dx + dy * dy);
        switch (meta.edge_weight_type) {
        case EdgeWeightType::EUC_2D: return std::floor(r + 0.5);
        case EdgeWeightType::CEIL_2D: return std::ceil(r - 1e-9);
        case EdgeWeightType::ATT: {
            const double rij = r / std::sqrt(10.0);
            const double tij = std::floor(rij + 0.5);
            return tij < rij ? tij + 1.0 : tij;
        }
        default: return r;
        }
    };
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < route.size(); ++i) total += metric(route[i], route[i + 1]);
    if (inst.kind != ProblemKind::CVRP && !route.empty()) total += metric(route.back(), route.front());
    return total;
}

LibrarySolution parse_solution_text(const std::string& text, const ProblemInstance& inst) {
    LibrarySolution sol;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    bool in_tour = false, saw_tour = false, saw_routes = false;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty()) continue;
        const std::string up = upper(t);
        if (up == "EOF") break;
        if (up.rfind("TOUR_SECTION", 0) == 0) {
            in_tour = saw_tour = true;
            continue;
        }
        if (in_tour) {
            std::istringstream toks(t);
            std::string tok;
            while (toks >> tok) {
                const int id = to_integer(tok, line_no);
                if (id == -1) {
                    in_tour = false;
                    break;
                }
                if (id < 1 || id > inst.n) throw ParseError("tour node " + tok + " outside the instance", line_no);
                sol.route.push_back(id - 1);
            }
            continue;
        }
        if (up.rfind("ROUTE", 0) == 0) {
            const auto colon = t.find(':');
            if (colon == std::string::npos) throw ParseError("route line without ':'", line_no);
            if (inst.kind != ProblemKind::CVRP) throw ParseError("route lines need a CVRP instance", line_no);
            if (sol.route.empty()) sol.route.push_back(0);
            std::istringstream toks(t.substr(colon + 1));
            std::string tok;
            while (toks >> tok) {
                // customers are numbered 1..n-1 with the depot as 0
                const int c = to_integer(tok, line_no);
                if (c < 1 || c >= inst.n) throw ParseError("route customer " + tok + " outside the instance", line_no);
                sol.route.push_back(c);
            }
            sol.route.push_back(0);
            saw_routes = true;
            continue;
        }
        if (up.rfind("COST", 0) == 0) {
            std::string rest = trim(t.substr(4));
            if (!rest.empty() && rest.front() == ':') rest = trim(rest.substr(1));
            sol.cost = to_number(rest, line_no);
        }
    }
    if (!saw_tour && !saw_routes) throw ParseError("no TOUR_SECTION or route lines found", line_no);
    if (saw_tour && inst.kind == ProblemKind::CVRP) throw ParseError("a TOUR_SECTION cannot describe a CVRP solution", line_no);
    return sol;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// efr-inst-1

namespace {

json instance_to_json(const ProblemInstance& inst) {
    json j;
    j["id"] = inst.id;
    j["kind"] = std::string(to_string(inst.kind));
    j["n"] = inst.n;
    j["seed"] = inst.seed;
    if (inst.has_coords()) {
        json c = json::array();
        for (const auto& p : inst.coords) c.push_back({p[0], p[1]});
        j["coords"] = c;
    }
    j["dist"] = inst.dist;
    if (inst.kind == ProblemKind::CVRP) {
        j["demands"] = inst.demands;
        j["capacity"] = inst.capacity;
    }
    j["meta"] = inst.meta;
    return j;
}

ProblemInstance instance_from_json_value(const json& j) {
    ProblemInstance inst;
    inst.kind = parse_problem_kind(j.at("kind").get<std::string>());
    inst.n = j.at("n").get<int>();
    inst.id = j.value("id", std::string());
    inst.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("coords")) {
        for (const auto& p : j.at("coords")) inst.coords.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    inst.dist = j.at("dist").get<std::vector<double>>();
    if (inst.kind == ProblemKind::CVRP) {
        inst.demands = j.at("demands").get<std::vector<int>>();
        inst.capacity = j.at("capacity").get<int>();
    }
    if (j.contains("meta")) inst.meta = j.at("meta").get<std::map<std::string, std::string>>();
    validate(inst);
    return inst;
}

} // namespace

std::string instances_to_json(const std::vector<ProblemInstance>& instances) {
    json root;
    root["version"] = kInstanceVersion;
    root["instances"] = json::array();
    for (const auto& inst : instances) root["instances"].push_back(instance_to_json(inst));
    return root.dump() + "\n";
}

std::vector<ProblemInstance> instances_from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("instance file is not valid JSON: ") + e.what());
    }
    if (!root.is_object() || !root.contains("version")) throw DataError("instance file lacks a version tag");
    const std::string version = root["version"].is_string() ? root["version"].get<std::string>() : "";
    if (version != kInstanceVersion)
        throw VersionError("instance file has format '" + version + "', expected " + kInstanceVersion);
    std::vector<ProblemInstance> out;
    try {
        for (const auto& j : root.at("instances")) out.push_back(instance_from_json_value(j));
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed instance entry: ") + e.what());
    } catch (const ArgumentError& e) {
        throw DataError(std::string("invalid instance: ") + e.what());
    }
    return out;
}

void write_instances(const std::string& path, const std::vector<ProblemInstance>& instances) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << instances_to_json(instances);
    if (!f) throw IoError("failed while writing '" + path + "'");
}

std::vector<ProblemInstance> read_instances(const std::string& path) {
    return instances_from_json(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Reports

std::string report_to_json_line(const SolveReport& r) {
    json j;
    j["instance"] = r.instance_id;
    j["method"] = r.method;
    j["augmentations"] = r.augmentations;
    j["length"] = r.length;
    j["gap"] = r.gap ? json(*r.gap) : json(nullptr);
    j["reference_length"] = r.reference_length ? json(*r.reference_length) : json(nullptr);
    j["seconds"] = r.seconds;
    j["feasible"] = r.feasible;
    if (!r.route.empty()) j["route"] = r.route;
    if (!r.config.empty()) j["config"] = r.config;
    return j.dump();
}

void write_report(const SolveReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw IoError("cannot open report file '" + path + "'");
    f << report_to_json_line(report) << '\n';
    if (!f) throw IoError("failed while writing report file '" + path + "'");
}

} // namespace efr
