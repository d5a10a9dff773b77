#pragma once

/// @file vrplib_io.hpp
/// TSPLIB / CVRPLIB readers, the efr-inst-1 instance container and
/// JSON-lines solve reports.

#include "efr/instance.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace efr {

enum class EdgeWeightType { EUC_2D, EXPLICIT, CEIL_2D, ATT };

std::string_view to_string(EdgeWeightType t);

struct LibraryMeta {
    std::string name;
    int declared_dimension = 0;
    EdgeWeightType edge_weight_type = EdgeWeightType::EUC_2D;
    std::optional<double> declared_optimum;
    /// Divide-by factor applied to raw coordinates (1 for explicit matrices).
    double scale = 1.0;
};

/// Parses a TSPLIB95 TSP or ATSP file. Coordinates are shifted to the origin
/// and divided by the larger of the two axis extents; distances are exact
/// Euclidean in those units. Explicit matrices are loaded as given.
std::pair<ProblemInstance, LibraryMeta> parse_tsplib(const std::string& text);

/// Parses a CVRPLIB file; the depot becomes node 0.
std::pair<ProblemInstance, LibraryMeta> parse_cvrplib(const std::string& text);

/// Dispatches on the TYPE keyword.
std::pair<ProblemInstance, LibraryMeta> parse_library(const std::string& text);

/// Library-convention length of a tour given in raw file units, e.g. the
/// rounded EUC_2D metric. `route` uses 0-based instance indices.
double library_length(const ProblemInstance& inst, const LibraryMeta& meta, std::span<const int> route);

/// A published solution: a TSPLIB TOUR_SECTION (1-based node ids ending in
/// -1) or CVRPLIB "Route #k: c1 c2 ..." lines with an optional "Cost X".
struct LibrarySolution {
    std::vector<int> route;  // 0-based instance indices, CVRP routes depot-delimited
    std::optional<double> cost;
};

/// Parses a solution companion for `inst` (as returned by parse_library).
/// Throws ParseError on malformed input or ids outside the instance.
LibrarySolution parse_solution_text(const std::string& text, const ProblemInstance& inst);

/// Reads a text file, throwing IoError with the path.
std::string read_text_file(const std::string& path);

inline constexpr const char* kInstanceVersion = "efr-inst-1";

/// Serializes instances as JSON {"version": "efr-inst-1", "instances": [...]}.
std::string instances_to_json(const std::vector<ProblemInstance>& instances);
std::vector<ProblemInstance> instances_from_json(const std::string& text);
void write_instances(const std::string& path, const std::vector<ProblemInstance>& instances);
std::vector<ProblemInstance> read_instances(const std::string& path);

/// Best-of result for one instance (or an aggregate over a set).
struct SolveReport {
    std::string instance_id;
    std::string method;
    int augmentations = 1;
    std::vector<int> route;
    double length = 0.0;
    std::optional<double> reference_length;
    std::optional<double> gap;  // percent
    double seconds = 0.0;
    bool feasible = true;
    std::map<std::string, std::string> config;  // effective configuration
};

/// Appends one JSON object per report to `path`.
void write_report(const SolveReport& report, const std::string& path);
std::string report_to_json_line(const SolveReport& report);

} // namespace efr
