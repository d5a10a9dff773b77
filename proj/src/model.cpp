#include "efr/model.hpp"

#include "efr/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace efr {

using ad::Mat;
using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Config

std::string_view to_string(InputVariant v) {
    return v == InputVariant::EdgeInput ? "edge_input" : "node_input";
}

std::string_view to_string(Ablation a) {
    switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoPrecoder: return "no_precoder";
    case Ablation::NoNodeEncoder: return "no_node_encoder";
    case Ablation::NoGraphEncoder: return "no_graph_encoder";
    case Ablation::NoGcn: return "no_gcn";
    }
    return "?";
}

InputVariant parse_input_variant(std::string_view text) {
    if (text == "edge_input" || text == "edge") return InputVariant::EdgeInput;
    if (text == "node_input" || text == "node") return InputVariant::NodeInput;
    throw ConfigError("unknown input variant '" + std::string(text) + "'");
}

Ablation parse_ablation(std::string_view text) {
    for (Ablation a : {Ablation::Full, Ablation::NoPrecoder, Ablation::NoNodeEncoder,
                       Ablation::NoGraphEncoder, Ablation::NoGcn}) {
        if (text == to_string(a)) return a;
    }
    throw ConfigError("unknown ablation '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (embed_dim <= 0 || heads <= 0) fail("embed_dim and heads must be positive");
    if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
    if (embed_dim % 2 != 0) fail("embed_dim must be even (edge features are split in halves)");
    if (ff_dim <= 0 || mix_hidden <= 0) fail("ff_dim and mix_hidden must be positive");
    if (precoder_layers < 1) fail("precoder_layers must be at least 1");
    if (node_layers < 0 || gcn_layers < 0 || mlp_layers < 0) fail("layer counts must be non-negative");
    if (k < 1) fail("k must be at least 1");
    if (!(clip > 0.0)) fail("clip must be positive");
    if (onehot_pool < 1) fail("onehot_pool must be positive");
    if (variant == InputVariant::NodeInput && ablation == Ablation::NoPrecoder)
        fail("node_input has no precoder to remove");
    if (ablation == Ablation::NoNodeEncoder && ablation == Ablation::NoGraphEncoder)
        fail("at least one encoder stream is required");
    if (problem == ProblemKind::ATSP && !uses_precoder())
        fail("ATSP has no coordinates; coordinate input is unavailable");
}

std::map<std::string, std::string> to_key_values(const ModelConfig& c) {
    auto d = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    return {
        {"problem", std::string(to_string(c.problem))},
        {"embed_dim", std::to_string(c.embed_dim)},
        {"heads", std::to_string(c.heads)},
        {"ff_dim", std::to_string(c.ff_dim)},
        {"precoder_layers", std::to_string(c.precoder_layers)},
        {"node_layers", std::to_string(c.node_layers)},
        {"gcn_layers", std::to_string(c.gcn_layers)},
        {"mlp_layers", std::to_string(c.mlp_layers)},
        {"k", std::to_string(c.k)},
        {"clip", d(c.clip)},
        {"onehot_pool", std::to_string(c.onehot_pool)},
        {"variant", std::string(to_string(c.variant))},
        {"mix_hidden", std::to_string(c.mix_hidden)},
        {"ablation", std::string(to_string(c.ablation))},
        {"gate_eps", d(c.gate_eps)},
        {"norm_eps", d(c.norm_eps)},
    };
}

bool apply_key_value(ModelConfig& c, const std::string& key, const std::string& value) {
    auto as_int = [&]() {
        try {
            std::size_t pos = 0;
            const int v = std::stoi(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' expects an integer, got '" + value + "'");
        }
    };
    auto as_double = [&]() {
        try {
            std::size_t pos = 0;
            const double v = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' expects a number, got '" + value + "'");
        }
    };
    if (key == "problem") c.problem = parse_problem_kind(value);
    else if (key == "embed_dim") c.embed_dim = as_int();
    else if (key == "heads") c.heads = as_int();
    else if (key == "ff_dim") c.ff_dim = as_int();
    else if (key == "precoder_layers") c.precoder_layers = as_int();
    else if (key == "node_layers") c.node_layers = as_int();
    else if (key == "gcn_layers") c.gcn_layers = as_int();
    else if (key == "mlp_layers") c.mlp_layers = as_int();
    else if (key == "k") c.k = as_int();
    else if (key == "clip") c.clip = as_double();
    else if (key == "onehot_pool") c.onehot_pool = as_int();
    else if (key == "variant") c.variant = parse_input_variant(value);
    else if (key == "mix_hidden") c.mix_hidden = as_int();
    else if (key == "ablation") c.ablation = parse_ablation(value);
    else if (key == "gate_eps") c.gate_eps = as_double();
    else if (key == "norm_eps") c.norm_eps = as_double();
    else return false;
    return true;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
void ModelParams<T>::add(std::string name, Mat<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = static_cast<int>(arrays_.size());
    ParamArray<T> a;
    a.name = std::move(name);
    a.grad = Mat<T>::Zero(value.rows(), value.cols());
    a.value = std::move(value);
    arrays_.push_back(std::move(a));
}

template <class T>
int ModelParams<T>::index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
}

template <class T>
std::size_t ModelParams<T>::scalar_count() const {
    std::size_t total = 0;
    for (const auto& a : arrays_) total += static_cast<std::size_t>(a.value.size());
    return total;
}

template <class T>
void ModelParams<T>::zero_grad() {
    for (auto& a : arrays_) a.grad.setZero();
}

template <class T>
void ModelParams<T>::check_finite() const {
    for (const auto& a : arrays_) {
        if (!a.value.allFinite()) throw NumericError("parameter '" + a.name + "' holds a non-finite value");
    }
}

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ModelParams<T> p;
    const int h = cfg.embed_dim;
    auto uniform = [&](int rows, int cols, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        Mat<T> m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
        return m;
    };
    auto linear = [&](const std::string& w, int in, int out) {
        p.add(w, uniform(in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    };
    auto bias = [&](const std::string& b, int in, int out) {
        p.add(b, uniform(1, out, 1.0 / std::sqrt(static_cast<double>(in))));
    };
    auto norm = [&](const std::string& prefix) {
        p.add(prefix + "_gamma", Mat<T>::Ones(1, h));
        p.add(prefix + "_beta", Mat<T>::Zero(1, h));
    };

    if (cfg.uses_precoder()) {
        linear("precoder.onehot_embed", cfg.onehot_pool, h);
        const int m = cfg.mix_hidden;
        for (int l = 0; l < cfg.precoder_layers; ++l) {
            const std::string pre = "precoder.layer" + std::to_string(l) + ".";
            // the row stream enters layer 0 as zeros, so its dot scores carry no signal
            if (l > 0) {
                linear(pre + "wq", h, h);
                linear(pre + "wk", h, h);
            }
            linear(pre + "wv", h, h);
            linear(pre + "wo", h, h);
            bias(pre + "bo", h, h);
            p.add(pre + "mix_w1", uniform(cfg.heads, 2 * m, 1.0 / std::sqrt(2.0)));
            p.add(pre + "mix_b1", uniform(cfg.heads, m, 1.0 / std::sqrt(2.0)));
            p.add(pre + "mix_w2", uniform(cfg.heads, m, 1.0 / std::sqrt(static_cast<double>(m))));
            linear(pre + "ff_w1", h, cfg.ff_dim);
            bias(pre + "ff_b1", h, cfg.ff_dim);
            linear(pre + "ff_w2", cfg.ff_dim, h);
            bias(pre + "ff_b2", cfg.ff_dim, h);
        }
        if (cfg.problem == ProblemKind::CVRP) {
            linear("precoder.node_feat_w", 2, h);
            bias("precoder.node_feat_b", 2, h);
        }
    } else {
        linear("input.w", cfg.raw_feature_dim(), h);
        bias("input.b", cfg.raw_feature_dim(), h);
    }

    if (cfg.uses_graph_stream()) {
        linear("graph.a1", h, h);
        if (cfg.uses_gcn()) {
            p.add("graph.a2", uniform(1, h / 2, 1.0));
            p.add("graph.b3", uniform(1, h / 2, 1.0));
            p.add("graph.a3", uniform(1, h / 2, 1.0));
            for (int l = 0; l < cfg.gcn_layers; ++l) {
                const std::string pre = "graph.gcn" + std::to_string(l) + ".";
                // the last layer's edge update never reaches the node output
                const int used = l + 1 < cfg.gcn_layers ? 5 : 2;
                for (int w = 1; w <= used; ++w) linear(pre + "w" + std::to_string(w), h, h);
                norm(pre + "bn_node");
                if (used == 5) norm(pre + "bn_edge");
            }
        }
        for (int l = 0; l < cfg.mlp_layers; ++l) {
            const std::string pre = "graph.mlp" + std::to_string(l) + ".";
            linear(pre + "w", h, h);
            bias(pre + "b", h, h);
        }
    }

    if (cfg.uses_node_stream()) {
        for (int l = 0; l < cfg.node_layers; ++l) {
            const std::string pre = "node.layer" + std::to_string(l) + ".";
            for (const char* w : {"mha.wq", "mha.wk", "mha.wv", "mha.wo"}) linear(pre + w, h, h);
            norm(pre + "bn1");
            linear(pre + "ff_w1", h, cfg.ff_dim);
            bias(pre + "ff_b1", h, cfg.ff_dim);
            linear(pre + "ff_w2", cfg.ff_dim, h);
            norm(pre + "bn2");
        }
    }

    if (cfg.uses_graph_stream()) {
        for (const char* w : {"decoder.w1g", "decoder.w2g", "decoder.wkg", "decoder.wvg", "decoder.w3g"})
            linear(w, h, h);
    }
    if (cfg.uses_node_stream()) {
        for (const char* w : {"decoder.w1n", "decoder.w2n", "decoder.wkn", "decoder.wvn", "decoder.w3n"})
            linear(w, h, h);
    }
    if (cfg.problem == ProblemKind::CVRP) p.add("decoder.cap_w", uniform(1, h, 1.0));
    return p;
}

std::vector<int> sample_onehot_assignment(int n, int pool, std::uint64_t seed) {
    if (n < 0) throw ArgumentError("negative node count");
    if (n > pool)
        throw CapacityError("one-hot pool of " + std::to_string(pool) + " cannot seed " +
                            std::to_string(n) + " nodes");
    std::mt19937_64 rng(seed);
    std::vector<int> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<int> pick(i, pool - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(n);
    return idx;
}

Point dihedral_transform(const Point& p, int index) {
    const double x = p[0], y = p[1];
    switch (index) {
    case 0: return {x, y};
    case 1: return {1.0 - x, y};
    case 2: return {x, 1.0 - y};
    case 3: return {1.0 - x, 1.0 - y};
    case 4: return {y, x};
    case 5: return {1.0 - y, x};
    case 6: return {y, 1.0 - x};
    case 7: return {1.0 - y, 1.0 - x};
    default: throw ArgumentError("dihedral index must be in [0, 8)");
    }
}

int default_starts(const ProblemInstance& inst) { return inst.customers(); }

// ---------------------------------------------------------------------------
// Inputs and decoding state

EncoderInputs make_encoder_inputs(std::span<const ModelInput> inputs, const ModelConfig& cfg) {
    EncoderInputs in;
    if (inputs.empty()) throw ArgumentError("empty model batch");
    in.groups = static_cast<int>(inputs.size());
    in.n = inputs.front().instance->n;
    in.kind = inputs.front().instance->kind;
    const int n = in.n;
    if (n < 2) throw ArgumentError("model input needs at least 2 nodes");
    if (in.kind != cfg.problem)
        throw ConfigError("model trained for " + std::string(to_string(cfg.problem)) + " got a " +
                          std::string(to_string(in.kind)) + " instance");
    const int k = cfg.effective_k(n);
    const int f = cfg.raw_feature_dim();
    const int rows = in.groups * n;
    in.dist.resize(rows, n);
    in.raw_features = Mat<double>::Zero(rows, f);
    in.demand_features = Mat<double>::Zero(rows, 2);
    in.edges_per_group = n * (k + 1);
    const std::size_t edges = static_cast<std::size_t>(in.edges_per_group) * in.groups;
    in.edge_src.reserve(edges);
    in.edge_dst.reserve(edges);
    in.edge_dist.resize(static_cast<Eigen::Index>(edges), 1);
    in.edge_code.resize(static_cast<Eigen::Index>(edges), 1);

    std::size_t e = 0;
    for (int b = 0; b < in.groups; ++b) {
        const ModelInput& mi = inputs[b];
        const ProblemInstance& inst = *mi.instance;
        if (inst.n != n || inst.kind != in.kind) throw ArgumentError("batched instances differ in size or kind");
        in.instances.push_back(&inst);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) in.dist(b * n + i, j) = inst.d(i, j);

        if (cfg.uses_precoder()) {
            if (mi.onehot.size() != static_cast<std::size_t>(n))
                throw ArgumentError("one-hot assignment must have one entry per node");
            for (int i = 0; i < n; ++i) {
                if (mi.onehot[i] < 0 || mi.onehot[i] >= cfg.onehot_pool)
                    throw CapacityError("one-hot index outside the pool");
                in.onehot.push_back(mi.onehot[i]);
            }
        } else {
            if (!inst.has_coords()) throw ConfigError("coordinate input requested for an instance without coordinates");
            for (int i = 0; i < n; ++i) {
                const Point pt = dihedral_transform(inst.coords[i], mi.dihedral);
                in.raw_features(b * n + i, 0) = pt[0];
                in.raw_features(b * n + i, 1) = pt[1];
            }
        }
        if (inst.kind == ProblemKind::CVRP) {
            for (int i = 0; i < n; ++i) {
                const double dem = static_cast<double>(inst.demands[i]) / inst.capacity;
                const double depot = i == 0 ? 1.0 : 0.0;
                in.demand_features(b * n + i, 0) = dem;
                in.demand_features(b * n + i, 1) = depot;
                if (!cfg.uses_precoder()) {
                    in.raw_features(b * n + i, 2) = dem;
                    in.raw_features(b * n + i, 3) = depot;
                }
            }
        }

        const SparseGraph g = knn_sparsify(inst, k);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                const int code = g.code(i, j);
                if (code == 0) continue;
                in.edge_src.push_back(b * n + i);
                in.edge_dst.push_back(b * n + j);
                in.edge_dist(static_cast<Eigen::Index>(e), 0) = inst.d(i, j);
                in.edge_code(static_cast<Eigen::Index>(e), 0) = code;
                ++e;
            }
        }
    }
    if (!in.dist.allFinite()) throw NumericError("distance matrix holds a non-finite value");
    return in;
}

DecodeState DecodeState::initial(const EncoderInputs& in, int starts) {
    DecodeState s;
    s.groups = in.groups;
    s.starts = starts;
    s.n = in.n;
    s.kind = in.kind;
    s.instances = in.instances;
    const int rows = s.rows();
    s.visited.assign(static_cast<std::size_t>(rows) * s.n, 0);
    s.done.assign(rows, 0);
    s.routes.assign(rows, {});
    if (s.kind == ProblemKind::CVRP) {
        s.first.assign(rows, 0);
        s.current.assign(rows, 0);
        s.remaining.resize(rows);
        for (int r = 0; r < rows; ++r) {
            s.remaining[r] = s.instance_of(r).capacity;
            s.routes[r].push_back(0);
        }
    } else {
        s.first.assign(rows, -1);
        s.current.assign(rows, -1);
    }
    return s;
}

ad::Mask DecodeState::mask() const {
    ad::Mask m(static_cast<std::size_t>(rows()) * n, 0);
    for (int r = 0; r < rows(); ++r) {
        std::uint8_t* row = m.data() + static_cast<std::size_t>(r) * n;
        const std::uint8_t* vis = visited.data() + static_cast<std::size_t>(r) * n;
        if (kind != ProblemKind::CVRP) {
            for (int j = 0; j < n; ++j) row[j] = vis[j];
            continue;
        }
        if (done[r]) {
            std::fill(row, row + n, 1);
            row[0] = 0;
            continue;
        }
        const ProblemInstance& inst = instance_of(r);
        bool any_customer = false;
        for (int j = 1; j < n; ++j) {
            row[j] = (vis[j] || inst.demands[j] > remaining[r]) ? 1 : 0;
            any_customer = any_customer || !row[j];
        }
        row[0] = current[r] == 0 ? 1 : 0;
        // a customer with every feasible customer exhausted can only go home
        if (!any_customer) row[0] = 0;
    }
    return m;
}

void DecodeState::apply(std::span<const int> actions) {
    if (actions.size() != static_cast<std::size_t>(rows())) throw ArgumentError("one action per trajectory");
    const ad::Mask m = mask();
    for (int r = 0; r < rows(); ++r) {
        const int a = actions[r];
        if (a < 0 || a >= n || m[static_cast<std::size_t>(r) * n + a])
            throw DecodeError("action " + std::to_string(a) + " is not selectable for trajectory " +
                              std::to_string(r));
        std::uint8_t* vis = visited.data() + static_cast<std::size_t>(r) * n;
        if (kind != ProblemKind::CVRP) {
            if (first[r] < 0) first[r] = a;
            current[r] = a;
            vis[a] = 1;
            routes[r].push_back(a);
            continue;
        }
        if (done[r]) continue;
        const ProblemInstance& inst = instance_of(r);
        routes[r].push_back(a);
        current[r] = a;
        if (a == 0) {
            remaining[r] = inst.capacity;
            bool all = true;
            for (int j = 1; j < n && all; ++j) all = vis[j] != 0;
            if (all) done[r] = 1;
        } else {
            vis[a] = 1;
            remaining[r] -= inst.demands[a];
        }
    }
    ++steps;
}

bool DecodeState::all_done() const {
    if (kind != ProblemKind::CVRP) return steps >= n;
    return std::all_of(done.begin(), done.end(), [](std::uint8_t d) { return d != 0; });
}

template <class T>
Mat<T> StepOutput<T>::masked_scores(const Tape<T>& t) const {
    Mat<T> u = t.value(scores);
    for (Eigen::Index r = 0; r < u.rows(); ++r)
        for (Eigen::Index c = 0; c < u.cols(); ++c)
            if (mask[r * u.cols() + c]) u(r, c) = -std::numeric_limits<T>::infinity();
    return u;
}

// ---------------------------------------------------------------------------
// Policy

template <class T>
struct Policy<T>::DecoderCache {
    Var first_g, last_g, first_n, last_n;  // (rows + 1) x h, last row zero
    Var k_g, v_g, k_n, v_n, keys;
    int empty_row = 0;  // index of the zero row in the first/last tables
};

template <class T>
Policy<T>::Policy(const ModelConfig& cfg, ModelParams<T>& params) : cfg_(cfg), params_(&params) {
    cfg_.validate();
}

template <class T>
Var Policy<T>::param(Tape<T>& t, const std::string& name) const {
    ParamArray<T>& a = params_->at(name);
    return t.leaf(a.value, t.recording() ? &a.grad : nullptr);
}

namespace {

template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
    return ad::add_row(t, ad::matmul(t, x, w), b);
}

} // namespace

template <class T>
Var Policy<T>::precoder(Tape<T>& t, const EncoderInputs& in, ad::AttentionWeights<T>* observed) const {
    const int rows = in.groups * in.n;
    if (!cfg_.uses_precoder()) {
        const Var feat = t.constant(in.raw_features.template cast<T>());
        return linear(t, feat, param(t, "input.w"), param(t, "input.b"));
    }
    const Var col = ad::gather_rows(t, param(t, "precoder.onehot_embed"), in.onehot);
    Var row = t.constant(Mat<T>::Zero(rows, cfg_.embed_dim));
    const Mat<T> dist = in.dist.template cast<T>();
    // softmax ignores a per-head constant, so the mixing output bias stays zero
    const Var mix_b2 = t.constant(Mat<T>::Zero(cfg_.heads, 1));
    for (int l = 0; l < cfg_.precoder_layers; ++l) {
        const std::string pre = "precoder.layer" + std::to_string(l) + ".";
        const Var zeros = t.constant(Mat<T>::Zero(rows, cfg_.embed_dim));
        const Var q = l > 0 ? ad::matmul(t, row, param(t, pre + "wq")) : zeros;
        const Var k = l > 0 ? ad::matmul(t, col, param(t, pre + "wk")) : zeros;
        const Var v = ad::matmul(t, col, param(t, pre + "wv"));
        const Var mixed = ad::mixed_score_attention(t, q, k, v, dist, param(t, pre + "mix_w1"),
                                                    param(t, pre + "mix_b1"), param(t, pre + "mix_w2"),
                                                    mix_b2, cfg_.heads, in.groups,
                                                    l == 0 ? observed : nullptr);
        const Var hhat = ad::add(t, row, linear(t, mixed, param(t, pre + "wo"), param(t, pre + "bo")));
        const Var hidden = ad::relu(t, linear(t, hhat, param(t, pre + "ff_w1"), param(t, pre + "ff_b1")));
        row = ad::add(t, hhat, linear(t, hidden, param(t, pre + "ff_w2"), param(t, pre + "ff_b2")));
    }
    if (cfg_.problem == ProblemKind::CVRP) {
        const Var feat = t.constant(in.demand_features.template cast<T>());
        row = ad::add(t, row, linear(t, feat, param(t, "precoder.node_feat_w"), param(t, "precoder.node_feat_b")));
    }
    return row;
}

template <class T>
Var Policy<T>::graph_encoder(Tape<T>& t, Var hP, const EncoderInputs& in, std::vector<Mat<T>>* gates,
                             Var* pre_mlp) const {
    const int rows = in.groups * in.n;
    Var x = ad::matmul(t, hP, param(t, "graph.a1"));
    if (cfg_.uses_gcn() && cfg_.gcn_layers > 0) {
        const Var dcol = t.constant(in.edge_dist.template cast<T>());
        const Var ccol = t.constant(in.edge_code.template cast<T>());
        const Var e_dist = ad::add_row(t, ad::matmul(t, dcol, param(t, "graph.a2")), param(t, "graph.b3"));
        const Var e_code = ad::matmul(t, ccol, param(t, "graph.a3"));
        Var e = ad::concat_cols(t, e_dist, e_code);
        for (int l = 0; l < cfg_.gcn_layers; ++l) {
            const std::string pre = "graph.gcn" + std::to_string(l) + ".";
            auto lin = [&](Var input, int w) { return ad::matmul(t, input, param(t, pre + "w" + std::to_string(w))); };
            const Var sig = ad::sigmoid(t, e);
            const Var denom = ad::add_const(t, ad::scatter_add_rows(t, sig, in.edge_src, rows), T(cfg_.gate_eps));
            const Var eta = ad::div(t, sig, ad::gather_rows(t, denom, in.edge_src));
            if (gates) gates->push_back(t.value(eta));
            const Var msg = ad::mul(t, eta, ad::gather_rows(t, lin(x, 2), in.edge_dst));
            const Var agg = ad::scatter_add_rows(t, msg, in.edge_src, rows);
            const Var node_pre = ad::add(t, lin(x, 1), agg);
            const Var x_next = ad::add(
                t, x,
                ad::relu(t, ad::segment_norm(t, node_pre, param(t, pre + "bn_node_gamma"),
                                             param(t, pre + "bn_node_beta"), in.n, T(cfg_.norm_eps))));
            if (l + 1 < cfg_.gcn_layers) {
                Var edge_pre = ad::add(t, lin(e, 3), ad::gather_rows(t, lin(x, 4), in.edge_src));
                edge_pre = ad::add(t, edge_pre, ad::gather_rows(t, lin(x, 5), in.edge_dst));
                e = ad::add(t, e,
                            ad::relu(t, ad::segment_norm(t, edge_pre, param(t, pre + "bn_edge_gamma"),
                                                         param(t, pre + "bn_edge_beta"), in.edges_per_group,
                                                         T(cfg_.norm_eps))));
            }
            x = x_next;
        }
    }
    if (pre_mlp) *pre_mlp = x;
    for (int l = 0; l < cfg_.mlp_layers; ++l) {
        const std::string pre = "graph.mlp" + std::to_string(l) + ".";
        x = linear(t, x, param(t, pre + "w"), param(t, pre + "b"));
        if (l + 1 < cfg_.mlp_layers) x = ad::relu(t, x);
    }
    return x;
}

template <class T>
Var Policy<T>::node_encoder(Tape<T>& t, Var input, const EncoderInputs& in,
                            ad::AttentionWeights<T>* observed) const {
    Var hcur = input;
    for (int l = 0; l < cfg_.node_layers; ++l) {
        const std::string pre = "node.layer" + std::to_string(l) + ".";
        const Var q = ad::matmul(t, hcur, param(t, pre + "mha.wq"));
        const Var k = ad::matmul(t, hcur, param(t, pre + "mha.wk"));
        const Var v = ad::matmul(t, hcur, param(t, pre + "mha.wv"));
        const Var att = ad::attention(t, q, k, v, cfg_.heads, in.groups, nullptr, l == 0 ? observed : nullptr);
        const Var mha = ad::matmul(t, att, param(t, pre + "mha.wo"));
        const Var hhat = ad::segment_norm(t, ad::add(t, hcur, mha), param(t, pre + "bn1_gamma"),
                                          param(t, pre + "bn1_beta"), in.n, T(cfg_.norm_eps));
        const Var hidden = ad::relu(t, linear(t, hhat, param(t, pre + "ff_w1"), param(t, pre + "ff_b1")));
        const Var ff = ad::matmul(t, hidden, param(t, pre + "ff_w2"));
        hcur = ad::segment_norm(t, ad::add(t, hhat, ff), param(t, pre + "bn2_gamma"), param(t, pre + "bn2_beta"),
                                in.n, T(cfg_.norm_eps));
    }
    return hcur;
}

template <class T>
Encoded Policy<T>::encode(Tape<T>& t, const EncoderInputs& in) const {
    Encoded enc;
    enc.hP = precoder(t, in);
    if (!t.value(enc.hP).allFinite()) throw NumericError("precoder produced non-finite embeddings");
    if (cfg_.uses_graph_stream()) enc.hG = graph_encoder(t, enc.hP, in);
    if (cfg_.uses_node_stream()) enc.hN = node_encoder(t, enc.hP, in);
    return enc;
}

template <class T>
typename Policy<T>::DecoderCache Policy<T>::prepare_decoder(Tape<T>& t, const Encoded& enc,
                                                            const EncoderInputs& in) const {
    DecoderCache c;
    c.empty_row = in.groups * in.n;
    // rollouts force the first node, so an empty tour only reaches the
    // decoder through decoder_step; it then contributes a zero query
    const Var zero_row = t.constant(Mat<T>::Zero(1, cfg_.embed_dim));
    auto table = [&](Var h, const char* w) { return ad::concat_rows(t, ad::matmul(t, h, param(t, w)), zero_row); };
    if (cfg_.uses_graph_stream()) {
        c.first_g = table(enc.hG, "decoder.w1g");
        c.last_g = table(enc.hG, "decoder.w2g");
        c.k_g = ad::matmul(t, enc.hG, param(t, "decoder.wkg"));
        c.v_g = ad::matmul(t, enc.hG, param(t, "decoder.wvg"));
    }
    if (cfg_.uses_node_stream()) {
        c.first_n = table(enc.hN, "decoder.w1n");
        c.last_n = table(enc.hN, "decoder.w2n");
        c.k_n = ad::matmul(t, enc.hN, param(t, "decoder.wkn"));
        c.v_n = ad::matmul(t, enc.hN, param(t, "decoder.wvn"));
    }
    if (c.k_g.valid() && c.k_n.valid()) c.keys = ad::add(t, c.k_g, c.k_n);
    else c.keys = c.k_g.valid() ? c.k_g : c.k_n;
    return c;
}

template <class T>
StepOutput<T> Policy<T>::step(Tape<T>& t, const DecoderCache& c, const EncoderInputs& in,
                              const DecodeState& state) const {
    const int rows = state.rows();
    std::vector<int> first_idx(rows), last_idx(rows);
    for (int r = 0; r < rows; ++r) {
        const int b = r / state.starts;
        first_idx[r] = state.first[r] >= 0 ? b * in.n + state.first[r] : c.empty_row;
        last_idx[r] = state.current[r] >= 0 ? b * in.n + state.current[r] : c.empty_row;
    }
    StepOutput<T> out;
    out.mask = state.mask();

    Var q;
    auto accumulate = [&](Var term) { q = q.valid() ? ad::add(t, q, term) : term; };
    if (cfg_.uses_graph_stream()) {
        accumulate(ad::gather_rows(t, c.first_g, first_idx));
        accumulate(ad::gather_rows(t, c.last_g, last_idx));
    }
    if (cfg_.uses_node_stream()) {
        accumulate(ad::gather_rows(t, c.first_n, first_idx));
        accumulate(ad::gather_rows(t, c.last_n, last_idx));
    }
    if (cfg_.problem == ProblemKind::CVRP) {
        Mat<T> cap(rows, 1);
        for (int r = 0; r < rows; ++r)
            cap(r, 0) = static_cast<T>(state.remaining[r]) / static_cast<T>(state.instance_of(r).capacity);
        accumulate(ad::matmul(t, t.constant(std::move(cap)), param(t, "decoder.cap_w")));
    }

    Var glimpse;
    auto add_glimpse = [&](Var term) { glimpse = glimpse.valid() ? ad::add(t, glimpse, term) : term; };
    if (cfg_.uses_graph_stream()) {
        const Var a = ad::attention(t, q, c.k_g, c.v_g, cfg_.heads, in.groups, &out.mask);
        add_glimpse(ad::matmul(t, a, param(t, "decoder.w3g")));
    }
    if (cfg_.uses_node_stream()) {
        const Var a = ad::attention(t, q, c.k_n, c.v_n, cfg_.heads, in.groups, &out.mask);
        add_glimpse(ad::matmul(t, a, param(t, "decoder.w3n")));
    }
    const Var raw = ad::group_scores(t, glimpse, c.keys, in.groups);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cfg_.embed_dim));
    out.scores = ad::scale(t, ad::tanh(t, ad::scale(t, raw, inv_sqrt)), static_cast<T>(cfg_.clip));
    out.probs = ad::masked_softmax(t.value(out.scores), out.mask);
    return out;
}

template <class T>
StepOutput<T> Policy<T>::decoder_step(Tape<T>& t, const Encoded& enc, const EncoderInputs& in,
                                      const DecodeState& state) const {
    const DecoderCache c = prepare_decoder(t, enc, in);
    return step(t, c, in, state);
}

template <class T>
RolloutBatch<T> Policy<T>::rollout(Tape<T>& t, const EncoderInputs& in, const RolloutOptions<T>& opt) const {
    const int max_starts = in.kind == ProblemKind::CVRP ? in.n - 1 : in.n;
    const int starts = opt.starts > 0 ? opt.starts : max_starts;
    if (starts > max_starts)
        throw ArgumentError("n_starts=" + std::to_string(starts) + " exceeds " + std::to_string(max_starts));

    const Encoded enc = encode(t, in);
    const DecoderCache cache = prepare_decoder(t, enc, in);
    DecodeState state = DecodeState::initial(in, starts);
    const int rows = state.rows();
    if (opt.forced && opt.forced->size() != static_cast<std::size_t>(rows))
        throw ArgumentError("teacher forcing needs one route per trajectory");

    RolloutBatch<T> out;
    out.groups = in.groups;
    out.starts = starts;
    out.log_prob_sum.assign(rows, 0.0);
    out.step_log_probs.assign(rows, {});

    std::vector<int> actions(rows);
    auto forced_action = [&](int r) {
        const auto& route = (*opt.forced)[r];
        const std::size_t pos = state.routes[r].size();
        if (state.kind == ProblemKind::CVRP && state.done[r]) return 0;
        if (pos >= route.size()) throw ArgumentError("forced route too short for trajectory " + std::to_string(r));
        return route[pos];
    };

    // forced start: node p (TSP/ATSP) or customer p + 1 (CVRP); no probability
    for (int r = 0; r < rows; ++r) {
        const int p = r % starts;
        actions[r] = opt.forced ? forced_action(r) : (in.kind == ProblemKind::CVRP ? p + 1 : p);
    }
    state.apply(actions);

    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (!state.all_done()) {
        const StepOutput<T> so = step(t, cache, in, state);
        const int n = in.n;
        for (int r = 0; r < rows; ++r) {
            const auto prow = so.probs.row(r);
            if (opt.forced) {
                actions[r] = forced_action(r);
            } else if (opt.mode == DecodeMode::Greedy) {
                int best = -1;
                for (int j = 0; j < n; ++j)
                    if (!so.mask[static_cast<std::size_t>(r) * n + j] && (best < 0 || prow(j) > prow(best))) best = j;
                actions[r] = best;
            } else {
                const double u = unit(rng);
                double acc = 0.0;
                int pick = -1;
                for (int j = 0; j < n; ++j) {
                    if (so.mask[static_cast<std::size_t>(r) * n + j]) continue;
                    pick = j;
                    acc += static_cast<double>(prow(j));
                    if (u < acc) break;
                }
                actions[r] = pick;
            }
        }
        const Var lp = ad::masked_log_softmax_pick(t, so.scores, so.mask, actions);
        out.log_prob = out.log_prob.valid() ? ad::add(t, out.log_prob, lp) : lp;
        const auto& lpv = t.value(lp);
        for (int r = 0; r < rows; ++r) {
            out.step_log_probs[r].push_back(static_cast<double>(lpv(r, 0)));
            out.log_prob_sum[r] += static_cast<double>(lpv(r, 0));
        }
        if (opt.observer) {
            const Mat<T> masked = so.masked_scores(t);
            StepRecord<T> rec;
            rec.step = state.steps;
            rec.scores = &masked;
            rec.probs = &so.probs;
            rec.mask = &so.mask;
            rec.actions = actions;
            rec.clip = cfg_.clip;
            opt.observer(rec);
            out.step_masks.push_back(so.mask);
        }
        state.apply(actions);
        if (state.steps > 4 * in.n + 4) throw DecodeError("rollout failed to terminate");
    }
    if (!out.log_prob.valid()) out.log_prob = t.constant(Mat<T>::Zero(rows, 1));

    out.routes = std::move(state.routes);
    out.lengths.resize(rows);
    out.rewards.resize(rows);
    for (int r = 0; r < rows; ++r) {
        out.lengths[r] = route_length_unchecked(*in.instances[r / starts], out.routes[r]);
        out.rewards[r] = -out.lengths[r];
    }
    return out;
}

template <class T>
RolloutBatch<T> rollout(const ModelConfig& cfg, ModelParams<T>& params, const ProblemInstance& inst, int n_starts,
                        DecodeMode mode, std::uint64_t seed, std::optional<std::vector<int>> onehot) {
    ModelInput mi;
    mi.instance = &inst;
    if (cfg.uses_precoder()) mi.onehot = onehot ? *onehot : sample_onehot_assignment(inst.n, cfg.onehot_pool, 0);
    const std::vector<ModelInput> batch{mi};
    const EncoderInputs in = make_encoder_inputs(batch, cfg);
    Policy<T> policy(cfg, params);
    Tape<T> tape(false);
    RolloutOptions<T> opt;
    opt.starts = n_starts;
    opt.mode = mode;
    opt.seed = seed;
    return policy.rollout(tape, in, opt);
}

template class ModelParams<float>;
template class ModelParams<double>;
template class Policy<float>;
template class Policy<double>;
template struct StepOutput<float>;
template struct StepOutput<double>;
template ModelParams<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params<double>(const ModelConfig&, std::uint64_t);
template RolloutBatch<float> rollout<float>(const ModelConfig&, ModelParams<float>&, const ProblemInstance&, int,
                                            DecodeMode, std::uint64_t, std::optional<std::vector<int>>);
template RolloutBatch<double> rollout<double>(const ModelConfig&, ModelParams<double>&, const ProblemInstance&, int,
                                              DecodeMode, std::uint64_t, std::optional<std::vector<int>>);

} // namespace efr
