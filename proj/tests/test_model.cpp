#include "efr/error.hpp"
#include "efr/model.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

using namespace efr;
using ad::Mat;

namespace {

ModelConfig small_config(ProblemKind kind, InputVariant variant = InputVariant::EdgeInput) {
    ModelConfig c;
    c.problem = kind;
    c.variant = variant;
    c.embed_dim = 16;
    c.heads = 4;
    c.ff_dim = 32;
    c.precoder_layers = 2;
    c.node_layers = 2;
    c.gcn_layers = 2;
    c.mlp_layers = 2;
    c.k = 4;
    c.onehot_pool = 24;
    return c;
}

ProblemInstance make(ProblemKind kind, int n, std::uint64_t seed) {
    if (kind == ProblemKind::ATSP) return generate_atsp_instance(n, seed);
    return generate_instance(kind, kind == ProblemKind::CVRP ? n - 1 : n, Distribution::Uniform, seed);
}

ModelInput input_for(const ModelConfig& cfg, const ProblemInstance& inst, std::uint64_t seed) {
    ModelInput mi;
    mi.instance = &inst;
    if (cfg.uses_precoder()) mi.onehot = sample_onehot_assignment(inst.n, cfg.onehot_pool, seed);
    return mi;
}

EncoderInputs encode_one(const ModelConfig& cfg, const ModelInput& mi) {
    const std::vector<ModelInput> v{mi};
    return make_encoder_inputs(v, cfg);
}

} // namespace

TEST_CASE("one-hot assignment") {
    const auto a = sample_onehot_assignment(20, 100, 5);
    CHECK(a.size() == 20);
    CHECK(std::set<int>(a.begin(), a.end()).size() == 20);
    for (int x : a) {
        CHECK(x >= 0);
        CHECK(x < 100);
    }
    CHECK(a == sample_onehot_assignment(20, 100, 5));
    CHECK(a != sample_onehot_assignment(20, 100, 6));
    CHECK(sample_onehot_assignment(7, 7, 1).size() == 7);
    CHECK_THROWS_AS(sample_onehot_assignment(8, 7, 1), CapacityError);
}

TEST_CASE("square symmetries preserve distances and are distinct") {
    const Point p{0.2, 0.7}, q{0.9, 0.35};
    std::set<std::pair<double, double>> images;
    for (int s = 0; s < 8; ++s) {
        const Point a = dihedral_transform(p, s), b = dihedral_transform(q, s);
        CHECK(std::hypot(a[0] - b[0], a[1] - b[1]) == doctest::Approx(std::hypot(p[0] - q[0], p[1] - q[1])));
        images.insert({a[0], a[1]});
    }
    CHECK(images.size() == 8);
    CHECK(dihedral_transform(p, 0) == p);
}

TEST_CASE("parameter sets follow the configuration") {
    auto cfg = small_config(ProblemKind::TSP);
    const auto full = init_params<double>(cfg, 1);
    CHECK(full.contains("precoder.onehot_embed"));
    CHECK(full.contains("graph.gcn0.w5"));
    CHECK(!full.contains("graph.gcn1.w5"));
    CHECK(full.contains("node.layer1.mha.wq"));
    CHECK(!full.contains("decoder.cap_w"));

    auto no_gcn = cfg;
    no_gcn.ablation = Ablation::NoGcn;
    const auto p = init_params<double>(no_gcn, 1);
    CHECK(!p.contains("graph.gcn0.w1"));
    CHECK(p.contains("graph.mlp0.w"));

    auto node = cfg;
    node.variant = InputVariant::NodeInput;
    const auto q = init_params<double>(node, 1);
    CHECK(!q.contains("precoder.onehot_embed"));
    CHECK(q.contains("input.w"));
    CHECK(q.at("input.w").value.rows() == 2);

    auto cvrp = small_config(ProblemKind::CVRP);
    const auto r = init_params<double>(cvrp, 1);
    CHECK(r.contains("decoder.cap_w"));
    CHECK(r.contains("precoder.node_feat_w"));

    // deterministic per seed
    CHECK(init_params<double>(cfg, 3).at("graph.a1").value == init_params<double>(cfg, 3).at("graph.a1").value);
}

TEST_CASE("precoder depends on the one-hot seeds only through the assignment") {
    const auto cfg = small_config(ProblemKind::TSP);
    auto params = init_params<double>(cfg, 2);
    Policy<double> pol(cfg, params);
    const auto inst = make(ProblemKind::TSP, 8, 4);
    const auto in_a = encode_one(cfg, input_for(cfg, inst, 1));
    const auto in_b = encode_one(cfg, input_for(cfg, inst, 2));
    ad::Tape<double> t(false);
    const Mat<double> a = t.value(pol.precoder(t, in_a));
    const Mat<double> a2 = t.value(pol.precoder(t, in_a));
    const Mat<double> b = t.value(pol.precoder(t, in_b));
    CHECK(a.rows() == 8);
    CHECK(a.cols() == 16);
    CHECK((a - a2).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a - b).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("graph encoder gates lie strictly inside (0, 1)") {
    const auto cfg = small_config(ProblemKind::TSP);
    auto params = init_params<double>(cfg, 3);
    Policy<double> pol(cfg, params);
    const auto inst = make(ProblemKind::TSP, 10, 9);
    const auto in = encode_one(cfg, input_for(cfg, inst, 0));
    ad::Tape<double> t(false);
    std::vector<Mat<double>> gates;
    pol.graph_encoder(t, pol.precoder(t, in), in, &gates);
    REQUIRE(gates.size() == static_cast<std::size_t>(cfg.gcn_layers));
    for (const auto& g : gates) {
        CHECK(g.minCoeff() > 0.0);
        CHECK(g.maxCoeff() < 1.0);
        // one row per k-nn edge
        CHECK(g.rows() == in.edges_per_group * in.groups);
    }
}

TEST_CASE("a node encoder without layers is the identity") {
    auto cfg = small_config(ProblemKind::TSP);
    cfg.node_layers = 0;
    auto params = init_params<double>(cfg, 4);
    Policy<double> pol(cfg, params);
    const auto inst = make(ProblemKind::TSP, 6, 2);
    const auto in = encode_one(cfg, input_for(cfg, inst, 0));
    ad::Tape<double> t(false);
    const ad::Var hp = pol.precoder(t, in);
    CHECK(t.value(pol.node_encoder(t, hp, in)) == t.value(hp));
}

TEST_CASE("decoder steps are proper distributions and rollouts are valid") {
    std::mt19937_64 rng(17);
    for (auto kind : {ProblemKind::TSP, ProblemKind::CVRP, ProblemKind::ATSP}) {
        for (auto variant : {InputVariant::EdgeInput, InputVariant::NodeInput}) {
            if (kind == ProblemKind::ATSP && variant == InputVariant::NodeInput) continue;
            const auto cfg = small_config(kind, variant);
            auto params = init_params<double>(cfg, rng());
            Policy<double> pol(cfg, params);
            for (int n : {5, 10}) {
                const auto inst = make(kind, n, rng());
                const auto in = encode_one(cfg, input_for(cfg, inst, rng()));
                ad::Tape<double> t(false);
                RolloutOptions<double> opt;
                opt.mode = DecodeMode::Sample;
                opt.seed = rng();
                int steps = 0;
                opt.observer = [&](const StepRecord<double>& rec) {
                    ++steps;
                    const auto& p = *rec.probs;
                    const auto& s = *rec.scores;
                    for (Eigen::Index r = 0; r < p.rows(); ++r) {
                        CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-6);
                        for (Eigen::Index j = 0; j < p.cols(); ++j) {
                            if ((*rec.mask)[r * p.cols() + j]) {
                                CHECK(p(r, j) == 0.0);
                                CHECK(std::isinf(s(r, j)));
                            } else {
                                CHECK(std::abs(s(r, j)) <= rec.clip);
                            }
                        }
                    }
                };
                const auto batch = pol.rollout(t, in, opt);
                CHECK(steps > 0);
                CHECK(batch.routes.size() == static_cast<std::size_t>(default_starts(inst)));
                for (std::size_t r = 0; r < batch.routes.size(); ++r) {
                    CHECK(!check_route(inst, batch.routes[r]).has_value());
                    CHECK(batch.lengths[r] == doctest::Approx(solution_length(inst, batch.routes[r])));
                    CHECK(batch.rewards[r] == -batch.lengths[r]);
                    CHECK(batch.log_prob_sum[r] <= 1e-12);
                }
            }
        }
    }
}

TEST_CASE("a single selectable node gets probability one") {
    const auto cfg = small_config(ProblemKind::TSP);
    auto params = init_params<double>(cfg, 5);
    Policy<double> pol(cfg, params);
    const auto inst = make(ProblemKind::TSP, 5, 1);
    const auto in = encode_one(cfg, input_for(cfg, inst, 0));
    ad::Tape<double> t(false);
    const Encoded enc = pol.encode(t, in);
    DecodeState st = DecodeState::initial(in, 1);
    for (int v : {2, 0, 4, 1}) {
        const std::vector<int> a{v};
        st.apply(a);
    }
    const auto out = pol.decoder_step(t, enc, in, st);
    CHECK(out.probs(0, 3) == 1.0);
    CHECK(out.probs.row(0).sum() == 1.0);

    // the empty tour still yields a distribution over every node
    const DecodeState fresh = DecodeState::initial(in, 1);
    const auto first = pol.decoder_step(t, enc, in, fresh);
    CHECK(first.probs.row(0).sum() == doctest::Approx(1.0));
    CHECK(first.probs.row(0).minCoeff() > 0.0);
}

TEST_CASE("teacher forcing replays sampled log-probabilities") {
    for (auto kind : {ProblemKind::TSP, ProblemKind::CVRP, ProblemKind::ATSP}) {
        const auto cfg = small_config(kind);
        auto params = init_params<double>(cfg, 6);
        Policy<double> pol(cfg, params);
        const auto inst = make(kind, 9, 3);
        const auto in = encode_one(cfg, input_for(cfg, inst, 4));
        ad::Tape<double> t1(false);
        RolloutOptions<double> opt;
        opt.mode = DecodeMode::Sample;
        opt.seed = 77;
        const auto sampled = pol.rollout(t1, in, opt);

        ad::Tape<double> t2(true);
        RolloutOptions<double> forced;
        forced.forced = &sampled.routes;
        const auto replay = pol.rollout(t2, in, forced);
        REQUIRE(replay.routes == sampled.routes);
        for (std::size_t r = 0; r < sampled.routes.size(); ++r) {
            CHECK(std::abs(replay.log_prob_sum[r] - sampled.log_prob_sum[r]) < 1e-5);
            CHECK(std::abs(t2.value(replay.log_prob)(static_cast<Eigen::Index>(r), 0) - sampled.log_prob_sum[r]) <
                  1e-5);
        }
    }
}

TEST_CASE("relabelling nodes permutes the multi-start results") {
    for (auto kind : {ProblemKind::TSP, ProblemKind::ATSP}) {
        const auto cfg = small_config(kind);
        auto params = init_params<double>(cfg, 8);
        const auto inst = make(kind, 9, 12);
        std::vector<int> perm(9);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
        std::vector<double> m(81);
        for (int i = 0; i < 9; ++i)
            for (int j = 0; j < 9; ++j) m[i * 9 + j] = inst.d(perm[i], perm[j]);
        ProblemInstance relabelled = instance_from_matrix(kind, 9, m);
        const auto onehot = sample_onehot_assignment(9, cfg.onehot_pool, 5);
        std::vector<int> onehot_p(9);
        for (int i = 0; i < 9; ++i) onehot_p[i] = onehot[perm[i]];

        const auto a = rollout<double>(cfg, params, inst, 0, DecodeMode::Greedy, 0, onehot);
        const auto b = rollout<double>(cfg, params, relabelled, 0, DecodeMode::Greedy, 0, onehot_p);
        // start p of the relabelled run is start perm[p] of the original
        for (int p = 0; p < 9; ++p) CHECK(std::abs(b.lengths[p] - a.lengths[perm[p]]) < 1e-5);
    }
}

TEST_CASE("CVRP rollouts respect capacity and mask the depot after a return") {
    const auto cfg = small_config(ProblemKind::CVRP);
    auto params = init_params<double>(cfg, 9);
    Policy<double> pol(cfg, params);
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto inst = make(ProblemKind::CVRP, 11, s);
        const auto in = encode_one(cfg, input_for(cfg, inst, s));
        ad::Tape<double> t(false);
        RolloutOptions<double> opt;
        opt.mode = DecodeMode::Sample;
        opt.seed = s;
        opt.observer = [&](const StepRecord<double>& rec) {
            const auto& p = *rec.probs;
            for (Eigen::Index r = 0; r < p.rows(); ++r) {
                // demands above the remaining load are masked
                for (Eigen::Index j = 1; j < p.cols(); ++j)
                    if (p(r, j) > 0.0) CHECK(!(*rec.mask)[r * p.cols() + j]);
            }
        };
        const auto batch = pol.rollout(t, in, opt);
        CHECK(batch.starts == 10);
        for (const auto& route : batch.routes) {
            CHECK(!check_route(inst, route).has_value());
            for (std::size_t i = 1; i < route.size(); ++i) CHECK(!(route[i] == 0 && route[i - 1] == 0));
        }
    }
}

TEST_CASE("ablations drop a stream without breaking decoding") {
    for (auto ab : {Ablation::NoNodeEncoder, Ablation::NoGraphEncoder, Ablation::NoGcn, Ablation::NoPrecoder}) {
        auto cfg = small_config(ProblemKind::TSP);
        cfg.ablation = ab;
        auto params = init_params<double>(cfg, 10);
        Policy<double> pol(cfg, params);
        const auto inst = make(ProblemKind::TSP, 7, 1);
        const auto in = encode_one(cfg, input_for(cfg, inst, 0));
        ad::Tape<double> t(false);
        const Encoded enc = pol.encode(t, in);
        CHECK(enc.hG.valid() == (ab != Ablation::NoGraphEncoder));
        CHECK(enc.hN.valid() == (ab != Ablation::NoNodeEncoder));
        const auto batch = rollout<double>(cfg, params, inst, 0, DecodeMode::Greedy, 0);
        for (const auto& r : batch.routes) CHECK(!check_route(inst, r).has_value());
    }
}

TEST_CASE("configuration validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.heads = 7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    ModelConfig atsp_node;
    atsp_node.problem = ProblemKind::ATSP;
    atsp_node.variant = InputVariant::NodeInput;
    CHECK_THROWS_AS(atsp_node.validate(), ConfigError);
    ModelConfig kv;
    CHECK(apply_key_value(kv, "embed_dim", "64"));
    CHECK(kv.embed_dim == 64);
    CHECK(!apply_key_value(kv, "colour", "blue"));
    CHECK(to_key_values(kv).at("embed_dim") == "64");
    CHECK(parse_ablation("no_gcn") == Ablation::NoGcn);
    CHECK(parse_input_variant("node_input") == InputVariant::NodeInput);
    ModelConfig k;
    CHECK(k.effective_k(10) == 9);
    CHECK(k.effective_k(50) == 20);
}
