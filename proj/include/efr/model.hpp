#pragma once

/// @file model.hpp
/// Edge-input routing policy: a mixed-score attention precoder turns the
/// distance matrix (plus random one-hot column seeds) into node embeddings,
/// a residual gated GCN over the k-nn graph and an attention encoder process
/// them in parallel, and a dual-stream decoder emits one node distribution
/// per construction step. All forward passes run on an ad::Tape so the same
/// code serves inference (non-recording tape) and REINFORCE training.

#include "efr/autodiff.hpp"
#include "efr/instance.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace efr {

enum class InputVariant { EdgeInput, NodeInput };
enum class Ablation { Full, NoPrecoder, NoNodeEncoder, NoGraphEncoder, NoGcn };

std::string_view to_string(InputVariant v);
std::string_view to_string(Ablation a);
InputVariant parse_input_variant(std::string_view text);
Ablation parse_ablation(std::string_view text);

struct ModelConfig {
    ProblemKind problem = ProblemKind::TSP;
    int embed_dim = 256;
    int heads = 16;
    int ff_dim = 512;
    int precoder_layers = 1;
    int node_layers = 6;
    int gcn_layers = 6;
    int mlp_layers = 3;
    int k = 20;
    double clip = 10.0;
    int onehot_pool = 100;
    InputVariant variant = InputVariant::EdgeInput;
    int mix_hidden = 16;
    Ablation ablation = Ablation::Full;
    double gate_eps = 1e-5;
    double norm_eps = 1e-5;

    /// Throws ConfigError on inconsistent settings.
    void validate() const;

    bool uses_precoder() const {
        return variant == InputVariant::EdgeInput && ablation != Ablation::NoPrecoder;
    }
    bool uses_graph_stream() const { return ablation != Ablation::NoGraphEncoder; }
    bool uses_node_stream() const { return ablation != Ablation::NoNodeEncoder; }
    bool uses_gcn() const { return uses_graph_stream() && ablation != Ablation::NoGcn; }
    /// Width of the raw per-node feature vector fed when the precoder is absent.
    int raw_feature_dim() const { return problem == ProblemKind::CVRP ? 4 : 2; }
    /// Neighbour count actually used for an n-node instance.
    int effective_k(int n) const { return std::min(k, n - 1); }
};

/// Flat key/value view used by config files, checkpoints and reports.
std::map<std::string, std::string> to_key_values(const ModelConfig& cfg);
/// Applies one key; returns false when the key is not a ModelConfig key.
bool apply_key_value(ModelConfig& cfg, const std::string& key, const std::string& value);

template <class T>
struct ParamArray {
    std::string name;
    ad::Mat<T> value;
    ad::Mat<T> grad;
};

/// Named learnable arrays, in deterministic creation order. Names follow
/// module.layer.role, e.g. "node.layer2.mha.wq".
template <class T>
class ModelParams {
  public:
    void add(std::string name, ad::Mat<T> value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    int index(const std::string& name) const;
    ParamArray<T>& at(const std::string& name) { return arrays_[index(name)]; }
    const ParamArray<T>& at(const std::string& name) const { return arrays_[index(name)]; }
    std::vector<ParamArray<T>>& arrays() { return arrays_; }
    const std::vector<ParamArray<T>>& arrays() const { return arrays_; }
    std::size_t scalar_count() const;
    void zero_grad();
    /// Throws NumericError naming the first array holding a non-finite value.
    void check_finite() const;

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        for (const auto& a : arrays_) out.add(a.name, a.value.template cast<U>());
        return out;
    }

  private:
    std::vector<ParamArray<T>> arrays_;
    std::map<std::string, int> index_;
};

/// Fresh parameters for `cfg`, uniform in +-1/sqrt(fan_in); norm scales 1, shifts 0.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// `n` distinct indices in [0, pool), uniform without replacement.
std::vector<int> sample_onehot_assignment(int n, int pool, std::uint64_t seed);

/// The eight symmetries of the unit square applied to a point (index 0 = identity).
Point dihedral_transform(const Point& p, int index);

/// One model input: an instance plus its augmentation (one-hot seeds for the
/// precoder, or a square symmetry for coordinate input).
struct ModelInput {
    const ProblemInstance* instance = nullptr;
    std::vector<int> onehot;
    int dihedral = 0;
};

/// Stacked tensors for a batch of equally sized instances ("groups").
struct EncoderInputs {
    int groups = 0;
    int n = 0;
    ProblemKind kind = ProblemKind::TSP;
    ad::Mat<double> dist;           // (groups*n) x n
    std::vector<int> onehot;        // groups*n pool indices
    ad::Mat<double> raw_features;   // (groups*n) x raw_feature_dim
    ad::Mat<double> demand_features;  // (groups*n) x 2: demand/capacity, is_depot (CVRP)
    std::vector<int> edge_src;      // global row of i for edge (i, j)
    std::vector<int> edge_dst;      // global row of j
    ad::Mat<double> edge_dist;      // E x 1
    ad::Mat<double> edge_code;      // E x 1, k-nn code 1 or 2
    int edges_per_group = 0;
    std::vector<const ProblemInstance*> instances;
};

EncoderInputs make_encoder_inputs(std::span<const ModelInput> inputs, const ModelConfig& cfg);

/// What the encoders produce for a batch.
struct Encoded {
    ad::Var hP;  // precoder output (or projected raw features)
    ad::Var hG;  // graph-stream embeddings, invalid when disabled
    ad::Var hN;  // node-stream embeddings, invalid when disabled
};

/// Per-trajectory construction state for `groups * starts` trajectories.
struct DecodeState {
    int groups = 0;
    int starts = 0;
    int n = 0;
    ProblemKind kind = ProblemKind::TSP;
    std::vector<const ProblemInstance*> instances;  // one per group
    std::vector<int> first;      // -1 until a node is chosen
    std::vector<int> current;    // -1 until a node is chosen
    std::vector<std::uint8_t> visited;  // rows * n, depot never marked
    std::vector<int> remaining;  // CVRP remaining capacity
    std::vector<std::uint8_t> done;
    std::vector<std::vector<int>> routes;
    int steps = 0;

    static DecodeState initial(const EncoderInputs& in, int starts);
    int rows() const { return groups * starts; }
    const ProblemInstance& instance_of(int row) const { return *instances[row / starts]; }
    /// 1 = node not selectable at the next step.
    ad::Mask mask() const;
    void apply(std::span<const int> actions);
    bool all_done() const;
};

/// Decoder output for one step over every trajectory.
template <class T>
struct StepOutput {
    ad::Var scores;       // R x n clipped scores C*tanh(.), finite everywhere
    ad::Mask mask;        // R x n
    ad::Mat<T> probs;     // R x n, exactly 0 where masked
    /// Scores with -inf at masked entries.
    ad::Mat<T> masked_scores(const ad::Tape<T>& t) const;
};

enum class DecodeMode { Sample, Greedy };

/// One decoding step, as observed by a rollout.
template <class T>
struct StepRecord {
    int step = 0;
    const ad::Mat<T>* scores = nullptr;
    const ad::Mat<T>* probs = nullptr;
    const ad::Mask* mask = nullptr;
    std::span<const int> actions;
    double clip = 0.0;
};

template <class T>
struct RolloutOptions {
    int starts = 0;  // 0 = every node (TSP/ATSP) or every customer (CVRP)
    DecodeMode mode = DecodeMode::Greedy;
    std::uint64_t seed = 0;
    /// Teacher forcing: full routes per trajectory (row-major groups x starts).
    const std::vector<std::vector<int>>* forced = nullptr;
    std::function<void(const StepRecord<T>&)> observer;
};

/// Multi-start rollout result. Rows are ordered group-major.
template <class T>
struct RolloutBatch {
    int groups = 0;
    int starts = 0;
    std::vector<std::vector<int>> routes;
    std::vector<double> lengths;
    std::vector<double> rewards;        // -length
    std::vector<double> log_prob_sum;   // sum of log p over decoded steps
    std::vector<std::vector<double>> step_log_probs;
    std::vector<ad::Mask> step_masks;   // only with RolloutOptions::observer set
    ad::Var log_prob;                   // R x 1 on the tape
};

/// The policy network bound to a parameter set.
template <class T>
class Policy {
  public:
    Policy(const ModelConfig& cfg, ModelParams<T>& params);

    const ModelConfig& config() const { return cfg_; }

    ad::Var precoder(ad::Tape<T>& t, const EncoderInputs& in,
                     ad::AttentionWeights<T>* observed = nullptr) const;
    ad::Var graph_encoder(ad::Tape<T>& t, ad::Var hP, const EncoderInputs& in,
                          std::vector<ad::Mat<T>>* gates = nullptr,
                          ad::Var* pre_mlp = nullptr) const;
    ad::Var node_encoder(ad::Tape<T>& t, ad::Var input, const EncoderInputs& in,
                         ad::AttentionWeights<T>* observed = nullptr) const;
    Encoded encode(ad::Tape<T>& t, const EncoderInputs& in) const;

    /// Scores and probabilities for the next node of every trajectory in `state`.
    StepOutput<T> decoder_step(ad::Tape<T>& t, const Encoded& enc, const EncoderInputs& in,
                               const DecodeState& state) const;

    RolloutBatch<T> rollout(ad::Tape<T>& t, const EncoderInputs& in, const RolloutOptions<T>& opt) const;

  private:
    struct DecoderCache;

    DecoderCache prepare_decoder(ad::Tape<T>& t, const Encoded& enc, const EncoderInputs& in) const;
    StepOutput<T> step(ad::Tape<T>& t, const DecoderCache& cache, const EncoderInputs& in,
                       const DecodeState& state) const;
    ad::Var param(ad::Tape<T>& t, const std::string& name) const;

    ModelConfig cfg_;
    ModelParams<T>* params_;
};

/// Number of trajectories a full multi-start rollout uses for `inst`.
int default_starts(const ProblemInstance& inst);

/// Convenience: encode one instance with the given augmentation and roll out.
template <class T>
RolloutBatch<T> rollout(const ModelConfig& cfg, ModelParams<T>& params, const ProblemInstance& inst,
                        int n_starts, DecodeMode mode, std::uint64_t seed,
                        std::optional<std::vector<int>> onehot = std::nullopt);

extern template class ModelParams<float>;
extern template class ModelParams<double>;
extern template class Policy<float>;
extern template class Policy<double>;

} // namespace efr
