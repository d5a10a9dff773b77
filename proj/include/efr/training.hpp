#pragma once

/// @file training.hpp
/// REINFORCE with a multi-start shared baseline, Adam, the epoch loop,
/// checkpoint files and a finite-difference gradient check.

#include "efr/model.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace efr {

struct TrainConfig {
    ProblemKind problem = ProblemKind::TSP;
    int n = 20;  // nodes for TSP/ATSP, customers for CVRP
    Distribution distribution = Distribution::Uniform;
    int epochs = 1;
    int instances_per_epoch = 100000;
    int batch_size = 64;
    double lr = 1e-4;
    double lr_decay = 0.1;
    /// Epochs (0-based) at whose start the rate is multiplied by lr_decay.
    /// Empty means a single milestone at 90% of `epochs`.
    std::vector<int> milestones;
    std::optional<double> gradient_clip;
    std::uint64_t seed = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    std::vector<int> effective_milestones() const;
    /// Learning rate in force during `epoch`.
    double lr_at(int epoch) const;
    /// Nodes of a generated training instance.
    int instance_nodes() const { return problem == ProblemKind::CVRP ? n + 1 : n; }
};

std::map<std::string, std::string> to_key_values(const TrainConfig& cfg);
bool apply_key_value(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Shared-baseline advantages: per instance, reward minus the mean reward of
/// its `starts` trajectories. Throws ArgumentError when starts < 2.
std::vector<double> shared_baseline_advantages(std::span<const double> rewards, int groups, int starts);

template <class T>
struct LossResult {
    ad::Var loss;                     // 1 x 1 on the tape
    double value = 0.0;
    std::vector<double> advantages;
};

/// -mean over trajectories of advantage * log p(trajectory).
template <class T>
LossResult<T> reinforce_loss(ad::Tape<T>& t, const RolloutBatch<T>& batch);

/// Adam with bias correction. Moments are keyed by array order of the
/// parameter set it was created for.
template <class T>
class Adam {
  public:
    Adam() = default;
    Adam(const ModelParams<T>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// Applies one update using the gradients stored in `params`.
    void step(ModelParams<T>& params, double lr);

    std::int64_t steps() const { return t_; }
    std::vector<ad::Mat<T>>& first_moments() { return m_; }
    std::vector<ad::Mat<T>>& second_moments() { return v_; }
    const std::vector<ad::Mat<T>>& first_moments() const { return m_; }
    const std::vector<ad::Mat<T>>& second_moments() const { return v_; }
    void set_steps(std::int64_t t) { t_ = t; }

  private:
    double b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::vector<ad::Mat<T>> m_, v_;
};

/// L2 norm over every gradient array.
template <class T>
double gradient_norm(const ModelParams<T>& params);

struct EpochStats {
    int epoch = 0;
    double mean_length = 0.0;
    double mean_reward = 0.0;
    double loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
    long instances = 0;
};

/// Seed of batch `batch` in epoch `epoch`, derived from the master seed.
std::uint64_t batch_seed(std::uint64_t master, int epoch, int batch);

/// Builds a training batch: instances plus fresh augmentation draws.
std::vector<ProblemInstance> training_instances(const TrainConfig& tc, std::uint64_t seed, int count);

template <class T>
struct Trainer {
    ModelConfig model;
    TrainConfig train;
    ModelParams<T> params;
    Adam<T> adam;
    int next_epoch = 0;

    Trainer(ModelConfig m, TrainConfig tc, ModelParams<T> p);

    /// One pass over `train.instances_per_epoch` fresh instances. Throws
    /// NumericError naming the batch seed when the loss or a parameter
    /// turns non-finite.
    EpochStats train_epoch(int epoch, const std::function<void(int batch, double loss)>& on_batch = {});
    /// One optimizer step on the given inputs; returns the loss value.
    double train_batch(std::span<const ModelInput> inputs, double lr, std::uint64_t seed,
                       double* mean_length = nullptr);
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointVersion = "efr-ckpt-1";

template <class T>
struct Checkpoint {
    ModelConfig model;
    ModelParams<T> params;
    std::map<std::string, std::string> metadata;
    /// Optimizer moments, present when saved from a trainer.
    std::optional<Adam<T>> adam;
};

/// Writes config, metadata and every named array (as doubles) to `path`.
template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams<T>& params,
                     const std::map<std::string, std::string>& metadata = {}, const Adam<T>* adam = nullptr);

/// Reads a checkpoint. Throws VersionError on a different format tag and
/// DataError on truncation, checksum or shape problems.
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Gradient check

struct GradcheckArray {
    std::string name;
    std::size_t size = 0;
    double analytic_norm = 0.0;
    double relative_error = 0.0;   // ||a - n|| / max(||a|| + ||n||, noise_floor * sqrt(size))
    double coordinate_pass = 1.0;  // fraction of coordinates within tolerance
};

struct GradcheckReport {
    std::vector<GradcheckArray> arrays;
    double max_relative_error = 0.0;
    double min_coordinate_pass = 1.0;
    double loss = 0.0;
    double tolerance = 1e-4;
    bool passed() const { return max_relative_error < tolerance; }
};

/// The small configuration used by gradient checks.
ModelConfig gradcheck_config(ProblemKind kind = ProblemKind::TSP, InputVariant variant = InputVariant::EdgeInput);

struct GradcheckOptions {
    int n = 5;
    int groups = 2;
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Std of Gaussian noise added to the initial parameters. At the plain
    /// initialization the precoder rows are nearly identical, attention in
    /// the node encoder is almost uniform and its weight gradients fall
    /// below what central differences can resolve.
    double perturb = 0.1;
    /// Smallest denominator in the relative error. Round-off in the loss
    /// limits central differences at step 1e-5 to roughly 1e-9 absolute
    /// accuracy, so gradients below this scale only need to agree absolutely.
    double noise_floor = 1e-4;
};

/// Samples trajectories, then compares the analytic gradient of the
/// teacher-forced surrogate loss against central differences for every
/// parameter array, in double precision.
GradcheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt = {});

} // namespace efr
