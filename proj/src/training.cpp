#include "efr/training.hpp"

#include "efr/error.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <iterator>
#include <sstream>

namespace efr {

using ad::Mat;
using ad::Tape;
using json = nlohmann::json;

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

int to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return static_cast<int>(v);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects an integer, got '" + value + "'");
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects a number, got '" + value + "'");
    }
}

} // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (instances_per_epoch < 1) throw ConfigError("instances_per_epoch must be positive");
    if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
    if (gradient_clip && !(*gradient_clip > 0.0)) throw ConfigError("gradient_clip must be positive");
    if (problem == ProblemKind::ATSP && distribution != Distribution::Uniform)
        throw ConfigError("ATSP instances are only generated with the uniform distribution");
    const int min_n = problem == ProblemKind::CVRP ? 2 : 3;
    if (n < min_n) throw ConfigError("training size n is too small");
}

std::vector<int> TrainConfig::effective_milestones() const {
    if (!milestones.empty()) return milestones;
    const int m = static_cast<int>(std::floor(0.9 * epochs));
    if (m < 1) return {};
    return {m};
}

double TrainConfig::lr_at(int epoch) const {
    double rate = lr;
    for (int m : effective_milestones())
        if (epoch >= m) rate *= lr_decay;
    return rate;
}

std::map<std::string, std::string> to_key_values(const TrainConfig& c) {
    std::string ms;
    for (int m : c.effective_milestones()) ms += (ms.empty() ? "" : ",") + std::to_string(m);
    return {
        {"train_problem", std::string(to_string(c.problem))},
        {"n", std::to_string(c.n)},
        {"distribution", std::string(to_string(c.distribution))},
        {"epochs", std::to_string(c.epochs)},
        {"instances_per_epoch", std::to_string(c.instances_per_epoch)},
        {"batch_size", std::to_string(c.batch_size)},
        {"lr", fmt(c.lr)},
        {"lr_decay", fmt(c.lr_decay)},
        {"milestones", ms},
        {"gradient_clip", c.gradient_clip ? fmt(*c.gradient_clip) : "off"},
        {"seed", std::to_string(c.seed)},
        {"adam_beta1", fmt(c.adam_beta1)},
        {"adam_beta2", fmt(c.adam_beta2)},
        {"adam_eps", fmt(c.adam_eps)},
    };
}

bool apply_key_value(TrainConfig& c, const std::string& key, const std::string& value) {
    if (key == "train_problem") c.problem = parse_problem_kind(value);
    else if (key == "n") c.n = to_int(key, value);
    else if (key == "distribution") c.distribution = parse_distribution(value);
    else if (key == "epochs") c.epochs = to_int(key, value);
    else if (key == "instances_per_epoch") c.instances_per_epoch = to_int(key, value);
    else if (key == "batch_size") c.batch_size = to_int(key, value);
    else if (key == "lr") c.lr = to_double(key, value);
    else if (key == "lr_decay") c.lr_decay = to_double(key, value);
    else if (key == "milestones") {
        c.milestones.clear();
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) c.milestones.push_back(to_int(key, item));
    } else if (key == "gradient_clip") {
        if (value == "off" || value == "none" || value.empty()) c.gradient_clip.reset();
        else c.gradient_clip = to_double(key, value);
    } else if (key == "seed") c.seed = static_cast<std::uint64_t>(std::stoull(value));
    else if (key == "adam_beta1") c.adam_beta1 = to_double(key, value);
    else if (key == "adam_beta2") c.adam_beta2 = to_double(key, value);
    else if (key == "adam_eps") c.adam_eps = to_double(key, value);
    else return false;
    return true;
}

// ---------------------------------------------------------------------------
// Loss

std::vector<double> shared_baseline_advantages(std::span<const double> rewards, int groups, int starts) {
    if (starts < 2) throw ArgumentError("shared baseline needs at least 2 trajectories per instance");
    if (rewards.size() != static_cast<std::size_t>(groups) * starts)
        throw ArgumentError("reward count does not match groups x starts");
    std::vector<double> adv(rewards.size());
    for (int b = 0; b < groups; ++b) {
        double mean = 0.0;
        for (int i = 0; i < starts; ++i) mean += rewards[b * starts + i];
        mean /= starts;
        for (int i = 0; i < starts; ++i) adv[b * starts + i] = rewards[b * starts + i] - mean;
    }
    return adv;
}

template <class T>
LossResult<T> reinforce_loss(Tape<T>& t, const RolloutBatch<T>& batch) {
    LossResult<T> out;
    out.advantages = shared_baseline_advantages(batch.rewards, batch.groups, batch.starts);
    const std::size_t rows = out.advantages.size();
    std::vector<T> w(rows);
    double value = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        w[r] = static_cast<T>(-out.advantages[r] / static_cast<double>(rows));
        value += -out.advantages[r] * batch.log_prob_sum[r];
    }
    out.value = value / static_cast<double>(rows);
    out.loss = ad::weighted_sum(t, batch.log_prob, std::move(w));
    return out;
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
Adam<T>::Adam(const ModelParams<T>& params, double beta1, double beta2, double eps)
    : b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& a : params.arrays()) {
        m_.push_back(Mat<T>::Zero(a.value.rows(), a.value.cols()));
        v_.push_back(Mat<T>::Zero(a.value.rows(), a.value.cols()));
    }
}

template <class T>
void Adam<T>::step(ModelParams<T>& params, double lr) {
    auto& arrays = params.arrays();
    if (arrays.size() != m_.size()) throw ArgumentError("optimizer state does not match the parameter set");
    ++t_;
    const T c1 = static_cast<T>(1.0 - std::pow(b1_, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(b2_, static_cast<double>(t_)));
    const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_), eps = static_cast<T>(eps_);
    const T rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        auto g = arrays[i].grad.array();
        m_[i].array() = b1 * m_[i].array() + (T(1) - b1) * g;
        v_[i].array() = b2 * v_[i].array() + (T(1) - b2) * g.square();
        arrays[i].value.array() -= rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
}

template <class T>
double gradient_norm(const ModelParams<T>& params) {
    double s = 0.0;
    for (const auto& a : params.arrays()) s += static_cast<double>(a.grad.squaredNorm());
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Epoch loop

std::uint64_t batch_seed(std::uint64_t master, int epoch, int batch) {
    return splitmix64(splitmix64(master ^ 0x5eedULL) + static_cast<std::uint64_t>(epoch) * 0x100000001ULL +
                      static_cast<std::uint64_t>(batch));
}

std::vector<ProblemInstance> training_instances(const TrainConfig& tc, std::uint64_t seed, int count) {
    std::vector<ProblemInstance> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const std::uint64_t s = splitmix64(seed + static_cast<std::uint64_t>(i));
        out.push_back(tc.problem == ProblemKind::ATSP ? generate_atsp_instance(tc.n, s)
                                                      : generate_instance(tc.problem, tc.n, tc.distribution, s));
    }
    return out;
}

template <class T>
Trainer<T>::Trainer(ModelConfig m, TrainConfig tc, ModelParams<T> p)
    : model(std::move(m)), train(std::move(tc)), params(std::move(p)) {
    model.validate();
    train.validate();
    if (model.problem != train.problem) throw ConfigError("model and training problem kinds differ");
    adam = Adam<T>(params, train.adam_beta1, train.adam_beta2, train.adam_eps);
}

template <class T>
double Trainer<T>::train_batch(std::span<const ModelInput> inputs, double lr, std::uint64_t seed,
                               double* mean_length) {
    const EncoderInputs in = make_encoder_inputs(inputs, model);
    Policy<T> policy(model, params);
    params.zero_grad();
    Tape<T> tape(true);
    RolloutOptions<T> opt;
    opt.mode = DecodeMode::Sample;
    opt.seed = seed;
    const RolloutBatch<T> batch = policy.rollout(tape, in, opt);
    const LossResult<T> loss = reinforce_loss(tape, batch);
    if (!std::isfinite(loss.value))
        throw NumericError("non-finite loss in batch with seed " + std::to_string(seed));
    tape.backward(loss.loss);
    const double gnorm = gradient_norm(params);
    if (!std::isfinite(gnorm))
        throw NumericError("non-finite gradient in batch with seed " + std::to_string(seed));
    if (train.gradient_clip && gnorm > *train.gradient_clip) {
        const T s = static_cast<T>(*train.gradient_clip / gnorm);
        for (auto& a : params.arrays()) a.grad *= s;
    }
    adam.step(params, lr);
    try {
        params.check_finite();
    } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " after batch with seed " + std::to_string(seed));
    }
    if (mean_length) {
        double s = 0.0;
        for (double l : batch.lengths) s += l;
        *mean_length = s / static_cast<double>(batch.lengths.size());
    }
    return loss.value;
}

template <class T>
EpochStats Trainer<T>::train_epoch(int epoch, const std::function<void(int, double)>& on_batch) {
    const auto start = std::chrono::steady_clock::now();
    EpochStats st;
    st.epoch = epoch;
    st.lr = train.lr_at(epoch);
    int remaining = train.instances_per_epoch;
    double len_sum = 0.0, loss_sum = 0.0;
    for (int b = 0; remaining > 0; ++b) {
        const int count = std::min(remaining, train.batch_size);
        const std::uint64_t seed = batch_seed(train.seed, epoch, b);
        const std::vector<ProblemInstance> insts = training_instances(train, seed, count);
        std::vector<ModelInput> inputs(count);
        for (int i = 0; i < count; ++i) {
            inputs[i].instance = &insts[i];
            if (model.uses_precoder())
                inputs[i].onehot = sample_onehot_assignment(insts[i].n, model.onehot_pool,
                                                            splitmix64(seed ^ (0xabcdefULL + i)));
        }
        double mean_len = 0.0;
        const double loss = train_batch(inputs, st.lr, seed, &mean_len);
        len_sum += mean_len * count;
        loss_sum += loss * count;
        st.instances += count;
        remaining -= count;
        if (on_batch) on_batch(b, loss);
    }
    st.mean_length = len_sum / static_cast<double>(st.instances);
    st.mean_reward = -st.mean_length;
    st.loss = loss_sum / static_cast<double>(st.instances);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    next_epoch = epoch + 1;
    return st;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::uint64_t fnv1a(const char* data, std::size_t size) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

} // namespace

template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams<T>& params,
                     const std::map<std::string, std::string>& metadata, const Adam<T>* adam) {
    std::vector<std::pair<std::string, const Mat<T>*>> arrays;
    for (const auto& a : params.arrays()) arrays.emplace_back(a.name, &a.value);
    if (adam) {
        const auto& m = adam->first_moments();
        const auto& v = adam->second_moments();
        for (std::size_t i = 0; i < m.size(); ++i) arrays.emplace_back("adam.m." + params.arrays()[i].name, &m[i]);
        for (std::size_t i = 0; i < v.size(); ++i) arrays.emplace_back("adam.v." + params.arrays()[i].name, &v[i]);
    }
    std::vector<double> payload;
    json entries = json::array();
    for (const auto& [name, mat] : arrays) {
        entries.push_back({{"name", name}, {"rows", mat->rows()}, {"cols", mat->cols()}});
        for (Eigen::Index i = 0; i < mat->size(); ++i) payload.push_back(static_cast<double>(mat->data()[i]));
    }
    const char* bytes = reinterpret_cast<const char*>(payload.data());
    const std::size_t nbytes = payload.size() * sizeof(double);
    json header;
    header["model"] = to_key_values(cfg);
    header["metadata"] = metadata;
    header["arrays"] = entries;
    header["count"] = payload.size();
    header["checksum"] = hex(fnv1a(bytes, nbytes));
    if (adam) header["optimizer_steps"] = adam->steps();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint '" + path + "'");
        f << kCheckpointVersion << '\n' << header.dump() << '\n';
        f.write(bytes, static_cast<std::streamsize>(nbytes));
        if (!f) throw IoError("failed while writing checkpoint '" + path + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into '" + path + "'");
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path + "'");
    std::string version, header_line;
    if (!std::getline(f, version)) throw DataError("empty checkpoint '" + path + "'");
    if (version != kCheckpointVersion) {
        if (version.rfind("efr-ckpt-", 0) == 0)
            throw VersionError("checkpoint '" + path + "' has format " + version + ", expected " + kCheckpointVersion);
        throw DataError("'" + path + "' is not a checkpoint");
    }
    if (!std::getline(f, header_line)) throw DataError("checkpoint header missing in '" + path + "'");
    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::exception& e) {
        throw DataError("checkpoint header unreadable in '" + path + "': " + e.what());
    }
    const std::string payload_bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Checkpoint<T> ck;
    try {
        const auto model_keys = header.at("model").get<std::map<std::string, std::string>>();
        for (const auto& [k, v] : model_keys) {
            if (!apply_key_value(ck.model, k, v)) throw DataError("unknown model key '" + k + "' in checkpoint");
        }
        ck.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
        const std::size_t count = header.at("count").get<std::size_t>();
        if (payload_bytes.size() != count * sizeof(double))
            throw DataError("checkpoint '" + path + "' is truncated or has trailing bytes");
        if (header.at("checksum").get<std::string>() != hex(fnv1a(payload_bytes.data(), payload_bytes.size())))
            throw DataError("checkpoint '" + path + "' fails its checksum");
        ck.model.validate();

        ModelParams<T> expected = init_params<T>(ck.model, 0);
        std::vector<double> payload(count);
        std::memcpy(payload.data(), payload_bytes.data(), payload_bytes.size());
        std::map<std::string, Mat<T>> loaded;
        std::size_t offset = 0;
        for (const auto& e : header.at("arrays")) {
            const auto rows = e.at("rows").get<Eigen::Index>();
            const auto cols = e.at("cols").get<Eigen::Index>();
            if (rows < 0 || cols < 0 || offset + static_cast<std::size_t>(rows * cols) > count)
                throw DataError("checkpoint array table overruns the payload");
            Mat<T> m(rows, cols);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(payload[offset + i]);
            offset += static_cast<std::size_t>(rows * cols);
            loaded[e.at("name").get<std::string>()] = std::move(m);
        }
        auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
            auto it = loaded.find(name);
            if (it == loaded.end()) throw DataError("checkpoint lacks array '" + name + "'");
            if (it->second.rows() != rows || it->second.cols() != cols)
                throw DataError("checkpoint array '" + name + "' has the wrong shape");
            Mat<T> m = std::move(it->second);
            loaded.erase(it);
            return m;
        };
        for (const auto& a : expected.arrays()) ck.params.add(a.name, take(a.name, a.value.rows(), a.value.cols()));
        if (header.contains("optimizer_steps")) {
            Adam<T> adam(ck.params);
            for (std::size_t i = 0; i < ck.params.arrays().size(); ++i) {
                const auto& a = ck.params.arrays()[i];
                adam.first_moments()[i] = take("adam.m." + a.name, a.value.rows(), a.value.cols());
                adam.second_moments()[i] = take("adam.v." + a.name, a.value.rows(), a.value.cols());
            }
            adam.set_steps(header.at("optimizer_steps").get<std::int64_t>());
            ck.adam = std::move(adam);
        }
        if (!loaded.empty()) throw DataError("checkpoint holds unexpected array '" + loaded.begin()->first + "'");
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint header in '" + path + "': " + e.what());
    } catch (const ConfigError& e) {
        throw DataError("checkpoint '" + path + "' has an invalid model config: " + e.what());
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Gradient check

ModelConfig gradcheck_config(ProblemKind kind, InputVariant variant) {
    ModelConfig c;
    c.problem = kind;
    c.variant = variant;
    c.embed_dim = 8;
    c.heads = 2;
    c.ff_dim = 16;
    c.precoder_layers = 1;
    c.node_layers = 1;
    c.gcn_layers = 1;
    c.mlp_layers = 1;
    c.k = 3;
    c.onehot_pool = 8;
    c.mix_hidden = 4;
    return c;
}

GradcheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt) {
    cfg.validate();
    GradcheckReport rep;
    rep.tolerance = opt.tolerance;
    ModelParams<double> params = init_params<double>(cfg, seed);
    if (opt.perturb > 0.0) {
        std::mt19937_64 rng(splitmix64(seed ^ 0x5eedULL));
        std::normal_distribution<double> noise(0.0, opt.perturb);
        for (auto& arr : params.arrays())
            for (Eigen::Index i = 0; i < arr.value.size(); ++i) arr.value.data()[i] += noise(rng);
    }

    std::vector<ProblemInstance> insts;
    for (int g = 0; g < opt.groups; ++g) {
        const std::uint64_t s = splitmix64(seed * 31 + g);
        if (cfg.problem == ProblemKind::ATSP) insts.push_back(generate_atsp_instance(opt.n, s));
        else if (cfg.problem == ProblemKind::CVRP)
            insts.push_back(generate_instance(ProblemKind::CVRP, opt.n - 1, Distribution::Uniform, s));
        else insts.push_back(generate_instance(ProblemKind::TSP, opt.n, Distribution::Uniform, s));
    }
    std::vector<ModelInput> inputs(insts.size());
    for (std::size_t g = 0; g < insts.size(); ++g) {
        inputs[g].instance = &insts[g];
        if (cfg.uses_precoder())
            inputs[g].onehot = sample_onehot_assignment(insts[g].n, cfg.onehot_pool, splitmix64(seed + 7 * g));
    }
    const EncoderInputs in = make_encoder_inputs(inputs, cfg);

    // sampled trajectories become fixed teacher-forced routes
    std::vector<std::vector<int>> routes;
    {
        Policy<double> policy(cfg, params);
        Tape<double> tape(false);
        RolloutOptions<double> ro;
        ro.mode = DecodeMode::Sample;
        ro.seed = seed;
        routes = policy.rollout(tape, in, ro).routes;
    }
    auto loss_at = [&](bool record, double* value) {
        Policy<double> policy(cfg, params);
        Tape<double> tape(record);
        RolloutOptions<double> ro;
        ro.forced = &routes;
        const RolloutBatch<double> b = policy.rollout(tape, in, ro);
        const LossResult<double> l = reinforce_loss(tape, b);
        *value = l.value;
        if (record) tape.backward(l.loss);
    };

    params.zero_grad();
    loss_at(true, &rep.loss);
    for (auto& arr : params.arrays()) {
        GradcheckArray g;
        g.name = arr.name;
        g.size = static_cast<std::size_t>(arr.value.size());
        Mat<double> numeric(arr.value.rows(), arr.value.cols());
        for (Eigen::Index i = 0; i < arr.value.size(); ++i) {
            const double orig = arr.value.data()[i];
            double up = 0.0, down = 0.0;
            arr.value.data()[i] = orig + opt.step;
            loss_at(false, &up);
            arr.value.data()[i] = orig - opt.step;
            loss_at(false, &down);
            arr.value.data()[i] = orig;
            numeric.data()[i] = (up - down) / (2.0 * opt.step);
        }
        const double an = arr.grad.norm();
        const double nn = numeric.norm();
        const double diff = (arr.grad - numeric).norm();
        g.analytic_norm = an;
        // the per-coordinate floor, summed in quadrature over the array
        const double floor = opt.noise_floor * std::sqrt(static_cast<double>(std::max<std::size_t>(g.size, 1)));
        g.relative_error = diff / std::max(an + nn, floor);
        std::size_t ok = 0;
        for (Eigen::Index i = 0; i < numeric.size(); ++i) {
            const double a = arr.grad.data()[i], n = numeric.data()[i];
            const double denom = std::max(std::abs(a) + std::abs(n), opt.noise_floor);
            if (std::abs(a - n) / denom < opt.tolerance) ++ok;
        }
        g.coordinate_pass = g.size ? static_cast<double>(ok) / static_cast<double>(g.size) : 1.0;
        rep.max_relative_error = std::max(rep.max_relative_error, g.relative_error);
        rep.min_coordinate_pass = std::min(rep.min_coordinate_pass, g.coordinate_pass);
        rep.arrays.push_back(std::move(g));
    }
    return rep;
}

template LossResult<float> reinforce_loss<float>(Tape<float>&, const RolloutBatch<float>&);
template LossResult<double> reinforce_loss<double>(Tape<double>&, const RolloutBatch<double>&);
template class Adam<float>;
template class Adam<double>;
template double gradient_norm<float>(const ModelParams<float>&);
template double gradient_norm<double>(const ModelParams<double>&);
template struct Trainer<float>;
template struct Trainer<double>;
template void save_checkpoint<float>(const std::string&, const ModelConfig&, const ModelParams<float>&,
                                     const std::map<std::string, std::string>&, const Adam<float>*);
template void save_checkpoint<double>(const std::string&, const ModelConfig&, const ModelParams<double>&,
                                      const std::map<std::string, std::string>&, const Adam<double>*);
template Checkpoint<float> load_checkpoint<float>(const std::string&);
template Checkpoint<double> load_checkpoint<double>(const std::string&);

} // namespace efr
