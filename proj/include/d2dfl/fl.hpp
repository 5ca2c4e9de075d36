#pragma once

#include "d2dfl/common.hpp"
#include "d2dfl/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace d2dfl {

// softmax: multinomial logistic regression. mlp: one tanh hidden layer.
// encoder: same shape as mlp, output is an embedding. linear: scalar regression.
enum class ArchKind { softmax, mlp, encoder, linear };

struct Arch {
    ArchKind kind = ArchKind::softmax;
    int input = 0;
    int output = 0;  // classes, embedding size, or 1 for regression
    int hidden = 0;

    bool layered() const { return kind == ArchKind::mlp || kind == ArchKind::encoder; }
    Eigen::Index param_count() const {
        if (layered()) return static_cast<Eigen::Index>(hidden) * (input + 1) + static_cast<Eigen::Index>(output) * (hidden + 1);
        return static_cast<Eigen::Index>(output) * (input + 1);
    }
    void validate() const {
        if (input < 1 || output < 1) throw invalid_parameter("architecture needs positive input and output sizes");
        if (layered() && hidden < 1) throw invalid_parameter("hidden width must be positive");
        if (kind == ArchKind::linear && output != 1) throw invalid_parameter("linear regression has one output");
    }
};

struct ModelParams {
    Arch arch;
    Vec weights;
};

inline ModelParams init_model(const Arch& arch, Rng& rng) {
    arch.validate();
    ModelParams m{arch, Vec::Zero(arch.param_count())};
    std::normal_distribution<double> n01(0.0, 1.0);
    auto fill = [&](Eigen::Index off, int rows, int cols) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
        for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(rows) * cols; ++k) m.weights(off + k) = scale * n01(rng);
    };
    if (arch.layered()) {
        fill(0, arch.hidden, arch.input);
        fill(static_cast<Eigen::Index>(arch.hidden) * (arch.input + 1), arch.output, arch.hidden);
    } else {
        fill(0, arch.output, arch.input);
    }
    return m;
}

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstLayer = Eigen::Map<const RowMat>;
using Layer = Eigen::Map<RowMat>;

struct Forward {
    Mat hidden;  // tanh activations, layered archs only
    Mat out;
};

inline Forward forward(const ModelParams& m, const Mat& x) {
    const Arch& a = m.arch;
    const double* w = m.weights.data();
    Forward f;
    if (a.layered()) {
        ConstLayer w1(w, a.hidden, a.input);
        Eigen::Map<const Vec> b1(w + static_cast<Eigen::Index>(a.hidden) * a.input, a.hidden);
        const double* w2p = w + static_cast<Eigen::Index>(a.hidden) * (a.input + 1);
        ConstLayer w2(w2p, a.output, a.hidden);
        Eigen::Map<const Vec> b2(w2p + static_cast<Eigen::Index>(a.output) * a.hidden, a.output);
        f.hidden = ((x * w1.transpose()).rowwise() + b1.transpose()).array().tanh().matrix();
        f.out = (f.hidden * w2.transpose()).rowwise() + b2.transpose();
    } else {
        ConstLayer w1(w, a.output, a.input);
        Eigen::Map<const Vec> b1(w + static_cast<Eigen::Index>(a.output) * a.input, a.output);
        f.out = (x * w1.transpose()).rowwise() + b1.transpose();
    }
    return f;
}

// Adds d(loss)/d(weights) into `grad` given d(loss)/d(out).
inline void backward(const ModelParams& m, const Mat& x, const Forward& f, const Mat& dout, Vec& grad) {
    const Arch& a = m.arch;
    double* g = grad.data();
    if (a.layered()) {
        const double* w2p = m.weights.data() + static_cast<Eigen::Index>(a.hidden) * (a.input + 1);
        ConstLayer w2(w2p, a.output, a.hidden);
        double* g2p = g + static_cast<Eigen::Index>(a.hidden) * (a.input + 1);
        Layer gw2(g2p, a.output, a.hidden);
        Eigen::Map<Vec> gb2(g2p + static_cast<Eigen::Index>(a.output) * a.hidden, a.output);
        gw2 += dout.transpose() * f.hidden;
        gb2 += dout.colwise().sum().transpose();
        const Mat dh = ((dout * w2).array() * (1.0 - f.hidden.array().square())).matrix();
        Layer gw1(g, a.hidden, a.input);
        Eigen::Map<Vec> gb1(g + static_cast<Eigen::Index>(a.hidden) * a.input, a.hidden);
        gw1 += dh.transpose() * x;
        gb1 += dh.colwise().sum().transpose();
    } else {
        Layer gw(g, a.output, a.input);
        Eigen::Map<Vec> gb(g + static_cast<Eigen::Index>(a.output) * a.input, a.output);
        gw += dout.transpose() * x;
        gb += dout.colwise().sum().transpose();
    }
}

inline Mat row_softmax(const Mat& z) {
    Mat p = z;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        p.row(r).array() -= p.row(r).maxCoeff();
        p.row(r) = p.row(r).array().exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}
}  // namespace detail

inline Mat predict(const ModelParams& m, const Mat& x) { return detail::forward(m, x).out; }

enum class LossKind { ce, mse, triplet, ce_prox };

/// A minibatch. Triplet batches carry positives and negatives row-aligned
/// with the anchors in `x`.
struct Batch {
    Mat x;
    std::vector<int> labels;
    std::vector<double> targets;
    Mat positive;
    Mat negative;

    int size() const { return static_cast<int>(x.rows()); }
};

struct LossSpec {
    LossKind kind = LossKind::ce;
    double margin = 1.0;
    double prox_mu = 0.0;
    const Vec* anchor = nullptr;  // global model for ce_prox
};

/// Mean loss over the batch and its gradient.
inline std::pair<double, Vec> loss_and_gradient(const ModelParams& m, const Batch& b, const LossSpec& spec) {
    if (b.size() == 0) throw invalid_parameter("empty batch");
    const double n = static_cast<double>(b.size());
    Vec grad = Vec::Zero(m.weights.size());
    double loss = 0.0;
    switch (spec.kind) {
        case LossKind::ce:
        case LossKind::ce_prox: {
            const auto f = detail::forward(m, b.x);
            Mat p = detail::row_softmax(f.out);
            for (int r = 0; r < b.size(); ++r) {
                const int y = b.labels[r];
                if (y < 0 || y >= m.arch.output) throw invalid_parameter("label outside the model's classes");
                loss -= std::log(std::max(p(r, y), 1e-300));
                p(r, y) -= 1.0;
            }
            loss /= n;
            p /= n;
            detail::backward(m, b.x, f, p, grad);
            if (spec.kind == LossKind::ce_prox && spec.prox_mu != 0.0) {
                if (!spec.anchor) throw invalid_parameter("proximal loss needs the global model");
                const Vec diff = m.weights - *spec.anchor;
                loss += 0.5 * spec.prox_mu * diff.squaredNorm();
                grad += spec.prox_mu * diff;
            }
            break;
        }
        case LossKind::mse: {
            const auto f = detail::forward(m, b.x);
            Mat d(b.size(), 1);
            for (int r = 0; r < b.size(); ++r) {
                const double e = f.out(r, 0) - b.targets[r];
                loss += e * e;
                d(r, 0) = 2.0 * e / n;
            }
            loss /= n;
            detail::backward(m, b.x, f, d, grad);
            break;
        }
        case LossKind::triplet: {
            const auto fa = detail::forward(m, b.x);
            const auto fp = detail::forward(m, b.positive);
            const auto fn = detail::forward(m, b.negative);
            Mat da = Mat::Zero(fa.out.rows(), fa.out.cols());
            Mat dp = da, dn = da;
            for (int r = 0; r < b.size(); ++r) {
                const Vec ap = (fa.out.row(r) - fp.out.row(r)).transpose();
                const Vec an = (fa.out.row(r) - fn.out.row(r)).transpose();
                const double lp = std::sqrt(ap.squaredNorm() + 1e-12);
                const double ln = std::sqrt(an.squaredNorm() + 1e-12);
                const double h = lp - ln + spec.margin;
                if (h <= 0.0) continue;
                loss += h;
                const Vec gp = ap / lp, gn = an / ln;
                da.row(r) = (gp - gn).transpose() / n;
                dp.row(r) = -gp.transpose() / n;
                dn.row(r) = gn.transpose() / n;
            }
            loss /= n;
            detail::backward(m, b.x, fa, da, grad);
            detail::backward(m, b.positive, fp, dp, grad);
            detail::backward(m, b.negative, fn, dn, grad);
            break;
        }
    }
    return {loss, grad};
}

inline double loss_value(const ModelParams& m, const Batch& b, const LossSpec& spec) {
    return loss_and_gradient(m, b, spec).first;
}

/// One SGD step.
inline ModelParams local_step(const ModelParams& m, const Batch& b, const LossSpec& spec, double lr) {
    auto [loss, grad] = loss_and_gradient(m, b, spec);
    if (!std::isfinite(loss) || !grad.allFinite())
        throw numeric_error("nonfinite loss " + std::to_string(loss) + " on a batch of " + std::to_string(b.size()) +
                            " (lr " + std::to_string(lr) + ")");
    ModelParams out = m;
    if (lr != 0.0) out.weights -= lr * grad;
    return out;
}

/// Rows drawn with replacement, or the whole dataset when batch_size <= 0.
/// Triplet batches get a noisy copy of each anchor as its positive and a
/// different random point as its negative.
inline Batch make_batch(const LocalDataset& ds, int batch_size, LossKind kind, double sigma_aug, Rng& rng) {
    const int n = ds.size();
    if (n == 0) throw invalid_parameter("cannot batch an empty dataset");
    std::vector<int> rows;
    if (batch_size <= 0) {
        rows.resize(n);
        std::iota(rows.begin(), rows.end(), 0);
    } else {
        for (int k = 0; k < batch_size; ++k) rows.push_back(uniform_int(rng, 0, n - 1));
    }
    Batch b;
    b.x.resize(static_cast<Eigen::Index>(rows.size()), ds.dim());
    for (std::size_t k = 0; k < rows.size(); ++k) b.x.row(static_cast<Eigen::Index>(k)) = ds.features.row(rows[k]);
    if (kind == LossKind::ce || kind == LossKind::ce_prox)
        for (int r : rows) b.labels.push_back(ds.labels.at(r));
    if (kind == LossKind::mse)
        for (int r : rows) b.targets.push_back(ds.targets.at(r));
    if (kind == LossKind::triplet) {
        std::normal_distribution<double> noise(0.0, sigma_aug);
        b.positive = b.x;
        for (Eigen::Index r = 0; r < b.positive.rows(); ++r)
            for (Eigen::Index c = 0; c < b.positive.cols(); ++c) b.positive(r, c) += noise(rng);
        b.negative.resize(b.x.rows(), b.x.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            int other = rows[k];
            if (n > 1) {
                other = uniform_int(rng, 0, n - 2);
                if (other >= rows[k]) ++other;
            }
            b.negative.row(static_cast<Eigen::Index>(k)) = ds.features.row(other);
        }
    }
    return b;
}

/// Weighted mean of parameter vectors (weights are dataset sizes).
inline Vec weighted_mean(std::span<const Vec> vecs, std::span<const double> weights) {
    if (vecs.empty()) throw aggregation_error("no participating models");
    if (vecs.size() != weights.size()) throw invalid_parameter("one weight per model required");
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw invalid_parameter("aggregation weights must be nonnegative");
        total += w;
    }
    if (!(total > 0.0)) throw aggregation_error("aggregation weights sum to zero");
    Vec out = Vec::Zero(vecs.front().size());
    for (std::size_t k = 0; k < vecs.size(); ++k) out += (weights[k] / total) * vecs[k];
    return out;
}

inline ModelParams aggregate(std::span<const ModelParams> models, std::span<const double> sizes) {
    if (models.empty()) throw aggregation_error("no participating models");
    std::vector<Vec> w;
    for (const auto& m : models) w.push_back(m.weights);
    return {models.front().arch, weighted_mean(w, sizes)};
}

/// Every device takes the plain mean of its own model and `neighbors`
/// others drawn uniformly without replacement. Only devices flagged in
/// `active` (all, when empty) share or mix. Returns models received.
inline std::int64_t mix_decentralized(std::vector<ModelParams>& models, int neighbors, Rng& rng,
                                      std::span<const std::uint8_t> active = {}) {
    const int n = static_cast<int>(models.size());
    if (neighbors < 0 || (n > 0 && neighbors >= n)) throw invalid_parameter("neighbor count must be in [0, N)");
    if (neighbors == 0) return 0;
    auto on = [&](int i) { return active.empty() || active[i]; };
    const auto before = models;
    std::int64_t transfers = 0;
    for (int i = 0; i < n; ++i) {
        if (!on(i)) continue;
        std::vector<int> pool;
        for (int j = 0; j < n; ++j)
            if (j != i && on(j)) pool.push_back(j);
        std::shuffle(pool.begin(), pool.end(), rng);
        const int take = std::min<int>(neighbors, static_cast<int>(pool.size()));
        Vec acc = before[i].weights;
        for (int k = 0; k < take; ++k) acc += before[pool[k]].weights;
        models[i].weights = acc / static_cast<double>(take + 1);
        transfers += take;
    }
    return transfers;
}

inline std::vector<ModelParams> run_round_decentralized(std::vector<ModelParams> models, int neighbors, Rng& rng) {
    mix_decentralized(models, neighbors, rng);
    return models;
}

/// Consecutive disjoint groups of `size` devices.
inline std::vector<std::vector<int>> make_subsets(int devices, int size) {
    if (size < 1 || devices % size != 0)
        throw config_error("cannot split " + std::to_string(devices) + " devices into subsets of " +
                           std::to_string(size));
    std::vector<std::vector<int>> out(devices / size);
    for (int i = 0; i < devices; ++i) out[i / size].push_back(i);
    return out;
}

inline void check_subsets(const std::vector<std::vector<int>>& subsets, int devices) {
    std::vector<int> seen(devices, 0);
    for (const auto& s : subsets) {
        if (s.empty()) throw config_error("empty subset");
        for (int i : s) {
            if (i < 0 || i >= devices || seen[i]++) throw config_error("subsets must partition the devices");
        }
    }
    for (int v : seen)
        if (!v) throw config_error("subsets must cover every device");
}

struct SemiTransfers {
    std::int64_t d2d = 0;
    std::int64_t d2s = 0;
};

/// `global_every` local steps. After every `intra_every` steps each subset
/// averages its models; at the end the server averages one random member
/// per subset and broadcasts the result to everyone.
inline SemiTransfers run_round_semidecentralized(std::vector<ModelParams>& models,
                                                 const std::vector<std::vector<int>>& subsets, int intra_every,
                                                 int global_every, const std::function<void(int step)>& local_steps,
                                                 Rng& rng) {
    const int n = static_cast<int>(models.size());
    check_subsets(subsets, n);
    if (intra_every < 1 || global_every < 1) throw config_error("averaging periods must be >= 1");
    SemiTransfers t;
    for (int step = 1; step <= global_every; ++step) {
        if (local_steps) local_steps(step);
        if (step % intra_every == 0 || step == global_every) {
            for (const auto& s : subsets) {
                Vec acc = Vec::Zero(models[s.front()].weights.size());
                for (int i : s) acc += models[i].weights;
                acc /= static_cast<double>(s.size());
                for (int i : s) models[i].weights = acc;
                t.d2d += static_cast<std::int64_t>(s.size()) * static_cast<std::int64_t>(s.size() - 1);
            }
        }
    }
    Vec acc = Vec::Zero(models.front().weights.size());
    for (const auto& s : subsets) acc += models[s[uniform_int(rng, 0, static_cast<int>(s.size()) - 1)]].weights;
    acc /= static_cast<double>(subsets.size());
    for (auto& m : models) m.weights = acc;
    t.d2s += static_cast<std::int64_t>(subsets.size()) + n;
    return t;
}

enum class Scheme { fedavg, fedprox, fedsgd, decentralized, semidecentralized };
enum class Task { classification, regression, unsupervised };

struct TrainConfig {
    double lr = 0.05;
    int tau_a = 4;
    int rounds = 50;
    double prox_mu = 0.1;
    double margin = 1.0;
    double straggler_frac = 0.0;
    Scheme scheme = Scheme::fedavg;
    std::uint64_t seed = 0;
    int batch_size = 32;
    double sigma_aug = 0.1;
    int neighbors = 7;
    int subset_size = 5;
    int intra_every = 2;
    int global_every = 8;

    void validate() const {
        if (!(lr > 0.0)) throw config_error("lr must be positive");
        if (tau_a < 1) throw config_error("tau_a must be >= 1");
        if (rounds < 0) throw config_error("rounds must be nonnegative");
        if (prox_mu < 0.0) throw config_error("prox_mu must be nonnegative");
        if (!(margin > 0.0)) throw config_error("margin must be positive");
        if (straggler_frac < 0.0 || straggler_frac >= 1.0) throw config_error("straggler_frac must lie in [0, 1)");
    }
};

/// Softmax head trained on standardized embeddings (200 full-batch epochs,
/// lr 0.1); returns accuracy on the test embeddings.
inline double linear_eval(const Mat& train, const std::vector<int>& train_labels, const Mat& test,
                          const std::vector<int>& test_labels) {
    if (train.rows() == 0 || test.rows() == 0) throw invalid_parameter("linear evaluation needs data");
    int classes = 0;
    for (int y : train_labels) classes = std::max(classes, y + 1);
    for (int y : test_labels) classes = std::max(classes, y + 1);
    std::vector<int> seen(classes, 0);
    int distinct = 0;
    for (int y : train_labels)
        if (!seen[y]++) ++distinct;
    if (distinct < 2) throw invalid_parameter("linear evaluation needs at least two classes");
    const Vec mu = train.colwise().mean().transpose();
    Vec sd = ((train.rowwise() - mu.transpose()).array().square().colwise().mean()).sqrt().matrix().transpose();
    for (Eigen::Index c = 0; c < sd.size(); ++c)
        if (sd(c) < 1e-12) sd(c) = 1.0;
    auto standardize = [&](const Mat& m) -> Mat {
        return ((m.rowwise() - mu.transpose()).array().rowwise() / sd.transpose().array()).matrix();
    };
    Batch b{standardize(train), train_labels, {}, {}, {}};
    ModelParams head{Arch{ArchKind::softmax, static_cast<int>(train.cols()), classes, 0},
                     Vec::Zero(static_cast<Eigen::Index>(classes) * (train.cols() + 1))};
    const LossSpec ce{LossKind::ce};
    for (int epoch = 0; epoch < 200; ++epoch) head = local_step(head, b, ce, 0.1);
    const Mat out = predict(head, standardize(test));
    int correct = 0;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        Eigen::Index arg;
        out.row(r).maxCoeff(&arg);
        if (arg == test_labels[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(out.rows());
}

inline double linear_eval(const ModelParams& encoder, const LocalDataset& train, const LocalDataset& test) {
    if (encoder.arch.kind != ArchKind::encoder) throw invalid_parameter("linear evaluation needs an encoder");
    return linear_eval(predict(encoder, train.features), train.labels, predict(encoder, test.features), test.labels);
}

inline double accuracy(const ModelParams& m, const LocalDataset& test) {
    if (test.size() == 0) throw invalid_parameter("empty test set");
    const Mat out = predict(m, test.features);
    int correct = 0;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        Eigen::Index arg;
        out.row(r).maxCoeff(&arg);
        if (arg == test.labels[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

inline double mean_squared_error(const ModelParams& m, const LocalDataset& test) {
    if (test.size() == 0) throw invalid_parameter("empty test set");
    const Mat out = predict(m, test.features);
    double s = 0.0;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double e = out(r, 0) - test.targets[r];
        s += e * e;
    }
    return s / static_cast<double>(test.size());
}

struct TrainingRun {
    std::string metric;
    std::vector<double> values;  // one per round
    std::int64_t d2d_model_transfers = 0;
    std::int64_t d2s_model_transfers = 0;
    std::vector<std::int64_t> d2d_cumulative;  // transfers up to and including each round
    std::vector<std::int64_t> d2s_cumulative;
    ModelParams final_model;
};

/// Federated training over fixed local datasets. A round is tau_a local
/// steps followed by the scheme's aggregation (one step for fedsgd,
/// global_every steps for the semi-decentralized scheme).
inline TrainingRun run_training(const std::vector<LocalDataset>& data, const Arch& arch, Task task,
                                const TrainConfig& cfg, const LocalDataset& test,
                                const LocalDataset* probe = nullptr) {
    cfg.validate();
    arch.validate();
    const int n = static_cast<int>(data.size());
    if (n == 0) throw invalid_parameter("no devices");
    if (task == Task::unsupervised && (!probe || arch.kind != ArchKind::encoder))
        throw invalid_parameter("unsupervised training needs an encoder and a labeled probe set");

    const LossKind base_loss = task == Task::regression     ? LossKind::mse
                               : task == Task::unsupervised ? LossKind::triplet
                                                            : LossKind::ce;
    TrainingRun run;
    run.metric = task == Task::regression ? "mse" : task == Task::unsupervised ? "linear_eval_accuracy" : "accuracy";

    Rng init_rng = make_rng(cfg.seed, {stream::model_init});
    ModelParams global = init_model(arch, init_rng);
    std::vector<ModelParams> models(n, global);
    std::vector<double> sizes(n);
    for (int i = 0; i < n; ++i) sizes[i] = static_cast<double>(data[i].size());

    auto device_rng = [&](int i, int round, int tag) {
        return make_rng(cfg.seed, {stream::local, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(round),
                                   static_cast<std::uint64_t>(tag)});
    };
    auto spec_for = [&](const Vec* anchor) {
        LossSpec s{base_loss, cfg.margin, 0.0, nullptr};
        if (cfg.scheme == Scheme::fedprox && base_loss == LossKind::ce) {
            s.kind = LossKind::ce_prox;
            s.prox_mu = cfg.prox_mu;
            s.anchor = anchor;
        }
        return s;
    };
    auto run_steps = [&](int i, int steps, Rng& rng, const Vec* anchor) {
        if (data[i].size() == 0) return;
        const LossSpec spec = spec_for(anchor);
        for (int s = 0; s < steps; ++s)
            models[i] = local_step(models[i], make_batch(data[i], cfg.batch_size, base_loss, cfg.sigma_aug, rng), spec,
                                   cfg.lr);
    };
    // Straggler mask for one aggregation: floor(frac * N) devices sit out.
    auto active_mask = [&](int round) {
        std::vector<std::uint8_t> on(n, 1);
        const int out = static_cast<int>(std::floor(cfg.straggler_frac * n + 1e-12));
        if (out == 0) return on;
        Rng rng = make_rng(cfg.seed, {stream::straggler, static_cast<std::uint64_t>(round)});
        std::vector<int> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (int k = 0; k < out; ++k) on[idx[k]] = 0;
        return on;
    };
    auto evaluate = [&](const ModelParams& m) {
        switch (task) {
            case Task::regression: return mean_squared_error(m, test);
            case Task::unsupervised: return linear_eval(m, *probe, test);
            case Task::classification: break;
        }
        return accuracy(m, test);
    };
    auto evaluate_all = [&]() {
        double s = 0.0;
        for (const auto& m : models) s += evaluate(m);
        return s / static_cast<double>(n);
    };

    std::vector<std::vector<int>> subsets;
    if (cfg.scheme == Scheme::semidecentralized) subsets = make_subsets(n, cfg.subset_size);

    for (int round = 0; round < cfg.rounds; ++round) {
        const auto on = active_mask(round);
        switch (cfg.scheme) {
            case Scheme::fedavg:
            case Scheme::fedprox: {
                const Vec anchor = global.weights;
                for (int i = 0; i < n; ++i) {
                    Rng rng = device_rng(i, round, 0);
                    run_steps(i, cfg.tau_a, rng, &anchor);
                }
                std::vector<ModelParams> part;
                std::vector<double> w;
                for (int i = 0; i < n; ++i)
                    if (on[i] && sizes[i] > 0) {
                        part.push_back(models[i]);
                        w.push_back(sizes[i]);
                    }
                if (!part.empty()) global = aggregate(part, w);
                run.d2s_model_transfers += static_cast<std::int64_t>(part.size()) + n;
                for (auto& m : models) m = global;
                run.values.push_back(evaluate(global));
                break;
            }
            case Scheme::fedsgd: {
                std::vector<Vec> grads;
                std::vector<double> w;
                const LossSpec spec = spec_for(nullptr);
                for (int i = 0; i < n; ++i) {
                    if (!on[i] || sizes[i] == 0) continue;
                    Rng rng = device_rng(i, round, 0);
                    grads.push_back(
                        loss_and_gradient(global, make_batch(data[i], cfg.batch_size, base_loss, cfg.sigma_aug, rng), spec)
                            .second);
                    w.push_back(sizes[i]);
                }
                if (!grads.empty()) global.weights -= cfg.lr * weighted_mean(grads, w);
                if (!global.weights.allFinite()) throw numeric_error("fedsgd produced nonfinite weights");
                run.d2s_model_transfers += static_cast<std::int64_t>(grads.size()) + n;
                for (auto& m : models) m = global;
                run.values.push_back(evaluate(global));
                break;
            }
            case Scheme::decentralized: {
                for (int i = 0; i < n; ++i) {
                    Rng rng = device_rng(i, round, 0);
                    run_steps(i, cfg.tau_a, rng, nullptr);
                }
                Rng mix = make_rng(cfg.seed, {stream::mixing, static_cast<std::uint64_t>(round)});
                run.d2d_model_transfers += mix_decentralized(models, std::min(cfg.neighbors, n - 1), mix, on);
                run.values.push_back(evaluate_all());
                break;
            }
            case Scheme::semidecentralized: {
                Rng mix = make_rng(cfg.seed, {stream::mixing, static_cast<std::uint64_t>(round)});
                const auto t = run_round_semidecentralized(
                    models, subsets, cfg.intra_every, cfg.global_every,
                    [&](int step) {
                        for (int i = 0; i < n; ++i) {
                            Rng rng = device_rng(i, round, step);
                            run_steps(i, 1, rng, nullptr);
                        }
                    },
                    mix);
                run.d2d_model_transfers += t.d2d;
                run.d2s_model_transfers += t.d2s;
                global = models.front();
                run.values.push_back(evaluate(global));
                break;
            }
        }
        run.d2d_cumulative.push_back(run.d2d_model_transfers);
        run.d2s_cumulative.push_back(run.d2s_model_transfers);
    }
    run.final_model = cfg.scheme == Scheme::decentralized ? models.front() : global;
    return run;
}

}  // namespace d2dfl
