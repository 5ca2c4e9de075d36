#pragma once

#include "d2dfl/d2dfl.hpp"

#include <vector>

namespace d2dfl::testing {

/// Device 0 is a learner facing fixed per-arm rewards; the other devices
/// are passive and always earn 0.
struct BanditEnv {
    std::vector<double> arm_reward;  // indexed by transmitter; entry 0 unused

    int devices() const { return static_cast<int>(arm_reward.size()); }

    StepEvaluation evaluate(std::span<const int> sel, const DropMatrix&, Rng&) const {
        StepEvaluation ev;
        ev.local.assign(devices(), 0.0);
        ev.local[0] = arm_reward[sel[0]];
        ev.overall = ev.local;
        return ev;
    }
    void commit(std::span<const int>, const DropMatrix&, Rng&) {}
};

/// Small supervised instance with skewed label counts and random trust.
inline SupervisedEnv toy_supervised(int n, int labels, std::uint64_t seed) {
    Rng rng = make_rng(seed, {99});
    SupervisedEnv env;
    for (int i = 0; i < n; ++i) {
        IntVec c(labels, 0);
        for (int k = 0; k < 2; ++k) c[uniform_int(rng, 0, labels - 1)] += uniform_int(rng, 10, 30);
        env.counts.emplace_back(c);
        env.thresholds.push_back(ThresholdVector::uniform(labels, 8));
    }
    env.trust = make_trust(n, labels, TrustPattern::random, 0.3, seed);
    env.min_labels = 2;
    env.clusters = cluster_reliable(DropMatrix{Mat::Ones(n, n)}, 0.1, 1000);
    return env;
}

/// Max abs difference between the analytic gradient and central finite
/// differences with step h.
inline double gradient_error(const ModelParams& m, const Batch& b, const LossSpec& spec, double h = 1e-5) {
    const Vec g = loss_and_gradient(m, b, spec).second;
    double worst = 0.0;
    ModelParams probe = m;
    for (Eigen::Index k = 0; k < m.weights.size(); ++k) {
        probe.weights(k) = m.weights(k) + h;
        const double up = loss_value(probe, b, spec);
        probe.weights(k) = m.weights(k) - h;
        const double down = loss_value(probe, b, spec);
        probe.weights(k) = m.weights(k);
        worst = std::max(worst, std::abs((up - down) / (2.0 * h) - g(k)));
    }
    return worst;
}

/// Random small model plus a batch for `kind` (ce, mse, or triplet).
struct GradientCase {
    ModelParams model;
    Batch batch;
    LossSpec spec;
};

inline GradientCase random_gradient_case(LossKind kind, std::uint64_t seed) {
    Rng rng = make_rng(seed, {123});
    std::normal_distribution<double> n01;
    const int in = uniform_int(rng, 2, 5), rows = uniform_int(rng, 3, 8);
    Arch arch;
    if (kind == LossKind::mse) arch = {ArchKind::linear, in, 1, 0};
    else if (kind == LossKind::triplet) arch = {ArchKind::encoder, in, uniform_int(rng, 2, 4), uniform_int(rng, 2, 5)};
    else arch = {seed % 2 ? ArchKind::mlp : ArchKind::softmax, in, uniform_int(rng, 2, 4), uniform_int(rng, 2, 5)};
    GradientCase c{init_model(arch, rng), {}, {kind, 1.0, 0.0, nullptr}};
    c.batch.x = Mat::NullaryExpr(rows, in, [&] { return n01(rng); });
    for (int r = 0; r < rows; ++r) {
        c.batch.labels.push_back(uniform_int(rng, 0, arch.output - 1));
        c.batch.targets.push_back(n01(rng));
    }
    c.batch.positive = c.batch.x + 0.3 * Mat::NullaryExpr(rows, in, [&] { return n01(rng); });
    c.batch.negative = Mat::NullaryExpr(rows, in, [&] { return n01(rng); });
    return c;
}

}  // namespace d2dfl::testing
