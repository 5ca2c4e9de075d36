#pragma once

#include "d2dfl/common.hpp"
#include "d2dfl/data_model.hpp"
#include "d2dfl/diversity.hpp"
#include "d2dfl/exchange.hpp"
#include "d2dfl/net_model.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <vector>

namespace d2dfl {

struct RlHyper {
    int H = 256;
    double delta = 0.9;
    double gamma = 0.5;
    double alpha1 = 1.0;
    double alpha2 = 1.0;
    double alpha3 = 0.001;

    void validate() const {
        if (H < 1) throw invalid_parameter("buffer size H must be >= 1");
        if (delta < 0.0 || delta > 1.0) throw invalid_parameter("delta must lie in [0, 1]");
        if (gamma < 0.0) throw invalid_parameter("gamma must be nonnegative");
    }
};

/// Fixed-capacity FIFO of rewards; the oldest entry is evicted on overflow.
class RewardBuffer {
public:
    explicit RewardBuffer(int capacity = 1) : cap_(static_cast<std::size_t>(capacity)) {}

    void push(double x) {
        data_.push_back(x);
        if (data_.size() > cap_) data_.pop_front();
    }
    int size() const { return static_cast<int>(data_.size()); }
    bool empty() const { return data_.empty(); }
    // Summed front to back every time, so the value never drifts from the contents.
    double sum() const {
        double s = 0.0;
        for (double x : data_) s += x;
        return s;
    }
    double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }
    const std::deque<double>& contents() const { return data_; }

private:
    std::size_t cap_;
    std::deque<double> data_;
};

/// Tabular policy of one device. Each (state, action) cell keeps its own
/// buffer of scaled rewards; psi_r is its sum and psi_c its fill level.
struct AgentPolicy {
    struct Cell {
        RewardBuffer buffer;
        double psi_r = 0.0;
        int psi_c = 0;
    };

    int self = 0;
    int devices = 0;
    RlHyper hyper;
    std::map<std::uint64_t, std::vector<Cell>> table;
    RewardBuffer device_buffer;

    AgentPolicy(int self_index, int n, RlHyper h)
        : self(self_index), devices(n), hyper(h), device_buffer(h.H) {
        if (n < 2) throw invalid_parameter("a policy needs at least two devices");
        if (self_index < 0 || self_index >= n) throw invalid_parameter("device index out of range");
        hyper.validate();
    }

    std::vector<Cell>& row(std::uint64_t q) {
        auto it = table.find(q);
        if (it == table.end()) it = table.emplace(q, std::vector<Cell>(devices, Cell{RewardBuffer(hyper.H)})).first;
        return it->second;
    }
    double psi_r(std::uint64_t q, int j) const {
        auto it = table.find(q);
        return it == table.end() ? 0.0 : it->second[j].psi_r;
    }
    int psi_c(std::uint64_t q, int j) const {
        auto it = table.find(q);
        return it == table.end() ? 0 : it->second[j].psi_c;
    }
    /// Average reward of an action; unvisited actions count as 0.
    double average(std::uint64_t q, int j) const {
        const int c = psi_c(q, j);
        return c == 0 ? 0.0 : psi_r(q, j) / static_cast<double>(c);
    }
};

/// Softmax over average rewards. The device itself and any `blocked`
/// transmitter get probability 0.
inline std::vector<double> policy_probabilities(const AgentPolicy& p, std::uint64_t q,
                                                std::span<const std::uint8_t> blocked = {}) {
    const int n = p.devices;
    if (n < 2) throw invalid_parameter("a policy needs at least two devices");
    auto allowed = [&](int j) { return j != p.self && (blocked.empty() || !blocked[j]); };
    double top = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j)
        if (allowed(j)) top = std::max(top, p.average(q, j));
    std::vector<double> prob(n, 0.0);
    if (!std::isfinite(top)) throw invalid_parameter("every action is blocked");
    double z = 0.0;
    for (int j = 0; j < n; ++j)
        if (allowed(j)) {
            prob[j] = std::exp(p.average(q, j) - top);
            z += prob[j];
        }
    for (double& x : prob) x /= z;
    return prob;
}

inline int sample_action(std::span<const double> prob, Rng& rng) {
    const double u = uniform_real(rng);
    double acc = 0.0;
    int last = -1;
    for (int j = 0; j < static_cast<int>(prob.size()); ++j) {
        if (prob[j] <= 0.0) continue;
        acc += prob[j];
        last = j;
        if (u < acc) return j;
    }
    return last;
}

/// Highest average reward among allowed actions; ties go to the lowest index.
inline int greedy_action(const AgentPolicy& p, std::uint64_t q, std::span<const std::uint8_t> blocked = {}) {
    int best = -1;
    double bv = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < p.devices; ++j) {
        if (j == p.self || (!blocked.empty() && blocked[j])) continue;
        const double v = p.average(q, j);
        if (v > bv) {
            bv = v;
            best = j;
        }
    }
    if (best < 0) throw invalid_parameter("every action is blocked");
    return best;
}

/// Store the discounted reward for (q, j) and the raw R in the device
/// buffer. A reward below the device buffer's mean loses delta * |R|, which
/// is beta * R with beta = 1 - delta for R >= 0 and keeps a negative R from
/// being pulled up toward zero.
inline double discounted_reward(const AgentPolicy& p, double reward) {
    if (reward >= p.device_buffer.mean()) return reward;
    return reward - p.hyper.delta * std::abs(reward);
}

inline void update_policy(AgentPolicy& p, std::uint64_t q, int j, double reward) {
    if (!std::isfinite(reward)) throw numeric_error("nonfinite reward");
    if (j < 0 || j >= p.devices || j == p.self) throw invalid_parameter("invalid action");
    const double stored = discounted_reward(p, reward);
    auto& cell = p.row(q)[j];
    cell.buffer.push(stored);
    cell.psi_r = cell.buffer.sum();
    cell.psi_c = cell.buffer.size();
    p.device_buffer.push(reward);
}

/// Debug dump: state, action, psi_r, psi_c.
inline void write_policy_csv(std::ostream& os, const AgentPolicy& p) {
    os << "state,action,psi_r,psi_c\n";
    for (const auto& [q, cells] : p.table)
        for (int j = 0; j < p.devices; ++j) os << q << ',' << j << ',' << cells[j].psi_r << ',' << cells[j].psi_c << '\n';
}

inline double local_reward(double diversity, double drop, const RlHyper& h) {
    return h.alpha1 * diversity - h.alpha2 * drop;
}

/// Mean local reward plus the remaining-budget term of cluster k.
inline double global_reward_sup(std::span<const double> local, std::int64_t budget, std::int64_t spent,
                                const RlHyper& h) {
    double s = 0.0;
    for (double r : local) s += r;
    const double mean = local.empty() ? 0.0 : s / static_cast<double>(local.size());
    return mean + h.alpha3 * static_cast<double>(budget - spent);
}

inline double global_reward_usp(double agreement, std::int64_t budget, std::int64_t spent, const RlHyper& h) {
    return agreement + h.alpha3 * static_cast<double>(budget - spent);
}

inline double overall_reward(double local, double global, const RlHyper& h) { return local + h.gamma * global; }

/// Rewards of one joint action; computed without moving any data.
struct StepEvaluation {
    std::vector<double> local;
    std::vector<double> overall;
    std::vector<std::int64_t> cluster_requests;  // d'_k for this step
    std::int64_t message_bits = 0;
};

/// Link-selection environment: evaluate a joint selection hypothetically,
/// or commit it for real.
template <class E>
concept LinkEnvironment = requires(E env, const E cenv, std::span<const int> sel, const DropMatrix& d, Rng& rng) {
    { cenv.devices() } -> std::convertible_to<int>;
    { cenv.evaluate(sel, d, rng) } -> std::same_as<StepEvaluation>;
    env.commit(sel, d, rng);
};

/// Budget bookkeeping shared by both environments.
inline std::vector<std::int64_t> inter_cluster_requests(const ReliableClustering& clusters, std::span<const int> sel,
                                                        std::span<const std::int64_t> requested) {
    std::vector<std::int64_t> d(clusters.cluster_count(), 0);
    for (int i = 0; i < static_cast<int>(sel.size()); ++i)
        if (sel[i] >= 0 && !clusters.same_cluster(i, sel[i])) d[clusters.assignment[i]] += requested[i];
    return d;
}

inline void fill_overall(StepEvaluation& ev, const ReliableClustering& clusters, std::span<const double> global,
                         const RlHyper& h) {
    ev.overall.resize(ev.local.size());
    for (std::size_t i = 0; i < ev.local.size(); ++i)
        ev.overall[i] = overall_reward(ev.local[i], global[clusters.assignment[i]], h);
}

inline double safe_score(const CountVector& pre, const CountVector& post, const ThresholdVector& b, int min_labels,
                         DiversityMetric metric) {
    if (pre.total() == 0 || post.total() == 0) return 0.0;
    return score_g(pre, post, b, min_labels, metric);
}

/// Supervised system state: label counts per device.
struct SupervisedEnv {
    std::vector<CountVector> counts;
    std::vector<ThresholdVector> thresholds;
    std::vector<TrustMatrix> trust;
    ReliableClustering clusters;
    int min_labels = 1;
    DiversityMetric metric = DiversityMetric::wasserstein;
    RlHyper hyper;

    int devices() const { return static_cast<int>(counts.size()); }
    int partitions() const { return counts.empty() ? 0 : counts.front().size(); }

    /// Sum over receivers of alpha1 * g - alpha2 * P_D for one selection.
    double objective(std::span<const int> sel, const DropMatrix& drop) const {
        const auto round = run_sup_round(sel, counts, thresholds, trust, drop, ReceiveMode::expected, nullptr);
        double s = 0.0;
        for (int i = 0; i < devices(); ++i) {
            if (sel[i] < 0) continue;
            s += local_reward(safe_score(counts[i], round.post[i], thresholds[i], min_labels, metric), drop(i, sel[i]),
                              hyper);
        }
        return s;
    }

    StepEvaluation evaluate(std::span<const int> sel, const DropMatrix& drop, Rng&) const {
        const int n = devices();
        const auto round = run_sup_round(sel, counts, thresholds, trust, drop, ReceiveMode::expected, nullptr);
        StepEvaluation ev;
        ev.local.assign(n, 0.0);
        std::vector<std::int64_t> requested(n, 0);
        for (int i = 0; i < n; ++i) {
            if (sel[i] < 0) continue;
            ev.local[i] = local_reward(safe_score(counts[i], round.post[i], thresholds[i], min_labels, metric),
                                       drop(i, sel[i]), hyper);
            for (auto q : round.messages[i].request) requested[i] += q;
            ev.message_bits += 3 * sup_message_bits(partitions());
        }
        ev.cluster_requests = inter_cluster_requests(clusters, sel, requested);
        std::vector<double> global(clusters.cluster_count());
        for (int k = 0; k < clusters.cluster_count(); ++k)
            global[k] = global_reward_sup(ev.local, clusters.budgets[k], clusters.spent[k] + ev.cluster_requests[k],
                                          hyper);
        fill_overall(ev, clusters, global, hyper);
        return ev;
    }

    SupRound commit(std::span<const int> sel, const DropMatrix& drop, Rng& rng,
                    ReceiveMode mode = ReceiveMode::expected) {
        auto round = run_sup_round(sel, counts, thresholds, trust, drop, mode, &rng);
        std::vector<std::int64_t> requested(devices(), 0);
        for (int i = 0; i < devices(); ++i)
            for (auto q : round.messages[i].request) requested[i] += q;
        const auto d = inter_cluster_requests(clusters, sel, requested);
        for (int k = 0; k < clusters.cluster_count(); ++k) clusters.spent[k] += d[k];
        counts = round.post;
        return round;
    }
};

/// Unsupervised system state: Gaussian cluster summaries per device.
struct UnsupervisedEnv {
    std::vector<DeviceSummaries> summaries;
    std::vector<ThresholdVector> thresholds;
    std::vector<TrustMatrix> trust;
    ReliableClustering clusters;
    RlHyper hyper;

    int devices() const { return static_cast<int>(summaries.size()); }

    std::int64_t step_bits(std::span<const int> sel) const {
        std::int64_t bits = 0;
        for (int i = 0; i < devices(); ++i) {
            if (sel[i] < 0) continue;
            const auto& tx = summaries[sel[i]];
            const int d = tx.empty() ? 0 : tx.front().dim();
            bits += sup_message_bits(static_cast<int>(tx.size())) +
                    static_cast<std::int64_t>(tx.size()) * usp_cluster_message_bits(d);
        }
        return bits;
    }

    StepEvaluation evaluate(std::span<const int> sel, const DropMatrix& drop, Rng& rng) const {
        const int n = devices();
        const auto round = run_usp_round(sel, summaries, thresholds, trust, rng);
        StepEvaluation ev;
        ev.local.assign(n, 0.0);
        for (int i = 0; i < n; ++i)
            if (sel[i] >= 0)
                ev.local[i] = local_reward(trace_ratio(round.post[i], summaries[i]), drop(i, sel[i]), hyper);
        ev.message_bits = step_bits(sel);
        ev.cluster_requests = inter_cluster_requests(clusters, sel, round.requested);
        const double agreement = system_agreement(summaries, round.post);
        std::vector<double> global(clusters.cluster_count());
        for (int k = 0; k < clusters.cluster_count(); ++k)
            global[k] =
                global_reward_usp(agreement, clusters.budgets[k], clusters.spent[k] + ev.cluster_requests[k], hyper);
        fill_overall(ev, clusters, global, hyper);
        return ev;
    }

    UspRound commit(std::span<const int> sel, const DropMatrix&, Rng& rng) {
        auto round = run_usp_round(sel, summaries, thresholds, trust, rng);
        const auto d = inter_cluster_requests(clusters, sel, round.requested);
        for (int k = 0; k < clusters.cluster_count(); ++k) clusters.spent[k] += d[k];
        summaries = round.post;
        return round;
    }
};

/// RSS source for training. A static channel keeps one matrix; a dynamic
/// one redraws every off-diagonal entry from a truncated Gaussian each step.
struct ChannelSpec {
    double mean = 0.3;
    double stddev = 0.1;
    double lo = 0.05;
    double hi = 0.55;
    double rate = 0.8;
    double noise = 0.02;
    bool dynamic = false;
    int resolution = 1;
};

class Channel {
public:
    Channel(ChannelSpec spec, Mat rss, std::uint64_t seed)
        : spec_(spec), rss_(std::move(rss)), rng_(make_rng(seed, {stream::channel, 1})) {
        refresh_drop();
    }

    /// Random initial RSS from the truncated Gaussian it describes.
    static Channel random(ChannelSpec spec, int n, std::uint64_t seed) {
        Rng rng = make_rng(seed, {stream::channel});
        return Channel(spec, gaussian_rss_values(n, spec.mean, spec.stddev, spec.lo, spec.hi, rng), seed);
    }

    int devices() const { return static_cast<int>(rss_.rows()); }
    const Mat& rss() const { return rss_; }
    const DropMatrix& drop() const { return drop_; }
    const ChannelSpec& spec() const { return spec_; }

    void advance() {
        if (!spec_.dynamic) return;
        rss_ = gaussian_rss_values(devices(), spec_.mean, spec_.stddev, spec_.lo, spec_.hi, rng_);
        refresh_drop();
    }

    /// Quantized RSS row seen by receiver i, excluding its own entry.
    std::uint64_t state(int i) const {
        if (spec_.resolution <= 1) return 0;
        std::vector<double> row;
        for (int j = 0; j < devices(); ++j)
            if (j != i) row.push_back(rss_(i, j));
        return quantize_state(row, spec_.resolution, spec_.lo, spec_.hi);
    }

private:
    void refresh_drop() {
        drop_ = DropMatrix{Mat::Zero(devices(), devices())};
        for (int i = 0; i < devices(); ++i)
            for (int j = 0; j < devices(); ++j)
                if (i != j) drop_.values(i, j) = drop_probability(rss_(i, j), spec_.rate, spec_.noise);
    }

    ChannelSpec spec_;
    Mat rss_;
    DropMatrix drop_;
    Rng rng_;
};

/// adjacency(j, i) = 1 means transmitter j feeds receiver i.
struct DiscoveredGraph {
    Eigen::MatrixXi adjacency;
    int edges_per_device = 1;
    std::vector<std::vector<int>> rounds;  // committed selection per round

    int in_degree(int i) const { return adjacency.col(i).sum(); }
};

struct TrainOptions {
    int iterations = 5000;
    int edges = 1;
    RlHyper hyper;
    std::uint64_t seed = 0;
};

struct TrainResult {
    DiscoveredGraph graph;
    std::int64_t message_bits = 0;
    std::vector<AgentPolicy> final_policies;
};

/// E greedy rounds. Each round trains fresh policies for `iterations` joint
/// steps against hypothetical exchanges, commits every device's greedy edge,
/// then lets `env` apply the real exchange. Edges already committed are
/// blocked in later rounds.
template <LinkEnvironment Env>
TrainResult train_graph(Env& env, Channel& channel, const TrainOptions& opt) {
    const int n = env.devices();
    if (opt.edges < 1) throw invalid_parameter("E must be >= 1");
    if (opt.edges >= n) throw invalid_parameter("E must be smaller than the device count");
    if (opt.iterations < 0) throw invalid_parameter("iteration count must be nonnegative");
    TrainResult res;
    res.graph.adjacency = Eigen::MatrixXi::Zero(n, n);
    res.graph.edges_per_device = opt.edges;
    std::vector<std::vector<std::uint8_t>> blocked(n, std::vector<std::uint8_t>(n, 0));
    for (int e = 0; e < opt.edges; ++e) {
        std::vector<AgentPolicy> policies;
        for (int i = 0; i < n; ++i) policies.emplace_back(i, n, opt.hyper);
        Rng act_rng = make_rng(opt.seed, {stream::discovery, static_cast<std::uint64_t>(e)});
        Rng env_rng = make_rng(opt.seed, {stream::exchange, static_cast<std::uint64_t>(e)});
        std::vector<int> sel(n);
        std::vector<std::uint64_t> states(n);
        for (int t = 0; t < opt.iterations; ++t) {
            for (int i = 0; i < n; ++i) {
                states[i] = channel.state(i);
                const auto prob = policy_probabilities(policies[i], states[i], blocked[i]);
                sel[i] = sample_action(prob, act_rng);
            }
            const StepEvaluation ev = env.evaluate(sel, channel.drop(), env_rng);
            res.message_bits += ev.message_bits;
            for (int i = 0; i < n; ++i) update_policy(policies[i], states[i], sel[i], ev.overall[i]);
            channel.advance();
        }
        for (int i = 0; i < n; ++i) sel[i] = greedy_action(policies[i], channel.state(i), blocked[i]);
        Rng commit_rng = make_rng(opt.seed, {stream::exchange, 1000 + static_cast<std::uint64_t>(e)});
        env.commit(sel, channel.drop(), commit_rng);
        for (int i = 0; i < n; ++i) {
            res.graph.adjacency(sel[i], i) = 1;
            blocked[i][sel[i]] = 1;
        }
        res.graph.rounds.push_back(sel);
        res.final_policies = std::move(policies);
    }
    return res;
}

enum class BaselineKind { none, uniform, closest, most_trusted };

/// Heuristic selection for one round; ties go to the lowest index.
inline std::vector<int> baseline_selection(BaselineKind kind, const DropMatrix& drop,
                                           const std::vector<TrustMatrix>& trust,
                                           const std::vector<std::vector<std::uint8_t>>& blocked, Rng& rng) {
    const int n = drop.size();
    std::vector<int> sel(n, -1);
    if (kind == BaselineKind::none) return sel;
    for (int i = 0; i < n; ++i) {
        std::vector<int> cand;
        for (int j = 0; j < n; ++j)
            if (j != i && !blocked[i][j]) cand.push_back(j);
        if (cand.empty()) continue;
        switch (kind) {
            case BaselineKind::uniform:
                sel[i] = cand[uniform_int(rng, 0, static_cast<int>(cand.size()) - 1)];
                break;
            case BaselineKind::closest:
                sel[i] = *std::min_element(cand.begin(), cand.end(),
                                           [&](int a, int b) { return drop(i, a) < drop(i, b); });
                break;
            case BaselineKind::most_trusted:
                sel[i] = *std::max_element(cand.begin(), cand.end(),
                                           [&](int a, int b) { return trust[a].row_sum(i) < trust[b].row_sum(i); });
                break;
            case BaselineKind::none:
                break;
        }
    }
    return sel;
}

/// E rounds of a heuristic. When `env` is given, each round's selection is
/// committed before the next.
template <LinkEnvironment Env>
DiscoveredGraph baseline_graph(BaselineKind kind, Env* env, const Channel& channel,
                               const std::vector<TrustMatrix>& trust, int edges, std::uint64_t seed) {
    const int n = channel.devices();
    DiscoveredGraph g;
    g.adjacency = Eigen::MatrixXi::Zero(n, n);
    g.edges_per_device = edges;
    if (kind == BaselineKind::none) return g;
    std::vector<std::vector<std::uint8_t>> blocked(n, std::vector<std::uint8_t>(n, 0));
    Rng rng = make_rng(seed, {stream::discovery, 77});
    for (int e = 0; e < edges; ++e) {
        const auto sel = baseline_selection(kind, channel.drop(), trust, blocked, rng);
        if (env) {
            Rng commit_rng = make_rng(seed, {stream::exchange, 1000 + static_cast<std::uint64_t>(e)});
            env->commit(sel, channel.drop(), commit_rng);
        }
        for (int i = 0; i < n; ++i)
            if (sel[i] >= 0) {
                g.adjacency(sel[i], i) = 1;
                blocked[i][sel[i]] = 1;
            }
        g.rounds.push_back(sel);
    }
    return g;
}

inline DiscoveredGraph baseline_graph(BaselineKind kind, const Channel& channel, const std::vector<TrustMatrix>& trust,
                                      int edges, std::uint64_t seed) {
    return baseline_graph<SupervisedEnv>(kind, nullptr, channel, trust, edges, seed);
}

struct OptimalGraph {
    std::vector<int> selection;
    double objective = 0.0;
};

/// Exhaustive search over all (N-1)^N single-edge mappings in lexicographic
/// order; only a strictly better mapping replaces the incumbent.
inline OptimalGraph brute_force_optimal(const SupervisedEnv& env, const DropMatrix& drop) {
    const int n = env.devices();
    if (n > 6) throw size_error("brute force is limited to N <= 6, got " + std::to_string(n));
    if (n < 2) throw invalid_parameter("brute force needs at least two devices");
    std::vector<int> digit(n, 0);  // index into the n-1 candidates of each device
    auto to_sel = [&] {
        std::vector<int> sel(n);
        for (int i = 0; i < n; ++i) sel[i] = digit[i] < i ? digit[i] : digit[i] + 1;
        return sel;
    };
    OptimalGraph best;
    bool have = false;
    while (true) {
        const auto sel = to_sel();
        const double v = env.objective(sel, drop);
        if (!have || v > best.objective) {
            best = {sel, v};
            have = true;
        }
        int pos = n - 1;
        while (pos >= 0 && digit[pos] == n - 2) digit[pos--] = 0;
        if (pos < 0) break;
        ++digit[pos];
    }
    return best;
}

}  // namespace d2dfl
