#pragma once

#include "d2dfl/common.hpp"
#include "d2dfl/data_model.hpp"
#include "d2dfl/diversity.hpp"
#include "d2dfl/net_model.hpp"
#include "d2dfl/partition.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace d2dfl {

using IntVec = std::vector<std::int64_t>;

/// Wire sizes used for energy accounting.
inline std::int64_t sup_message_bits(int partitions) { return 8LL * partitions; }
inline std::int64_t usp_cluster_message_bits(int dim) { return 32LL * (dim + static_cast<std::int64_t>(dim) * dim) + 8; }

/// One supervised exchange between transmitter j and receiver i.
struct SupMessageRound {
    std::vector<std::uint8_t> availability;  // V
    IntVec request;                          // Q
    IntVec transfer;                         // U
    IntVec received;                         // D~
};

/// V[l] = 1 iff j trusts i with partition l, i requested from j, and j holds
/// strictly more than its own threshold of l.
inline std::vector<std::uint8_t> sup_availability(const TrustMatrix& trust, const CountVector& held,
                                                  const ThresholdVector& threshold, int receiver,
                                                  std::span<const int> requesters) {
    if (std::find(requesters.begin(), requesters.end(), receiver) == requesters.end())
        throw protocol_error("receiver " + std::to_string(receiver) + " did not request from transmitter " +
                             std::to_string(trust.transmitter()));
    std::vector<std::uint8_t> v(held.size(), 0);
    for (int l = 0; l < held.size(); ++l) v[l] = (trust.allowed(receiver, l) && held[l] > threshold[l]) ? 1 : 0;
    return v;
}

/// Q[l] = b_i[l] - D_i[l] where that is positive and V[l] = 1.
inline IntVec sup_request(std::span<const std::uint8_t> availability, const CountVector& held,
                          const ThresholdVector& threshold) {
    IntVec q(held.size(), 0);
    for (int l = 0; l < held.size(); ++l) {
        const auto need = threshold[l] - held[l];
        if (availability[l] && need > 0) q[l] = need;
    }
    return q;
}

struct GrantRequest {
    int receiver = -1;
    IntVec amounts;
};

/// Transfer per requester. Demand within the surplus D_j - b_j is granted
/// in full; otherwise the surplus is split in proportion to demand, floored,
/// and the leftover handed out by largest remainder (ties: lower receiver).
inline std::vector<IntVec> sup_allocate(std::span<const GrantRequest> requests, const CountVector& held,
                                        const ThresholdVector& threshold) {
    const int parts = held.size();
    std::vector<IntVec> out(requests.size(), IntVec(parts, 0));
    std::vector<std::size_t> by_receiver(requests.size());
    std::iota(by_receiver.begin(), by_receiver.end(), 0);
    std::stable_sort(by_receiver.begin(), by_receiver.end(),
                     [&](std::size_t a, std::size_t b) { return requests[a].receiver < requests[b].receiver; });

    for (int l = 0; l < parts; ++l) {
        const std::int64_t surplus = std::max<std::int64_t>(held[l] - threshold[l], 0);
        std::int64_t demand = 0;
        for (const auto& r : requests) {
            if (r.amounts[l] < 0) throw protocol_error("negative request");
            demand += r.amounts[l];
        }
        if (demand == 0) continue;
        if (demand <= surplus) {
            for (std::size_t k = 0; k < requests.size(); ++k) out[k][l] = requests[k].amounts[l];
            continue;
        }
        std::int64_t given = 0;
        std::vector<std::int64_t> rem(requests.size(), 0);
        for (std::size_t k = 0; k < requests.size(); ++k) {
            const std::int64_t num = requests[k].amounts[l] * surplus;
            out[k][l] = num / demand;
            rem[k] = num % demand;
            given += out[k][l];
        }
        std::vector<std::size_t> order = by_receiver;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
        for (std::size_t k = 0; given < surplus; ++k, ++given) ++out[order[k]][l];
    }
    return out;
}

enum class ReceiveMode { expected, sampled };

/// Points surviving the link: floor((1 - P_D) * U) in expected mode,
/// Binomial(U, 1 - P_D) in sampled mode.
inline IntVec receive(const IntVec& transfer, double drop, ReceiveMode mode, Rng* rng) {
    IntVec got(transfer.size(), 0);
    for (std::size_t l = 0; l < transfer.size(); ++l) {
        if (transfer[l] == 0) continue;
        if (mode == ReceiveMode::expected) {
            got[l] = static_cast<std::int64_t>(std::floor((1.0 - drop) * static_cast<double>(transfer[l]) + 1e-9));
        } else {
            if (!rng) throw invalid_parameter("sampled receive mode needs a generator");
            got[l] = std::binomial_distribution<std::int64_t>(transfer[l], 1.0 - drop)(*rng);
        }
    }
    return got;
}

struct IncomingTransfer {
    IntVec transfer;
    double drop = 0.0;
};

/// Post-exchange holdings: received points added, everything sent removed.
inline CountVector apply_exchange(const CountVector& held, std::span<const IncomingTransfer> incoming,
                                  std::span<const IntVec> sent, ReceiveMode mode, Rng* rng) {
    CountVector out = held;
    for (const auto& in : incoming) {
        const auto got = receive(in.transfer, in.drop, mode, rng);
        for (int l = 0; l < out.size(); ++l) out[l] += got[l];
    }
    for (const auto& s : sent)
        for (int l = 0; l < out.size(); ++l) out[l] -= s[l];
    for (int l = 0; l < out.size(); ++l)
        if (out[l] < 0) throw protocol_error("exchange left a negative count for partition " + std::to_string(l));
    return out;
}

/// Outcome of one supervised round in which every receiver i pulls from
/// selection[i] (or nobody, when -1). All grants use pre-round holdings.
struct SupRound {
    std::vector<CountVector> post;
    std::vector<SupMessageRound> messages;  // indexed by receiver
};

inline SupRound run_sup_round(std::span<const int> selection, const std::vector<CountVector>& held,
                              const std::vector<ThresholdVector>& thresholds, const std::vector<TrustMatrix>& trust,
                              const DropMatrix& drop, ReceiveMode mode, Rng* rng) {
    const int n = static_cast<int>(held.size());
    const int parts = n > 0 ? held[0].size() : 0;
    SupRound round;
    round.messages.resize(n);
    for (auto& m : round.messages) {
        m.availability.assign(parts, 0);
        m.request.assign(parts, 0);
        m.transfer.assign(parts, 0);
        m.received.assign(parts, 0);
    }
    std::vector<std::vector<int>> requesters(n);
    for (int i = 0; i < n; ++i) {
        const int j = selection[i];
        if (j < 0) continue;
        if (j == i || j >= n) throw protocol_error("invalid transmitter selection");
        requesters[j].push_back(i);
    }
    for (int j = 0; j < n; ++j) {
        if (requesters[j].empty()) continue;
        std::vector<GrantRequest> reqs;
        for (int i : requesters[j]) {
            auto& m = round.messages[i];
            m.availability = sup_availability(trust[j], held[j], thresholds[j], i, requesters[j]);
            m.request = sup_request(m.availability, held[i], thresholds[i]);
            reqs.push_back({i, m.request});
        }
        const auto grants = sup_allocate(reqs, held[j], thresholds[j]);
        for (std::size_t k = 0; k < requesters[j].size(); ++k) round.messages[requesters[j][k]].transfer = grants[k];
    }
    round.post.reserve(n);
    for (int i = 0; i < n; ++i) {
        std::vector<IncomingTransfer> in;
        if (selection[i] >= 0) in.push_back({round.messages[i].transfer, drop(i, selection[i])});
        std::vector<IntVec> sent;
        for (int k : requesters[i]) sent.push_back(round.messages[k].transfer);
        CountVector post = held[i];
        if (!in.empty()) {
            round.messages[i].received = receive(in[0].transfer, in[0].drop, mode, rng);
            for (int l = 0; l < parts; ++l) post[l] += round.messages[i].received[l];
        }
        round.post.push_back(apply_exchange(post, {}, sent, mode, rng));
    }
    return round;
}

/// Datapoints to request from each transmitter cluster: proportional to
/// the cluster's summed distance from all receiver centroids. Sums to
/// `total`. Identical centroid sets fall back to a uniform split.
inline IntVec usp_allocate(std::int64_t total, std::span<const Vec> receiver_centroids,
                           std::span<const Vec> transmitter_centroids) {
    if (receiver_centroids.empty() || transmitter_centroids.empty())
        throw invalid_parameter("usp_allocate needs nonempty centroid lists");
    if (total < 0) throw invalid_parameter("request total must be nonnegative");
    std::vector<double> weight(transmitter_centroids.size(), 0.0);
    double sum = 0.0;
    for (std::size_t k = 0; k < transmitter_centroids.size(); ++k) {
        for (const auto& mu : receiver_centroids) weight[k] += (mu - transmitter_centroids[k]).norm();
        sum += weight[k];
    }
    if (!(sum > 0.0)) std::fill(weight.begin(), weight.end(), 1.0);
    return largest_remainder(total, weight);
}

/// Unsupervised transfer: per-cluster Gaussian parameters and how many
/// points the receiver may draw from each.
struct UspMessage {
    std::vector<ClusterSummary> clusters;
    IntVec counts;
};

inline std::vector<Vec> centroids_of(const DeviceSummaries& s) {
    std::vector<Vec> out;
    out.reserve(s.size());
    for (const auto& c : s) out.push_back(c.centroid);
    return out;
}

/// Receiver-side total request: summed shortfall against the thresholds.
inline std::int64_t usp_request_total(const DeviceSummaries& receiver, const ThresholdVector& threshold) {
    std::int64_t q = 0;
    for (std::size_t l = 0; l < receiver.size(); ++l)
        q += std::max<std::int64_t>(threshold[static_cast<int>(l)] - receiver[l].count, 0);
    return q;
}

/// counts[k] draws from each remote Gaussian k (rows of one matrix each).
inline std::vector<Mat> usp_draw(const UspMessage& msg, Rng& rng) {
    if (msg.clusters.size() != msg.counts.size()) throw invalid_parameter("malformed unsupervised message");
    std::vector<Mat> out(msg.clusters.size());
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t k = 0; k < msg.clusters.size(); ++k) {
        const int d = msg.clusters[k].dim();
        out[k].resize(std::max<std::int64_t>(msg.counts[k], 0), d);
        if (msg.counts[k] <= 0) continue;
        Eigen::LLT<Mat> chol(msg.clusters[k].covariance);
        if (chol.info() != Eigen::Success) throw numeric_error("remote cluster covariance is not positive definite");
        const Mat lower = chol.matrixL();
        for (std::int64_t s = 0; s < msg.counts[k]; ++s) {
            Vec z(d);
            for (int c = 0; c < d; ++c) z(c) = n01(rng);
            out[k].row(static_cast<Eigen::Index>(s)) = (msg.clusters[k].centroid + lower * z).transpose();
        }
    }
    return out;
}

/// Attach every drawn point to the nearest receiver centroid and recompute
/// the receiver's cluster summaries.
inline DeviceSummaries usp_absorb(const DeviceSummaries& receiver, const std::vector<Mat>& draws) {
    if (receiver.empty()) throw invalid_parameter("receiver has no clusters");
    const int d = receiver.front().dim();
    std::vector<std::vector<Eigen::Index>> owner_rows(receiver.size());
    std::vector<std::vector<const Mat*>> owner_src(receiver.size());
    for (const auto& block : draws)
        for (Eigen::Index r = 0; r < block.rows(); ++r) {
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < receiver.size(); ++c) {
                const double v = (block.row(r).transpose() - receiver[c].centroid).squaredNorm();
                if (v < bd) {
                    bd = v;
                    best = c;
                }
            }
            owner_rows[best].push_back(r);
            owner_src[best].push_back(&block);
        }
    DeviceSummaries out = receiver;
    for (std::size_t c = 0; c < receiver.size(); ++c) {
        if (owner_rows[c].empty()) continue;
        Mat pts(static_cast<Eigen::Index>(owner_rows[c].size()), d);
        for (std::size_t s = 0; s < owner_rows[c].size(); ++s)
            pts.row(static_cast<Eigen::Index>(s)) = owner_src[c][s]->row(owner_rows[c][s]);
        out[c] = merge_points(receiver[c], pts);
    }
    return out;
}

inline DeviceSummaries usp_exchange(const DeviceSummaries& receiver, const UspMessage& msg, Rng& rng) {
    return usp_absorb(receiver, usp_draw(msg, rng));
}

inline CountVector cluster_counts(const DeviceSummaries& s) {
    IntVec c;
    for (const auto& x : s) c.push_back(x.count);
    return CountVector(std::move(c));
}

/// Outcome of one unsupervised round (receiver-side effects only).
struct UspRound {
    std::vector<DeviceSummaries> post;
    std::vector<std::int64_t> requested;  // Q_{j->i} total per receiver
    std::vector<IntVec> grants;           // D_{j,l->i} per receiver
    std::vector<std::vector<Mat>> draws;  // synthetic points per receiver, per remote cluster
};

/// Grants per receiver for one transmitter: per-cluster requests from
/// usp_allocate, masked by trust and surplus, then split like the
/// supervised protocol when several receivers compete for a cluster.
inline std::vector<IntVec> usp_grants(int transmitter, std::span<const int> requesters,
                                      const std::vector<DeviceSummaries>& summaries,
                                      const std::vector<ThresholdVector>& thresholds,
                                      const std::vector<TrustMatrix>& trust, std::vector<std::int64_t>* totals) {
    const auto& tx = summaries[transmitter];
    const auto tx_centroids = centroids_of(tx);
    const CountVector tx_counts = cluster_counts(tx);
    std::vector<GrantRequest> reqs;
    for (int i : requesters) {
        const auto q_total = usp_request_total(summaries[i], thresholds[i]);
        if (totals) (*totals)[i] = q_total;
        const auto rx_centroids = centroids_of(summaries[i]);
        IntVec per_cluster = usp_allocate(q_total, rx_centroids, tx_centroids);
        const auto avail = sup_availability(trust[transmitter], tx_counts, thresholds[transmitter], i, requesters);
        for (std::size_t l = 0; l < per_cluster.size(); ++l)
            if (!avail[l]) per_cluster[l] = 0;
        reqs.push_back({i, std::move(per_cluster)});
    }
    return sup_allocate(reqs, tx_counts, thresholds[transmitter]);
}

inline UspRound run_usp_round(std::span<const int> selection, const std::vector<DeviceSummaries>& summaries,
                              const std::vector<ThresholdVector>& thresholds, const std::vector<TrustMatrix>& trust,
                              Rng& rng) {
    const int n = static_cast<int>(summaries.size());
    UspRound round;
    round.post = summaries;
    round.requested.assign(n, 0);
    round.grants.assign(n, IntVec());
    round.draws.assign(n, {});
    std::vector<std::vector<int>> requesters(n);
    for (int i = 0; i < n; ++i)
        if (selection[i] >= 0) {
            if (selection[i] == i || selection[i] >= n) throw protocol_error("invalid transmitter selection");
            requesters[selection[i]].push_back(i);
        }
    for (int j = 0; j < n; ++j) {
        if (requesters[j].empty()) continue;
        const auto grants = usp_grants(j, requesters[j], summaries, thresholds, trust, &round.requested);
        for (std::size_t k = 0; k < requesters[j].size(); ++k) {
            const int i = requesters[j][k];
            round.grants[i] = grants[k];
            UspMessage msg{summaries[j], grants[k]};
            round.draws[i] = usp_draw(msg, rng);
            round.post[i] = usp_absorb(summaries[i], round.draws[i]);
        }
    }
    return round;
}

}  // namespace d2dfl
