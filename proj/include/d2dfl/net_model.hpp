#pragma once

#include "d2dfl/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace d2dfl {

/// Received signal strength between device pairs (linear scale).
/// values(i, j) is the RSS at receiver i from transmitter j.
struct RssMatrix {
    Mat values;
    Mat distances;  // meters; energy accounting only

    int size() const { return static_cast<int>(values.rows()); }
};

inline RssMatrix make_rss(Mat values, Mat distances) {
    const auto n = values.rows();
    if (n < 2 || values.cols() != n) throw invalid_parameter("RSS matrix must be square with N >= 2");
    if (distances.rows() != n || distances.cols() != n)
        throw invalid_parameter("distance matrix shape does not match RSS matrix");
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            if (!(values(i, j) > 0.0)) throw invalid_parameter("RSS entries must be positive");
            if (!(distances(i, j) >= 0.0)) throw invalid_parameter("distances must be nonnegative");
        }
    return RssMatrix{std::move(values), std::move(distances)};
}

/// Probability that a transmission from j fails at receiver i.
struct DropMatrix {
    Mat values;

    int size() const { return static_cast<int>(values.rows()); }
    double operator()(int receiver, int transmitter) const { return values(receiver, transmitter); }
};

/// 1 - exp(-(2^r - 1) * sigma2 / w), evaluated without cancellation.
inline double drop_probability(double rss, double rate, double noise_power) {
    if (!(rss > 0.0)) throw invalid_parameter("RSS must be positive");
    if (!(rate > 0.0)) throw invalid_parameter("transmission rate must be positive");
    if (!(noise_power > 0.0)) throw invalid_parameter("noise power must be positive");
    const double snr_gap = std::expm1(rate * std::numbers::ln2);
    return -std::expm1(-snr_gap * noise_power / rss);
}

inline DropMatrix compute_drop_matrix(const RssMatrix& w, double rate, double noise_power) {
    const int n = w.size();
    DropMatrix out{Mat::Zero(n, n)};
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) out.values(i, j) = drop_probability(w.values(i, j), rate, noise_power);
    return out;
}

struct ReliableClustering {
    std::vector<int> assignment;       // device -> cluster id (0-based)
    std::vector<std::int64_t> budgets;  // B_k, datapoints
    std::vector<std::int64_t> spent;    // d'_k, committed inter-cluster datapoints

    int cluster_count() const { return static_cast<int>(budgets.size()); }
    bool same_cluster(int a, int b) const { return assignment[a] == assignment[b]; }

    std::vector<int> members(int k) const {
        std::vector<int> out;
        for (int i = 0; i < static_cast<int>(assignment.size()); ++i)
            if (assignment[i] == k) out.push_back(i);
        return out;
    }
};

/// Greedy clique growing in device-index order. A device joins the open
/// cluster only if it is reliable in both directions with every member.
inline ReliableClustering cluster_reliable(const DropMatrix& drop, double alpha_d,
                                           std::int64_t budget = 0) {
    const int n = drop.size();
    ReliableClustering out;
    out.assignment.assign(n, -1);
    int next = 0;
    for (int seed = 0; seed < n; ++seed) {
        if (out.assignment[seed] >= 0) continue;
        std::vector<int> members{seed};
        out.assignment[seed] = next;
        for (int cand = seed + 1; cand < n; ++cand) {
            if (out.assignment[cand] >= 0) continue;
            const bool ok = std::all_of(members.begin(), members.end(), [&](int m) {
                return drop(m, cand) <= alpha_d && drop(cand, m) <= alpha_d;
            });
            if (ok) {
                members.push_back(cand);
                out.assignment[cand] = next;
            }
        }
        ++next;
    }
    out.budgets.assign(next, budget);
    out.spent.assign(next, 0);
    return out;
}

/// Bin index of every entry: clamp to [lo, hi], then `resolution` equal bins.
inline std::vector<int> quantize_bins(std::span<const double> row, int resolution, double lo, double hi) {
    if (row.empty()) throw invalid_parameter("cannot quantize an empty RSS row");
    if (resolution < 1) throw invalid_parameter("resolution must be >= 1");
    if (!(lo < hi)) throw invalid_parameter("quantization range must satisfy lo < hi");
    std::vector<int> bins(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) {
        const double x = std::clamp(row[k], lo, hi);
        const int b = static_cast<int>(std::floor((x - lo) / (hi - lo) * resolution));
        bins[k] = std::clamp(b, 0, resolution - 1);
    }
    return bins;
}

/// Stable state index for a quantized RSS row. Mixed-radix encoding when it
/// fits in 64 bits, otherwise an FNV-1a hash of the bin tuple.
inline std::uint64_t quantize_state(std::span<const double> row, int resolution, double lo, double hi) {
    const auto bins = quantize_bins(row, resolution, lo, hi);
    if (resolution == 1) return 0;
    const double width_bits = std::log2(static_cast<double>(resolution)) * static_cast<double>(bins.size());
    if (width_bits < 63.0) {
        std::uint64_t q = 0;
        for (auto it = bins.rbegin(); it != bins.rend(); ++it)
            q = q * static_cast<std::uint64_t>(resolution) + static_cast<std::uint64_t>(*it);
        return q;
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (int b : bins) {
        h ^= static_cast<std::uint64_t>(b) + 1;
        h *= 0x100000001b3ULL;
    }
    return h;
}

enum class TransferKind { d2d, d2s };

/// First-order radio model: E = bits * (e_elec + e_amp * distance^2).
struct RadioModel {
    double e_elec = 50e-9;
    double e_amp = 100e-12;
    double mean_d2d_distance = 0.0;

    double joules_per_bit(double distance) const { return e_elec + e_amp * distance * distance; }
    double d2s_distance() const { return 3.0 * mean_d2d_distance; }
};

struct EnergyLedger {
    double d2d_joules = 0.0;
    double d2s_joules = 0.0;
    std::uint64_t d2d_bits = 0;
    std::uint64_t d2s_bits = 0;

    double total_joules() const { return d2d_joules + d2s_joules; }
};

inline EnergyLedger record_transfer(EnergyLedger ledger, std::int64_t bits, double distance, TransferKind kind,
                                    const RadioModel& radio) {
    if (bits < 0) throw invalid_parameter("bit count must be nonnegative");
    if (bits == 0) return ledger;
    if (kind == TransferKind::d2d) {
        ledger.d2d_bits += static_cast<std::uint64_t>(bits);
        ledger.d2d_joules += static_cast<double>(bits) * radio.joules_per_bit(distance);
    } else {
        ledger.d2s_bits += static_cast<std::uint64_t>(bits);
        ledger.d2s_joules += static_cast<double>(bits) * radio.joules_per_bit(radio.d2s_distance());
    }
    return ledger;
}

inline double mean_offdiag(const Mat& m) {
    const auto n = m.rows();
    if (n < 2) return 0.0;
    return (m.sum() - m.diagonal().sum()) / static_cast<double>(n * (n - 1));
}

/// Uniform device positions in a square; returns the pairwise distance matrix.
inline Mat random_distances(int n, double side, Rng& rng) {
    std::vector<std::pair<double, double>> pos(n);
    for (auto& p : pos) p = {uniform_real(rng, 0.0, side), uniform_real(rng, 0.0, side)};
    Mat d = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            d(i, j) = std::hypot(pos[i].first - pos[j].first, pos[i].second - pos[j].second);
    return d;
}

/// Gaussian RSS, truncated to (lo, hi) by rejection.
inline Mat gaussian_rss_values(int n, double mean, double stddev, double lo, double hi, Rng& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    Mat w = Mat::Constant(n, n, mean);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            double x = dist(rng);
            while (!(x > lo && x < hi)) x = dist(rng);
            w(i, j) = x;
        }
    return w;
}

/// Log-distance path loss: W = ref_rss * (ref_distance / d)^exponent.
inline Mat pathloss_rss_values(const Mat& distances, double ref_rss, double ref_distance, double exponent) {
    const auto n = distances.rows();
    Mat w = Mat::Constant(n, n, ref_rss);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (i != j) w(i, j) = ref_rss * std::pow(ref_distance / std::max(distances(i, j), 1e-3), exponent);
    return w;
}

}  // namespace d2dfl
