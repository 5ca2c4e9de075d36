#pragma once

#include "d2dfl/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace d2dfl {

/// A device's local data. Rows of `features` are datapoints.
struct LocalDataset {
    Mat features;
    std::vector<int> labels;         // empty when unlabeled
    std::vector<bool> label_mask;    // empty unless semi-supervised; true = observed
    std::vector<double> targets;     // regression targets, empty otherwise

    int size() const { return static_cast<int>(features.rows()); }
    int dim() const { return static_cast<int>(features.cols()); }
    bool has_labels() const { return static_cast<int>(labels.size()) == size(); }

    void validate() const {
        if (!labels.empty() && static_cast<int>(labels.size()) != size())
            throw invalid_parameter("label count does not match datapoint count");
        if (!label_mask.empty() && labels.empty()) throw invalid_parameter("label mask requires labels");
        if (!label_mask.empty() && static_cast<int>(label_mask.size()) != size())
            throw invalid_parameter("label mask length does not match datapoint count");
        if (!targets.empty() && static_cast<int>(targets.size()) != size())
            throw invalid_parameter("target count does not match datapoint count");
    }

    LocalDataset subset(const std::vector<int>& rows) const {
        LocalDataset out;
        out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) out.features.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
        if (!labels.empty())
            for (int r : rows) out.labels.push_back(labels[r]);
        if (!label_mask.empty())
            for (int r : rows) out.label_mask.push_back(label_mask[r]);
        if (!targets.empty())
            for (int r : rows) out.targets.push_back(targets[r]);
        return out;
    }

    void append(const LocalDataset& other) {
        if (other.size() == 0) return;
        if (size() == 0 && features.cols() == 0) {
            *this = other;
            return;
        }
        const auto n = features.rows();
        Mat merged(n + other.features.rows(), features.cols());
        merged << features, other.features;
        features = std::move(merged);
        labels.insert(labels.end(), other.labels.begin(), other.labels.end());
        label_mask.insert(label_mask.end(), other.label_mask.begin(), other.label_mask.end());
        targets.insert(targets.end(), other.targets.begin(), other.targets.end());
    }
};

/// Per-partition datapoint counts, one entry per partition.
struct CountVector {
    std::vector<std::int64_t> counts;

    CountVector() = default;
    explicit CountVector(std::vector<std::int64_t> c) : counts(std::move(c)) {
        for (auto v : counts)
            if (v < 0) throw invalid_parameter("count vector entries must be nonnegative");
    }
    static CountVector zeros(int n) { return CountVector(std::vector<std::int64_t>(n, 0)); }

    int size() const { return static_cast<int>(counts.size()); }
    std::int64_t operator[](int l) const { return counts[l]; }
    std::int64_t& operator[](int l) { return counts[l]; }
    std::int64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }
    bool operator==(const CountVector&) const = default;
};

/// Minimum number of datapoints per partition a device aims to hold.
struct ThresholdVector {
    std::vector<std::int64_t> thresholds;

    static ThresholdVector uniform(int n, std::int64_t b) { return {std::vector<std::int64_t>(n, b)}; }
    int size() const { return static_cast<int>(thresholds.size()); }
    std::int64_t operator[](int l) const { return thresholds[l]; }
};

/// Transmitter-specific trust: allowed(i, l) says whether the transmitter
/// may send partition l to receiver i.
class TrustMatrix {
public:
    TrustMatrix() = default;
    TrustMatrix(int transmitter, int devices, int partitions, bool value = true)
        : transmitter_(transmitter), devices_(devices), partitions_(partitions),
          cells_(static_cast<std::size_t>(devices) * partitions, value ? 1 : 0) {}

    int transmitter() const { return transmitter_; }
    int devices() const { return devices_; }
    int partitions() const { return partitions_; }

    bool allowed(int receiver, int partition) const {
        return cells_[static_cast<std::size_t>(receiver) * partitions_ + partition] != 0;
    }
    void set(int receiver, int partition, bool v) {
        cells_[static_cast<std::size_t>(receiver) * partitions_ + partition] = v ? 1 : 0;
    }
    int row_sum(int receiver) const {
        int s = 0;
        for (int l = 0; l < partitions_; ++l) s += allowed(receiver, l) ? 1 : 0;
        return s;
    }

private:
    int transmitter_ = 0;
    int devices_ = 0;
    int partitions_ = 0;
    std::vector<std::uint8_t> cells_;
};

struct SkewSpec {
    int labels_per_device = 3;
    std::vector<double> proportions{0.7, 0.2, 0.1};
    std::optional<double> dirichlet_alpha;
    std::uint64_t seed = 0;
    // 0 = split the whole pool; otherwise every device gets this many points
    // and surplus pool points stay unallocated.
    int points_per_device = 0;

    void validate(int num_labels) const {
        if (dirichlet_alpha) {
            if (!(*dirichlet_alpha > 0.0)) throw invalid_parameter("dirichlet alpha must be positive");
            return;
        }
        if (labels_per_device < 1 || labels_per_device > num_labels)
            throw invalid_parameter("labels_per_device must lie in [1, L]");
        if (static_cast<int>(proportions.size()) != labels_per_device)
            throw invalid_parameter("proportions length must equal labels_per_device");
        double s = 0.0;
        for (double p : proportions) {
            if (!(p > 0.0)) throw invalid_parameter("proportions must be positive");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-9) throw invalid_parameter("proportions must sum to 1");
    }
};

/// Integer split of `total` proportional to `weights` (largest remainder,
/// ties to the lower index). Weights must be nonnegative with a positive sum.
inline std::vector<std::int64_t> largest_remainder(std::int64_t total, const std::vector<double>& weights) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::int64_t> out(weights.size(), 0);
    if (total <= 0 || weights.empty()) return out;
    if (!(wsum > 0.0)) throw invalid_parameter("largest_remainder needs a positive weight sum");
    std::vector<double> rem(weights.size());
    std::int64_t assigned = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        const double exact = static_cast<double>(total) * weights[k] / wsum;
        out[k] = static_cast<std::int64_t>(std::floor(exact + 1e-9));
        rem[k] = exact - static_cast<double>(out[k]);
        assigned += out[k];
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-12; });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % order.size()) {
        ++out[order[k]];
        ++assigned;
    }
    while (assigned > total) {  // float guard; never expected
        auto it = std::max_element(out.begin(), out.end());
        --*it;
        --assigned;
    }
    return out;
}

/// Equal split of `total` into `parts` sizes differing by at most one.
inline std::vector<std::int64_t> even_sizes(std::int64_t total, int parts) {
    std::vector<std::int64_t> out(parts, total / parts);
    for (int k = 0; k < static_cast<int>(total % parts); ++k) ++out[k];
    return out;
}

inline std::vector<double> sample_dirichlet(int n, double alpha, Rng& rng) {
    std::gamma_distribution<double> g(alpha, 1.0);
    std::vector<double> p(n);
    double s = 0.0;
    for (auto& x : p) {
        x = g(rng);
        s += x;
    }
    if (!(s > 0.0)) {  // every draw underflowed: put all mass on one label
        std::fill(p.begin(), p.end(), 0.0);
        p[uniform_int(rng, 0, n - 1)] = 1.0;
        return p;
    }
    for (auto& x : p) x /= s;
    return p;
}

/// Per-device label demand (device x label) for the given sizes.
inline std::vector<std::vector<std::int64_t>> plan_skew(const std::vector<std::int64_t>& sizes, int num_labels,
                                                        const SkewSpec& spec) {
    spec.validate(num_labels);
    Rng rng = make_rng(spec.seed, {stream::allocation});
    std::vector<std::vector<std::int64_t>> plan;
    for (auto size : sizes) {
        std::vector<double> weights(num_labels, 0.0);
        if (spec.dirichlet_alpha) {
            weights = sample_dirichlet(num_labels, *spec.dirichlet_alpha, rng);
        } else {
            std::vector<int> labels(num_labels);
            std::iota(labels.begin(), labels.end(), 0);
            std::shuffle(labels.begin(), labels.end(), rng);
            for (int k = 0; k < spec.labels_per_device; ++k) weights[labels[k]] = spec.proportions[k];
        }
        plan.push_back(largest_remainder(size, weights));
    }
    return plan;
}

inline std::vector<std::int64_t> label_histogram(const std::vector<int>& labels, int num_labels) {
    std::vector<std::int64_t> h(num_labels, 0);
    for (int l : labels) {
        if (l < 0 || l >= num_labels) throw invalid_parameter("label out of range");
        ++h[l];
    }
    return h;
}

/// Split a labeled pool across devices with label skew. Every device draws
/// its labels at random and holds them in the given proportions.
inline std::vector<LocalDataset> allocate_skewed(const LocalDataset& pool, int devices, int num_labels,
                                                 const SkewSpec& spec) {
    pool.validate();
    if (pool.labels.empty()) throw missing_labels("allocate_skewed needs a labeled pool");
    if (devices < 1) throw invalid_parameter("device count must be positive");
    const auto sizes = spec.points_per_device > 0 ? std::vector<std::int64_t>(devices, spec.points_per_device)
                                                  : even_sizes(pool.size(), devices);
    const auto plan = plan_skew(sizes, num_labels, spec);

    std::vector<std::vector<int>> by_label(num_labels);
    for (int r = 0; r < pool.size(); ++r) {
        const int l = pool.labels[r];
        if (l < 0 || l >= num_labels) throw invalid_parameter("pool label out of range");
        by_label[l].push_back(r);
    }
    for (int l = 0; l < num_labels; ++l) {
        std::int64_t demand = 0;
        for (const auto& row : plan) demand += row[l];
        if (demand > static_cast<std::int64_t>(by_label[l].size()))
            throw allocation_error("insufficient pool for label " + std::to_string(l) + ": need " +
                                   std::to_string(demand) + ", have " + std::to_string(by_label[l].size()));
    }
    Rng rng = make_rng(spec.seed, {stream::allocation, 1});
    for (auto& rows : by_label) std::shuffle(rows.begin(), rows.end(), rng);

    std::vector<std::size_t> cursor(num_labels, 0);
    std::vector<LocalDataset> out;
    out.reserve(devices);
    for (int d = 0; d < devices; ++d) {
        std::vector<int> rows;
        for (int l = 0; l < num_labels; ++l)
            for (std::int64_t k = 0; k < plan[d][l]; ++k) rows.push_back(by_label[l][cursor[l]++]);
        std::sort(rows.begin(), rows.end());
        out.push_back(pool.subset(rows));
    }
    return out;
}

/// Gaussian blobs, one per label, shared by training and test sampling.
struct BlobModel {
    Mat means;  // num_labels x dim
    double noise = 1.0;

    int num_labels() const { return static_cast<int>(means.rows()); }
    int dim() const { return static_cast<int>(means.cols()); }

    static BlobModel random(int num_labels, int dim, double separation, double noise, Rng& rng) {
        std::normal_distribution<double> n01(0.0, 1.0);
        BlobModel m;
        m.noise = noise;
        m.means.resize(num_labels, dim);
        for (int l = 0; l < num_labels; ++l) {
            Vec v(dim);
            for (int k = 0; k < dim; ++k) v(k) = n01(rng);
            m.means.row(l) = (separation / std::max(v.norm(), 1e-12)) * v.transpose();
        }
        return m;
    }

    /// Exactly counts[l] points of label l, rows ordered by label.
    LocalDataset sample(const std::vector<std::int64_t>& counts, Rng& rng) const {
        std::normal_distribution<double> n01(0.0, 1.0);
        const auto total = std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
        LocalDataset ds;
        ds.features.resize(total, dim());
        Eigen::Index r = 0;
        for (int l = 0; l < num_labels(); ++l)
            for (std::int64_t k = 0; k < counts[l]; ++k, ++r) {
                for (int c = 0; c < dim(); ++c) ds.features(r, c) = means(l, c) + noise * n01(rng);
                ds.labels.push_back(l);
            }
        return ds;
    }
};

/// Pool whose per-label supply matches the skew plan exactly, so that
/// allocate_skewed consumes it with no surplus.
inline LocalDataset make_skew_matched_pool(const BlobModel& blobs, int devices, std::int64_t points_per_device,
                                           const SkewSpec& spec, Rng& rng) {
    const auto plan = plan_skew(std::vector<std::int64_t>(devices, points_per_device), blobs.num_labels(), spec);
    std::vector<std::int64_t> supply(blobs.num_labels(), 0);
    for (const auto& row : plan)
        for (int l = 0; l < blobs.num_labels(); ++l) supply[l] += row[l];
    return blobs.sample(supply, rng);
}

enum class TrustPattern { random, row_sparse, col_sparse, block };

struct TrustBlock {
    int row0, rows, col0, cols;
    bool contains(int r, int c) const { return r >= row0 && r < row0 + rows && c >= col0 && c < col0 + cols; }
};

/// Trust matrices, one per transmitter. `blocks`, when given, receives the
/// generated blocks of the block pattern (indexed by transmitter).
inline std::vector<TrustMatrix> make_trust(int devices, int partitions, TrustPattern pattern, double sparsity,
                                           std::uint64_t seed,
                                           std::vector<std::vector<TrustBlock>>* blocks = nullptr) {
    if (sparsity < 0.0 || sparsity > 1.0) throw invalid_parameter("sparsity must lie in [0, 1]");
    std::vector<TrustMatrix> out;
    if (blocks) blocks->assign(devices, {});
    for (int j = 0; j < devices; ++j) {
        Rng rng = make_rng(seed, {stream::trust, static_cast<std::uint64_t>(j)});
        switch (pattern) {
            case TrustPattern::random: {
                TrustMatrix t(j, devices, partitions, false);
                std::bernoulli_distribution keep(1.0 - sparsity);
                for (int i = 0; i < devices; ++i)
                    for (int l = 0; l < partitions; ++l) t.set(i, l, sparsity == 0.0 ? true : keep(rng));
                out.push_back(std::move(t));
                break;
            }
            case TrustPattern::row_sparse:
            case TrustPattern::col_sparse: {
                const bool rows = pattern == TrustPattern::row_sparse;
                const int extent = rows ? devices : partitions;
                const int zeroed = std::min(extent, static_cast<int>(std::ceil(sparsity * extent - 1e-12)));
                std::vector<int> idx(extent);
                std::iota(idx.begin(), idx.end(), 0);
                std::shuffle(idx.begin(), idx.end(), rng);
                TrustMatrix t(j, devices, partitions, true);
                for (int k = 0; k < zeroed; ++k) {
                    if (rows)
                        for (int l = 0; l < partitions; ++l) t.set(idx[k], l, false);
                    else
                        for (int i = 0; i < devices; ++i) t.set(i, idx[k], false);
                }
                out.push_back(std::move(t));
                break;
            }
            case TrustPattern::block: {
                TrustMatrix t(j, devices, partitions, false);
                const double target = (1.0 - sparsity) * devices * partitions;
                int filled = 0;
                for (int attempt = 0; attempt < 4 * devices * partitions && filled < target; ++attempt) {
                    const int h = std::min(devices, uniform_int(rng, 2, 4));
                    const int w = std::min(partitions, uniform_int(rng, 2, 4));
                    TrustBlock b{uniform_int(rng, 0, devices - h), h, uniform_int(rng, 0, partitions - w), w};
                    for (int r = b.row0; r < b.row0 + b.rows; ++r)
                        for (int c = b.col0; c < b.col0 + b.cols; ++c)
                            if (!t.allowed(r, c)) {
                                t.set(r, c, true);
                                ++filled;
                            }
                    if (blocks) (*blocks)[j].push_back(b);
                }
                out.push_back(std::move(t));
                break;
            }
        }
    }
    return out;
}

inline CountVector count_vector(const LocalDataset& ds, int num_labels) {
    if (ds.labels.empty() && ds.size() > 0) throw missing_labels("count_vector needs a labeled dataset");
    return CountVector(label_histogram(ds.labels, num_labels));
}

/// Hide labels of all but `labeled_fraction` of the points, keeping at
/// least one labeled point for every label present.
inline void mask_labels(LocalDataset& ds, double labeled_fraction, Rng& rng) {
    if (ds.labels.empty()) throw missing_labels("mask_labels needs labels");
    const int n = ds.size();
    ds.label_mask.assign(n, false);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> seen;
    int kept = 0;
    for (int r : order) {
        const int l = ds.labels[r];
        if (l >= static_cast<int>(seen.size())) seen.resize(l + 1, false);
        if (!seen[l]) {
            seen[l] = true;
            ds.label_mask[r] = true;
            ++kept;
        }
    }
    const int target = static_cast<int>(std::round(labeled_fraction * n));
    for (int r : order) {
        if (kept >= target) break;
        if (!ds.label_mask[r]) {
            ds.label_mask[r] = true;
            ++kept;
        }
    }
}

/// CSV with a header row; feature columns, then an optional final column
/// named "label" holding integer labels.
inline LocalDataset read_csv_dataset(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw invalid_parameter("CSV is empty: header row required");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.empty()) throw invalid_parameter("CSV header has no columns");
    const bool labeled = header.back() == "label";
    const int feat = static_cast<int>(header.size()) - (labeled ? 1 : 0);
    if (feat < 1) throw invalid_parameter("CSV needs at least one feature column");

    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != header.size())
            throw invalid_parameter("CSV line " + std::to_string(line_no) + ": expected " +
                                    std::to_string(header.size()) + " columns, got " + std::to_string(cells.size()));
        std::vector<double> values(feat);
        for (int c = 0; c < feat; ++c) {
            std::size_t used = 0;
            try {
                values[c] = std::stod(cells[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != cells[c].size() || !std::isfinite(values[c]))
                throw invalid_parameter("CSV line " + std::to_string(line_no) + ": malformed number '" + cells[c] +
                                        "'");
        }
        if (labeled) {
            std::size_t used = 0;
            int l = -1;
            try {
                l = std::stoi(cells.back(), &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != cells.back().size() || l < 0)
                throw invalid_parameter("CSV line " + std::to_string(line_no) + ": malformed label '" +
                                        cells.back() + "'");
            labels.push_back(l);
        }
        rows.push_back(std::move(values));
    }
    LocalDataset ds;
    ds.features.resize(static_cast<Eigen::Index>(rows.size()), feat);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (int c = 0; c < feat; ++c) ds.features(static_cast<Eigen::Index>(r), c) = rows[r][c];
    ds.labels = std::move(labels);
    return ds;
}

inline LocalDataset read_csv_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw invalid_parameter("cannot open CSV file: " + path);
    return read_csv_dataset(in);
}

}  // namespace d2dfl
