#pragma once

#include "d2dfl/common.hpp"
#include "d2dfl/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace d2dfl {

inline constexpr double covariance_ridge = 1e-6;

/// Row indices of each label's points.
inline std::vector<std::vector<int>> partition_supervised(const LocalDataset& ds, int num_labels) {
    if (!ds.has_labels()) throw missing_labels("supervised partitioning needs every point labeled");
    std::vector<std::vector<int>> parts(num_labels);
    for (int r = 0; r < ds.size(); ++r) {
        const int l = ds.labels[r];
        if (l < 0 || l >= num_labels) throw invalid_parameter("label out of range");
        parts[l].push_back(r);
    }
    return parts;
}

/// Orthonormal basis (columns) of a shared low-dimensional subspace.
struct Subspace {
    Mat basis;
    bool rank_deficient = false;

    int ambient_dim() const { return static_cast<int>(basis.rows()); }
    int dim() const { return static_cast<int>(basis.cols()); }
};

/// Two-round PCA over device summaries: devices share (sum, count) to fix the
/// global mean, then their scatter about that mean. Only these aggregates
/// leave a device; the eigendecomposition runs at the server.
inline Subspace distributed_pca(const std::vector<LocalDataset>& datasets, int target_dim) {
    if (datasets.empty()) throw invalid_parameter("distributed PCA needs at least one dataset");
    int feat = -1;
    for (const auto& ds : datasets) {
        if (ds.size() == 0) continue;
        if (feat >= 0 && ds.dim() != feat) throw invalid_parameter("feature dimensions differ across devices");
        feat = ds.dim();
    }
    if (feat < 0) throw invalid_parameter("all datasets are empty");
    if (target_dim < 1 || target_dim >= feat) throw invalid_parameter("PCA target dimension must satisfy 1 <= d < D");

    Vec sum = Vec::Zero(feat);
    double count = 0.0;
    for (const auto& ds : datasets) {
        if (ds.size() == 0) continue;
        sum += ds.features.colwise().sum().transpose();
        count += ds.size();
    }
    const Vec mean = sum / count;

    Mat scatter = Mat::Zero(feat, feat);
    for (const auto& ds : datasets) {
        if (ds.size() == 0) continue;
        const Mat centered = ds.features.rowwise() - mean.transpose();
        scatter.noalias() += centered.transpose() * centered;
    }

    Eigen::SelfAdjointEigenSolver<Mat> eig(scatter);
    if (eig.info() != Eigen::Success) throw numeric_error("eigendecomposition of the aggregate scatter failed");
    // Eigenvalues come back ascending.
    Subspace out;
    out.basis.resize(feat, target_dim);
    const double top = std::max(eig.eigenvalues()(feat - 1), 0.0);
    for (int k = 0; k < target_dim; ++k) {
        Vec v = eig.eigenvectors().col(feat - 1 - k);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        out.basis.col(k) = v;
        if (eig.eigenvalues()(feat - 1 - k) <= 1e-12 * std::max(top, 1.0)) out.rank_deficient = true;
    }
    return out;
}

/// Projection of a dataset on the subspace: one d-dimensional row per point.
inline Mat project(const LocalDataset& ds, const Subspace& f) { return ds.features * f.basis; }

/// k-nearest-neighbour label propagation with RBF weights and hard clamping
/// of observed labels. `labels[r]` is read only where `observed[r]` is true.
inline std::vector<int> label_propagation(const Mat& points, const std::vector<int>& labels,
                                          const std::vector<bool>& observed, int k_neighbors) {
    const int n = static_cast<int>(points.rows());
    if (static_cast<int>(labels.size()) != n || static_cast<int>(observed.size()) != n)
        throw invalid_parameter("labels and mask must match the number of points");
    if (k_neighbors < 1) throw invalid_parameter("k_neighbors must be positive");
    int num_labels = 0;
    bool any = false;
    for (int r = 0; r < n; ++r)
        if (observed[r]) {
            any = true;
            if (labels[r] < 0) throw invalid_parameter("observed label must be nonnegative");
            num_labels = std::max(num_labels, labels[r] + 1);
        }
    if (!any) throw missing_labels("label propagation needs at least one labeled point");

    Mat dist(n, n);
    for (int a = 0; a < n; ++a)
        for (int b = a; b < n; ++b) dist(a, b) = dist(b, a) = (points.row(a) - points.row(b)).norm();

    std::vector<double> pairwise;
    pairwise.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) pairwise.push_back(dist(a, b));
    double sigma = 1.0;
    if (!pairwise.empty()) {
        auto mid = pairwise.begin() + static_cast<std::ptrdiff_t>(pairwise.size() / 2);
        std::nth_element(pairwise.begin(), mid, pairwise.end());
        sigma = *mid > 0.0 ? *mid : 1.0;
    }

    // Symmetrized kNN graph.
    Mat w = Mat::Zero(n, n);
    const int k = std::min(k_neighbors, n - 1);
    std::vector<int> order(n);
    for (int a = 0; a < n; ++a) {
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + std::min(n, k + 1), order.end(), [&](int x, int y) {
            if (dist(a, x) != dist(a, y)) return dist(a, x) < dist(a, y);
            return x < y;
        });
        int taken = 0;
        for (int idx = 0; idx < n && taken < k; ++idx) {
            const int b = order[idx];
            if (b == a) continue;
            const double v = std::exp(-dist(a, b) * dist(a, b) / (2.0 * sigma * sigma));
            w(a, b) = std::max(w(a, b), v);
            w(b, a) = std::max(w(b, a), v);
            ++taken;
        }
    }
    const Vec degree = w.rowwise().sum();

    Mat f = Mat::Zero(n, num_labels);
    for (int r = 0; r < n; ++r)
        if (observed[r]) f(r, labels[r]) = 1.0;
    for (int iter = 0; iter < 1000; ++iter) {
        Mat next = w * f;
        for (int r = 0; r < n; ++r) {
            if (observed[r]) {
                next.row(r).setZero();
                next(r, labels[r]) = 1.0;
            } else if (degree(r) > 0.0) {
                next.row(r) /= degree(r);
            }
        }
        const double change = (next - f).cwiseAbs().maxCoeff();
        f = std::move(next);
        if (change < 1e-6) break;
    }

    std::vector<int> out(n);
    for (int r = 0; r < n; ++r) {
        if (observed[r]) {
            out[r] = labels[r];
            continue;
        }
        if (f.row(r).maxCoeff() > 0.0) {
            Eigen::Index arg = 0;
            f.row(r).maxCoeff(&arg);
            out[r] = static_cast<int>(arg);
            continue;
        }
        // Not connected to any labeled point: nearest labeled neighbour.
        double best = std::numeric_limits<double>::infinity();
        for (int s = 0; s < n; ++s)
            if (observed[s] && dist(r, s) < best) {
                best = dist(r, s);
                out[r] = labels[s];
            }
    }
    return out;
}

/// Gaussian description of one partition in the shared subspace.
struct ClusterSummary {
    Vec centroid;
    Mat covariance;  // sample covariance (1/(n-1)) + ridge * I
    std::int64_t count = 0;

    int dim() const { return static_cast<int>(centroid.size()); }
    double trace() const { return covariance.trace(); }

    /// Scatter matrix recovered from the stored covariance.
    Mat scatter() const {
        if (count < 2) return Mat::Zero(dim(), dim());
        return static_cast<double>(count - 1) * (covariance - covariance_ridge * Mat::Identity(dim(), dim()));
    }
};

inline ClusterSummary summarize_rows(const Mat& points, const std::vector<int>& rows, int dim) {
    ClusterSummary s;
    s.count = static_cast<std::int64_t>(rows.size());
    s.centroid = Vec::Zero(dim);
    s.covariance = covariance_ridge * Mat::Identity(dim, dim);
    if (rows.empty()) return s;
    for (int r : rows) s.centroid += points.row(r).transpose();
    s.centroid /= static_cast<double>(rows.size());
    if (rows.size() >= 2) {
        Mat scatter = Mat::Zero(dim, dim);
        for (int r : rows) {
            const Vec c = points.row(r).transpose() - s.centroid;
            scatter.noalias() += c * c.transpose();
        }
        s.covariance += scatter / static_cast<double>(rows.size() - 1);
    }
    return s;
}

inline ClusterSummary summarize_all(const Mat& points) {
    std::vector<int> rows(points.rows());
    std::iota(rows.begin(), rows.end(), 0);
    return summarize_rows(points, rows, static_cast<int>(points.cols()));
}

/// Summary of the union of a cluster and extra points (rows of `extra`).
inline ClusterSummary merge_points(const ClusterSummary& base, const Mat& extra) {
    if (extra.rows() == 0) return base;
    const int d = base.dim();
    const ClusterSummary add = summarize_all(extra);
    if (base.count == 0) return add;
    const double n = static_cast<double>(base.count);
    const double m = static_cast<double>(add.count);
    const Vec delta = add.centroid - base.centroid;
    ClusterSummary out;
    out.count = base.count + add.count;
    out.centroid = base.centroid + delta * (m / (n + m));
    const Mat scatter = base.scatter() + add.scatter() + (n * m / (n + m)) * delta * delta.transpose();
    out.covariance = scatter / (n + m - 1.0) + covariance_ridge * Mat::Identity(d, d);
    return out;
}

struct KMeansResult {
    std::vector<int> assignment;
    std::vector<ClusterSummary> summaries;
    std::vector<double> objective_trace;  // within-cluster sum of squares after each assignment
    int iterations = 0;
};

/// Lloyd iteration from k-means++ seeding; at most 300 rounds. An empty
/// cluster is re-seeded at the point farthest from its current centroid.
inline KMeansResult kmeans(const Mat& points, int clusters, Rng& rng) {
    const int n = static_cast<int>(points.rows());
    const int d = static_cast<int>(points.cols());
    if (clusters < 1) throw invalid_parameter("cluster count must be positive");
    if (n < clusters) throw invalid_parameter("fewer points than clusters");

    Mat centers(clusters, d);
    centers.row(0) = points.row(uniform_int(rng, 0, n - 1));
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    for (int c = 1; c < clusters; ++c) {
        double total = 0.0;
        for (int r = 0; r < n; ++r) {
            d2[r] = std::min(d2[r], (points.row(r) - centers.row(c - 1)).squaredNorm());
            total += d2[r];
        }
        int pick = n - 1;
        if (total > 0.0) {
            double u = uniform_real(rng) * total;
            for (int r = 0; r < n; ++r) {
                u -= d2[r];
                if (u <= 0.0) {
                    pick = r;
                    break;
                }
            }
        } else {
            pick = uniform_int(rng, 0, n - 1);
        }
        centers.row(c) = points.row(pick);
    }

    KMeansResult res;
    res.assignment.assign(n, -1);
    for (int iter = 0; iter < 300; ++iter) {
        bool changed = false;
        double objective = 0.0;
        for (int r = 0; r < n; ++r) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < clusters; ++c) {
                const double v = (points.row(r) - centers.row(c)).squaredNorm();
                if (v < bd) {
                    bd = v;
                    best = c;
                }
            }
            if (res.assignment[r] != best) changed = true;
            res.assignment[r] = best;
            objective += bd;
        }
        res.objective_trace.push_back(objective);
        res.iterations = iter + 1;
        if (!changed && iter > 0) break;

        Mat sums = Mat::Zero(clusters, d);
        std::vector<int> sizes(clusters, 0);
        for (int r = 0; r < n; ++r) {
            sums.row(res.assignment[r]) += points.row(r);
            ++sizes[res.assignment[r]];
        }
        for (int c = 0; c < clusters; ++c)
            if (sizes[c] > 0) centers.row(c) = sums.row(c) / sizes[c];
        for (int c = 0; c < clusters; ++c) {
            if (sizes[c] > 0) continue;
            int far = -1;
            double fd = -1.0;
            for (int r = 0; r < n; ++r) {
                if (sizes[res.assignment[r]] <= 1) continue;
                const double v = (points.row(r) - centers.row(res.assignment[r])).squaredNorm();
                if (v > fd) {
                    fd = v;
                    far = r;
                }
            }
            if (far < 0) continue;
            --sizes[res.assignment[far]];
            res.assignment[far] = c;
            sizes[c] = 1;
            centers.row(c) = points.row(far);
            changed = true;
        }
    }

    std::vector<std::vector<int>> members(clusters);
    for (int r = 0; r < n; ++r) members[res.assignment[r]].push_back(r);
    for (int c = 0; c < clusters; ++c) res.summaries.push_back(summarize_rows(points, members[c], d));
    return res;
}

/// Regression partitioning: sort by target and cut at the L-1 largest gaps
/// between consecutive values. Returns a partition id per point.
inline std::vector<int> partition_regression(const std::vector<double>& targets, int partitions) {
    const int n = static_cast<int>(targets.size());
    if (partitions < 1) throw invalid_parameter("partition count must be positive");
    if (n < partitions) throw invalid_parameter("fewer points than partitions");
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return targets[a] < targets[b]; });
    std::vector<int> gaps(n - 1);
    std::iota(gaps.begin(), gaps.end(), 0);
    std::stable_sort(gaps.begin(), gaps.end(), [&](int a, int b) {
        return targets[order[a + 1]] - targets[order[a]] > targets[order[b + 1]] - targets[order[b]];
    });
    std::vector<bool> cut(n - 1, false);
    for (int k = 0; k < partitions - 1; ++k) cut[gaps[k]] = true;
    std::vector<int> out(n);
    int part = 0;
    for (int pos = 0; pos < n; ++pos) {
        out[order[pos]] = part;
        if (pos < n - 1 && cut[pos]) ++part;
    }
    return out;
}

}  // namespace d2dfl
