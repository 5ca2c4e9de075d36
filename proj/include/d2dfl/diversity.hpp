#pragma once

#include "d2dfl/common.hpp"
#include "d2dfl/data_model.hpp"
#include "d2dfl/partition.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace d2dfl {

struct DiscreteDistribution {
    std::vector<double> probs;

    int size() const { return static_cast<int>(probs.size()); }

    static DiscreteDistribution from_counts(const CountVector& c) {
        const auto total = c.total();
        if (total <= 0) throw invalid_parameter("cannot normalize a count vector with zero total");
        DiscreteDistribution d;
        d.probs.reserve(c.size());
        for (auto v : c.counts) d.probs.push_back(static_cast<double>(v) / static_cast<double>(total));
        return d;
    }
};

enum class DiversityMetric { wasserstein, jensen_shannon };

/// 1-Wasserstein distance on label indices 0..L-1 with unit spacing.
inline double wasserstein1(const DiscreteDistribution& p, const DiscreteDistribution& q) {
    if (p.size() != q.size()) throw invalid_parameter("distribution lengths differ");
    double cp = 0.0, cq = 0.0, acc = 0.0;
    for (int l = 0; l + 1 < p.size(); ++l) {
        cp += p.probs[l];
        cq += q.probs[l];
        acc += std::abs(cp - cq);
    }
    return acc;
}

/// Jensen-Shannon distance (square root of the divergence, natural log).
inline double jensen_shannon(const DiscreteDistribution& p, const DiscreteDistribution& q) {
    if (p.size() != q.size()) throw invalid_parameter("distribution lengths differ");
    double js = 0.0;
    for (int l = 0; l < p.size(); ++l) {
        const double a = p.probs[l], b = q.probs[l];
        const double m = 0.5 * (a + b);
        if (a > 0.0) js += 0.5 * a * std::log(a / m);
        if (b > 0.0) js += 0.5 * b * std::log(b / m);
    }
    return std::sqrt(std::max(js, 0.0));
}

inline double distribution_distance(const DiscreteDistribution& p, const DiscreteDistribution& q,
                                    DiversityMetric metric) {
    return metric == DiversityMetric::wasserstein ? wasserstein1(p, q) : jensen_shannon(p, q);
}

/// Diversity score of an exchange: distance between the pre- and
/// post-exchange label distributions, paid only when at least `min_labels`
/// partitions meet their thresholds afterwards.
inline double score_g(const CountVector& pre, const CountVector& post, const ThresholdVector& b, int min_labels,
                      DiversityMetric metric = DiversityMetric::wasserstein) {
    if (pre.size() != post.size() || pre.size() != b.size()) throw invalid_parameter("score_g length mismatch");
    int met = 0;
    for (int l = 0; l < post.size(); ++l)
        if (post[l] >= b[l]) ++met;
    const auto p = DiscreteDistribution::from_counts(pre);
    const auto q = DiscreteDistribution::from_counts(post);
    if (met < min_labels) return 0.0;
    return distribution_distance(p, q, metric);
}

/// Sum over clusters of trace(post) / trace(pre).
inline double trace_ratio(std::span<const ClusterSummary> post, std::span<const ClusterSummary> pre) {
    if (post.size() != pre.size()) throw invalid_parameter("trace_ratio needs equally many clusters");
    double acc = 0.0;
    for (std::size_t k = 0; k < pre.size(); ++k) {
        const double t = pre[k].trace();
        if (!(t > 0.0)) throw numeric_error("degenerate cluster: zero covariance trace");
        acc += post[k].trace() / t;
    }
    return acc;
}

/// Precomputed factorization of a Gaussian's covariance for repeated KL terms.
struct GaussianFactor {
    Vec mean;
    Mat cov;
    Eigen::LLT<Mat> chol;
    double log_det = 0.0;

    explicit GaussianFactor(const Vec& mu, const Mat& sigma) : mean(mu), cov(sigma), chol(sigma) {
        if (chol.info() != Eigen::Success) throw numeric_error("covariance is not positive definite");
        log_det = 2.0 * chol.matrixL().toDenseMatrix().diagonal().array().log().sum();
    }
    explicit GaussianFactor(const ClusterSummary& s) : GaussianFactor(s.centroid, s.covariance) {}
};

inline double gaussian_kl(const GaussianFactor& p0, const GaussianFactor& p1) {
    const auto d = static_cast<double>(p0.mean.size());
    const double tr = p1.chol.solve(p0.cov).trace();
    const Vec diff = p1.mean - p0.mean;
    const double maha = diff.dot(p1.chol.solve(diff));
    return std::max(0.0, 0.5 * (tr + maha - d + p1.log_det - p0.log_det));
}

/// KL(N(mu0, sigma0) || N(mu1, sigma1)).
inline double gaussian_kl(const Vec& mu0, const Mat& sigma0, const Vec& mu1, const Mat& sigma1) {
    return gaussian_kl(GaussianFactor(mu0, sigma0), GaussianFactor(mu1, sigma1));
}

using DeviceSummaries = std::vector<ClusterSummary>;

namespace detail {
inline std::vector<std::vector<std::optional<GaussianFactor>>> factorize(const std::vector<DeviceSummaries>& all) {
    std::vector<std::vector<std::optional<GaussianFactor>>> out(all.size());
    for (std::size_t i = 0; i < all.size(); ++i)
        for (const auto& s : all[i]) {
            if (s.count > 0)
                out[i].emplace_back(GaussianFactor(s));
            else
                out[i].emplace_back(std::nullopt);
        }
    return out;
}
}  // namespace detail

/// Mean over ordered device pairs and cluster pairs of the ratio of pre- to
/// post-exchange KL divergence, centered so that no change scores 0. Empty
/// clusters are skipped. A post divergence below 1e-9 contributes 1e3 (or 1
/// when the pre divergence is also below 1e-9).
inline double system_agreement(const std::vector<DeviceSummaries>& pre, const std::vector<DeviceSummaries>& post) {
    if (pre.size() != post.size()) throw invalid_parameter("system_agreement needs the same devices before and after");
    const auto fpre = detail::factorize(pre);
    const auto fpost = detail::factorize(post);
    double acc = 0.0;
    std::size_t terms = 0;
    for (std::size_t i = 0; i < pre.size(); ++i)
        for (std::size_t j = 0; j < pre.size(); ++j) {
            if (i == j) continue;
            const std::size_t ki = std::min(fpre[i].size(), fpost[i].size());
            const std::size_t kj = std::min(fpre[j].size(), fpost[j].size());
            for (std::size_t a = 0; a < ki; ++a)
                for (std::size_t b = 0; b < kj; ++b) {
                    if (!fpre[i][a] || !fpre[j][b] || !fpost[i][a] || !fpost[j][b]) continue;
                    const double hb = gaussian_kl(*fpre[i][a], *fpre[j][b]);
                    const double ha = gaussian_kl(*fpost[i][a], *fpost[j][b]);
                    double ratio;
                    if (ha < 1e-9)
                        ratio = hb < 1e-9 ? 1.0 : 1e3;
                    else
                        ratio = hb / ha;
                    acc += ratio;
                    ++terms;
                }
        }
    if (terms == 0) return 0.0;
    return acc / static_cast<double>(terms) - 1.0;
}

}  // namespace d2dfl
