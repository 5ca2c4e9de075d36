#include "d2dfl/exchange.hpp"

#include <gtest/gtest.h>

using namespace d2dfl;

namespace {

// Devices i, j, k of the worked message-passing example as 0, 1, 2.
struct Worked {
    std::vector<CountVector> held{CountVector({20, 0, 0, 0, 20}), CountVector({20, 20, 20, 20, 20}),
                                  CountVector({0, 20, 0, 20, 0})};
    std::vector<ThresholdVector> thresholds = std::vector<ThresholdVector>(3, ThresholdVector::uniform(5, 10));
    std::vector<TrustMatrix> trust;
    std::vector<int> selection{1, -1, 1};

    Worked() {
        for (int j = 0; j < 3; ++j) trust.emplace_back(j, 3, 5, true);
        const int ti[5] = {1, 0, 1, 1, 0}, tk[5] = {1, 1, 1, 0, 0};
        for (int l = 0; l < 5; ++l) {
            trust[1].set(0, l, ti[l]);
            trust[1].set(2, l, tk[l]);
        }
    }
};

DropMatrix no_drop(int n) { return DropMatrix{Mat::Zero(n, n)}; }

}  // namespace

TEST(SupAvailability, WorkedExampleTrustMask) {
    Worked w;
    const std::vector<int> req{0, 2};
    const auto vi = sup_availability(w.trust[1], w.held[1], w.thresholds[1], 0, req);
    const auto vk = sup_availability(w.trust[1], w.held[1], w.thresholds[1], 2, req);
    EXPECT_EQ(vi, (std::vector<std::uint8_t>{1, 0, 1, 1, 0}));
    EXPECT_EQ(vi[3], 1);
    EXPECT_EQ(vk[3], 0);
    EXPECT_THROW(sup_availability(w.trust[1], w.held[1], w.thresholds[1], 1, req), protocol_error);
}

TEST(SupAvailability, SurplusMustBeStrict) {
    TrustMatrix t(1, 2, 3, true);
    const std::vector<int> req{0};
    const auto v = sup_availability(t, CountVector({10, 11, 9}), ThresholdVector::uniform(3, 10), 0, req);
    EXPECT_EQ(v, (std::vector<std::uint8_t>{0, 1, 0}));
    const auto all = sup_availability(t, CountVector({50, 50, 50}), ThresholdVector::uniform(3, 10), 0, req);
    EXPECT_EQ(all, (std::vector<std::uint8_t>{1, 1, 1}));
}

TEST(SupRequest, WorkedExample) {
    const std::vector<std::uint8_t> v{1, 0, 1, 1, 0};
    EXPECT_EQ(sup_request(v, CountVector({20, 0, 0, 0, 20}), ThresholdVector::uniform(5, 10)),
              (IntVec{0, 0, 10, 10, 0}));
    EXPECT_EQ(sup_request(v, CountVector({30, 30, 30, 30, 30}), ThresholdVector::uniform(5, 10)), (IntVec(5, 0)));
}

TEST(SupRequest, FuzzAgainstFormula) {
    Rng rng = make_rng(31);
    for (int t = 0; t < 1000; ++t) {
        const int parts = uniform_int(rng, 1, 8);
        std::vector<std::uint8_t> v(parts);
        IntVec held(parts), thr(parts);
        for (int l = 0; l < parts; ++l) {
            v[l] = static_cast<std::uint8_t>(uniform_int(rng, 0, 1));
            held[l] = uniform_int(rng, 0, 40);
            thr[l] = uniform_int(rng, 0, 40);
        }
        const auto q = sup_request(v, CountVector(held), ThresholdVector{thr});
        for (int l = 0; l < parts; ++l) EXPECT_EQ(q[l], v[l] && thr[l] > held[l] ? thr[l] - held[l] : 0);
    }
}

TEST(SupAllocate, SplitsContestedPartitionEvenly) {
    const std::vector<GrantRequest> reqs{{0, {0, 0, 10, 10, 0}}, {2, {10, 0, 10, 0, 0}}};
    const auto g = sup_allocate(reqs, CountVector({20, 20, 20, 20, 20}), ThresholdVector::uniform(5, 10));
    EXPECT_EQ(g[0], (IntVec{0, 0, 5, 10, 0}));
    EXPECT_EQ(g[1], (IntVec{10, 0, 5, 0, 0}));
}

TEST(SupAllocate, LargestRemainderTieBreak) {
    const std::vector<GrantRequest> single{{3, {4}}};
    EXPECT_EQ(sup_allocate(single, CountVector({20}), ThresholdVector::uniform(1, 10))[0], (IntVec{4}));

    const std::vector<GrantRequest> reqs{{0, {7}}, {1, {3}}};
    const auto g = sup_allocate(reqs, CountVector({15}), ThresholdVector::uniform(1, 10));
    EXPECT_EQ(g[0], (IntVec{4}));
    EXPECT_EQ(g[1], (IntVec{1}));

    // Equal remainders: the lower receiver index wins, regardless of order.
    const std::vector<GrantRequest> tied{{5, {1}}, {2, {1}}};
    const auto t = sup_allocate(tied, CountVector({11}), ThresholdVector::uniform(1, 10));
    EXPECT_EQ(t[0], (IntVec{0}));
    EXPECT_EQ(t[1], (IntVec{1}));
}

TEST(Receive, ExpectedModeFloors) {
    EXPECT_EQ(receive({10}, 0.3, ReceiveMode::expected, nullptr), (IntVec{7}));
    EXPECT_EQ(receive({10, 3}, 1.0, ReceiveMode::expected, nullptr), (IntVec{0, 0}));
    EXPECT_THROW(receive({10}, 0.3, ReceiveMode::sampled, nullptr), invalid_parameter);
    Rng rng = make_rng(1);
    const auto s = receive({1000}, 0.3, ReceiveMode::sampled, &rng);
    EXPECT_GT(s[0], 600);
    EXPECT_LT(s[0], 800);
}

TEST(ApplyExchange, WorkedExampleIsExact) {
    Worked w;
    const auto round = run_sup_round(w.selection, w.held, w.thresholds, w.trust, no_drop(3), ReceiveMode::expected,
                                     nullptr);
    EXPECT_EQ(round.post[0].counts, (IntVec{20, 0, 5, 10, 20}));
    EXPECT_EQ(round.post[1].counts, (IntVec{10, 20, 10, 10, 20}));
    EXPECT_EQ(round.post[2].counts, (IntVec{10, 20, 5, 20, 0}));
    EXPECT_EQ(round.messages[0].request, (IntVec{0, 0, 10, 10, 0}));
    EXPECT_EQ(round.messages[2].transfer, (IntVec{10, 0, 5, 0, 0}));
}

TEST(ApplyExchange, EverythingDroppedLeavesOnlySends) {
    Worked w;
    Mat d = Mat::Ones(3, 3);
    d.diagonal().setZero();
    const auto round = run_sup_round(w.selection, w.held, w.thresholds, w.trust, DropMatrix{d},
                                     ReceiveMode::expected, nullptr);
    EXPECT_EQ(round.post[0], w.held[0]);
    EXPECT_EQ(round.post[2], w.held[2]);
    EXPECT_EQ(round.post[1].counts, (IntVec{10, 20, 10, 10, 20}));
}

TEST(ApplyExchange, NegativeResultIsProtocolViolation) {
    const std::vector<IntVec> sent{{5}};
    EXPECT_THROW(apply_exchange(CountVector({3}), {}, sent, ReceiveMode::expected, nullptr), protocol_error);
    const std::vector<IncomingTransfer> in{{{10}, 0.3}};
    EXPECT_EQ(apply_exchange(CountVector({3}), in, {}, ReceiveMode::expected, nullptr).counts, (IntVec{10}));
}

TEST(SupRound, FuzzTrustThresholdAndConservation) {
    Rng rng = make_rng(77);
    for (int t = 0; t < 1000; ++t) {
        const int n = uniform_int(rng, 2, 7), parts = uniform_int(rng, 2, 6);
        std::vector<CountVector> held;
        std::vector<ThresholdVector> thr;
        for (int i = 0; i < n; ++i) {
            IntVec c(parts), b(parts);
            for (int l = 0; l < parts; ++l) {
                c[l] = uniform_int(rng, 0, 30);
                b[l] = uniform_int(rng, 0, 20);
            }
            held.emplace_back(c);
            thr.push_back({b});
        }
        const auto trust = make_trust(n, parts, TrustPattern::random, uniform_real(rng, 0.0, 0.8),
                                      static_cast<std::uint64_t>(t));
        std::vector<int> sel(n);
        for (int i = 0; i < n; ++i) {
            int j = uniform_int(rng, -1, n - 2);
            if (j >= i) ++j;
            sel[i] = j;
        }
        const auto r = run_sup_round(sel, held, thr, trust, no_drop(n), ReceiveMode::expected, nullptr);
        std::vector<IntVec> sent(n, IntVec(parts, 0));
        for (int i = 0; i < n; ++i) {
            if (sel[i] < 0) continue;
            for (int l = 0; l < parts; ++l) {
                const auto u = r.messages[i].transfer[l];
                if (u > 0) ASSERT_TRUE(trust[sel[i]].allowed(i, l));
                ASSERT_LE(u, r.messages[i].request[l]);
                sent[sel[i]][l] += u;
            }
        }
        for (int j = 0; j < n; ++j)
            for (int l = 0; l < parts; ++l)
                if (sent[j][l] > 0) ASSERT_LE(sent[j][l], held[j][l] - thr[j][l]);
        for (int l = 0; l < parts; ++l) {
            std::int64_t before = 0, after = 0;
            for (int i = 0; i < n; ++i) {
                before += held[i][l];
                after += r.post[i][l];
            }
            ASSERT_EQ(before, after);
        }
    }
}

TEST(UspAllocate, ProportionalToDistance) {
    const std::vector<Vec> rx{Vec::Zero(2)};
    const std::vector<Vec> one{Vec::Ones(2)};
    EXPECT_EQ(usp_allocate(17, rx, one), (IntVec{17}));

    const std::vector<Vec> two{Vec::Unit(2, 0) * 3.0, Vec::Unit(2, 1) * 1.0};
    EXPECT_EQ(usp_allocate(100, rx, two), (IntVec{75, 25}));

    const std::vector<Vec> same{Vec::Zero(2), Vec::Zero(2)};
    const std::vector<Vec> rx_same{Vec::Zero(2), Vec::Zero(2)};
    EXPECT_EQ(usp_allocate(10, rx_same, same), (IntVec{5, 5}));
}

TEST(UspExchange, ZeroCountMessageLeavesSummariesUnchanged) {
    Rng rng = make_rng(3);
    Mat pts = Mat::Random(20, 2);
    const DeviceSummaries rx{summarize_all(pts)};
    const UspMessage msg{{summarize_all(pts * 2.0)}, {0}};
    const auto out = usp_exchange(rx, msg, rng);
    EXPECT_EQ(out[0].count, rx[0].count);
    EXPECT_TRUE(out[0].centroid.isApprox(rx[0].centroid));
}

TEST(UspExchange, DrawsFollowRemoteGaussianAndAttachToNearestCentroid) {
    Rng rng = make_rng(4);
    ClusterSummary remote;
    remote.centroid = Vec::Constant(2, 10.0);
    remote.covariance = Mat::Identity(2, 2) * 0.25;
    remote.count = 100;
    ClusterSummary near, far;
    near.centroid = Vec::Constant(2, 9.0);
    near.covariance = Mat::Identity(2, 2);
    near.count = 1;
    far.centroid = Vec::Constant(2, -9.0);
    far.covariance = Mat::Identity(2, 2);
    far.count = 1;
    const UspMessage msg{{remote}, {4000}};
    const auto draws = usp_draw(msg, rng);
    ASSERT_EQ(draws[0].rows(), 4000);
    const Vec mean = draws[0].colwise().mean().transpose();
    EXPECT_LE((mean - remote.centroid).norm(), 0.05);
    const Mat c = draws[0].rowwise() - mean.transpose();
    EXPECT_LE(((c.transpose() * c) / 3999.0 - remote.covariance).norm(), 0.05);

    const auto out = usp_absorb({near, far}, draws);
    EXPECT_EQ(out[0].count, 4001);
    EXPECT_EQ(out[1].count, 1);

    ClusterSummary broken = remote;
    broken.covariance = -Mat::Identity(2, 2);
    EXPECT_THROW(usp_draw(UspMessage{{broken}, {1}}, rng), numeric_error);
}

TEST(UspRound, GrantsRespectTrustAndRequests) {
    Rng rng = make_rng(5);
    std::vector<DeviceSummaries> sums;
    for (int i = 0; i < 4; ++i) {
        DeviceSummaries s;
        for (int l = 0; l < 3; ++l) {
            ClusterSummary c;
            c.centroid = Vec::Constant(2, static_cast<double>(l + i));
            c.covariance = Mat::Identity(2, 2);
            c.count = 5 + 10 * ((i + l) % 3);
            s.push_back(c);
        }
        sums.push_back(s);
    }
    const std::vector<ThresholdVector> thr(4, ThresholdVector::uniform(3, 15));
    auto trust = make_trust(4, 3, TrustPattern::random, 0.3, 8);
    const std::vector<int> sel{1, 2, 3, 0};
    const auto r = run_usp_round(sel, sums, thr, trust, rng);
    for (int i = 0; i < 4; ++i) {
        std::int64_t got = 0;
        for (int l = 0; l < 3; ++l) {
            if (r.grants[i][l] > 0) EXPECT_TRUE(trust[sel[i]].allowed(i, l));
            got += r.grants[i][l];
        }
        EXPECT_LE(got, r.requested[i]);
        EXPECT_EQ(r.requested[i], usp_request_total(sums[i], thr[i]));
        std::int64_t before = 0, after = 0;
        for (int l = 0; l < 3; ++l) {
            before += sums[i][l].count;
            after += r.post[i][l].count;
        }
        EXPECT_EQ(after, before + got);
    }
}

TEST(MessageBits, WireSizes) {
    EXPECT_EQ(sup_message_bits(10), 80);
    EXPECT_EQ(usp_cluster_message_bits(3), 32 * 12 + 8);
}
