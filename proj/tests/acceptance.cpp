// Acceptance checks AC1..AC12. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fail.
#include "support.hpp"

#include "d2dfl/harness.hpp"

#include <boost/math/special_functions/gamma.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace d2dfl;
using d2dfl::testing::BanditEnv;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome ac1() {
    std::vector<CountVector> held{CountVector({20, 0, 0, 0, 20}), CountVector({20, 20, 20, 20, 20}),
                                  CountVector({0, 20, 0, 20, 0})};
    std::vector<ThresholdVector> b(3, ThresholdVector::uniform(5, 10));
    std::vector<TrustMatrix> trust;
    for (int j = 0; j < 3; ++j) trust.emplace_back(j, 3, 5, true);
    const int ti[5] = {1, 0, 1, 1, 0}, tk[5] = {1, 1, 1, 0, 0};
    for (int l = 0; l < 5; ++l) {
        trust[1].set(0, l, ti[l]);
        trust[1].set(2, l, tk[l]);
    }
    const std::vector<int> sel{1, -1, 1};
    const DropMatrix drop{Mat::Zero(3, 3)};

    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run_sup_round(sel, held, b, trust, drop, ReceiveMode::expected, nullptr);
    const double ms = 1e3 * seconds_since(t0);

    const bool exact = r.post[0].counts == IntVec{20, 0, 5, 10, 20} && r.post[1].counts == IntVec{10, 20, 10, 10, 20} &&
                       r.post[2].counts == IntVec{10, 20, 5, 20, 0};
    return {exact && ms < 1.0, fmt("exact=%d time=%.3f ms", exact, ms)};
}

Outcome ac2() {
    using big = boost::multiprecision::cpp_bin_float_50;
    Rng rng = make_rng(2, {1});
    double worst = 0.0;
    for (int t = 0; t < 10000; ++t) {
        const double w = std::exp(uniform_real(rng, std::log(1e-3), std::log(10.0)));
        const double r = uniform_real(rng, 0.05, 8.0);
        const double s2 = std::exp(uniform_real(rng, std::log(1e-4), std::log(1.0)));
        const big e = (boost::multiprecision::pow(big(2), big(r)) - 1) * big(s2) / big(w);
        const double ref = static_cast<double>(1 - boost::multiprecision::exp(-e));
        worst = std::max(worst, std::abs(drop_probability(w, r, s2) - ref) / ref);
    }
    return {worst <= 1e-12, fmt("max relative error %.3g over 10^4 triples", worst)};
}

Outcome ac3() {
    Rng rng = make_rng(3, {1});
    long trust_bad = 0, thr_bad = 0, cons_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        const int n = uniform_int(rng, 2, 8), parts = uniform_int(rng, 1, 8);
        std::vector<CountVector> held;
        std::vector<ThresholdVector> thr;
        for (int i = 0; i < n; ++i) {
            IntVec c(parts), b(parts);
            for (int l = 0; l < parts; ++l) {
                c[l] = uniform_int(rng, 0, 40);
                b[l] = uniform_int(rng, 0, 25);
            }
            held.emplace_back(c);
            thr.push_back(ThresholdVector{b});
        }
        const auto trust = make_trust(n, parts, TrustPattern::random, uniform_real(rng, 0.0, 0.9), rng());
        std::vector<int> sel(n);
        for (int i = 0; i < n; ++i) {
            int j = uniform_int(rng, -1, n - 2);
            sel[i] = j < 0 ? -1 : (j >= i ? j + 1 : j);
        }
        const auto r = run_sup_round(sel, held, thr, trust, DropMatrix{Mat::Zero(n, n)}, ReceiveMode::expected, nullptr);
        std::vector<IntVec> sent(n, IntVec(parts, 0));
        for (int i = 0; i < n; ++i) {
            if (sel[i] < 0) continue;
            for (int l = 0; l < parts; ++l) {
                const auto u = r.messages[i].transfer[l];
                if (u > 0 && !trust[sel[i]].allowed(i, l)) ++trust_bad;
                sent[sel[i]][l] += u;
            }
        }
        for (int j = 0; j < n; ++j)
            for (int l = 0; l < parts; ++l)
                if (sent[j][l] > 0 && held[j][l] - sent[j][l] < thr[j][l]) ++thr_bad;
        for (int l = 0; l < parts; ++l) {
            std::int64_t before = 0, after = 0;
            for (int i = 0; i < n; ++i) {
                before += held[i][l];
                after += r.post[i][l];
            }
            cons_bad += before != after;
        }
    }
    return {trust_bad == 0 && thr_bad == 0 && cons_bad == 0,
            fmt("trust violations %ld, threshold violations %ld, conservation failures %ld", trust_bad, thr_bad,
                cons_bad)};
}

Outcome ac4() {
    const auto t0 = std::chrono::steady_clock::now();
    int hits = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        BanditEnv env{{0.0, 5.8, 6.0, 5.9, 5.6, 5.7}};
        auto ch = Channel::random(ChannelSpec{}, 6, s);
        TrainOptions opt;
        opt.iterations = 2000;
        opt.seed = s;
        const auto res = train_graph(env, ch, opt);
        hits += policy_probabilities(res.final_policies[0], 0)[2] >= 0.9;
    }
    const double secs = seconds_since(t0);
    return {hits >= 8 && secs < 5.0, fmt("best arm p>=0.9 on %d/10 seeds, %.2f s", hits, secs)};
}

Outcome ac5() {
    const auto t0 = std::chrono::steady_clock::now();
    int good = 0, cells = 0;
    double worst = 1e9;
    for (std::uint64_t inst = 0; inst < 10; ++inst) {
        const auto env = d2dfl::testing::toy_supervised(4, 5, inst);
        const auto ch = Channel::random(ChannelSpec{}, 4, 1000 + inst);
        const double best = brute_force_optimal(env, ch.drop()).objective;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            auto scratch = env;
            auto c = ch;
            TrainOptions opt;
            opt.seed = seed;
            opt.hyper = env.hyper;
            const auto sel = train_graph(scratch, c, opt).graph.rounds.front();
            const double got = env.objective(sel, ch.drop());
            const double margin = got - (best - 0.05 * std::abs(best));
            worst = std::min(worst, got / best);
            good += margin >= -1e-12;
            ++cells;
        }
    }
    const double secs = seconds_since(t0);
    const double frac = static_cast<double>(good) / cells;
    return {frac >= 0.8 && secs < 120.0,
            fmt("%d/%d cells within 95%% of optimum (worst ratio %.3f), %.1f s", good, cells, worst, secs)};
}

Outcome ac6() {
    Rng rng = make_rng(6, {1});
    auto dist = [&](int n) {
        DiscreteDistribution d;
        double s = 0.0;
        for (int l = 0; l < n; ++l) {
            d.probs.push_back(uniform_real(rng) < 0.3 ? 0.0 : uniform_real(rng));
            s += d.probs.back();
        }
        if (s == 0.0) d.probs[0] = s = 1.0;
        for (auto& v : d.probs) v /= s;
        return d;
    };
    long metric_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        const int n = uniform_int(rng, 2, 10);
        const auto p = dist(n), q = dist(n), r = dist(n);
        for (auto f : {&wasserstein1, &jensen_shannon}) {
            metric_bad += std::abs(f(p, q) - f(q, p)) > 1e-9;
            metric_bad += std::abs(f(p, p)) > 1e-9;
            metric_bad += f(p, r) > f(p, q) + f(q, r) + 1e-9;
        }
    }

    std::normal_distribution<double> n01;
    auto spd = [&](int d) {
        const Mat a = Mat::NullaryExpr(d, d, [&] { return n01(rng); });
        return Mat(a * a.transpose() + 0.5 * Mat::Identity(d, d));
    };
    int kl_negative = 0, mc_bad = 0;
    double worst_z = 0.0;
    for (int t = 0; t < 100; ++t) {
        const int d = 2;
        const GaussianFactor f0(Vec::Random(d), spd(d)), f1(Vec::Random(d), spd(d));
        const double kl = gaussian_kl(f0, f1);
        kl_negative += kl < 0.0;
        const Mat l0 = f0.chol.matrixL();
        auto logpdf = [](const GaussianFactor& f, const Vec& x) {
            const Vec z = f.chol.matrixL().solve(x - f.mean);
            return -0.5 * z.squaredNorm() - 0.5 * f.log_det;
        };
        const int samples = 20000;
        double sum = 0.0, sum2 = 0.0;
        Vec z(d);
        for (int k = 0; k < samples; ++k) {
            for (int c = 0; c < d; ++c) z(c) = n01(rng);
            const Vec x = f0.mean + l0 * z;
            const double v = logpdf(f0, x) - logpdf(f1, x);
            sum += v;
            sum2 += v * v;
        }
        const double mean = sum / samples;
        const double se = std::sqrt((sum2 / samples - mean * mean) / samples);
        const double zscore = std::abs(kl - mean) / se;
        worst_z = std::max(worst_z, zscore);
        mc_bad += zscore > 3.0;
    }
    return {metric_bad == 0 && kl_negative == 0 && mc_bad == 0,
            fmt("metric violations %ld, negative KL %d, MC outside 3 SE %d/100 (max |z| %.2f)", metric_bad,
                kl_negative, mc_bad, worst_z)};
}

// Pre and post datasets share each device's randomness (Dirichlet draws via
// the same uniforms through the Gamma quantile, nested per-label point pools),
// so equal concentrations give identical data.
Outcome ac7() {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = 10, labels = 10, dim = 10, points = 100;
    const double alphas[4] = {0.01, 0.1, 1.0, 10.0};
    struct Device {
        std::vector<double> u;
        std::vector<Mat> pool;
    };
    auto summarize_at = [&](const Device& dev, double alpha) {
        std::vector<double> g(labels);
        for (int l = 0; l < labels; ++l) g[l] = boost::math::gamma_p_inv(alpha, dev.u[l]);
        if (std::accumulate(g.begin(), g.end(), 0.0) == 0.0)
            g[std::max_element(dev.u.begin(), dev.u.end()) - dev.u.begin()] = 1.0;
        const auto counts = largest_remainder(points, g);
        Mat x(points, dim);
        int row = 0;
        for (int l = 0; l < labels; ++l)
            for (std::int64_t k = 0; k < counts[l]; ++k) x.row(row++) = dev.pool[l].row(k);
        return DeviceSummaries{summarize_all(x)};
    };
    double table[4][4] = {};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng = make_rng(seed, {7});
        const auto blobs = BlobModel::random(labels, dim, 3.0, 1.0, rng);
        std::vector<Device> devs(n);
        for (auto& dev : devs)
            for (int l = 0; l < labels; ++l) {
                dev.u.push_back(uniform_real(rng, 0.0, 1.0));
                std::vector<std::int64_t> c(labels, 0);
                c[l] = points;
                dev.pool.push_back(blobs.sample(c, rng).features);
            }
        std::vector<DeviceSummaries> at[4];
        for (int a = 0; a < 4; ++a)
            for (const auto& dev : devs) at[a].push_back(summarize_at(dev, alphas[a]));
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) table[a][b] += system_agreement(at[a], at[b]) / 20.0;
    }
    int wrong = 0;
    std::string cells;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            if (a == b) continue;
            wrong += b > a ? !(table[a][b] > 0.0) : !(table[a][b] < 0.0);
            cells += fmt(" %.3g", table[a][b]);
        }
    const double secs = seconds_since(t0);
    return {wrong == 0 && secs < 60.0, fmt("%d/12 off-diagonal signs wrong, %.1f s; row-major:%s", wrong, secs,
                                           cells.c_str())};
}

// Shared regime for the downstream FL checks: N=10, 3 of 10 labels per device
// in equal shares, softmax regression, FedAvg with tau_a = 4.
json fl_regime() {
    return json::parse(R"({
      "scenario": "acceptance", "seeds": [0, 1, 2, 3, 4], "methods": ["ours", "none"],
      "system": {"devices": 10, "partitions": 10, "min_labels": 3, "edges": 2},
      "data": {"labels_per_device": 3, "proportions": null},
      "fl": {"scheme": "fedavg", "arch": "softmax", "tau_a": 4, "lr": 1.0, "rounds": 60}
    })");
}

std::map<std::pair<std::string, std::uint64_t>, std::vector<double>> accuracy_curves(const std::vector<ResultRow>& rows) {
    std::map<std::pair<std::string, std::uint64_t>, std::vector<double>> out;
    for (const auto& r : rows)
        if (r.metric == "accuracy") out[{r.method, r.seed}].push_back(r.value);
    return out;
}

Outcome ac8() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = parse_config(fl_regime());
    const auto res = run_pipeline(cfg);
    const auto curves = accuracy_curves(res.rows);
    double sum[2] = {0, 0};
    int unreached[2] = {0, 0};
    const char* methods[2] = {"ours", "none"};
    for (int m = 0; m < 2; ++m)
        for (auto seed : cfg.seeds) {
            const auto& c = curves.at({methods[m], seed});
            int hit = static_cast<int>(c.size()) + 1;
            for (std::size_t r = 0; r < c.size(); ++r)
                if (c[r] >= 0.7) {
                    hit = static_cast<int>(r) + 1;
                    break;
                }
            unreached[m] += hit > static_cast<int>(c.size());
            sum[m] += hit;
        }
    const double ours = sum[0] / 5.0, none = sum[1] / 5.0;
    const double secs = seconds_since(t0);
    return {res.failed_cells == 0 && unreached[0] == 0 && ours <= 0.7 * none && secs < 180.0,
            fmt("rounds to 70%%: ours %.2f, none %.2f (ratio %.3f, unreached %d/%d), %.1f s", ours, none, ours / none,
                unreached[0], unreached[1], secs)};
}

Outcome ac9() {
    json j = fl_regime();
    j["fl"]["rounds"] = 20;
    double final_acc[2][2] = {};  // [straggler][method]
    const char* methods[2] = {"ours", "none"};
    int failed = 0;
    for (int s = 0; s < 2; ++s) {
        j["fl"]["straggler_frac"] = s ? 0.3 : 0.0;
        const auto cfg = parse_config(j);
        const auto res = run_pipeline(cfg);
        failed += res.failed_cells;
        const auto curves = accuracy_curves(res.rows);
        for (int m = 0; m < 2; ++m)
            for (auto seed : cfg.seeds) final_acc[s][m] += curves.at({methods[m], seed}).back() / 5.0;
    }
    const double drop_ours = final_acc[0][0] - final_acc[1][0];
    const double drop_none = final_acc[0][1] - final_acc[1][1];
    return {failed == 0 && drop_ours < drop_none,
            fmt("accuracy drop at 30%% stragglers: with exchange %.4f, without %.4f", drop_ours, drop_none)};
}

Outcome ac10() {
    const int sizes[4] = {5, 10, 20, 40};
    std::vector<double> x, y;
    for (int n : sizes) {
        auto env = d2dfl::testing::toy_supervised(n, 10, 10);
        auto ch = Channel::random(ChannelSpec{}, n, 10);
        TrainOptions opt;
        opt.iterations = 100;
        opt.edges = 2;
        x.push_back(n);
        y.push_back(static_cast<double>(train_graph(env, ch, opt).message_bits));
    }
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / 4, my = std::accumulate(y.begin(), y.end(), 0.0) / 4;
    double sxy = 0, sxx = 0, syy = 0;
    for (int k = 0; k < 4; ++k) {
        sxy += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
        syy += (y[k] - my) * (y[k] - my);
    }
    const double r2 = sxy * sxy / (sxx * syy);
    return {r2 >= 0.999, fmt("R^2 = %.12f (bits %.0f %.0f %.0f %.0f)", r2, y[0], y[1], y[2], y[3])};
}

Outcome ac11() {
    double worst[3] = {0, 0, 0};
    const LossKind kinds[3] = {LossKind::ce, LossKind::mse, LossKind::triplet};
    for (int k = 0; k < 3; ++k)
        for (std::uint64_t s = 0; s < 10; ++s) {
            const auto c = d2dfl::testing::random_gradient_case(kinds[k], s);
            worst[k] = std::max(worst[k], d2dfl::testing::gradient_error(c.model, c.batch, c.spec));
        }
    const double m = std::max({worst[0], worst[1], worst[2]});
    return {m <= 1e-4, fmt("max abs error ce %.2e, mse %.2e, triplet %.2e", worst[0], worst[1], worst[2])};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome ac12() {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / ("d2dfl_ac12_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const char* configs[3] = {
        R"({"scenario": "det_sup", "seeds": [0, 1, 2], "system": {"devices": 5, "partitions": 5, "min_labels": 2},
            "data": {"points_per_device": 60, "labels_per_device": 2, "proportions": [0.7, 0.3], "test_points": 200},
            "rl": {"iterations": 100}, "fl": {"rounds": 5}})",
        R"({"scenario": "det_usp", "paradigm": "unsupervised", "seeds": [0, 1], "system": {"devices": 4, "partitions": 5,
            "min_labels": 0, "threshold": 15}, "data": {"points_per_device": 60, "labels_per_device": 2,
            "proportions": [0.7, 0.3], "test_points": 200, "probe_points": 100}, "rl": {"iterations": 50},
            "fl": {"rounds": 3, "lr": 0.02}})",
        R"({"scenario": "det_semi", "paradigm": "semisupervised", "seeds": [3, 4], "system": {"devices": 4,
            "partitions": 5, "min_labels": 2}, "data": {"points_per_device": 60, "labels_per_device": 2,
            "proportions": [0.7, 0.3], "test_points": 200}, "rl": {"iterations": 50},
            "fl": {"rounds": 3, "scheme": "semidecentralized", "subset_size": 2}})"};
    int mismatches = 0, runs = 0, errors = 0;
    for (int c = 0; c < 3; ++c) {
        const fs::path cfg = dir / ("c" + std::to_string(c) + ".json");
        std::ofstream(cfg) << configs[c];
        std::string reference;
        for (const char* jobs : {"1", "1", "4"}) {
            const fs::path out = dir / ("out" + std::to_string(runs++) + ".csv");
            const std::string cmd = std::string(D2DFL_CLI) + " run " + cfg.string() + " --out " + out.string() +
                                    " --jobs " + jobs + " > /dev/null 2>&1";
            errors += std::system(cmd.c_str()) != 0;
            const auto bytes = slurp(out);
            if (reference.empty())
                reference = bytes;
            else
                mismatches += bytes != reference;
        }
        if (reference.empty()) ++errors;
    }
    fs::remove_all(dir);
    return {mismatches == 0 && errors == 0,
            fmt("%d runs over 3 configs, %d byte mismatches, %d failed runs", runs, mismatches, errors)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> checks{
        {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4},   {"AC5", ac5},   {"AC6", ac6},
        {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}, {"AC10", ac10}, {"AC11", ac11}, {"AC12", ac12}};
    int failed = 0;
    for (const auto& [name, fn] : checks) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << name << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
