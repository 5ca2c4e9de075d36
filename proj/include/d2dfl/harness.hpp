#pragma once

#include "d2dfl/common.hpp"
#include "d2dfl/data_model.hpp"
#include "d2dfl/diversity.hpp"
#include "d2dfl/exchange.hpp"
#include "d2dfl/fl.hpp"
#include "d2dfl/net_model.hpp"
#include "d2dfl/partition.hpp"
#include "d2dfl/rl.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace d2dfl {

using json = nlohmann::json;

enum class Paradigm { supervised, semisupervised, unsupervised, regression };

struct SystemConfig {
    int devices = 10;
    int partitions = 10;
    int min_labels = 3;
    int edges = 1;
    std::int64_t threshold = 10;
    std::int64_t budget = 1000;
    double alpha_d = 0.5;
    double area_side = 50.0;
    int point_bits = 0;  // payload per datapoint; 0 means 64 bits per feature
    ChannelSpec channel;
};

struct DataConfig {
    int points_per_device = 100;
    int dim = 10;
    double separation = 3.0;
    double noise = 1.0;
    int labels_per_device = 3;
    std::vector<double> proportions;  // empty: equal shares
    std::optional<double> dirichlet_alpha;
    TrustPattern trust = TrustPattern::random;
    double trust_sparsity = 0.0;
    double labeled_fraction = 0.15;
    int k_neighbors = 8;
    int pca_dim = 4;
    int kmeans_clusters = 5;
    int test_points = 1000;
    int probe_points = 300;
};

struct FlConfig {
    TrainConfig train;
    ArchKind arch = ArchKind::softmax;
    int hidden = 16;
    int embedding = 8;
};

struct ExperimentConfig {
    std::string scenario = "custom";
    Paradigm paradigm = Paradigm::supervised;
    std::vector<std::uint64_t> seeds{0};
    std::vector<std::string> methods{"ours", "uniform", "closest", "most_trusted", "none"};
    SystemConfig system;
    DataConfig data;
    int rl_iterations = 5000;
    RlHyper hyper;
    FlConfig fl;
    double threshold = 0.7;
    std::string output = "results.csv";
    std::string sweep_key;
    std::vector<json> sweep_values;
    json raw;  // merged document this struct was read from

    int partitions() const { return paradigm == Paradigm::unsupervised ? data.kmeans_clusters : system.partitions; }
};

/// Every key a config may set, with its default.
inline json default_config_json() {
    return json::parse(R"({
  "scenario": "custom",
  "paradigm": "supervised",
  "seeds": [0],
  "methods": ["ours", "uniform", "closest", "most_trusted", "none"],
  "output": "results.csv",
  "threshold": 0.7,
  "system": {
    "devices": 10, "partitions": 10, "min_labels": 3, "edges": 1,
    "threshold": 10, "budget": 1000, "alpha_d": 0.5, "area_side": 50.0, "point_bits": 0,
    "rss": {"mean": 0.3, "std": 0.1, "lo": 0.05, "hi": 0.55, "rate": 0.8, "noise": 0.02,
            "dynamic": false, "resolution": 1}
  },
  "data": {
    "points_per_device": 100, "dim": 10, "separation": 3.0, "noise": 1.0,
    "labels_per_device": 3, "proportions": [0.7, 0.2, 0.1], "dirichlet_alpha": null,
    "trust": "random", "trust_sparsity": 0.0, "labeled_fraction": 0.15, "k_neighbors": 8,
    "pca_dim": 4, "kmeans_clusters": 5, "test_points": 1000, "probe_points": 300
  },
  "rl": {"iterations": 5000, "H": 256, "gamma": 0.5, "delta": 0.9,
         "alpha1": 1.0, "alpha2": 1.0, "alpha3": 0.001},
  "fl": {"scheme": "fedavg", "arch": "softmax", "hidden": 16, "embedding": 8,
         "lr": 0.05, "tau_a": 4, "rounds": 50, "prox_mu": 0.1, "margin": 1.0,
         "straggler_frac": 0.0, "batch_size": 32, "sigma_aug": 0.1, "neighbors": 7,
         "subset_size": 5, "intra_every": 2, "global_every": 8},
  "sweep": {"key": "", "values": []}
})");
}

namespace detail {
inline void reject_unknown(const json& user, const json& defaults, const std::string& path) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!defaults.contains(it.key())) throw config_error("unknown config key: " + key);
        const json& d = defaults.at(it.key());
        if (d.is_object()) {
            if (!it.value().is_object()) throw config_error("config key " + key + " must be an object");
            reject_unknown(it.value(), d, key);
        }
    }
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw config_error("config key " + where + "." + key + " has the wrong type");
    }
}

inline std::string pointer_of(const std::string& dotted) {
    std::string p = "/";
    for (char c : dotted) p += c == '.' ? '/' : c;
    return p;
}
}  // namespace detail

inline TrustPattern parse_trust(const std::string& s) {
    if (s == "random") return TrustPattern::random;
    if (s == "row_sparse") return TrustPattern::row_sparse;
    if (s == "col_sparse") return TrustPattern::col_sparse;
    if (s == "block") return TrustPattern::block;
    throw config_error("unknown trust pattern: " + s);
}

inline Scheme parse_scheme(const std::string& s) {
    if (s == "fedavg") return Scheme::fedavg;
    if (s == "fedprox") return Scheme::fedprox;
    if (s == "fedsgd") return Scheme::fedsgd;
    if (s == "decentralized") return Scheme::decentralized;
    if (s == "semidecentralized") return Scheme::semidecentralized;
    throw config_error("unknown FL scheme: " + s);
}

inline Paradigm parse_paradigm(const std::string& s) {
    if (s == "supervised") return Paradigm::supervised;
    if (s == "semisupervised") return Paradigm::semisupervised;
    if (s == "unsupervised") return Paradigm::unsupervised;
    if (s == "regression") return Paradigm::regression;
    throw config_error("unknown paradigm: " + s);
}

inline void validate(const ExperimentConfig& c) {
    const auto& s = c.system;
    if (s.devices < 2) throw config_error("system.devices must be >= 2");
    if (s.partitions < 1) throw config_error("system.partitions must be >= 1");
    if (s.min_labels < 0 || s.min_labels > c.partitions()) throw config_error("system.min_labels must lie in [0, L]");
    if (s.edges < 1 || s.edges >= s.devices) throw config_error("system.edges must satisfy 1 <= E < N");
    if (s.point_bits < 0) throw config_error("system.point_bits must be nonnegative");
    if (s.threshold < 0 || s.budget < 0) throw config_error("thresholds and budgets must be nonnegative");
    if (!(s.channel.rate > 0.0) || !(s.channel.noise > 0.0)) throw config_error("rate and noise must be positive");
    if (!(s.channel.lo > 0.0) || !(s.channel.lo < s.channel.hi)) throw config_error("rss range must satisfy 0 < lo < hi");
    if (s.channel.resolution < 1) throw config_error("rss resolution must be >= 1");
    const auto& d = c.data;
    if (d.points_per_device < 1 || d.dim < 2) throw config_error("data sizes must be positive");
    if (d.labeled_fraction <= 0.0 || d.labeled_fraction > 1.0) throw config_error("labeled_fraction must lie in (0, 1]");
    if (d.pca_dim < 1 || d.pca_dim >= d.dim) throw config_error("pca_dim must satisfy 1 <= d < dim");
    if (d.kmeans_clusters < 1 || d.kmeans_clusters > d.points_per_device)
        throw config_error("kmeans_clusters must lie in [1, points_per_device]");
    if (d.test_points < s.partitions) throw config_error("test_points must cover every label");
    if (!d.dirichlet_alpha) {
        SkewSpec spec{d.labels_per_device, d.proportions, std::nullopt, 0, 0};
        if (spec.proportions.empty()) spec.proportions.assign(d.labels_per_device, 1.0 / d.labels_per_device);
        try {
            spec.validate(s.partitions);
        } catch (const invalid_parameter& e) {
            throw config_error(std::string("data: ") + e.what());
        }
    }
    if (c.rl_iterations < 0) throw config_error("rl.iterations must be nonnegative");
    try {
        c.hyper.validate();
        c.fl.train.validate();
    } catch (const invalid_parameter& e) {
        throw config_error(e.what());
    }
    if (c.fl.train.scheme == Scheme::semidecentralized) make_subsets(s.devices, c.fl.train.subset_size);
    if (c.seeds.empty()) throw config_error("seeds must be nonempty");
    for (const auto& m : c.methods)
        if (m != "ours" && m != "uniform" && m != "closest" && m != "most_trusted" && m != "none")
            throw config_error("unknown method: " + m);
}

/// Merge `user` over the defaults and read the result. Unknown keys are errors.
inline ExperimentConfig parse_config(const json& user) {
    json merged = default_config_json();
    if (!user.is_object()) throw config_error("config must be a JSON object");
    detail::reject_unknown(user, merged, "");
    merged.merge_patch(user);
    // merge_patch drops keys patched to null; put the nullable ones back.
    if (!merged["data"].contains("dirichlet_alpha")) merged["data"]["dirichlet_alpha"] = nullptr;
    if (!merged["data"].contains("proportions")) merged["data"]["proportions"] = nullptr;

    ExperimentConfig c;
    using detail::get;
    c.raw = merged;
    c.scenario = get<std::string>(merged, "scenario", "");
    c.paradigm = parse_paradigm(get<std::string>(merged, "paradigm", ""));
    c.seeds = get<std::vector<std::uint64_t>>(merged, "seeds", "");
    c.methods = get<std::vector<std::string>>(merged, "methods", "");
    c.output = get<std::string>(merged, "output", "");
    c.threshold = get<double>(merged, "threshold", "");

    const json& s = merged["system"];
    c.system.devices = get<int>(s, "devices", "system");
    c.system.partitions = get<int>(s, "partitions", "system");
    c.system.min_labels = get<int>(s, "min_labels", "system");
    c.system.edges = get<int>(s, "edges", "system");
    c.system.threshold = get<std::int64_t>(s, "threshold", "system");
    c.system.budget = get<std::int64_t>(s, "budget", "system");
    c.system.alpha_d = get<double>(s, "alpha_d", "system");
    c.system.area_side = get<double>(s, "area_side", "system");
    c.system.point_bits = get<int>(s, "point_bits", "system");
    const json& r = s["rss"];
    auto& ch = c.system.channel;
    ch.mean = get<double>(r, "mean", "system.rss");
    ch.stddev = get<double>(r, "std", "system.rss");
    ch.lo = get<double>(r, "lo", "system.rss");
    ch.hi = get<double>(r, "hi", "system.rss");
    ch.rate = get<double>(r, "rate", "system.rss");
    ch.noise = get<double>(r, "noise", "system.rss");
    ch.dynamic = get<bool>(r, "dynamic", "system.rss");
    ch.resolution = get<int>(r, "resolution", "system.rss");

    const json& d = merged["data"];
    c.data.points_per_device = get<int>(d, "points_per_device", "data");
    c.data.dim = get<int>(d, "dim", "data");
    c.data.separation = get<double>(d, "separation", "data");
    c.data.noise = get<double>(d, "noise", "data");
    c.data.labels_per_device = get<int>(d, "labels_per_device", "data");
    if (!d["proportions"].is_null()) c.data.proportions = get<std::vector<double>>(d, "proportions", "data");
    if (!d["dirichlet_alpha"].is_null()) c.data.dirichlet_alpha = get<double>(d, "dirichlet_alpha", "data");
    c.data.trust = parse_trust(get<std::string>(d, "trust", "data"));
    c.data.trust_sparsity = get<double>(d, "trust_sparsity", "data");
    c.data.labeled_fraction = get<double>(d, "labeled_fraction", "data");
    c.data.k_neighbors = get<int>(d, "k_neighbors", "data");
    c.data.pca_dim = get<int>(d, "pca_dim", "data");
    c.data.kmeans_clusters = get<int>(d, "kmeans_clusters", "data");
    c.data.test_points = get<int>(d, "test_points", "data");
    c.data.probe_points = get<int>(d, "probe_points", "data");

    const json& l = merged["rl"];
    c.rl_iterations = get<int>(l, "iterations", "rl");
    c.hyper.H = get<int>(l, "H", "rl");
    c.hyper.gamma = get<double>(l, "gamma", "rl");
    c.hyper.delta = get<double>(l, "delta", "rl");
    c.hyper.alpha1 = get<double>(l, "alpha1", "rl");
    c.hyper.alpha2 = get<double>(l, "alpha2", "rl");
    c.hyper.alpha3 = get<double>(l, "alpha3", "rl");

    const json& f = merged["fl"];
    auto& t = c.fl.train;
    t.scheme = parse_scheme(get<std::string>(f, "scheme", "fl"));
    const auto arch = get<std::string>(f, "arch", "fl");
    if (arch == "softmax")
        c.fl.arch = ArchKind::softmax;
    else if (arch == "mlp")
        c.fl.arch = ArchKind::mlp;
    else
        throw config_error("fl.arch must be softmax or mlp");
    c.fl.hidden = get<int>(f, "hidden", "fl");
    c.fl.embedding = get<int>(f, "embedding", "fl");
    t.lr = get<double>(f, "lr", "fl");
    t.tau_a = get<int>(f, "tau_a", "fl");
    t.rounds = get<int>(f, "rounds", "fl");
    t.prox_mu = get<double>(f, "prox_mu", "fl");
    t.margin = get<double>(f, "margin", "fl");
    t.straggler_frac = get<double>(f, "straggler_frac", "fl");
    t.batch_size = get<int>(f, "batch_size", "fl");
    t.sigma_aug = get<double>(f, "sigma_aug", "fl");
    t.neighbors = get<int>(f, "neighbors", "fl");
    t.subset_size = get<int>(f, "subset_size", "fl");
    t.intra_every = get<int>(f, "intra_every", "fl");
    t.global_every = get<int>(f, "global_every", "fl");

    const json& sw = merged["sweep"];
    c.sweep_key = get<std::string>(sw, "key", "sweep");
    c.sweep_values = get<std::vector<json>>(sw, "values", "sweep");
    if (!c.sweep_key.empty() && c.sweep_values.empty()) throw config_error("sweep.values must be nonempty");
    validate(c);
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw config_error(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline std::string sweep_label(const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
}

/// One configuration per sweep value (or the config itself without a sweep).
/// Each variant's scenario name records the swept value.
inline std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& c) {
    if (c.sweep_key.empty()) return {c};
    std::vector<ExperimentConfig> out;
    const json::json_pointer ptr(detail::pointer_of(c.sweep_key));
    if (!c.raw.contains(ptr)) throw config_error("sweep key does not name a config entry: " + c.sweep_key);
    for (const auto& v : c.sweep_values) {
        json j = c.raw;
        j[ptr] = v;
        j["sweep"] = {{"key", ""}, {"values", json::array()}};
        const auto leaf = c.sweep_key.substr(c.sweep_key.rfind('.') + 1);
        j["scenario"] = c.scenario + "[" + leaf + "=" + sweep_label(v) + "]";
        out.push_back(parse_config(j));
    }
    return out;
}

inline const std::vector<std::string>& scenario_names() {
    static const std::vector<std::string> names{
        "smoke",          "default",       "stragglers",    "aggregation_interval", "skew",
        "dynamic_rss",    "system_size",   "trust_structure", "pca_dimension",      "kmeans_clusters",
        "multi_edge",     "semisupervised", "unsupervised",  "regression",           "fl_schemes",
        "decentralized",  "semidecentralized"};
    return names;
}

/// Pre-filled config for a named experiment axis.
inline ExperimentConfig scenario(const std::string& name) {
    json j = json::object();
    j["scenario"] = name;
    j["seeds"] = {0, 1, 2};
    auto sweep = [&](const char* key, json values) { j["sweep"] = {{"key", key}, {"values", std::move(values)}}; };
    auto unsupervised = [&] {
        j["paradigm"] = "unsupervised";
        j["rl"]["iterations"] = 300;
        j["fl"]["rounds"] = 20;
        j["fl"]["lr"] = 0.02;
        j["system"]["threshold"] = 15;
        j["system"]["min_labels"] = 0;
    };
    if (name == "smoke") {
        j["seeds"] = {0};
        j["system"] = {{"devices", 4}, {"partitions", 5}, {"min_labels", 2}};
        j["data"] = {{"points_per_device", 60}, {"labels_per_device", 2}, {"proportions", {0.7, 0.3}},
                     {"test_points", 200}};
        j["rl"]["iterations"] = 200;
        j["fl"]["rounds"] = 20;
    } else if (name == "default") {
    } else if (name == "stragglers") {
        sweep("fl.straggler_frac", {0.0, 0.1, 0.3, 0.5});
    } else if (name == "aggregation_interval") {
        sweep("fl.tau_a", {1, 2, 4, 8, 16});
    } else if (name == "skew") {
        j["data"]["proportions"] = nullptr;
        sweep("data.labels_per_device", {1, 2, 3, 4, 5});
    } else if (name == "dynamic_rss") {
        j["system"]["rss"] = {{"mean", 0.3}, {"std", 0.1}, {"lo", 0.05}, {"hi", 0.55},
                              {"rate", 0.8}, {"noise", 0.02}, {"dynamic", true}};
        sweep("system.rss.resolution", {1, 2, 3, 4});
    } else if (name == "system_size") {
        sweep("system.devices", {5, 10, 20, 40});
    } else if (name == "trust_structure") {
        j["data"]["trust_sparsity"] = 0.5;
        sweep("data.trust", {"random", "row_sparse", "col_sparse", "block"});
    } else if (name == "pca_dimension") {
        unsupervised();
        sweep("data.pca_dim", {2, 4, 6, 8});
    } else if (name == "kmeans_clusters") {
        unsupervised();
        sweep("data.kmeans_clusters", {2, 4, 6, 8, 10});
    } else if (name == "multi_edge") {
        sweep("system.edges", {1, 2, 3});
    } else if (name == "semisupervised") {
        j["paradigm"] = "semisupervised";
        sweep("data.labeled_fraction", {0.05, 0.1, 0.2});
    } else if (name == "unsupervised") {
        unsupervised();
    } else if (name == "regression") {
        j["paradigm"] = "regression";
        j["system"]["min_labels"] = 2;
    } else if (name == "fl_schemes") {
        sweep("fl.scheme", {"fedavg", "fedprox", "fedsgd"});
    } else if (name == "decentralized") {
        j["fl"]["scheme"] = "decentralized";
    } else if (name == "semidecentralized") {
        j["fl"]["scheme"] = "semidecentralized";
    } else {
        std::string all;
        for (const auto& n : scenario_names()) all += (all.empty() ? "" : ", ") + n;
        throw config_error("unknown scenario '" + name + "'; valid names: " + all);
    }
    return parse_config(j);
}

struct ResultRow {
    std::string scenario;
    std::string method;
    std::uint64_t seed = 0;
    int round = 0;
    std::string metric;
    double value = 0.0;
    double d2d_joules = 0.0;
    double d2s_joules = 0.0;
};

inline const char* csv_header() { return "scenario,method,seed,round,metric,value,d2d_joules,d2s_joules\n"; }

inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline void write_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
    os << csv_header();
    for (const auto& r : rows)
        os << csv_field(r.scenario) << ',' << csv_field(r.method) << ',' << r.seed << ',' << r.round << ','
           << csv_field(r.metric) << ',' << format_number(r.value) << ',' << format_number(r.d2d_joules) << ','
           << format_number(r.d2s_joules) << '\n';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
        const char c = line[k];
        if (quoted) {
            if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
                cur += '"';
                ++k;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline std::vector<ResultRow> read_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line + "\n" != csv_header()) throw invalid_parameter("not a results CSV (bad header)");
    std::vector<ResultRow> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 8) throw invalid_parameter("results CSV line " + std::to_string(line_no) + ": expected 8 fields");
        try {
            rows.push_back({f[0], f[1], std::stoull(f[2]), std::stoi(f[3]), f[4], std::stod(f[5]), std::stod(f[6]),
                            std::stod(f[7])});
        } catch (const std::exception&) {
            throw invalid_parameter("results CSV line " + std::to_string(line_no) + ": malformed number");
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Pipeline

/// A device's training data plus the partition id of every point.
struct DeviceData {
    LocalDataset data;
    std::vector<int> part;
};

struct Workload {
    std::vector<DeviceData> devices;
    LocalDataset test;
    LocalDataset probe;  // labeled data for linear evaluation
    Subspace subspace;
    std::vector<DeviceSummaries> summaries;
};

inline std::int64_t datapoint_bits(const ExperimentConfig& c) {
    return c.system.point_bits > 0 ? c.system.point_bits : 64LL * c.data.dim;
}

/// Synthetic blobs, skewed allocation, and per-paradigm partitioning.
inline Workload build_workload(const ExperimentConfig& c, std::uint64_t seed) {
    const int n = c.system.devices;
    const int labels = c.system.partitions;
    Rng pool_rng = make_rng(seed, {stream::pool});
    const BlobModel blobs = BlobModel::random(labels, c.data.dim, c.data.separation, c.data.noise, pool_rng);

    SkewSpec spec;
    spec.labels_per_device = c.data.labels_per_device;
    spec.proportions = c.data.proportions.empty()
                           ? std::vector<double>(c.data.labels_per_device, 1.0 / c.data.labels_per_device)
                           : c.data.proportions;
    spec.dirichlet_alpha = c.data.dirichlet_alpha;
    spec.seed = seed;
    const LocalDataset pool = make_skew_matched_pool(blobs, n, c.data.points_per_device, spec, pool_rng);
    auto local = allocate_skewed(pool, n, labels, spec);

    Rng test_rng = make_rng(seed, {stream::test_set});
    Workload w;
    w.test = blobs.sample(even_sizes(c.data.test_points, labels), test_rng);
    w.probe = blobs.sample(even_sizes(c.data.probe_points, labels), test_rng);

    // Regression targets: a fixed random linear map of the features plus noise.
    Vec coef;
    if (c.paradigm == Paradigm::regression) {
        std::normal_distribution<double> n01(0.0, 1.0);
        coef.resize(c.data.dim);
        for (int k = 0; k < c.data.dim; ++k) coef(k) = n01(pool_rng);
        auto attach = [&](LocalDataset& ds) {
            ds.targets.resize(ds.size());
            for (int r = 0; r < ds.size(); ++r) ds.targets[r] = ds.features.row(r).dot(coef) + 0.1 * n01(test_rng);
        };
        for (auto& ds : local) attach(ds);
        attach(w.test);
    }

    switch (c.paradigm) {
        case Paradigm::supervised:
            for (auto& ds : local) w.devices.push_back({ds, ds.labels});
            break;
        case Paradigm::regression: {
            std::vector<double> all;
            for (const auto& ds : local) all.insert(all.end(), ds.targets.begin(), ds.targets.end());
            const auto ids = partition_regression(all, labels);
            std::size_t off = 0;
            for (auto& ds : local) {
                std::vector<int> part(ids.begin() + static_cast<std::ptrdiff_t>(off),
                                      ids.begin() + static_cast<std::ptrdiff_t>(off + ds.size()));
                off += ds.size();
                w.devices.push_back({ds, std::move(part)});
            }
            break;
        }
        case Paradigm::semisupervised:
            for (int i = 0; i < n; ++i) {
                LocalDataset ds = local[i];
                Rng mrng = make_rng(seed, {stream::mask, static_cast<std::uint64_t>(i)});
                mask_labels(ds, c.data.labeled_fraction, mrng);
                const int k = std::min(c.data.k_neighbors, std::max(1, ds.size() - 1));
                auto inferred = label_propagation(ds.features, ds.labels, ds.label_mask, k);
                ds.labels = inferred;  // training uses propagated labels
                w.devices.push_back({ds, std::move(inferred)});
            }
            break;
        case Paradigm::unsupervised: {
            w.subspace = distributed_pca(local, c.data.pca_dim);
            for (int i = 0; i < n; ++i) {
                LocalDataset ds = local[i];
                const Mat z = project(ds, w.subspace);
                Rng krng = make_rng(seed, {stream::kmeans, static_cast<std::uint64_t>(i)});
                auto km = kmeans(z, c.data.kmeans_clusters, krng);
                w.summaries.push_back(km.summaries);
                ds.labels.clear();
                w.devices.push_back({ds, km.assignment});
            }
            break;
        }
    }
    return w;
}

/// Supervised environment that also moves the real datapoints on commit.
struct SupervisedDataEnv {
    SupervisedEnv sys;
    std::vector<DeviceData>* store = nullptr;
    const Mat* distances = nullptr;
    RadioModel radio;
    EnergyLedger* ledger = nullptr;
    std::int64_t point_bits = 0;
    std::int64_t moved = 0;

    int devices() const { return sys.devices(); }
    StepEvaluation evaluate(std::span<const int> sel, const DropMatrix& drop, Rng& rng) const {
        return sys.evaluate(sel, drop, rng);
    }

    void commit(std::span<const int> sel, const DropMatrix& drop, Rng& rng) {
        const int n = sys.devices();
        const int parts = sys.partitions();
        const auto round = sys.commit(sel, drop, rng);
        auto& dev = *store;
        // Per-transmitter shuffled row lists for each partition.
        std::vector<std::vector<std::vector<int>>> rows(n, std::vector<std::vector<int>>(parts));
        for (int j = 0; j < n; ++j) {
            for (int r = 0; r < dev[j].data.size(); ++r) rows[j][dev[j].part[r]].push_back(r);
            for (auto& v : rows[j]) std::shuffle(v.begin(), v.end(), rng);
        }
        std::vector<std::vector<std::size_t>> cursor(n, std::vector<std::size_t>(parts, 0));
        std::vector<std::vector<std::uint8_t>> gone(n);
        for (int j = 0; j < n; ++j) gone[j].assign(dev[j].data.size(), 0);
        std::vector<std::vector<std::pair<int, int>>> incoming(n);
        for (int i = 0; i < n; ++i) {
            const int j = sel[i];
            if (j < 0) continue;
            const auto& m = round.messages[i];
            std::int64_t sent = 0;
            for (int l = 0; l < parts; ++l)
                for (std::int64_t k = 0; k < m.transfer[l]; ++k) {
                    const int r = rows[j][l].at(cursor[j][l]++);
                    gone[j][r] = 1;
                    if (k < m.received[l]) incoming[i].push_back({j, r});
                    ++sent;
                }
            moved += sent;
            if (ledger) {
                *ledger = record_transfer(*ledger, 3 * sup_message_bits(parts), (*distances)(i, j), TransferKind::d2d,
                                          radio);
                *ledger = record_transfer(*ledger, sent * point_bits, (*distances)(i, j), TransferKind::d2d,
                                          radio);
            }
        }
        std::vector<DeviceData> next(n);
        for (int i = 0; i < n; ++i) {
            std::vector<int> keep;
            for (int r = 0; r < dev[i].data.size(); ++r)
                if (!gone[i][r]) keep.push_back(r);
            next[i].data = dev[i].data.subset(keep);
            for (int r : keep) next[i].part.push_back(dev[i].part[r]);
            for (auto [j, r] : incoming[i]) {
                next[i].data.append(dev[j].data.subset({r}));
                next[i].part.push_back(dev[j].part[r]);
            }
        }
        dev = std::move(next);
    }
};

/// Unsupervised environment; committed draws are lifted back to feature
/// space and appended to the receiver's training data.
struct UnsupervisedDataEnv {
    UnsupervisedEnv sys;
    std::vector<DeviceData>* store = nullptr;
    const Subspace* subspace = nullptr;
    const Mat* distances = nullptr;
    RadioModel radio;
    EnergyLedger* ledger = nullptr;
    std::int64_t moved = 0;

    int devices() const { return sys.devices(); }
    StepEvaluation evaluate(std::span<const int> sel, const DropMatrix& drop, Rng& rng) const {
        return sys.evaluate(sel, drop, rng);
    }

    void commit(std::span<const int> sel, const DropMatrix& drop, Rng& rng) {
        const auto before = sys.summaries;
        const auto round = sys.commit(sel, drop, rng);
        auto& dev = *store;
        for (int i = 0; i < sys.devices(); ++i) {
            const int j = sel[i];
            if (j < 0) continue;
            for (const auto& block : round.draws[i]) {
                if (block.rows() == 0) continue;
                LocalDataset extra;
                extra.features = block * subspace->basis.transpose();
                dev[i].data.append(extra);
                dev[i].part.insert(dev[i].part.end(), static_cast<std::size_t>(block.rows()), -1);
                moved += block.rows();
            }
            if (ledger) {
                const auto& tx = before[j];
                const std::int64_t bits =
                    sup_message_bits(static_cast<int>(tx.size())) +
                    static_cast<std::int64_t>(tx.size()) * usp_cluster_message_bits(tx.empty() ? 0 : tx.front().dim());
                *ledger = record_transfer(*ledger, bits, (*distances)(i, j), TransferKind::d2d, radio);
            }
        }
    }
};

inline BaselineKind parse_baseline(const std::string& m) {
    if (m == "none") return BaselineKind::none;
    if (m == "uniform") return BaselineKind::uniform;
    if (m == "closest") return BaselineKind::closest;
    if (m == "most_trusted") return BaselineKind::most_trusted;
    throw config_error("not a baseline: " + m);
}

/// Everything one (method, seed) cell needs besides the data.
struct SystemSetup {
    Channel channel;
    Mat distances;
    RadioModel radio;
    std::vector<TrustMatrix> trust;
    ReliableClustering clusters;
    std::vector<ThresholdVector> thresholds;
};

inline SystemSetup build_system(const ExperimentConfig& c, std::uint64_t seed) {
    const int n = c.system.devices;
    Rng pos = make_rng(seed, {stream::channel, 2});
    Mat dist = random_distances(n, c.system.area_side, pos);
    SystemSetup s{Channel::random(c.system.channel, n, seed), dist, RadioModel{}, {}, {}, {}};
    s.radio.mean_d2d_distance = mean_offdiag(dist);
    s.trust = make_trust(n, c.partitions(), c.data.trust, c.data.trust_sparsity, seed);
    s.clusters = cluster_reliable(s.channel.drop(), c.system.alpha_d, c.system.budget);
    s.thresholds.assign(n, ThresholdVector::uniform(c.partitions(), c.system.threshold));
    return s;
}

inline std::vector<CountVector> partition_counts(const std::vector<DeviceData>& devs, int parts) {
    std::vector<CountVector> out;
    for (const auto& d : devs) out.emplace_back(label_histogram(d.part, parts));
    return out;
}

inline SupervisedEnv make_supervised_env(const ExperimentConfig& c, const std::vector<DeviceData>& devs,
                                         const SystemSetup& s) {
    return SupervisedEnv{partition_counts(devs, c.partitions()), s.thresholds, s.trust, s.clusters,
                         c.system.min_labels, DiversityMetric::wasserstein, c.hyper};
}

/// Discovery, committed exchange, and FL training for one method and seed.
inline std::vector<ResultRow> run_cell(const ExperimentConfig& c, const std::string& method, std::uint64_t seed) {
    const std::uint64_t cell_seed = splitmix64(seed ^ fnv1a(method));
    Workload w = build_workload(c, seed);
    SystemSetup sys = build_system(c, seed);
    EnergyLedger ledger;
    std::vector<ResultRow> rows;
    auto emit = [&](int round, const std::string& metric, double v, const EnergyLedger& e) {
        rows.push_back({c.scenario, method, seed, round, metric, v, e.d2d_joules, e.d2s_joules});
    };

    TrainOptions opt{c.rl_iterations, c.system.edges, c.hyper, cell_seed};
    std::int64_t rl_bits = 0, moved = 0;
    std::vector<int> first_selection;
    double objective = 0.0;
    const bool rl = method == "ours";

    if (c.paradigm == Paradigm::unsupervised) {
        UnsupervisedDataEnv env{UnsupervisedEnv{w.summaries, sys.thresholds, sys.trust, sys.clusters, c.hyper},
                                &w.devices, &w.subspace, &sys.distances, sys.radio, &ledger, 0};
        DiscoveredGraph g;
        if (rl) {
            auto res = train_graph(env, sys.channel, opt);
            rl_bits = res.message_bits;
            g = std::move(res.graph);
        } else {
            g = baseline_graph(parse_baseline(method), &env, sys.channel, sys.trust, c.system.edges, cell_seed);
        }
        moved = env.moved;
    } else {
        SupervisedDataEnv env{make_supervised_env(c, w.devices, sys), &w.devices, &sys.distances, sys.radio, &ledger,
                              datapoint_bits(c), 0};
        const SupervisedEnv initial = env.sys;
        DiscoveredGraph g;
        if (rl) {
            auto res = train_graph(env, sys.channel, opt);
            rl_bits = res.message_bits;
            g = std::move(res.graph);
        } else {
            g = baseline_graph(parse_baseline(method), &env, sys.channel, sys.trust, c.system.edges, cell_seed);
        }
        if (!g.rounds.empty()) objective = initial.objective(g.rounds.front(), sys.channel.drop());
        moved = env.moved;
    }
    ledger = record_transfer(ledger, rl_bits, sys.radio.mean_d2d_distance, TransferKind::d2d, sys.radio);

    if (c.paradigm != Paradigm::unsupervised) emit(0, "graph_objective", objective, ledger);
    emit(0, "rl_d2d_bits", static_cast<double>(rl_bits), ledger);
    emit(0, "exchanged_points", static_cast<double>(moved), ledger);

    std::vector<LocalDataset> train;
    for (const auto& d : w.devices) train.push_back(d.data);
    Arch arch;
    Task task = Task::classification;
    switch (c.paradigm) {
        case Paradigm::supervised:
        case Paradigm::semisupervised:
            arch = {c.fl.arch, c.data.dim, c.system.partitions, c.fl.hidden};
            break;
        case Paradigm::regression:
            arch = {ArchKind::linear, c.data.dim, 1, 0};
            task = Task::regression;
            break;
        case Paradigm::unsupervised:
            arch = {ArchKind::encoder, c.data.dim, c.fl.embedding, c.fl.hidden};
            task = Task::unsupervised;
            break;
    }
    TrainConfig tc = c.fl.train;
    tc.seed = splitmix64(seed);  // identical FL randomness across methods
    const auto run = run_training(train, arch, task, tc, w.test, &w.probe);
    const std::int64_t model_bits = 32LL * static_cast<std::int64_t>(arch.param_count());
    for (std::size_t r = 0; r < run.values.size(); ++r) {
        EnergyLedger e = ledger;
        e = record_transfer(e, run.d2d_cumulative[r] * model_bits, sys.radio.mean_d2d_distance, TransferKind::d2d,
                            sys.radio);
        e = record_transfer(e, run.d2s_cumulative[r] * model_bits, 0.0, TransferKind::d2s, sys.radio);
        emit(static_cast<int>(r) + 1, run.metric, run.values[r], e);
    }
    return rows;
}

struct PipelineResult {
    std::vector<ResultRow> rows;
    int failed_cells = 0;
};

inline std::string sanitize(std::string s) {
    for (char& ch : s)
        if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = ';';
    return s;
}

/// Every (variant, method, seed) cell, run on `jobs` threads; rows come out
/// in cell order regardless of scheduling. A failing cell yields one error row.
inline PipelineResult run_pipeline(const ExperimentConfig& c, int jobs = 1) {
    struct Cell {
        const ExperimentConfig* cfg;
        std::string method;
        std::uint64_t seed;
    };
    const auto variants = expand_sweep(c);
    std::vector<Cell> cells;
    for (const auto& v : variants)
        for (const auto& m : v.methods)
            for (auto s : v.seeds) cells.push_back({&v, m, s});

    std::vector<std::vector<ResultRow>> out(cells.size());
    std::vector<std::uint8_t> failed(cells.size(), 0);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k; (k = next.fetch_add(1)) < cells.size();) {
            const auto& cell = cells[k];
            try {
                out[k] = run_cell(*cell.cfg, cell.method, cell.seed);
            } catch (const std::exception& e) {
                out[k] = {{cell.cfg->scenario, cell.method, cell.seed, 0, "error:" + sanitize(e.what()), 0.0, 0.0, 0.0}};
                failed[k] = 1;
            }
        }
    };
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < jobs; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    PipelineResult res;
    for (std::size_t k = 0; k < cells.size(); ++k) {
        res.rows.insert(res.rows.end(), out[k].begin(), out[k].end());
        res.failed_cells += failed[k];
    }
    return res;
}

/// Exhaustive optimum next to every method's first-round objective.
inline std::vector<ResultRow> run_oracle(const ExperimentConfig& c) {
    if (c.paradigm == Paradigm::unsupervised) throw config_error("the exhaustive oracle covers supervised systems only");
    if (c.system.devices > 6) throw size_error("the exhaustive oracle is limited to N <= 6");
    std::vector<ResultRow> rows;
    for (auto seed : c.seeds) {
        Workload w = build_workload(c, seed);
        SystemSetup sys = build_system(c, seed);
        const SupervisedEnv env = make_supervised_env(c, w.devices, sys);
        const auto best = brute_force_optimal(env, sys.channel.drop());
        rows.push_back({c.scenario, "oracle", seed, 0, "graph_objective", best.objective, 0.0, 0.0});
        for (const auto& m : c.methods) {
            std::vector<int> sel;
            if (m == "ours") {
                SupervisedEnv scratch = env;
                Channel ch = sys.channel;
                TrainOptions opt{c.rl_iterations, 1, c.hyper, splitmix64(seed ^ fnv1a(m))};
                sel = train_graph(scratch, ch, opt).graph.rounds.front();
            } else {
                sel = baseline_graph(parse_baseline(m), sys.channel, sys.trust, 1, splitmix64(seed ^ fnv1a(m)))
                          .rounds.front();
            }
            rows.push_back({c.scenario, m, seed, 0, "graph_objective", env.objective(sel, sys.channel.drop()), 0.0, 0.0});
        }
    }
    return rows;
}

struct SummaryRow {
    std::string scenario;
    std::string method;
    std::string metric;
    int seeds = 0;
    double final_mean = 0.0;
    double final_std = 0.0;
    double rounds_to_threshold = std::nan("");  // mean over seeds that reach it
    double energy_to_threshold = std::nan("");
    int reached = 0;
};

inline bool is_training_metric(const std::string& m) {
    return m == "accuracy" || m == "mse" || m == "linear_eval_accuracy";
}

/// First round whose value reaches `threshold` (at or below it for mse).
inline int rounds_to_threshold(const std::vector<std::pair<int, double>>& series, double threshold, bool lower_better) {
    for (const auto& [round, v] : series)
        if (lower_better ? v <= threshold : v >= threshold) return round;
    return -1;
}

/// Per (scenario, method, metric): final value mean and population std over
/// seeds, plus mean rounds and joules needed to reach the threshold.
inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows, double threshold = 0.7) {
    struct Series {
        std::vector<std::pair<int, double>> points;
        std::vector<double> energy;
    };
    std::map<std::tuple<std::string, std::string, std::string>, std::map<std::uint64_t, Series>> groups;
    std::vector<std::tuple<std::string, std::string, std::string>> order;
    for (const auto& r : rows) {
        const auto key = std::make_tuple(r.scenario, r.method, r.metric);
        if (!groups.count(key)) order.push_back(key);
        auto& s = groups[key][r.seed];
        s.points.push_back({r.round, r.value});
        s.energy.push_back(r.d2d_joules + r.d2s_joules);
    }
    std::vector<SummaryRow> out;
    for (const auto& key : order) {
        SummaryRow row{std::get<0>(key), std::get<1>(key), std::get<2>(key)};
        std::vector<double> finals;
        double rsum = 0.0, esum = 0.0;
        const bool lower = row.metric == "mse";
        for (const auto& [seed, s] : groups[key]) {
            auto last = std::max_element(s.points.begin(), s.points.end(),
                                         [](const auto& a, const auto& b) { return a.first < b.first; });
            finals.push_back(last->second);
            if (!is_training_metric(row.metric)) continue;
            const int hit = rounds_to_threshold(s.points, threshold, lower);
            if (hit < 0) continue;
            for (std::size_t k = 0; k < s.points.size(); ++k)
                if (s.points[k].first == hit) {
                    esum += s.energy[k];
                    break;
                }
            rsum += hit;
            ++row.reached;
        }
        row.seeds = static_cast<int>(finals.size());
        double m = 0.0;
        for (double v : finals) m += v;
        m /= static_cast<double>(finals.size());
        double var = 0.0;
        for (double v : finals) var += (v - m) * (v - m);
        row.final_mean = m;
        row.final_std = std::sqrt(var / static_cast<double>(finals.size()));
        if (row.reached > 0) {
            row.rounds_to_threshold = rsum / row.reached;
            row.energy_to_threshold = esum / row.reached;
        }
        out.push_back(row);
    }
    return out;
}

inline void write_summary(std::ostream& os, const std::vector<SummaryRow>& rows) {
    os << "scenario,method,metric,seeds,final_mean,final_std,reached,rounds_to_threshold,energy_to_threshold\n";
    for (const auto& r : rows)
        os << csv_field(r.scenario) << ',' << csv_field(r.method) << ',' << csv_field(r.metric) << ',' << r.seeds << ','
           << format_number(r.final_mean) << ',' << format_number(r.final_std) << ',' << r.reached << ','
           << format_number(r.rounds_to_threshold) << ',' << format_number(r.energy_to_threshold) << '\n';
}

}  // namespace d2dfl
