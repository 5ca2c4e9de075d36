#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace d2dfl {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Rng = std::mt19937_64;

// Error kinds. Each maps to one failure class named in the contracts of the
// individual modules.
struct invalid_parameter : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct missing_labels : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct protocol_error : std::logic_error {
    using std::logic_error::logic_error;
};
struct allocation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct size_error : std::length_error {
    using std::length_error::length_error;
};
struct aggregation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derive an independent generator from a base seed and a list of stream
/// coordinates, e.g. (seed, device, round). Same inputs, same stream.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
    std::uint64_t h = splitmix64(seed);
    for (auto s : stream) h = splitmix64(h ^ splitmix64(s + 0x632be59bd9b4e019ULL));
    std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return Rng(seq);
}

// Stream tags so that distinct consumers of one seed never share a stream.
namespace stream {
inline constexpr std::uint64_t pool = 1;
inline constexpr std::uint64_t allocation = 2;
inline constexpr std::uint64_t trust = 3;
inline constexpr std::uint64_t channel = 4;
inline constexpr std::uint64_t mask = 5;
inline constexpr std::uint64_t kmeans = 6;
inline constexpr std::uint64_t discovery = 7;
inline constexpr std::uint64_t exchange = 8;
inline constexpr std::uint64_t model_init = 9;
inline constexpr std::uint64_t local = 10;
inline constexpr std::uint64_t straggler = 11;
inline constexpr std::uint64_t mixing = 12;
inline constexpr std::uint64_t test_set = 13;
}  // namespace stream

inline int uniform_int(Rng& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace d2dfl
