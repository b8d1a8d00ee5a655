#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace kvfocus {

// splitmix64 finalizer. Used to derive independent substream seeds so that
// e.g. frame contents do not depend on how many chunks were requested.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Tags keep substreams for different purposes disjoint.
namespace seed_tag {
inline constexpr std::uint64_t stream_frame = 0x01;
inline constexpr std::uint64_t model_weights = 0x02;
inline constexpr std::uint64_t prompt = 0x03;
inline constexpr std::uint64_t window_noise = 0x04;
inline constexpr std::uint64_t window_timestep = 0x05;
inline constexpr std::uint64_t score_model = 0x06;
inline constexpr std::uint64_t probe = 0x07;
}  // namespace seed_tag

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t s = mix64(base ^ 0x8f1bbcdcbfa53e0bULL);
    s = mix64(s ^ tag);
    s = mix64(s ^ a);
    return mix64(s ^ b);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
    return std::mt19937_64(seed);
}

inline void fill_normal(std::span<float> out, std::mt19937_64& rng,
                        float mean = 0.0f, float stddev = 1.0f) {
    std::normal_distribution<float> dist(mean, stddev);
    for (float& v : out) {
        v = dist(rng);
    }
}

inline void fill_normal(std::span<double> out, std::mt19937_64& rng,
                        double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : out) {
        v = dist(rng);
    }
}

}  // namespace kvfocus
