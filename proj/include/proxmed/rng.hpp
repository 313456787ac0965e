#pragma once

#include <cstdint>
#include <random>

namespace proxmed {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// RNG for the stream (seed, s1, s2, s3). Streams are independent of thread
// scheduling: every consumer derives its own generator from explicit ids.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t s1 = 0,
                                  std::uint64_t s2 = 0, std::uint64_t s3 = 0) {
    std::uint64_t h = seed;
    splitmix64(h);
    h ^= s1;
    splitmix64(h);
    h ^= s2;
    splitmix64(h);
    h ^= s3;
    std::uint64_t key = splitmix64(h);
    return std::mt19937_64(key);
}

}  // namespace proxmed
