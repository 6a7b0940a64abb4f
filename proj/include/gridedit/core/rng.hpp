#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gridedit/core/error.hpp"

namespace gridedit {

using Rng = std::mt19937_64;

// Named sub-streams derived from one root seed. Each consumer draws from its
// own engine so that, e.g., changing the dropout rate never shifts data order.
enum class Stream : std::uint64_t {
    data    = 0x64617461,
    init    = 0x696e6974,
    dropout = 0x64726f70,
    noise   = 0x6e6f6973,
    sampler = 0x73616d70,
    eval    = 0x6576616c,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline Rng make_rng(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(root), static_cast<std::uint32_t>(root >> 32),
                      static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32)};
    return Rng(seq);
}

inline Rng make_rng(std::uint64_t root, Stream s, std::uint64_t index = 0) {
    return make_rng(root, static_cast<std::uint64_t>(s), index);
}

template <class T>
void fill_normal(Rng& rng, std::vector<T>& out) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : out) v = static_cast<T>(dist(rng));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline bool bernoulli(Rng& rng, double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return uniform01(rng) < p;
}

inline std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void set_rng_state(Rng& rng, const std::string& state) {
    std::istringstream is(state);
    Rng parsed;
    is >> parsed;
    if (is.fail()) throw ValidationError("malformed RNG state");
    rng = parsed;
}

// FNV-1a, used for content hashes recorded in manifests and reports.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace gridedit
