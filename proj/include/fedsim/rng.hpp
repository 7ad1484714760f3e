#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <type_traits>

namespace fedsim {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a, used to fold identifiers and purpose tags into seeds.
inline std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace detail {

inline std::uint64_t seed_part(std::string_view s) { return hash_string(s); }

template <typename T>
    requires std::is_integral_v<T>
std::uint64_t seed_part(T v) {
    return static_cast<std::uint64_t>(v);
}

} // namespace detail

// Derives an independent stream seed from a master seed and any mix of
// integers and string tags, e.g. derive_seed(master, client_id, round, "train").
// The result depends only on the arguments, so work scheduled on different
// threads draws the same numbers as a serial run.
template <typename... Parts>
std::uint64_t derive_seed(std::uint64_t master, const Parts&... parts) {
    std::uint64_t h = splitmix64(master);
    ((h = splitmix64(h ^ splitmix64(detail::seed_part(parts) + 0x632be59bd9b4e019ULL))), ...);
    return h;
}

template <typename... Parts>
Rng make_rng(std::uint64_t master, const Parts&... parts) {
    return Rng(derive_seed(master, parts...));
}

} // namespace fedsim
