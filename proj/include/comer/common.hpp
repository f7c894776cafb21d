// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace comer {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Error taxonomy. Every failure the library reports goes through one of
// these so the CLI can print a single machine-parseable line.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct DimensionError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

inline Index numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

template <typename E>
inline void check_as(bool cond, const std::string& msg) {
    if (!cond) throw E(msg);
}

// Sentinel used for masked attention positions. A large negative finite
// value rather than -inf so arithmetic on masked entries stays NaN-free.
template <typename T>
constexpr T mask_sentinel() {
    return T(-1e9);
}

// Values at or below this threshold are treated as masked by softmax.
template <typename T>
constexpr T mask_threshold() {
    return T(-1e8);
}

// FNV-1a hash, used to derive per-name random streams.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Numeric buffers share one cache-line alignment so SIMD kernels always see
// the same layout; results then never depend on where the heap placed a
// buffer, and identical computations reproduce bitwise.
inline constexpr std::size_t kDataAlignment = 64;

template <typename T>
struct AlignedAllocator {
    using value_type = T;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kDataAlignment)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(kDataAlignment)); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

// Element storage for tensors and any other buffer Eigen maps over.
template <typename T>
using Vec = std::vector<T, AlignedAllocator<T>>;

}  // namespace comer
