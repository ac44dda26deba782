#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace strainseq {

// Error taxonomy shared by all modules. The type carries the category (the
// CLI maps it to an exit code); the message carries the context: offending
// value, row/column, or the two mismatched shapes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic random stream: mt19937-64 plus explicit 53-bit uniform
// construction. The engine is pinned by the standard and no std
// distribution is used, so identical seeds reproduce identical draws on
// every platform and standard library.
class RngStream {
public:
    static constexpr std::string_view algorithm = "mt19937-64/u53";

    explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        if (!(lo <= hi)) {
            throw InvalidInputError("RngStream::uniform: lo " + std::to_string(lo) +
                                    " > hi " + std::to_string(hi));
        }
        return lo + (hi - lo) * uniform01();
    }

    // [0, n), unbiased via rejection.
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) throw InvalidInputError("RngStream::uniform_index: n must be positive");
        const std::uint64_t max_u64 = ~std::uint64_t{0};
        std::uint64_t rem = (max_u64 % n) + 1;  // 2^64 mod n, with n meaning 0
        if (rem == n) rem = 0;
        std::uint64_t r = next_u64();
        while (rem != 0 && r >= max_u64 - rem + 1) r = next_u64();
        return r % n;
    }

    // [lo, hi] inclusive
    long long uniform_int(long long lo, long long hi) {
        if (lo > hi) {
            throw InvalidInputError("RngStream::uniform_int: lo " + std::to_string(lo) +
                                    " > hi " + std::to_string(hi));
        }
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<long long>(uniform_index(span));
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Independent child stream; the tag keeps sibling streams decoupled.
    RngStream split(std::string_view tag) const {
        return RngStream(splitmix64(seed_ ^ fnv1a64(tag)));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace strainseq
