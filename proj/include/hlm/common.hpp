#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>
#include <atomic>
#include <vector>
#include <functional>

namespace hlm {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto process exit codes:
//   usage/config -> 1, data/format -> 2, numeric -> 3.
// ---------------------------------------------------------------------------

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape or argument violates an operation's precondition.
struct dimension_error : error {
    using error::error;
};

/// Invalid user-facing configuration (bad key, bad value, bad schedule).
struct config_error : error {
    using error::error;
};

/// Malformed or corrupt input data (checkpoints, corpus files).
struct data_error : error {
    using error::error;
};

/// Numerical failure (non-convergence, degenerate values).
struct numeric_error : error {
    using error::error;
};

/// Embedding with near-zero norm before normalization: an untrained or
/// broken head, distinct from a generic numeric failure.
struct degenerate_embedding_error : numeric_error {
    using numeric_error::numeric_error;
};

/// API misuse that violates a documented contract (e.g. backward on a
/// non-scalar, update of a frozen tower).
struct contract_error : error {
    using error::error;
};

// ---------------------------------------------------------------------------
// Deterministic counter-based RNG.
//
// Streams are keyed by (seed, tag, a, b): the key is derived with the
// SplitMix64 finalizer and each draw mixes (key, counter). Identical keys
// produce identical streams on every platform; items can be generated in
// any order or in parallel because nothing is shared between streams.
// ---------------------------------------------------------------------------

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const void* bytes, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(s.data(), s.size());
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}

    static CounterRng stream(std::uint64_t seed, std::uint64_t tag,
                             std::uint64_t a = 0, std::uint64_t b = 0) {
        std::uint64_t k = mix64(seed ^ mix64(tag ^ mix64(a ^ mix64(b))));
        return CounterRng(k);
    }

    std::uint64_t next_u64() { return mix64(key_ ^ counter_++); }

    /// Uniform in [0, 1) with 53 bits of entropy.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) {
        // 64-bit multiply-shift; bias is negligible for desk-scale n.
        return static_cast<std::uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller (one value per call, cache unused).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

// Stream tags used across the library. Values are FNV-1a of the names,
// frozen here so corpora stay reproducible if the names ever change.
namespace rng_tag {
inline constexpr std::uint64_t topic   = 0x8c4b'1f6a'9d2e'5501ull;
inline constexpr std::uint64_t doc     = 0x8c4b'1f6a'9d2e'5502ull;
inline constexpr std::uint64_t query   = 0x8c4b'1f6a'9d2e'5503ull;
inline constexpr std::uint64_t align   = 0x8c4b'1f6a'9d2e'5504ull;
inline constexpr std::uint64_t negs    = 0x8c4b'1f6a'9d2e'5505ull;
inline constexpr std::uint64_t feats   = 0x8c4b'1f6a'9d2e'5506ull;
inline constexpr std::uint64_t init    = 0x8c4b'1f6a'9d2e'5507ull;
inline constexpr std::uint64_t shuffle = 0x8c4b'1f6a'9d2e'5508ull;
inline constexpr std::uint64_t mask    = 0x8c4b'1f6a'9d2e'5509ull;
inline constexpr std::uint64_t test    = 0x8c4b'1f6a'9d2e'550aull;
}  // namespace rng_tag

// ---------------------------------------------------------------------------
// parallel_for: index-parallel loop for read-only / element-disjoint work
// (index builds, calibration passes, frozen-tower embedding). Each index is
// processed exactly once by exactly one worker, so results are independent
// of the worker count. Training steps never use this.
// ---------------------------------------------------------------------------

inline unsigned worker_count() {
    if (const char* env = std::getenv("HLM_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1u : hw;
}

inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    unsigned workers = worker_count();
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto run = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    unsigned spawn = static_cast<unsigned>(std::min<std::size_t>(workers, n)) - 1;
    pool.reserve(spawn);
    for (unsigned t = 0; t < spawn; ++t) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
}

/// FNV-1a over the raw bytes of a float buffer; used to assert that frozen
/// weights stay byte-identical across a phase.
inline std::uint64_t byte_checksum(const float* data, std::size_t n) {
    return fnv1a(data, n * sizeof(float));
}
inline std::uint64_t byte_checksum(const double* data, std::size_t n) {
    return fnv1a(data, n * sizeof(double));
}

}  // namespace hlm
