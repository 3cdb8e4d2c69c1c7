#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace glame {

// Error kinds map onto CLI exit codes: config errors exit 2, numeric errors exit 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};
struct TokenError : std::runtime_error {
    explicit TokenError(const std::string& what) : std::runtime_error(what) {}
};

// Deterministic, platform-independent RNG (splitmix64 core). std:: distributions
// are implementation-defined, so every sampling path in the project goes
// through this.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    int range(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal, Box-Muller without caching (keeps state replayable).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    Rng fork(uint64_t stream) {
        Rng child(state_ ^ (0xd1b54a32d192ed03ULL * (stream + 1)));
        child.next_u64();
        return child;
    }

private:
    uint64_t state_;
};

// FNV-1a 64-bit digest, hex encoded. Used for manifest/provenance digests and
// read-only audits, not cryptographic integrity.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL);
std::string digest_hex(const void* data, size_t len);
std::string digest_file(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
void write_binary_file(const std::string& path, const void* data, size_t len);
std::vector<uint8_t> read_binary_file(const std::string& path);

std::string lowercase(const std::string& s);
std::vector<std::string> split_ws(const std::string& s);
std::string join_ws(const std::vector<std::string>& words);

}  // namespace glame
