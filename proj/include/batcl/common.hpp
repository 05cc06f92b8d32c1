#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace batcl {

// All numerics are 64-bit floats; matrices are dense row-major.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

/// Generic runtime failure (bad shapes, non-finite values, broken contracts).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid user-facing configuration (CLI maps this to exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

inline std::string shape_str(const Mat& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// FNV-1a, used for config fingerprints.
inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(0xcbf29ce484222325ull, s.data(), s.size());
}

/// Deterministic double -> text round-trip formatting (%.17g).
std::string format_double(double v);

}  // namespace batcl
