#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace probekit {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

// Thrown on incompatible tensor dimensions.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a computation produces or receives non-finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when an API precondition is violated (non-scalar loss, bad plan, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown on invalid configuration files or values.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a pipeline stage is missing upstream artifacts.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown on malformed or unreadable artifact files.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace probekit
