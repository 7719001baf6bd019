#pragma once

#include <stdexcept>
#include <string>

namespace massive {

enum class ErrorKind {
    usage,
    input,
    config,
    dimension,
    contract,
    numeric,
    detection,
    checkpoint,
    io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& w) : Error(ErrorKind::usage, w) {}
};
struct InputError : Error {
    explicit InputError(const std::string& w) : Error(ErrorKind::input, w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& w) : Error(ErrorKind::dimension, w) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& w) : Error(ErrorKind::contract, w) {}
};
struct DetectionError : Error {
    explicit DetectionError(const std::string& w) : Error(ErrorKind::detection, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorKind::io, w) {}
};

// Non-finite value observed while running the model or the optimizer.
struct NumericFault : Error {
    NumericFault(const std::string& w, long layer = -1) : Error(ErrorKind::numeric, w), layer(layer) {}
    long layer;
};

enum class CheckpointFault {
    truncated,
    bad_header,
    unknown_dtype,
    overlapping_offsets,
    missing_tensor,
    shape_mismatch,
};

inline const char* to_string(CheckpointFault f) {
    switch (f) {
    case CheckpointFault::truncated: return "truncated";
    case CheckpointFault::bad_header: return "bad_header";
    case CheckpointFault::unknown_dtype: return "unknown_dtype";
    case CheckpointFault::overlapping_offsets: return "overlapping_offsets";
    case CheckpointFault::missing_tensor: return "missing_tensor";
    case CheckpointFault::shape_mismatch: return "shape_mismatch";
    }
    return "?";
}

struct CheckpointError : Error {
    CheckpointError(CheckpointFault fault, std::string tensor, const std::string& detail)
        : Error(ErrorKind::checkpoint,
                std::string("checkpoint ") + to_string(fault) + (tensor.empty() ? "" : " [" + tensor + "]") +
                    ": " + detail),
          fault(fault), tensor(std::move(tensor)) {}
    CheckpointFault fault;
    std::string tensor;
};

// Process exit codes: 2 usage, 3 input, 4 numeric fault, 1 anything else.
inline int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::numeric: return 4;
    case ErrorKind::input:
    case ErrorKind::config:
    case ErrorKind::dimension:
    case ErrorKind::detection:
    case ErrorKind::checkpoint:
    case ErrorKind::io: return 3;
    case ErrorKind::contract: return 1;
    }
    return 1;
}

} // namespace massive
