// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace compt {

enum class ErrorCode {
    kShapeMismatch,
    kDomain,
    kNonScalarLoss,
    kGraphConsumed,
    kNonDeterministic,
    kInvalidArgument,
    kOutOfRange,
    kVersionMismatch,
    kFingerprintMismatch,
    kMalformedFile,
    kIo,
    kCertificationFailed,
    kNanLoss,
    kUnknownTask,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::kShapeMismatch: return "shape_mismatch";
        case ErrorCode::kDomain: return "domain";
        case ErrorCode::kNonScalarLoss: return "non_scalar_loss";
        case ErrorCode::kGraphConsumed: return "graph_consumed";
        case ErrorCode::kNonDeterministic: return "non_deterministic";
        case ErrorCode::kInvalidArgument: return "invalid_argument";
        case ErrorCode::kOutOfRange: return "out_of_range";
        case ErrorCode::kVersionMismatch: return "version_mismatch";
        case ErrorCode::kFingerprintMismatch: return "fingerprint_mismatch";
        case ErrorCode::kMalformedFile: return "malformed_file";
        case ErrorCode::kIo: return "io";
        case ErrorCode::kCertificationFailed: return "certification_failed";
        case ErrorCode::kNanLoss: return "nan_loss";
        case ErrorCode::kUnknownTask: return "unknown_task";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace compt
