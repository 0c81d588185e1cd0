#pragma once

#include <stdexcept>
#include <string>

namespace cmidd {

enum class ErrorKind {
    invalid_argument,
    missing_file,
    size_mismatch,
    label_out_of_range,
    insufficient_samples,
    manifest_mismatch,
    io,
    invalid_arch,
    shape_mismatch,
    training_diverged,
    empty_pool,
    empty_class,
    non_finite,
    class_missing_in_batch,
    non_finite_loss,
    usage,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::invalid_argument: return "invalid-argument";
        case ErrorKind::missing_file: return "missing-file";
        case ErrorKind::size_mismatch: return "size-mismatch";
        case ErrorKind::label_out_of_range: return "label-out-of-range";
        case ErrorKind::insufficient_samples: return "insufficient-samples";
        case ErrorKind::manifest_mismatch: return "manifest-mismatch";
        case ErrorKind::io: return "io";
        case ErrorKind::invalid_arch: return "invalid-arch";
        case ErrorKind::shape_mismatch: return "shape-mismatch";
        case ErrorKind::training_diverged: return "training-diverged";
        case ErrorKind::empty_pool: return "empty-pool";
        case ErrorKind::empty_class: return "empty-class";
        case ErrorKind::non_finite: return "non-finite";
        case ErrorKind::class_missing_in_batch: return "class-missing-in-batch";
        case ErrorKind::non_finite_loss: return "non-finite-loss";
        case ErrorKind::usage: return "usage";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace cmidd
