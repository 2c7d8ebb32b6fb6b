#pragma once

#include <stdexcept>
#include <string>

namespace drdm {

// Every failure the library reports derives from drdm::Error. The `kind()`
// tag is stable and is what the CLI prints in its machine-readable error line.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

struct ScheduleError : Error {
    explicit ScheduleError(const std::string& what) : Error("schedule", what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

// Undefined RV coefficient (zero Gram matrix).
struct UndefinedCoefficientError : Error {
    explicit UndefinedCoefficientError(const std::string& what) : Error("undefined_coefficient", what) {}
};

struct BundleError : Error {
    enum class Code { missing_file, size_mismatch, unknown_dtype, not_found, malformed };

    BundleError(Code code, const std::string& what) : Error(code_name(code), what), code_(code) {}
    Code code() const noexcept { return code_; }

    static const char* code_name(Code c) {
        switch (c) {
        case Code::missing_file: return "bundle_missing_file";
        case Code::size_mismatch: return "bundle_size_mismatch";
        case Code::unknown_dtype: return "bundle_unknown_dtype";
        case Code::not_found: return "bundle_not_found";
        case Code::malformed: return "bundle_malformed";
        }
        return "bundle";
    }

private:
    Code code_;
};

} // namespace drdm
