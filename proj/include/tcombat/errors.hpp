#pragma once

#include <stdexcept>
#include <string>

namespace tcombat {

/// Process exit codes used by the CLI for each error category.
enum class ExitCode : int {
    ok = 0,
    config = 2,
    data = 3,
    divergence = 4,
    hash_mismatch = 5,
    incompatible_dims = 6,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const { return code_; }

private:
    ExitCode code_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ExitCode::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ExitCode::data, what) {}
};

struct DivergenceError : Error {
    DivergenceError(const std::string& what, long iteration = -1)
        : Error(ExitCode::divergence, what), iteration(iteration) {}
    long iteration;
};

struct HashMismatchError : Error {
    explicit HashMismatchError(const std::string& what) : Error(ExitCode::hash_mismatch, what) {}
};

struct DimsError : Error {
    explicit DimsError(const std::string& what) : Error(ExitCode::incompatible_dims, what) {}
};

}  // namespace tcombat
