#pragma once
#include <stdexcept>
#include <string>

namespace x3d {

// Base for all engine errors. The CLI maps ConfigError to exit code 2 and
// everything else to exit code 1.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DomainError : public Error {
public:
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// A model service (local or remote prior, remote encoder) could not produce
// its output.
class DenoiserUnavailable : public Error {
public:
    explicit DenoiserUnavailable(const std::string& msg) : Error(msg) {}
};

// NeRF -> DMTet conversion produced an empty surface.
class ConversionError : public Error {
public:
    explicit ConversionError(const std::string& msg) : Error(msg) {}
};

// A phase exceeded its skipped-iteration budget.
class PhaseAbort : public Error {
public:
    PhaseAbort(int phase, int iter, const std::string& msg)
        : Error("phase " + std::to_string(phase) + ", iteration " + std::to_string(iter) + ": " + msg),
          phase_id(phase), iteration(iter) {}
    int phase_id;
    int iteration;
};

} // namespace x3d
