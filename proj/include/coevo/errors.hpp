#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace coevo {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input or a violated precondition. CLI exit code 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

/// Edge insertion or input graph that would break acyclicity.
class CycleError : public Error {
public:
    using Error::Error;
};

/// A growth cap (skills, snapshots) was hit.
class CapError : public Error {
public:
    using Error::Error;
};

/// An internal invariant was breached (e.g. a write against a frozen graph).
/// CLI exit code 2.
class InvariantBreach : public Error {
public:
    using Error::Error;
};

/// A persisted event log is corrupt. Carries the offending sequence number.
class IntegrityError : public Error {
public:
    IntegrityError(std::uint64_t seq, const std::string& what)
        : Error("event log integrity error at seq " + std::to_string(seq) + ": " + what), seq_(seq) {}

    std::uint64_t seq() const noexcept { return seq_; }

private:
    std::uint64_t seq_;
};

/// A model backend failed after all retries.
class BackendError : public Error {
public:
    using Error::Error;
};

}  // namespace coevo
