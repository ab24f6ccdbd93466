#pragma once

#include <stdexcept>
#include <string>

namespace replica {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ManifestError : Error {
    using Error::Error;
};

struct RegistryError : Error {
    using Error::Error;
};

struct PlanError : Error {
    using Error::Error;
};

/// Raised when stored content does not match its digest, or a cache key is
/// re-used for different content.
struct IntegrityError : Error {
    using Error::Error;
};

struct NotFound : Error {
    using Error::Error;
};

/// Operation not allowed in the current job/trial state.
struct StateError : Error {
    using Error::Error;
};

} // namespace replica
