#pragma once

#include <stdexcept>
#include <string>

namespace pairsupcon {

// Bad input, bad shapes, bad files. The CLI maps this to exit code 1.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite losses/gradients and failed gradient checks. Exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void fail(const std::string& what) { throw ValidationError(what); }

inline void require(bool ok, const std::string& what) {
    if (!ok) fail(what);
}

} // namespace detail
} // namespace pairsupcon
