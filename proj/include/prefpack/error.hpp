#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace prefpack {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input that could not be parsed. `line()` is 1-based, 0 when not applicable.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Well-formed input that violates a domain invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Non-finite value produced inside the reference network.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, int layer)
        : Error(what + " (layer " + std::to_string(layer) + ")"), layer_(layer) {}

    /// Layer index, or -1 for the embedding / head stages.
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

}  // namespace prefpack
