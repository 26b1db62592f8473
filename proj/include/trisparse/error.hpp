#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace trisparse {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes that do not agree with an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk data. `offset` is the byte position where parsing stopped.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// A caller broke a stateful contract, e.g. sparse processing without cached state.
class ContractError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace trisparse
