#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mtd {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation (e.g. a row that
/// is not a probability distribution).
class DomainError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed, truncated or wrong-version file. Carries the byte offset at
/// which decoding failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// I/O failure that is not a format problem (unwritable path, missing file).
class DataError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or value during training.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace mtd
