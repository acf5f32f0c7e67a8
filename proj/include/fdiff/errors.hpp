#ifndef FDIFF_ERRORS_HPP
#define FDIFF_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fdiff {

// Exit-code mapping used by the CLI: usage=1, data/format=2, numeric=3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ArgError : std::runtime_error {
    explicit ArgError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fdiff

#endif
