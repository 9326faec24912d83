#pragma once

#include <stdexcept>
#include <string>

namespace fedleak {

// Invalid user-supplied configuration; the CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fedleak
