#pragma once

#include <stdexcept>
#include <string>

namespace sdconet {

// Violated tensor/array shape expectations.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// Invalid configuration values (ratios out of range, odd channel counts, ...).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Broken call contracts that are not shape or config problems
// (degenerate boxes, out-of-range indices, missing pyramid levels, ...).
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// I/O and parse failures with file context.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Training aborts (non-finite losses) carrying diagnostics.
class TrainAbort : public std::runtime_error {
public:
    explicit TrainAbort(const std::string& msg) : std::runtime_error("training aborted: " + msg) {}
};

inline void check_shape(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}
inline void check_config(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}
inline void check_contract(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

} // namespace sdconet
