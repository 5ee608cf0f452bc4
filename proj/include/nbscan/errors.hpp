#pragma once

#include <stdexcept>
#include <string>

namespace nbscan {

/// Bad argument values: shape mismatches, empty datasets, out-of-range assets.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Inconsistent configuration: zero bounds, unregistered encoders, unknown presets.
class ConfigurationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A generator or callback broke its output contract (e.g. wrong spatial shape).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Regulation spec and trigger template cannot be combined (e.g. L0 on a pervasive trigger).
class UnsupportedCombination : public ConfigurationError {
public:
    using ConfigurationError::ConfigurationError;
};

/// Dataset directory ingest failed; the message names the offending path.
class IngestionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace nbscan
