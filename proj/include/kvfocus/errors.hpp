#pragma once

#include <stdexcept>
#include <string>

namespace kvfocus {

// Error categories. The CLI maps each category to a distinct exit code
// (see tools/main.cpp); library code throws and never exits.

// Invalid parameter combinations (shape fields, lambda range, group count...).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor dimension mismatches.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Internal consistency violations: dangling frame indices, overlapping
// scatter offsets, non-monotone cumulative boundaries.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input files (schema violations, unknown keys).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace kvfocus
