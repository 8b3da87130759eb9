#pragma once

#include <stdexcept>
#include <string>

namespace oae {

/// Shape or index mismatch between operands.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerically rank-deficient basis; carries the first offending column.
struct DegenerateBasisError : std::runtime_error {
    int column;
    DegenerateBasisError(const std::string& what, int col)
        : std::runtime_error(what + " (column " + std::to_string(col) + ")"), column(col) {}
};

/// Gram system not positive definite even after jitter retries.
struct SingularGramError : std::runtime_error {
    explicit SingularGramError(const std::string& what) : std::runtime_error(what) {}
};

/// NaN/Inf or other hard numeric failure.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input file; carries a 1-based line number when known.
struct ParseError : std::runtime_error {
    long line;
    ParseError(const std::string& what, long line_no = -1)
        : std::runtime_error(line_no >= 0 ? what + " (line " + std::to_string(line_no) + ")" : what),
          line(line_no) {}
};

/// Filesystem failure (missing file, write error).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid configuration value or unknown key.
struct ConfigError : std::runtime_error {
    long line;
    ConfigError(const std::string& what, long line_no = -1)
        : std::runtime_error(line_no >= 0 ? what + " (line " + std::to_string(line_no) + ")" : what),
          line(line_no) {}
};

}  // namespace oae
