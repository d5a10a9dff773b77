#pragma once

#include <stdexcept>
#include <string>

namespace efr {

/// Base of every exception thrown by the toolkit.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Unsupported or contradictory configuration (kind/distribution combos, ablations).
class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& what) : Error("configuration error: " + what) {}
};

/// Argument outside its documented range.
class ArgumentError : public Error {
  public:
    explicit ArgumentError(const std::string& what) : Error("argument error: " + what) {}
};

/// A solution violates a routing constraint.
class FeasibilityError : public Error {
  public:
    explicit FeasibilityError(const std::string& what) : Error("infeasible solution: " + what) {}
};

/// Malformed TSPLIB/CVRPLIB/container text.
class ParseError : public Error {
  public:
    ParseError(const std::string& what, int line)
        : Error(line > 0 ? "parse error (line " + std::to_string(line) + "): " + what
                         : "parse error: " + what),
          line_(line) {}
    int line() const noexcept { return line_; }

  private:
    int line_;
};

/// Format feature that is recognised but deliberately not handled.
class UnsupportedError : public Error {
  public:
    explicit UnsupportedError(const std::string& what) : Error("unsupported: " + what) {}
};

/// Non-finite values or shape mismatches inside the network.
class NumericError : public Error {
  public:
    explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

/// Decoder reached a state with no selectable node.
class DecodeError : public Error {
  public:
    explicit DecodeError(const std::string& what) : Error("decoding invariant violated: " + what) {}
};

/// Request exceeds a fixed capacity (one-hot pool, exact-oracle size limit).
class CapacityError : public Error {
  public:
    explicit CapacityError(const std::string& what) : Error("capacity error: " + what) {}
};

/// File-system failure; message carries the path.
class IoError : public Error {
  public:
    explicit IoError(const std::string& what) : Error("i/o error: " + what) {}
};

/// Container/checkpoint written by an incompatible version.
class VersionError : public Error {
  public:
    explicit VersionError(const std::string& what) : Error("incompatible version: " + what) {}
};

/// Missing or inconsistent evaluation data (reference lengths, ids).
class DataError : public Error {
  public:
    explicit DataError(const std::string& what) : Error("data error: " + what) {}
};

} // namespace efr
