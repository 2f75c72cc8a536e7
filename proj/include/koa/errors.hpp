#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace koa {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/image shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Object used before it was set up (e.g. optimizer slots).
class StateError : public Error {
 public:
  using Error::Error;
};

// Malformed text input. `line` is 1-based, 0 when not tied to a line.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        source_(source),
        line_(line) {}

  const std::string& source() const noexcept { return source_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string source_;
  std::size_t line_;
};

// Fewer than two knee regions found in a probability map.
class DetectionError : public Error {
 public:
  explicit DetectionError(std::size_t components)
      : Error("detection failed: expected 2 components, found " + std::to_string(components)),
        components_(components) {}

  std::size_t components() const noexcept { return components_; }

 private:
  std::size_t components_;
};

// Weight file problems; each failure mode has its own kind.
class WeightFileError : public Error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, Truncated, DtypeMismatch, ShapeMismatch };

  WeightFileError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace koa
