#ifndef FUNDSEG_ERROR_HPP
#define FUNDSEG_ERROR_HPP

#include <stdexcept>
#include <string>

namespace fundseg {

/// Base of every error thrown by the library. The CLI maps `kind()` to exit codes.
class Error : public std::runtime_error {
public:
  enum class Kind { shape, index, format, config, data, io, usage, numerical };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

private:
  Kind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(Kind::shape, "shape error: " + w) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& w) : Error(Kind::index, "index error: " + w) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(Kind::format, "format error: " + w) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(Kind::config, "config error: " + w) {}
};

struct DataError : Error {
  explicit DataError(const std::string& w) : Error(Kind::data, "data error: " + w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(Kind::io, "io error: " + w) {}
};

struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(Kind::usage, "usage error: " + w) {}
};

/// Divergence during training or a gradient-check breach.
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(Kind::numerical, "numerical error: " + w) {}
};

} // namespace fundseg

#endif
