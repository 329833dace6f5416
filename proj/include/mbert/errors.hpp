#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mbert {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? ", " : "") << shape[i];
  }
  os << ']';
  return os.str();
}

/// Raised when operand shapes do not conform to a kernel's contract.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string kernel, std::vector<Shape> shapes, const std::string& detail = {})
      : std::invalid_argument(format(kernel, shapes, detail)),
        kernel_(std::move(kernel)),
        shapes_(std::move(shapes)) {}

  const std::string& kernel() const noexcept { return kernel_; }
  const std::vector<Shape>& shapes() const noexcept { return shapes_; }

 private:
  static std::string format(const std::string& kernel, const std::vector<Shape>& shapes,
                            const std::string& detail) {
    std::string msg = kernel + ": shape mismatch";
    for (const auto& s : shapes) {
      msg += ' ';
      msg += shape_str(s);
    }
    if (!detail.empty()) {
      msg += " (" + detail + ")";
    }
    return msg;
  }

  std::string kernel_;
  std::vector<Shape> shapes_;
};

/// Raised when a value that must be finite is not (loss, gradient, norm).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value; the message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input longer than the model's configured maximum.
class SequenceTooLong : public std::length_error {
 public:
  SequenceTooLong(std::size_t length, std::size_t limit)
      : std::length_error("sequence too long: " + std::to_string(length) +
                          " tokens exceeds max_seq_len " + std::to_string(limit)),
        length_(length),
        limit_(limit) {}

  std::size_t length() const noexcept { return length_; }
  std::size_t limit() const noexcept { return limit_; }

 private:
  std::size_t length_;
  std::size_t limit_;
};

/// Malformed or incompatible serialized artifact (tokenizer, corpus, report input).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mbert
