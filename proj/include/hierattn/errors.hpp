#pragma once

#include <stdexcept>
#include <string>

namespace hierattn {

// Shape or length disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN / non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition (missing gradients, reused tape, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Sequence longer than a fixed-capacity table.
class CapacityError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Malformed file. Carries the byte offset (or line) where parsing stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace hierattn
