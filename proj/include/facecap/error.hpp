#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace facecap {

// All library failures surface as facecap::Error (or a subclass).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Text-format failure tied to a 1-based line number of the input.
class ParseError : public Error {
public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

}  // namespace facecap
