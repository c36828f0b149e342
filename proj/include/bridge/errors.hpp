#pragma once

#include <stdexcept>
#include <string>

namespace bridge {

struct ParseError : std::runtime_error {
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_number(line) {}
  std::size_t line_number;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace bridge
