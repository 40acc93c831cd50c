#pragma once

#include <stdexcept>
#include <string>

namespace photobridge {

// Error categories map onto CLI exit codes (see tools/photobridge.cpp):
// ConfigError -> 1, DataError family -> 2, NumericError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed input file line; message carries line number and field.
class ParseError : public DataError {
 public:
  using DataError::DataError;
};

// Unbalanced [IMG]/[/IMG] delimiters.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class IngestionError : public DataError {
 public:
  using DataError::DataError;
};

class RangeError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar loss, double backward, and similar.
class ContractError : public Error {
 public:
  using Error::Error;
};

class StatisticsError : public Error {
 public:
  using Error::Error;
};

}  // namespace photobridge
