#pragma once

#include <stdexcept>
#include <string>

namespace stgm {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- ingestion -------------------------------------------------------------

class ParseError : public Error {
 public:
  ParseError(const std::string& msg, long row) : Error(msg + " (row " + std::to_string(row) + ")"), row_(row) {}
  long row() const { return row_; }

 private:
  long row_;
};

class DuplicateKeyError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class EmptyWindowError : public Error {
 public:
  using Error::Error;
};

// --- model fitting ----------------------------------------------------------

class SingularDesignError : public Error {
 public:
  using Error::Error;
};

class EmptyDataError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

class MissingDataError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

// --- variance estimation ----------------------------------------------------

class SingularBreadError : public Error {
 public:
  SingularBreadError(const std::string& msg, double condition_number)
      : Error(msg), condition_number_(condition_number) {}
  double condition_number() const { return condition_number_; }

 private:
  double condition_number_;
};

class NegativeVarianceError : public Error {
 public:
  using Error::Error;
};

class DegenerateDenominatorError : public Error {
 public:
  using Error::Error;
};

}  // namespace stgm
