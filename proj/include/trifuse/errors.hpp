// Copyright 2026 The Trifuse Authors
// Error types shared across the library
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <stdexcept>
#include <string>

namespace trifuse {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Input data violates a documented precondition (empty audio, bad range, ...).
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

/// Tensor or layer shapes are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A static configuration value is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An API contract was violated (non-scalar loss, stage ordering, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A file could not be parsed or fails dataset validation.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace trifuse
