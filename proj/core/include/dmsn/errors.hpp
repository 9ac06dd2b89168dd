// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dmsn {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

struct CorruptionError : std::runtime_error {
  explicit CorruptionError(const std::string& m) : std::runtime_error("corruption: " + m) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};

struct NumericFault : std::runtime_error {
  explicit NumericFault(const std::string& m) : std::runtime_error("numeric fault: " + m) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& m) : std::runtime_error("contract violation: " + m) {}
};

}  // namespace dmsn
