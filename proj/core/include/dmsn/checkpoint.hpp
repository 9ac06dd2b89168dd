// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "dmsn/tensor.hpp"

namespace dmsn {

/// Single-file archive of named double arrays plus a JSON metadata record.
struct Archive {
  nlohmann::json metadata;
  std::map<std::string, Tensor> arrays;
};

void save_archive(const std::string& path, const Archive& a);
Archive load_archive(const std::string& path);

}  // namespace dmsn
