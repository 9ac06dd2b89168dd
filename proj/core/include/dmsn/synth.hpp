// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dmsn/boxes.hpp"
#include "dmsn/tensor.hpp"

namespace dmsn {

struct Appearance {
  std::vector<std::array<double, 3>> background_palette;  // RGB in [0,1]
  double brightness_shift = 0.0;                          // in [-0.5, 0.5]
  double noise_sigma = 0.0;
  double hue_rotation_deg = 0.0;  // [0, 360)
};

struct DomainSpec {
  int domain_id = 0;
  Appearance appearance;
  int num_images = 0;
  int image_h = 64, image_w = 64;
  std::vector<std::string> classes;  // shape kinds, shared across all domains
  int objects_min = 1, objects_max = 3;
};

struct BoxAnnotation {
  int class_id = 0;
  Box box;
};

struct ImageSample {
  Tensor pixels;  // [3,H,W], RGB in [0,1], quantized to the 8-bit grid
  int domain_id = 0;
  std::vector<BoxAnnotation> boxes;
  std::string sample_id;
};

using Dataset = std::map<int, std::vector<ImageSample>>;

/// Deterministic per-image seed derivation; safe for parallel workers.
uint64_t sample_seed(uint64_t dataset_seed, const std::string& sample_id);

/// Renders all domains. Deterministic in (specs, seed). Throws ConfigError on
/// inconsistent class lists / image sizes or degenerate image dimensions.
Dataset generate_dataset(const std::vector<DomainSpec>& specs, uint64_t seed);

/// Writes root/manifest.json, root/<domain>/<sample>.png (lossless) and
/// root/<domain>/annotations.jsonl. Returns the manifest path.
std::string save_dataset(const Dataset& dataset, const std::vector<DomainSpec>& specs,
                         const std::string& root);

struct LoadedDataset {
  Dataset data;
  std::vector<DomainSpec> specs;
  std::vector<std::string> classes;
};

/// Loads and checksum-verifies a saved dataset. Throws IoError when the
/// manifest is missing and CorruptionError on checksum mismatch.
LoadedDataset load_dataset(const std::string& root);

/// Returns a copy of the sample list with annotations removed (the trainer's
/// view of the unlabeled target domain).
std::vector<ImageSample> strip_labels(const std::vector<ImageSample>& samples);

}  // namespace dmsn
