// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <optional>
#include <vector>

#include <json.hpp>

#include "dmsn/nn.hpp"

namespace dmsn {

/// Per-source ring buffer of recent high-level domain-loss values. Means over
/// the buffers drive the dynamic source weights.
class LossMemoryBank {
 public:
  LossMemoryBank(int num_sources, int capacity);

  /// Appends a loss value; the oldest entry is evicted at capacity. Rejects
  /// non-finite or negative values without modifying the bank.
  void push(int source, double value);

  int size(int source) const;
  int capacity() const { return capacity_; }
  int num_sources() const { return static_cast<int>(banks_.size()); }
  bool all_nonempty() const;

  std::optional<double> mean(int source) const;
  /// Means for all sources; throws if any bank is empty.
  std::vector<double> means() const;

  nlohmann::json to_json() const;
  static LossMemoryBank from_json(const nlohmann::json& j);

 private:
  std::vector<std::deque<double>> banks_;
  int capacity_;
};

struct SourceWeights {
  std::vector<double> beta;      // >= 0, sums to 1
  bool fallback_uniform = false; // set when all means were zero
};

/// beta_i = V_i / sum_j V_j. All-zero input falls back to uniform weights.
SourceWeights compute_beta(const std::vector<double>& means);

/// Eq-style EMA aggregation, per key: P_T <- alpha*P_T + (1-alpha)*sum_i beta_i*P_Si.
/// Pure function; key sets and shapes must agree across all inputs.
ParamSet ema_update(const ParamSet& pseudo, const std::vector<ParamSet>& sources,
                    const std::vector<double>& beta, double alpha);

/// Phase-2 entry state: the beta-weighted average of the current source sets.
ParamSet init_pseudo(const std::vector<ParamSet>& sources, const std::vector<double>& beta);

/// L2 distance between two parameter sets (residual-norm logging).
double param_distance(const ParamSet& a, const ParamSet& b);

}  // namespace dmsn
