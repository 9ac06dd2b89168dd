// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "dmsn/autodiff.hpp"
#include "dmsn/tensor.hpp"

namespace dmsn {

using Rng = std::mt19937_64;

/// Named map of parameter tensors; the unit of EMA aggregation and
/// checkpointing. Ordered so iteration is deterministic.
using ParamSet = std::map<std::string, Tensor>;

/// Name -> parameter variable. Modules register their leaves here so the
/// trainer, checkpointer and EMA aggregator can address them uniformly.
class ParamRegistry {
 public:
  void add(const std::string& name, const ad::VarPtr& v);
  const ad::VarPtr& get(const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) > 0; }

  /// All parameters whose name starts with `prefix`, name order.
  std::vector<ad::VarPtr> with_prefix(const std::string& prefix) const;
  /// Snapshot of values under `prefix`, keys with the prefix stripped.
  ParamSet snapshot(const std::string& prefix) const;
  /// Writes `set` values back into registered vars under `prefix`.
  void load(const std::string& prefix, const ParamSet& set);

  const std::map<std::string, ad::VarPtr>& all() const { return vars_; }

 private:
  std::map<std::string, ad::VarPtr> vars_;
};

/// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_uniform_fanin(Tensor& t, int fan_in, Rng& rng, double gain = 1.0);

struct Conv2d {
  ad::VarPtr w, b;
  int stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng);
  ad::VarPtr operator()(const ad::VarPtr& x) const { return ad::conv2d(x, w, b, stride, pad); }
  void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct Dense {
  ad::VarPtr w, b;

  Dense() = default;
  Dense(int in_dim, int out_dim, Rng& rng);
  ad::VarPtr operator()(const ad::VarPtr& x) const { return ad::linear(x, w, b); }
  void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

/// Plain SGD with momentum. Velocity buffers are keyed by parameter name so
/// optimizer state can ride along in checkpoints.
class SgdMomentum {
 public:
  /// `lr_scale` holds an optional per-parameter learning-rate multiplier
  /// (empty = 1.0 for all); useful for training fresh heads faster than a
  /// shared backbone.
  SgdMomentum(std::vector<std::pair<std::string, ad::VarPtr>> params, double momentum,
              std::vector<double> lr_scale = {});

  void zero_grad();
  void step(double lr);

  std::map<std::string, Tensor> state() const;
  void load_state(const std::map<std::string, Tensor>& s);

 private:
  std::vector<std::pair<std::string, ad::VarPtr>> params_;
  std::vector<Tensor> velocity_;
  std::vector<double> lr_scale_;
  double momentum_;
};

}  // namespace dmsn
