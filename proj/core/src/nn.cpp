// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/nn.hpp"

#include <cmath>

#include "dmsn/errors.hpp"

namespace dmsn {

void ParamRegistry::add(const std::string& name, const ad::VarPtr& v) {
  if (vars_.count(name)) throw ContractError("duplicate parameter name: " + name);
  vars_[name] = v;
}

const ad::VarPtr& ParamRegistry::get(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

std::vector<ad::VarPtr> ParamRegistry::with_prefix(const std::string& prefix) const {
  std::vector<ad::VarPtr> out;
  for (const auto& [name, v] : vars_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(v);
  }
  return out;
}

ParamSet ParamRegistry::snapshot(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, v] : vars_) {
    if (name.rfind(prefix, 0) == 0) out[name.substr(prefix.size())] = v->val;
  }
  return out;
}

void ParamRegistry::load(const std::string& prefix, const ParamSet& set) {
  for (const auto& [key, t] : set) {
    const auto& v = get(prefix + key);
    if (!v->val.same_shape(t))
      throw ShapeError("parameter shape mismatch on load: " + prefix + key);
    v->val = t;
  }
}

void init_uniform_fanin(Tensor& t, int fan_in, Rng& rng, double gain) {
  const double a = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-a, a);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
}

Conv2d::Conv2d(int in_ch, int out_ch, int ksize, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  Tensor wt({out_ch, in_ch, ksize, ksize});
  Tensor bt({out_ch});
  const int fan_in = in_ch * ksize * ksize;
  init_uniform_fanin(wt, fan_in, rng, std::sqrt(6.0));
  init_uniform_fanin(bt, fan_in, rng);
  w = ad::leaf(std::move(wt));
  b = ad::leaf(std::move(bt));
}

void Conv2d::register_into(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + "/w", w);
  reg.add(prefix + "/b", b);
}

Dense::Dense(int in_dim, int out_dim, Rng& rng) {
  Tensor wt({out_dim, in_dim});
  Tensor bt({out_dim});
  init_uniform_fanin(wt, in_dim, rng, std::sqrt(6.0));
  init_uniform_fanin(bt, in_dim, rng);
  w = ad::leaf(std::move(wt));
  b = ad::leaf(std::move(bt));
}

void Dense::register_into(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + "/w", w);
  reg.add(prefix + "/b", b);
}

SgdMomentum::SgdMomentum(std::vector<std::pair<std::string, ad::VarPtr>> params, double momentum,
                         std::vector<double> lr_scale)
    : params_(std::move(params)), lr_scale_(std::move(lr_scale)), momentum_(momentum) {
  if (!lr_scale_.empty() && lr_scale_.size() != params_.size())
    throw ContractError("SgdMomentum: lr_scale size must match params");
  velocity_.reserve(params_.size());
  for (const auto& [name, v] : params_) velocity_.push_back(Tensor::zeros(v->val.shape()));
}

void SgdMomentum::zero_grad() {
  for (auto& [name, v] : params_) {
    v->ensure_grad();
    v->grad.fill(0.0);
  }
}

void SgdMomentum::step(double lr) {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& v = params_[i].second;
    v->ensure_grad();
    Tensor& vel = velocity_[i];
    const double eta = lr * (lr_scale_.empty() ? 1.0 : lr_scale_[i]);
    for (int64_t j = 0; j < v->val.numel(); ++j) {
      vel[j] = momentum_ * vel[j] + v->grad[j];
      v->val[j] -= eta * vel[j];
    }
  }
}

std::map<std::string, Tensor> SgdMomentum::state() const {
  std::map<std::string, Tensor> s;
  for (size_t i = 0; i < params_.size(); ++i) s[params_[i].first] = velocity_[i];
  return s;
}

void SgdMomentum::load_state(const std::map<std::string, Tensor>& s) {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto it = s.find(params_[i].first);
    if (it == s.end()) throw CorruptionError("missing optimizer state: " + params_[i].first);
    if (!it->second.same_shape(velocity_[i]))
      throw ShapeError("optimizer state shape mismatch: " + params_[i].first);
    velocity_[i] = it->second;
  }
}

}  // namespace dmsn
