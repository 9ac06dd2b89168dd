// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/psl.hpp"

#include <cmath>

#include "dmsn/errors.hpp"

namespace dmsn {

LossMemoryBank::LossMemoryBank(int num_sources, int capacity) : capacity_(capacity) {
  if (num_sources < 1) throw ConfigError("LossMemoryBank: need at least one source");
  if (capacity < 1) throw ConfigError("LossMemoryBank: capacity must be positive");
  banks_.resize(static_cast<size_t>(num_sources));
}

void LossMemoryBank::push(int source, double value) {
  if (source < 0 || source >= num_sources()) throw ContractError("lmb_push: bad source index");
  if (!std::isfinite(value)) throw NumericFault("lmb_push: non-finite loss value");
  if (value < 0) throw ContractError("lmb_push: negative loss value");
  auto& b = banks_[static_cast<size_t>(source)];
  b.push_back(value);
  if (static_cast<int>(b.size()) > capacity_) b.pop_front();
}

int LossMemoryBank::size(int source) const {
  if (source < 0 || source >= num_sources()) throw ContractError("lmb size: bad source index");
  return static_cast<int>(banks_[static_cast<size_t>(source)].size());
}

bool LossMemoryBank::all_nonempty() const {
  for (const auto& b : banks_) {
    if (b.empty()) return false;
  }
  return true;
}

std::optional<double> LossMemoryBank::mean(int source) const {
  const auto& b = banks_[static_cast<size_t>(source)];
  if (b.empty()) return std::nullopt;
  double s = 0;
  for (double v : b) s += v;
  return s / static_cast<double>(b.size());
}

std::vector<double> LossMemoryBank::means() const {
  std::vector<double> out;
  for (int i = 0; i < num_sources(); ++i) {
    auto m = mean(i);
    if (!m) throw ContractError("LossMemoryBank: mean undefined on empty bank");
    out.push_back(*m);
  }
  return out;
}

nlohmann::json LossMemoryBank::to_json() const {
  nlohmann::json j;
  j["capacity"] = capacity_;
  j["banks"] = nlohmann::json::array();
  for (const auto& b : banks_) j["banks"].push_back(std::vector<double>(b.begin(), b.end()));
  return j;
}

LossMemoryBank LossMemoryBank::from_json(const nlohmann::json& j) {
  LossMemoryBank lmb(static_cast<int>(j.at("banks").size()), j.at("capacity").get<int>());
  for (size_t i = 0; i < j.at("banks").size(); ++i) {
    for (double v : j.at("banks").at(i).get<std::vector<double>>())
      lmb.push(static_cast<int>(i), v);
  }
  return lmb;
}

SourceWeights compute_beta(const std::vector<double>& means) {
  if (means.empty()) throw ContractError("compute_beta: empty means");
  double total = 0;
  for (double v : means) {
    if (!std::isfinite(v) || v < 0) throw ContractError("compute_beta: means must be finite and >= 0");
    total += v;
  }
  SourceWeights w;
  if (total <= 0) {
    w.fallback_uniform = true;
    w.beta.assign(means.size(), 1.0 / static_cast<double>(means.size()));
  } else {
    for (double v : means) w.beta.push_back(v / total);
  }
  return w;
}

namespace {
void check_compatible(const ParamSet& ref, const ParamSet& other, const char* what) {
  if (ref.size() != other.size()) throw ShapeError(std::string(what) + ": key count mismatch");
  auto it = ref.begin();
  auto jt = other.begin();
  for (; it != ref.end(); ++it, ++jt) {
    if (it->first != jt->first) throw ShapeError(std::string(what) + ": key mismatch " + it->first);
    if (!it->second.same_shape(jt->second))
      throw ShapeError(std::string(what) + ": shape mismatch " + it->first);
  }
}
}  // namespace

ParamSet ema_update(const ParamSet& pseudo, const std::vector<ParamSet>& sources,
                    const std::vector<double>& beta, double alpha) {
  if (alpha < 0 || alpha >= 1) throw ContractError("ema_update: alpha must lie in [0,1)");
  if (sources.empty() || sources.size() != beta.size())
    throw ContractError("ema_update: sources/beta size mismatch");
  for (const auto& s : sources) check_compatible(pseudo, s, "ema_update");
  ParamSet out = pseudo;
  for (auto& [key, t] : out) {
    for (int64_t i = 0; i < t.numel(); ++i) {
      double mix = 0;
      for (size_t s = 0; s < sources.size(); ++s)
        mix += beta[s] * sources[s].at(key)[i];
      t[i] = alpha * t[i] + (1.0 - alpha) * mix;
    }
  }
  return out;
}

ParamSet init_pseudo(const std::vector<ParamSet>& sources, const std::vector<double>& beta) {
  if (sources.empty() || sources.size() != beta.size())
    throw ContractError("init_pseudo: sources/beta size mismatch");
  ParamSet zero = sources[0];
  for (auto& [k, t] : zero) t.fill(0.0);
  return ema_update(zero, sources, beta, 0.0);
}

double param_distance(const ParamSet& a, const ParamSet& b) {
  check_compatible(a, b, "param_distance");
  double acc = 0;
  auto it = a.begin();
  auto jt = b.begin();
  for (; it != a.end(); ++it, ++jt) {
    for (int64_t i = 0; i < it->second.numel(); ++i) {
      const double d = it->second[i] - jt->second[i];
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

}  // namespace dmsn
