// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dmsn/checkpoint.hpp"
#include "dmsn/consistency.hpp"
#include "dmsn/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dmsn {

TrainMode parse_train_mode(const std::string& s) {
  if (s == "dmsn") return TrainMode::kDmsn;
  if (s == "combined") return TrainMode::kCombined;
  if (s == "combined_da") return TrainMode::kCombinedDa;
  if (s == "single_da") return TrainMode::kSingleDa;
  throw ConfigError("unknown mode: " + s);
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kDmsn: return "dmsn";
    case TrainMode::kCombined: return "combined";
    case TrainMode::kCombinedDa: return "combined_da";
    case TrainMode::kSingleDa: return "single_da";
  }
  return "?";
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config: " + path);
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw ConfigError("bad config line " + std::to_string(lineno));
      continue;
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "gamma") cfg.gamma = std::stod(val);
    else if (key == "lambda_tradeoff") cfg.lambda_tradeoff = std::stod(val);
    else if (key == "alpha_ema") cfg.alpha_ema = std::stod(val);
    else if (key == "n_proposals") cfg.n_proposals = std::stoi(val);
    else if (key == "lmb_capacity") cfg.lmb_capacity = std::stoi(val);
    else if (key == "lr") cfg.lr = std::stod(val);
    else if (key == "momentum") cfg.momentum = std::stod(val);
    else if (key == "epochs") cfg.epochs = std::stoi(val);
    else if (key == "phase2_start_epoch") cfg.phase2_start_epoch = std::stoi(val);
    else if (key == "seed") cfg.seed = std::stoull(val);
    else if (key == "mode") cfg.mode = parse_train_mode(val);
    else if (key == "data_root") cfg.data_root = val;
    else if (key == "train_split") cfg.train_split = val;
    else if (key == "target_domain") cfg.target_domain = std::stoi(val);
    else if (key == "single_source") cfg.single_source = std::stoi(val);
    else if (key == "probe_interval") cfg.probe_interval = std::stoi(val);
    else if (key == "probe_size") cfg.probe_size = std::stoi(val);
    else if (key == "grl_scale") cfg.grl_scale = std::stod(val);
    else if (key == "d_lr_mult") cfg.d_lr_mult = std::stod(val);
    else if (key == "source_domains") {
      cfg.source_domains.clear();
      std::stringstream ss(val);
      std::string tok;
      while (std::getline(ss, tok, ',')) cfg.source_domains.push_back(std::stoi(tok));
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  cfg.validate();
  return cfg;
}

void TrainConfig::validate() const {
  if (alpha_ema < 0 || alpha_ema >= 1) throw ConfigError("alpha_ema must lie in [0,1)");
  if (phase2_start_epoch > epochs) throw ConfigError("phase2_start_epoch must be <= epochs");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (n_proposals < 1) throw ConfigError("n_proposals must be positive");
  if (lmb_capacity < 1) throw ConfigError("lmb_capacity must be positive");
  if (lr <= 0) throw ConfigError("lr must be positive");
  if (gamma < 0) throw ConfigError("gamma must be >= 0");
  if (d_lr_mult <= 0) throw ConfigError("d_lr_mult must be positive");
  if (mode == TrainMode::kSingleDa && single_source < 0)
    throw ConfigError("single_da mode needs single_source");
}

namespace {
bool alignment_enabled(TrainMode m) { return m != TrainMode::kCombined; }
}  // namespace

Trainer::Trainer(TrainConfig cfg, LoadedDataset dataset)
    : cfg_(std::move(cfg)), data_(std::move(dataset)), rng_(cfg_.seed) {
  cfg_.validate();
  if (data_.data.count(cfg_.target_domain) == 0)
    throw ConfigError("target domain not present in dataset");

  std::vector<int> sources = cfg_.source_domains;
  if (sources.empty()) {
    for (const auto& [id, _] : data_.data) {
      if (id != cfg_.target_domain) sources.push_back(id);
    }
  }
  if (sources.empty()) throw ConfigError("no source domains");
  for (int s : sources) {
    if (data_.data.count(s) == 0)
      throw ConfigError("source domain missing: " + std::to_string(s));
  }

  // pool layout per mode
  if (cfg_.mode == TrainMode::kDmsn) {
    for (int s : sources) source_pools_.push_back(data_.data.at(s));
  } else if (cfg_.mode == TrainMode::kSingleDa) {
    source_pools_.push_back(data_.data.at(cfg_.single_source));
  } else {
    std::vector<ImageSample> merged;
    for (int s : sources) {
      const auto& v = data_.data.at(s);
      merged.insert(merged.end(), v.begin(), v.end());
    }
    source_pools_.push_back(std::move(merged));
  }
  target_pool_ = strip_labels(data_.data.at(cfg_.target_domain));

  ModelConfig mc = cfg_.model;
  mc.num_classes = static_cast<int>(data_.classes.size());
  mc.num_sources = static_cast<int>(source_pools_.size());
  if (!data_.specs.empty()) {
    mc.image_h = data_.specs[0].image_h;
    mc.image_w = data_.specs[0].image_w;
  }
  model_ = std::make_unique<DetectorModel>(mc, cfg_.seed);
  heads_ = std::make_unique<AlignmentHeads>(mc, cfg_.seed + 0x9e3779b9ull);
  bank_ = std::make_unique<LossMemoryBank>(mc.num_sources, cfg_.lmb_capacity);
  beta_.assign(static_cast<size_t>(mc.num_sources), 1.0 / mc.num_sources);

  // carve the probe set out of the training pools (held out)
  if (alignment_enabled(cfg_.mode)) {
    const int p = cfg_.probe_size;
    for (int i = 0; i < mc.num_sources; ++i) {
      auto& pool = source_pools_[static_cast<size_t>(i)];
      const int take = std::min<int>(p, static_cast<int>(pool.size()) / 2);
      for (int k = 0; k < take; ++k) probe_pool_.push_back({i, pool[static_cast<size_t>(k)]});
      pool.erase(pool.begin(), pool.begin() + take);
    }
    const int take = std::min<int>(p, static_cast<int>(target_pool_.size()) / 2);
    for (int k = 0; k < take; ++k)
      probe_pool_.push_back({mc.num_sources, target_pool_[static_cast<size_t>(k)]});
    target_pool_.erase(target_pool_.begin(), target_pool_.begin() + take);
  }
  for (const auto& pool : source_pools_) {
    if (pool.empty()) throw ConfigError("empty source pool after probe split");
  }
  if (target_pool_.empty()) throw ConfigError("empty target pool");

  std::vector<std::pair<std::string, ad::VarPtr>> opt_params;
  std::vector<double> lr_scale;
  for (const auto& [name, v] : model_->registry().all()) {
    if (name.rfind(model_->branch_prefix(mc.pseudo_branch()), 0) == 0) continue;  // EMA-only
    opt_params.emplace_back("model/" + name, v);
    lr_scale.push_back(1.0);
  }
  if (alignment_enabled(cfg_.mode)) {
    // fresh discriminator heads train faster than the shared backbone so the
    // adversarial race starts from a competent discriminator
    for (const auto& [name, v] : heads_->registry().all()) {
      opt_params.emplace_back("heads/" + name, v);
      lr_scale.push_back(cfg_.d_lr_mult);
    }
  }
  optimizer_ = std::make_unique<SgdMomentum>(std::move(opt_params), cfg_.momentum,
                                             std::move(lr_scale));
}

double Trainer::cosine_lr(int step, int total_steps) const {
  return cfg_.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

std::vector<double> Trainer::current_beta() const { return beta_; }

void Trainer::enter_phase2() {
  const int M = model_->config().num_sources;
  std::vector<ParamSet> sources;
  for (int i = 0; i < M; ++i) sources.push_back(model_->branch_params(i));
  const std::vector<double> b =
      bank_->all_nonempty() ? compute_beta(bank_->means()).beta : beta_;
  beta_ = b;
  model_->load_branch_params(model_->config().pseudo_branch(), init_pseudo(sources, b));
  pseudo_initialized_ = true;
  model_->set_pseudo_initialized(true);
}

void Trainer::apply_ema_update() {
  const int M = model_->config().num_sources;
  std::vector<ParamSet> sources;
  for (int i = 0; i < M; ++i) sources.push_back(model_->branch_params(i));
  if (bank_->all_nonempty()) beta_ = compute_beta(bank_->means()).beta;
  const ParamSet pseudo = model_->branch_params(model_->config().pseudo_branch());
  ParamSet updated = ema_update(pseudo, sources, beta_, cfg_.alpha_ema);
  ema_residual_ = param_distance(updated, init_pseudo(sources, beta_));
  model_->load_branch_params(model_->config().pseudo_branch(), updated);
}

double Trainer::probe_accuracy() {
  if (probe_pool_.empty()) return -1.0;
  int64_t correct = 0, total = 0;
  for (const auto& [channel, img] : probe_pool_) {
    const FeatureMap low = model_->extract_low(img);
    auto dmap = (heads_->d_low())(ad::constant(low.activations->val));
    const Tensor& m = dmap->val;
    const int K = m.dim(0), H = m.dim(1), W = m.dim(2);
    // one label per image: average the per-location scores, then argmax
    std::vector<double> mean(static_cast<size_t>(K), 0.0);
    for (int k = 0; k < K; ++k) {
      for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) mean[static_cast<size_t>(k)] += m.at3(k, h, w);
      }
    }
    int best = 0;
    for (int k = 1; k < K; ++k) {
      if (mean[static_cast<size_t>(k)] > mean[static_cast<size_t>(best)]) best = k;
    }
    correct += (best == channel) ? 1 : 0;
    ++total;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

Trainer::StepStats Trainer::train_step(const std::vector<ImageSample>& source_batch,
                                       const ImageSample& target_image, int phase, double lr) {
  try {
    return step_impl(source_batch, target_image, phase, lr);
  } catch (const NumericFault&) {
    ++fault_count_;
    StepStats s;
    s.faulted = true;
    return s;
  }
}

Trainer::StepStats Trainer::step_impl(const std::vector<ImageSample>& source_batch,
                                      const ImageSample& target_image, int phase, double lr) {
  const int M = model_->config().num_sources;
  if (static_cast<int>(source_batch.size()) != M)
    throw ContractError("train_step: need one image per source");
  const bool align = alignment_enabled(cfg_.mode);
  const bool phase2 = phase == 2 && cfg_.mode == TrainMode::kDmsn;
  const GrlGate gate{cfg_.grl_scale};

  StepStats stats;
  optimizer_->zero_grad();

  std::vector<ad::VarPtr> terms;
  std::vector<ad::VarPtr> adapt_terms;  // scaled by lambda

  const FeatureMap low_t = model_->extract_low(target_image);
  std::vector<FeatureMap> highs_t;  // target through each source branch

  std::vector<ad::VarPtr> low_components;
  for (int i = 0; i < M; ++i) {
    const FeatureMap low_i = model_->extract_low(source_batch[static_cast<size_t>(i)]);
    const FeatureMap high_i = model_->extract_high(i, low_i);
    const DetLossResult det =
        model_->detection_loss_on(i, high_i, source_batch[static_cast<size_t>(i)].boxes, rng_);
    stats.l_det += det.total->scalar();
    terms.push_back(det.total);

    if (align) {
      auto dmap = (heads_->d_low())(grl_apply(gate, low_i.activations));
      low_components.push_back(low_level_source_loss(dmap, i));

      const FeatureMap high_t_i = model_->extract_high(i, low_t);
      highs_t.push_back(high_t_i);
      auto d_s = (heads_->d_high(i))(grl_apply(gate, high_i.activations));
      auto d_t = (heads_->d_high(i))(grl_apply(gate, high_t_i.activations));
      auto lh = high_level_domain_loss({d_s}, {d_t}, cfg_.gamma);
      stats.l_high_per_source.push_back(lh->scalar());
      stats.l_high += lh->scalar();
      adapt_terms.push_back(lh);
    }
  }

  if (align) {
    auto dmap_t = (heads_->d_low())(grl_apply(gate, low_t.activations));
    low_components.push_back(low_level_target_loss(dmap_t));
    auto l_low = low_level_total_loss(low_components);
    stats.l_low = l_low->scalar();
    adapt_terms.push_back(l_low);
  }

  if (phase2) {
    std::vector<RpnResult> source_rpn;
    std::vector<std::vector<Proposal>> source_sets;
    for (int i = 0; i < M; ++i) {
      source_rpn.push_back(model_->rpn_forward(i, highs_t[static_cast<size_t>(i)], cfg_.n_proposals));
      source_sets.push_back(source_rpn.back().proposals);
    }
    // pseudo subnet forward on detached low features: no gradient through it
    const FeatureMap low_detached{ad::constant(low_t.activations->val), low_t.stride};
    const FeatureMap high_p =
        model_->extract_high(model_->config().pseudo_branch(), low_detached);
    const RpnResult pseudo_rpn =
        model_->rpn_forward(model_->config().pseudo_branch(), high_p, cfg_.n_proposals);

    stats.l_con_discrete = consistency_loss(source_sets, pseudo_rpn.proposals);
    auto surrogate = consistency_surrogate(source_rpn, pseudo_rpn.proposals);
    stats.l_con_surrogate = surrogate->scalar();
    adapt_terms.push_back(surrogate);

    double acc_o = 0;
    int cnt = 0;
    for (const auto& set : source_sets) {
      for (const auto& m : match_proposals(set, pseudo_rpn.proposals)) {
        acc_o += m.best_iou;
        ++cnt;
      }
    }
    stats.mean_overlap = cnt > 0 ? acc_o / cnt : 0;
  }

  if (!adapt_terms.empty())
    terms.push_back(ad::scale(ad::add_scalars(adapt_terms), cfg_.lambda_tradeoff));
  auto total = ad::add_scalars(terms);
  stats.total = total->scalar();
  if (!std::isfinite(stats.total)) throw NumericFault("non-finite total loss");

  ad::backward(total);
  optimizer_->step(lr);

  for (size_t i = 0; i < stats.l_high_per_source.size(); ++i)
    bank_->push(static_cast<int>(i), stats.l_high_per_source[i]);
  return stats;
}

TrainSummary Trainer::run(const std::string& out_dir) {
  fs::create_directories(out_dir);
  const int M = model_->config().num_sources;
  size_t steps_per_epoch = 0;
  for (const auto& p : source_pools_) steps_per_epoch = std::max(steps_per_epoch, p.size());
  const int total_steps = cfg_.epochs * static_cast<int>(steps_per_epoch);

  const std::string csv_path = out_dir + "/training_log.csv";
  std::ofstream csv;
  if (epoch_ > 0 && fs::exists(csv_path)) {
    csv.open(csv_path, std::ios::app);
  } else {
    csv.open(csv_path);
    csv << "t,epoch,phase,lr,total,l_det,l_low,l_high,l_con,l_con_surrogate,mean_overlap,"
           "ema_residual,probe_acc,faulted";
    for (int i = 0; i < M; ++i) csv << ",V" << i;
    for (int i = 0; i < M; ++i) csv << ",beta" << i;
    csv << "\n";
  }

  TrainSummary summary;
  double probe_peak = 0, probe_last = 0;

  for (; epoch_ < cfg_.epochs; ++epoch_) {
    // fresh per-epoch visit orders, all drawn from the single training stream
    std::vector<std::vector<size_t>> orders;
    for (const auto& pool : source_pools_) {
      std::vector<size_t> o(pool.size());
      std::iota(o.begin(), o.end(), 0);
      std::shuffle(o.begin(), o.end(), rng_);
      orders.push_back(std::move(o));
    }
    std::vector<size_t> target_order(target_pool_.size());
    std::iota(target_order.begin(), target_order.end(), 0);
    std::shuffle(target_order.begin(), target_order.end(), rng_);

    for (size_t s = 0; s < steps_per_epoch; ++s) {
      const int phase = (cfg_.mode == TrainMode::kDmsn && epoch_ >= cfg_.phase2_start_epoch) ? 2 : 1;
      if (phase == 2 && !pseudo_initialized_) enter_phase2();
      const double lr = cosine_lr(step_, total_steps);

      std::vector<ImageSample> batch;
      for (int i = 0; i < M; ++i) {
        const auto& pool = source_pools_[static_cast<size_t>(i)];
        batch.push_back(pool[orders[static_cast<size_t>(i)][s % pool.size()]]);
      }
      const ImageSample& target = target_pool_[target_order[s % target_pool_.size()]];

      StepStats st = train_step(batch, target, phase, lr);
      if (phase == 2 && !st.faulted) apply_ema_update();

      double probe = -1;
      if (!probe_pool_.empty() && step_ % cfg_.probe_interval == 0) {
        probe = probe_accuracy();
        if (phase == 1) {
          probe_peak = std::max(probe_peak, probe);
          probe_last = probe;
        }
      }

      std::vector<double> vmeans(static_cast<size_t>(M), 0.0);
      for (int i = 0; i < M; ++i) {
        if (auto m = bank_->mean(i)) vmeans[static_cast<size_t>(i)] = *m;
      }
      csv << step_ << "," << epoch_ << "," << phase << "," << lr << "," << st.total << ","
          << st.l_det << "," << st.l_low << "," << st.l_high << "," << st.l_con_discrete << ","
          << st.l_con_surrogate << "," << st.mean_overlap << "," << ema_residual_ << "," << probe
          << "," << (st.faulted ? 1 : 0);
      for (double v : vmeans) csv << "," << v;
      for (double b : beta_) csv << "," << b;
      csv << "\n";
      ++step_;
    }
    save_train_checkpoint(out_dir + "/ckpt_epoch_" + std::to_string(epoch_) + ".dmsn");
  }
  csv.close();

  const std::string final_path = out_dir + "/final.dmsn";
  save_train_checkpoint(final_path);

  summary.total_steps = step_;
  summary.faulted_steps = fault_count_;
  summary.failed = fault_count_ > step_ / 100;
  summary.phase1_probe_peak = probe_peak;
  summary.phase1_probe_final = probe_last;
  summary.final_beta = beta_;
  summary.final_checkpoint = final_path;

  json j;
  j["total_steps"] = summary.total_steps;
  j["faulted_steps"] = summary.faulted_steps;
  j["status"] = summary.failed ? "failed" : "ok";
  j["phase1_probe_peak"] = summary.phase1_probe_peak;
  j["phase1_probe_final"] = summary.phase1_probe_final;
  j["final_beta"] = summary.final_beta;
  j["mode"] = to_string(cfg_.mode);
  j["final_checkpoint"] = final_path;
  std::ofstream sj(out_dir + "/summary.json");
  sj << j.dump(2) << "\n";
  return summary;
}

void Trainer::save_train_checkpoint(const std::string& path) const {
  Archive a;
  a.metadata = model_->checkpoint_metadata();
  a.metadata["kind"] = "dmsn_train_state";
  a.metadata["step"] = step_;
  a.metadata["epoch"] = epoch_;
  a.metadata["pseudo_initialized"] = pseudo_initialized_;
  a.metadata["fault_count"] = fault_count_;
  a.metadata["beta"] = beta_;
  a.metadata["lmb"] = bank_->to_json();
  std::ostringstream rs;
  rs << rng_;
  a.metadata["rng"] = rs.str();
  for (const auto& [name, v] : model_->registry().all()) a.arrays[name] = v->val;
  for (const auto& [name, v] : heads_->registry().all()) a.arrays["heads/" + name] = v->val;
  for (const auto& [name, t] : optimizer_->state()) a.arrays["opt/" + name] = t;
  save_archive(path, a);
}

void Trainer::resume_from(const std::string& path) {
  Archive a = load_archive(path);
  if (a.metadata.value("kind", "") != "dmsn_train_state")
    throw CorruptionError("not a training checkpoint: " + path);
  for (const auto& [name, v] : model_->registry().all()) {
    auto it = a.arrays.find(name);
    if (it == a.arrays.end()) throw CorruptionError("resume: missing array " + name);
    v->val = it->second;
  }
  for (const auto& [name, v] : heads_->registry().all()) {
    auto it = a.arrays.find("heads/" + name);
    if (it == a.arrays.end()) throw CorruptionError("resume: missing array heads/" + name);
    v->val = it->second;
  }
  std::map<std::string, Tensor> opt_state;
  for (const auto& [name, t] : a.arrays) {
    if (name.rfind("opt/", 0) == 0) opt_state[name.substr(4)] = t;
  }
  optimizer_->load_state(opt_state);
  step_ = a.metadata.at("step").get<int>();
  epoch_ = a.metadata.at("epoch").get<int>() + 1;  // checkpoints land at epoch boundaries
  pseudo_initialized_ = a.metadata.at("pseudo_initialized").get<bool>();
  model_->set_pseudo_initialized(pseudo_initialized_);
  fault_count_ = a.metadata.at("fault_count").get<int>();
  beta_ = a.metadata.at("beta").get<std::vector<double>>();
  *bank_ = LossMemoryBank::from_json(a.metadata.at("lmb"));
  std::istringstream rs(a.metadata.at("rng").get<std::string>());
  rs >> rng_;
}

}  // namespace dmsn
