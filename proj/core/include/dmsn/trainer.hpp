// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dmsn/alignment.hpp"
#include "dmsn/detector.hpp"
#include "dmsn/psl.hpp"
#include "dmsn/synth.hpp"

namespace dmsn {

/// Training modes. "dmsn" is the full spindle; the others are the baselines
/// of the ordering experiment (single high-level branch).
enum class TrainMode {
  kDmsn,        // M source subnets + pseudo subnet, two-phase schedule
  kCombined,    // supervised-only on merged sources, no adaptation
  kCombinedDa,  // merged sources as one domain, alignment losses on
  kSingleDa,    // one source domain, alignment losses on
};

TrainMode parse_train_mode(const std::string& s);
std::string to_string(TrainMode m);

struct TrainConfig {
  double gamma = 5.0;
  double lambda_tradeoff = 1.0;
  double alpha_ema = 0.99;
  int n_proposals = 256;
  int lmb_capacity = 100;
  double lr = 0.001;
  double momentum = 0.9;
  int epochs = 20;
  int phase2_start_epoch = 10;  // 0-based epoch index at which phase 2 begins
  uint64_t seed = 0;

  TrainMode mode = TrainMode::kDmsn;
  std::string data_root;
  std::string train_split = "train";
  std::vector<int> source_domains;  // empty = all non-target domains
  int target_domain = -1;
  int single_source = -1;  // for kSingleDa

  int probe_interval = 50;
  double d_lr_mult = 10.0;  // lr multiplier for the discriminator heads
  int probe_size = 6;  // held-out probe images per domain
  double grl_scale = 1.0;
  ModelConfig model;  // architecture; num_sources/num_classes filled at setup

  static TrainConfig from_file(const std::string& path);
  void validate() const;
};

struct TrainSummary {
  int total_steps = 0;
  int faulted_steps = 0;
  bool failed = false;
  double phase1_probe_peak = 0;
  double phase1_probe_final = 0;
  std::vector<double> final_beta;
  std::string final_checkpoint;
};

/// Two-phase DMSN training: supervised detection per source subnet plus
/// hierarchical adversarial alignment in phase 1; consistency regularization
/// and EMA pseudo-subnet learning added in phase 2.
class Trainer {
 public:
  Trainer(TrainConfig cfg, LoadedDataset dataset);

  /// Restores model/optimizer/bank/RNG state from an epoch checkpoint.
  void resume_from(const std::string& checkpoint_path);

  TrainSummary run(const std::string& out_dir);

  /// One optimizer step on the given batch; exposed for tests.
  struct StepStats {
    double total = 0, l_det = 0, l_low = 0, l_high = 0;
    double l_con_discrete = 0, l_con_surrogate = 0, mean_overlap = 0;
    std::vector<double> l_high_per_source;
    bool faulted = false;
  };
  StepStats train_step(const std::vector<ImageSample>& source_batch,
                       const ImageSample& target_image, int phase, double lr);

  DetectorModel& model() { return *model_; }
  AlignmentHeads& heads() { return *heads_; }
  LossMemoryBank& bank() { return *bank_; }
  const TrainConfig& config() const { return cfg_; }
  int global_step() const { return step_; }
  int start_epoch() const { return epoch_; }
  bool pseudo_initialized() const { return pseudo_initialized_; }

  double cosine_lr(int step, int total_steps) const;
  double probe_accuracy();
  std::vector<double> current_beta() const;
  void enter_phase2();
  void apply_ema_update();
  double last_ema_residual() const { return ema_residual_; }

  void save_train_checkpoint(const std::string& path) const;

 private:
  StepStats step_impl(const std::vector<ImageSample>& source_batch,
                      const ImageSample& target_image, int phase, double lr);

  TrainConfig cfg_;
  LoadedDataset data_;
  std::vector<std::vector<ImageSample>> source_pools_;  // per model-source index
  std::vector<ImageSample> target_pool_;                // labels stripped
  std::vector<std::pair<int, ImageSample>> probe_pool_; // (domain channel, image)

  std::unique_ptr<DetectorModel> model_;
  std::unique_ptr<AlignmentHeads> heads_;
  std::unique_ptr<SgdMomentum> optimizer_;
  std::unique_ptr<LossMemoryBank> bank_;
  Rng rng_;

  int step_ = 0;
  int epoch_ = 0;
  bool pseudo_initialized_ = false;
  int fault_count_ = 0;
  double ema_residual_ = 0;
  std::vector<double> beta_;
};

}  // namespace dmsn
