// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dmsn/detector.hpp"

namespace dmsn {

/// For pseudo proposal rank n (1-based): the best IoU against one source set
/// and the rank that attains it (ties break toward the lower source rank).
struct MatchEntry {
  double best_iou = 0;
  int matched_rank = 1;
};

/// One entry per pseudo proposal, for a single source set.
using MatchResult = std::vector<MatchEntry>;

MatchResult match_proposals(const std::vector<Proposal>& source_set,
                            const std::vector<Proposal>& pseudo_set);

/// The discrete rank-consistency cost:
/// (1/N) sum_n sum_i O_n^i * |n*_i - n|. Reported metric; piecewise constant
/// in network outputs, so not the training signal.
double consistency_loss(const std::vector<std::vector<Proposal>>& source_sets,
                        const std::vector<Proposal>& pseudo_set);

/// Differentiable surrogate with the same zero set on matched pairs: matches
/// (O, n*) are frozen from current proposals, then
/// (1/N) sum_n sum_i O_n^i * |sigma(s^i_{n*}) - sigma(s^T_n)| pulls matched
/// source objectness toward the pseudo proposal's score. Pseudo scores are
/// constants (no gradient through the pseudo subnet).
ad::VarPtr consistency_surrogate(const std::vector<RpnResult>& source_results,
                                 const std::vector<Proposal>& pseudo_set);

}  // namespace dmsn
