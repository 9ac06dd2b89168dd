// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/consistency.hpp"

#include <cmath>

#include "dmsn/errors.hpp"

namespace dmsn {

MatchResult match_proposals(const std::vector<Proposal>& source_set,
                            const std::vector<Proposal>& pseudo_set) {
  if (source_set.size() != pseudo_set.size())
    throw ContractError("match_proposals: proposal sets must have equal size");
  if (source_set.empty()) throw ContractError("match_proposals: empty sets");
  MatchResult out(pseudo_set.size());
  for (size_t n = 0; n < pseudo_set.size(); ++n) {
    double best = -1;
    int best_rank = 1;
    for (size_t j = 0; j < source_set.size(); ++j) {
      const double v = iou(source_set[j].box, pseudo_set[n].box);
      if (v > best) {  // strict: ties keep the lower source rank
        best = v;
        best_rank = source_set[j].rank;
      }
    }
    out[n] = {best, best_rank};
  }
  return out;
}

double consistency_loss(const std::vector<std::vector<Proposal>>& source_sets,
                        const std::vector<Proposal>& pseudo_set) {
  const size_t N = pseudo_set.size();
  double total = 0;
  for (const auto& src : source_sets) {
    const MatchResult m = match_proposals(src, pseudo_set);
    for (size_t n = 0; n < N; ++n)
      total += m[n].best_iou * std::fabs(m[n].matched_rank - pseudo_set[n].rank);
  }
  return total / static_cast<double>(N);
}

ad::VarPtr consistency_surrogate(const std::vector<RpnResult>& source_results,
                                 const std::vector<Proposal>& pseudo_set) {
  const size_t N = pseudo_set.size();
  std::vector<ad::VarPtr> terms;
  for (const auto& src : source_results) {
    const MatchResult m = match_proposals(src.proposals, pseudo_set);
    std::vector<int64_t> anchor_idx;
    Tensor target({static_cast<int>(N)});
    Tensor weight({static_cast<int>(N)});
    for (size_t n = 0; n < N; ++n) {
      const Proposal& matched = src.proposals[static_cast<size_t>(m[n].matched_rank - 1)];
      anchor_idx.push_back(matched.anchor_index);
      target[static_cast<int64_t>(n)] = pseudo_set[n].objectness;
      weight[static_cast<int64_t>(n)] = m[n].best_iou;
    }
    auto s = ad::sigmoid(ad::gather(src.obj_logits, anchor_idx));
    auto diff = ad::vabs(ad::sub(s, ad::constant(std::move(target))));
    terms.push_back(ad::sum(ad::mul(diff, ad::constant(std::move(weight)))));
  }
  return ad::scale(ad::add_scalars(terms), 1.0 / static_cast<double>(N));
}

}  // namespace dmsn
