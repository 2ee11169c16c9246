#pragma once

#include <cstdint>
#include <vector>

#include "bmmae/common.hpp"
#include "bmmae/tensor.hpp"
#include "bmmae/volumes.hpp"

namespace bmmae {

// Nested composite tumor regions derived from a 4-class label grid:
// whole tumor = {1,2,3}, tumor core = {1,3}, enhancing tumor = {3}.
struct CompositeMasks {
    Dims3 dims;
    std::vector<uint8_t> wt, tc, et;  // 0/1 per voxel
};

CompositeMasks composite_masks(const SegmentationLabel& label);

// 2|P^T| / (|P|+|T|); two empty masks score 1.
double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth);

// Per-voxel argmax over the class axis of a [C, V] logit map (lowest class
// wins ties).
std::vector<uint8_t> argmax_labels(const Tensor& logits);

struct RankingMetrics {
    double auc;  // Mann-Whitney probability, ties counted 1/2
    double ap;   // non-interpolated average precision over descending scores
};

// Requires both classes present. Score ties: AUC counts them 1/2; AP breaks
// them by original index (stable sort).
RankingMetrics binary_ranking_metrics(const std::vector<double>& scores,
                                      const std::vector<int>& labels);

// Time-dependent concordance: over pairs with T_i < T_j and event_i = 1,
// concordant iff S_i(t_{k(i)}) < S_j(t_{k(i)}) with k(i) the interval of T_i
// under cut_points; predicted-survival ties count 1/2.
double concordance_index(const std::vector<std::vector<double>>& curves,
                         const std::vector<double>& cut_points,
                         const std::vector<double>& times, const std::vector<int>& events);

// Scalar-risk concordance (higher risk should mean shorter survival); used to
// cross-check the time-dependent variant.
double harrell_cindex(const std::vector<double>& risks, const std::vector<double>& times,
                      const std::vector<int>& events);

}  // namespace bmmae
