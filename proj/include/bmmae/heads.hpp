#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bmmae/model.hpp"

namespace bmmae {

// The four encoder depths feeding the segmentation decoder: quarter-depth
// blocks {depth/4, depth/2, 3depth/4, depth}, 1-indexed (duplicates possible
// for depth < 4).
std::array<int64_t, 4> selected_blocks(int64_t depth);

// Per selected block: the arithmetic mean over the subset's modalities of
// each patch location's token, as an [L, d] grid in patch-index order.
// Requires a full-visibility plan so every location has a token.
std::vector<Tensor> aggregate_hidden_states(const std::vector<Tensor>& per_block,
                                            const ModalitySet& subset, const MaskPlan& plan);

// ---------------------------------------------------------------------------
// Segmentation (UNETR-style decoder over the encoder's hidden states)
// ---------------------------------------------------------------------------

struct SegConfig {
    int64_t d = 96;     // encoder width the head consumes
    int64_t p = 8;      // patch edge (power of two; log2(p) upsampling stages)
    int64_t depth = 4;  // encoder depth (for block selection)
    int64_t proj_ch = 6;
    std::vector<int64_t> stage_ch;  // conv width after each x2 stage
    int64_t n_classes = 4;

    void validate() const;
    bool operator==(const SegConfig&) const = default;
    static SegConfig for_model(const ModelConfig& m);
};

struct SegHead {
    SegConfig config;
    // 1x1x1 projections of the four selected grids (shallow -> deep).
    std::array<Tensor, 4> proj_w, proj_b;
    // One 3x3x3 conv per upsampling stage, fusing the next-shallower grid.
    std::vector<Tensor> stage_w, stage_b;
    // Final 1x1x1 over decoded channels + the subset-mean raw volume.
    Tensor logit_w, logit_b;

    std::vector<std::pair<std::string, Tensor>> named_params() const;
};

SegHead init_seg_head(const SegConfig& config, uint64_t seed);

struct SegOutput {
    Tensor logits;  // [n_classes, H*W*D]
    Dims3 dims;
};

SegOutput segment(const MultimodalVolume& volume, const ModalitySet& subset,
                  const ModelState& model, const SegHead& head);

// 1 - mean-over-classes soft Dice of the softmax probabilities (smoothing 1).
Tensor soft_dice_loss(const SegOutput& out, const SegmentationLabel& label);
// Soft Dice + voxel-mean cross-entropy, equally weighted.
Tensor seg_loss(const SegOutput& out, const SegmentationLabel& label);

// ---------------------------------------------------------------------------
// Binary subtype classification (linear layer on the cls embedding)
// ---------------------------------------------------------------------------

struct ClsHead {
    Tensor w;  // [d, 1]
    Tensor b;  // [1]
    std::vector<std::pair<std::string, Tensor>> named_params() const;
};

ClsHead init_cls_head(int64_t d, uint64_t seed);

// Scalar logit [1, 1]; probability = sigmoid(logit).
Tensor classify(const MultimodalVolume& volume, const ModalitySet& subset,
                const ModelState& model, const ClsHead& head);

// ---------------------------------------------------------------------------
// Discrete-time survival (K interval hazards from the cls embedding)
// ---------------------------------------------------------------------------

// K-1 strictly increasing thresholds at the j/K empirical quantiles
// (linearly interpolated) of the pooled observed times.
std::vector<double> discretize_times(std::vector<double> times, int64_t K);

// 1 + number of thresholds strictly below t (in 1..K).
int64_t assign_interval(double t, const std::vector<double>& cut_points);

struct HazardHead {
    Tensor w;  // [d, K]
    Tensor b;  // [K]
    std::vector<double> cut_points;  // K-1 thresholds, strictly increasing

    int64_t K() const { return static_cast<int64_t>(cut_points.size()) + 1; }
    std::vector<std::pair<std::string, Tensor>> named_params() const;
};

HazardHead init_hazard_head(int64_t d, std::vector<double> cut_points, uint64_t seed);

// Interval logits [1, K]; hazards = sigmoid per interval.
Tensor survival_logits(const MultimodalVolume& volume, const ModalitySet& subset,
                       const ModelState& model, const HazardHead& head);

// -[delta*log h_k + sum_{j<=k-delta} log(1-h_j)] with stable log-sigmoids.
inline Tensor hazard_nll(const Tensor& logits, int interval, int event) {
    return hazard_nll_op(logits, interval, event);
}

std::vector<double> hazards_from_logits(const Tensor& logits);

// S(t_k) = prod_{j<=k} (1-h_j); hazards must lie in [0, 1).
std::vector<double> survival_curve(const std::vector<double>& hazards);

// ---------------------------------------------------------------------------
// Persistence (kind-tagged checkpoints; subset recorded in the manifest)
// ---------------------------------------------------------------------------

void save_seg_head(const SegHead& head, const ModalitySet& subset,
                   const std::filesystem::path& dir);
std::pair<SegHead, ModalitySet> load_seg_head(const std::filesystem::path& dir);

void save_cls_head(const ClsHead& head, int64_t d, const ModalitySet& subset,
                   const std::filesystem::path& dir);
std::pair<ClsHead, ModalitySet> load_cls_head(const std::filesystem::path& dir);

void save_hazard_head(const HazardHead& head, int64_t d, const ModalitySet& subset,
                      const std::filesystem::path& dir);
std::pair<HazardHead, ModalitySet> load_hazard_head(const std::filesystem::path& dir);

}  // namespace bmmae
