#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bmmae/common.hpp"
#include "bmmae/tokenizer.hpp"

namespace bmmae {

// Visible/masked patch budget for one forward pass. Per modality, visible
// and masked are sorted and partition {0..L-1}; the visible counts sum to
// total_visible = floor((1-r) * |M| * L) exactly.
struct MaskPlan {
    double r = 0.0;
    double alpha = 0.0;  // 0 when the plan was not Dirichlet-sampled
    int64_t L = 0;
    int64_t total_visible = 0;
    ModalitySet modalities;
    std::array<double, 4> weights{};  // nonzero only for present modalities
    std::array<std::vector<int64_t>, 4> visible;
    std::array<std::vector<int64_t>, 4> masked;

    const std::vector<int64_t>& visible_of(Modality m) const {
        return visible[static_cast<size_t>(m)];
    }
    const std::vector<int64_t>& masked_of(Modality m) const {
        return masked[static_cast<size_t>(m)];
    }
    void validate() const;
    std::string to_json() const;
    static MaskPlan from_json(const std::string& text);
};

// Per-modality visible quotas: floors of w_m * budget clamped to L, then the
// shortfall handed out one slot at a time in descending order of fractional
// remainder (ties broken by modality order), skipping full modalities.
std::array<int64_t, 4> visible_quotas(const std::array<double, 4>& weights,
                                      const ModalitySet& mods, int64_t budget, int64_t L);

// Build a plan from externally chosen weights (the sampler delegates here).
MaskPlan mask_plan_from_weights(int64_t L, const ModalitySet& mods, double r, double alpha,
                                const std::array<double, 4>& weights, std::mt19937_64& rng);

// weights ~ Dirichlet(alpha * 1) over the present modalities, visible indices
// uniform without replacement per modality.
MaskPlan sample_mask_plan(int64_t L, const ModalitySet& mods, double r, double alpha,
                          std::mt19937_64& rng);

// r = 0 plan: every patch of every present modality visible.
MaskPlan full_visibility_plan(int64_t L, const ModalitySet& mods);

// Concatenate the visible tokens of each present modality (canonical modality
// order, ascending patch index within a modality).
TokenSequence gather_visible(const std::array<TokenSequence, 4>& seqs, const MaskPlan& plan);

// Inverse routing: per modality a full [L, d'] matrix whose visible rows are
// the encoded tokens and whose masked rows are the shared mask token.
std::array<Tensor, 4> scatter_with_mask_tokens(const TokenSequence& encoded, const MaskPlan& plan,
                                               const Tensor& mask_token);

}  // namespace bmmae
