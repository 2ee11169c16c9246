#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "bmmae/common.hpp"
#include "bmmae/tensor.hpp"

namespace bmmae {

// One modality's volume cut into non-overlapping p^3 cubes. Row i holds the
// flattened voxels (depth-fastest) of the patch at grid coordinate (a,b,c)
// with i = ((a*(W/p))+b)*(D/p)+c.
struct PatchGrid {
    std::vector<double> patches;  // row-major [L, p^3]
    Dims3 grid_dims;              // (H/p, W/p, D/p)
    int64_t p = 0;
    int64_t L() const { return grid_dims.voxels(); }
};

// Embedded tokens with (modality, patch index) provenance per row.
struct TokenSequence {
    Tensor tokens;  // [n, d]
    std::vector<std::pair<Modality, int64_t>> provenance;
};

// Modality-specific affine patch embeddings.
struct TokenizerParams {
    std::array<Tensor, 4> weight;  // each [p^3, d]
    std::array<Tensor, 4> bias;    // each [d]
};

PatchGrid patchify(const std::vector<float>& grid, const Dims3& dims, int64_t p);
std::vector<double> unpatchify(const std::vector<double>& patches, const Dims3& grid_dims,
                               int64_t p);

// Fixed 3D sine-cosine positional encoding: d splits into three equal
// per-axis bands; each band is [sin(c*w_0)..sin(c*w_{b/2-1}) | cos(...)] of
// that axis' patch-grid coordinate with w_k = 10000^(-2k/band). Serves both
// the encoder width and the decoder width.
Tensor sincos_pe(const Dims3& grid_dims, int64_t d);

// tokens = patches * W_m + b_m + PE, rows tagged (modality, i).
TokenSequence embed(const PatchGrid& pg, Modality m, const TokenizerParams& params,
                    const Tensor& pe);

}  // namespace bmmae
