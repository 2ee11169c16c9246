#include "bmmae/tokenizer.hpp"

#include <cmath>

namespace bmmae {

PatchGrid patchify(const std::vector<float>& grid, const Dims3& dims, int64_t p) {
    if (p < 1 || dims.h % p || dims.w % p || dims.d % p)
        throw DimensionError("volume dimensions must be divisible by the patch size");
    if (static_cast<int64_t>(grid.size()) != dims.voxels())
        throw DimensionError("grid size does not match dims");

    PatchGrid pg;
    pg.p = p;
    pg.grid_dims = {dims.h / p, dims.w / p, dims.d / p};
    const int64_t L = pg.L(), pv = p * p * p;
    pg.patches.resize(static_cast<size_t>(L * pv));
    for (int64_t a = 0; a < pg.grid_dims.h; ++a)
        for (int64_t b = 0; b < pg.grid_dims.w; ++b)
            for (int64_t c = 0; c < pg.grid_dims.d; ++c) {
                const int64_t i = linear_index(pg.grid_dims, a, b, c);
                double* row = pg.patches.data() + i * pv;
                for (int64_t dh = 0; dh < p; ++dh)
                    for (int64_t dw = 0; dw < p; ++dw)
                        for (int64_t dd = 0; dd < p; ++dd)
                            row[(dh * p + dw) * p + dd] = grid[static_cast<size_t>(
                                linear_index(dims, a * p + dh, b * p + dw, c * p + dd))];
            }
    return pg;
}

std::vector<double> unpatchify(const std::vector<double>& patches, const Dims3& grid_dims,
                               int64_t p) {
    const int64_t L = grid_dims.voxels(), pv = p * p * p;
    if (static_cast<int64_t>(patches.size()) != L * pv)
        throw DimensionError("patch matrix size inconsistent with grid dims and patch size");
    const Dims3 dims{grid_dims.h * p, grid_dims.w * p, grid_dims.d * p};
    std::vector<double> grid(static_cast<size_t>(dims.voxels()));
    for (int64_t a = 0; a < grid_dims.h; ++a)
        for (int64_t b = 0; b < grid_dims.w; ++b)
            for (int64_t c = 0; c < grid_dims.d; ++c) {
                const int64_t i = linear_index(grid_dims, a, b, c);
                const double* row = patches.data() + i * pv;
                for (int64_t dh = 0; dh < p; ++dh)
                    for (int64_t dw = 0; dw < p; ++dw)
                        for (int64_t dd = 0; dd < p; ++dd)
                            grid[static_cast<size_t>(linear_index(
                                dims, a * p + dh, b * p + dw, c * p + dd))] =
                                row[(dh * p + dw) * p + dd];
            }
    return grid;
}

Tensor sincos_pe(const Dims3& grid_dims, int64_t d) {
    if (d < 6 || d % 6 != 0)
        throw ConfigError("positional encoding width must be divisible by 6");
    const int64_t L = grid_dims.voxels();
    const int64_t band = d / 3, half = band / 2;
    std::vector<double> pe(static_cast<size_t>(L * d));
    for (int64_t a = 0; a < grid_dims.h; ++a)
        for (int64_t b = 0; b < grid_dims.w; ++b)
            for (int64_t c = 0; c < grid_dims.d; ++c) {
                const int64_t i = linear_index(grid_dims, a, b, c);
                double* row = pe.data() + i * d;
                const double coords[3] = {static_cast<double>(a), static_cast<double>(b),
                                          static_cast<double>(c)};
                for (int axis = 0; axis < 3; ++axis) {
                    double* bandp = row + axis * band;
                    for (int64_t k = 0; k < half; ++k) {
                        const double omega =
                            std::pow(10000.0, -2.0 * static_cast<double>(k) /
                                                  static_cast<double>(band));
                        bandp[k] = std::sin(coords[axis] * omega);
                        bandp[half + k] = std::cos(coords[axis] * omega);
                    }
                }
            }
    return Tensor::from_data({L, d}, std::move(pe));
}

TokenSequence embed(const PatchGrid& pg, Modality m, const TokenizerParams& params,
                    const Tensor& pe) {
    const Tensor& w = params.weight[static_cast<size_t>(m)];
    const Tensor& b = params.bias[static_cast<size_t>(m)];
    if (!w.defined() || !b.defined())
        throw ConfigError(std::string("tokenizer parameters missing for ") + modality_name(m));
    const int64_t L = pg.L(), pv = pg.p * pg.p * pg.p;
    if (w.rows() != pv) throw DimensionError("tokenizer weight rows must equal p^3");
    if (pe.rows() != L || pe.cols() != w.cols())
        throw DimensionError("positional encoding shape mismatch");

    Tensor x = Tensor::from_data({L, pv}, pg.patches);
    TokenSequence seq;
    seq.tokens = add(linear(x, w, b), pe);
    seq.provenance.reserve(static_cast<size_t>(L));
    for (int64_t i = 0; i < L; ++i) seq.provenance.emplace_back(m, i);
    return seq;
}

}  // namespace bmmae
