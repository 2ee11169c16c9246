#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bmmae/common.hpp"

namespace bmmae {

// Per-patient multimodal 3D scan. Present grids all share `dims`; voxels are
// stored as f32 in linearized order ((h*W)+w)*D+d so the on-disk format
// round-trips bit-exactly.
struct MultimodalVolume {
    std::string patient_id;
    Dims3 dims;
    std::array<std::vector<float>, 4> grids;  // indexed by Modality; empty = absent

    bool has(Modality m) const { return !grids[static_cast<size_t>(m)].empty(); }
    const std::vector<float>& grid(Modality m) const { return grids[static_cast<size_t>(m)]; }
    std::vector<float>& grid(Modality m) { return grids[static_cast<size_t>(m)]; }
    ModalitySet present() const;
    void validate() const;  // shared shapes, non-empty present set
};

// Voxel labels: 0 background, 1 necrotic core, 2 edema, 3 enhancing tumor.
struct SegmentationLabel {
    Dims3 dims;
    std::vector<uint8_t> grid;
};

struct SurvivalRecord {
    double time = 0.0;  // observed (event or censoring) time, > 0
    int event = 0;      // 1 = event observed, 0 = right-censored
};

struct CohortRecord {
    MultimodalVolume volume;
    std::optional<SegmentationLabel> seg;
    std::optional<int> subtype;  // 0 = low-grade-like, 1 = high-grade-like
    std::optional<SurvivalRecord> survival;
};

// Center-crop every present modality to `crop` (odd remainders leave the
// extra voxel on the high-index side), then standardize each modality to
// mean 0 / std 1 over its own cropped voxels. Constant grids become all
// zeros rather than dividing by a vanishing std.
MultimodalVolume preprocess(const MultimodalVolume& v, const Dims3& crop);

// Deterministic synthetic cohort: a smooth per-patient anatomy field imaged
// through four distinct fixed nonlinear transforms (plus per-modality noise),
// an embedded ellipsoidal lesion with nested subregions (3 inside 1 inside 2),
// a subtype label thresholded on enhancing volume fraction, and survival
// times decreasing in lesion volume with administrative right-censoring.
std::vector<CohortRecord> generate_synthetic_cohort(int n_patients, const Dims3& shape,
                                                    uint64_t seed, int64_t patch_size = 8);

// Dataset directory format: one subdirectory per patient with meta.json,
// one <modality>.f32 blob per present modality (little-endian f32, voxel
// order ((h*W)+w)*D+d), and optional seg.u8 (one byte per voxel).
void save_cohort(const std::vector<CohortRecord>& records, const std::filesystem::path& dir);
std::vector<CohortRecord> load_cohort(const std::filesystem::path& dir);

}  // namespace bmmae
