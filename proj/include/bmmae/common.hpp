#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmmae {

// Exit-code-bearing error taxonomy: config -> 2, data -> 3, numeric -> 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Shape contract violations (indivisible dims, mismatched crops, ...).
struct DimensionError : ConfigError {
    using ConfigError::ConfigError;
};

// Distinct dataset load failures.
struct MalformedMetaError : DataError {
    using DataError::DataError;
};
struct BlobSizeError : DataError {
    using DataError::DataError;
};
struct UnknownModalityError : DataError {
    using DataError::DataError;
};

enum class Modality : uint8_t { T1 = 0, T1c = 1, T2 = 2, FLAIR = 3 };

inline constexpr std::array<Modality, 4> kAllModalities = {Modality::T1, Modality::T1c,
                                                           Modality::T2, Modality::FLAIR};

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::T1: return "T1";
        case Modality::T1c: return "T1c";
        case Modality::T2: return "T2";
        case Modality::FLAIR: return "FLAIR";
    }
    throw ConfigError("invalid modality value");
}

inline std::optional<Modality> modality_from_name(const std::string& name) {
    for (Modality m : kAllModalities)
        if (name == modality_name(m)) return m;
    return std::nullopt;
}

// Canonically ordered (T1 < T1c < T2 < FLAIR) modality subset.
using ModalitySet = std::vector<Modality>;

inline ModalitySet canonical_subset(std::vector<Modality> ms) {
    ModalitySet out;
    for (Modality m : kAllModalities)
        for (Modality x : ms)
            if (x == m && (out.empty() || out.back() != m)) out.push_back(m);
    return out;
}

inline bool subset_contains(const ModalitySet& s, Modality m) {
    for (Modality x : s)
        if (x == m) return true;
    return false;
}

// Comma-separated subset spec, e.g. "T1,FLAIR".
ModalitySet parse_subset(const std::string& spec);
std::string subset_to_string(const ModalitySet& s);

struct Dims3 {
    int64_t h = 0, w = 0, d = 0;
    int64_t voxels() const { return h * w * d; }
    bool operator==(const Dims3&) const = default;
};

// Voxel / patch linearization used everywhere: index = ((h*W)+w)*D+d.
inline int64_t linear_index(const Dims3& dims, int64_t h, int64_t w, int64_t d) {
    return (h * dims.w + w) * dims.d + d;
}

// splitmix64; used to derive independent sub-seeds from one master seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Round a double through f32. Parameters and stored voxels stay
// f32-representable so f32 serialization round-trips bit-exactly.
inline double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace bmmae
