#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bmmae/masking.hpp"
#include "bmmae/tokenizer.hpp"
#include "bmmae/volumes.hpp"

namespace bmmae {

struct ModelConfig {
    int64_t d = 96;          // encoder width
    int64_t depth = 4;       // encoder blocks
    int64_t heads = 4;
    int64_t mlp_dim = 192;
    int64_t d_dec = 48;      // decoder width
    int64_t dec_depth = 2;
    int64_t dec_heads = 4;
    int64_t p = 8;           // patch edge
    double alpha = 1.0;      // Dirichlet concentration
    double r = 0.75;         // masking ratio

    void validate() const;
    bool operator==(const ModelConfig&) const = default;

    // Desk-scale preset for 32^3 volumes; every invariant runs in seconds.
    static ModelConfig tiny();
    // Full-scale geometry for 128^3 volumes (12x12x768 encoder, 3x12x384
    // decoder, p=16).
    static ModelConfig paper();
};

// One pre-norm transformer block: x += Attn(LN(x)); x += MLP(LN(x)).
struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelState {
    ModelConfig config;
    TokenizerParams tokenizer;              // per-modality [p^3, d] + [d]
    Tensor cls;                             // [1, d]
    std::vector<BlockParams> enc_blocks;
    Tensor enc_ln_g, enc_ln_b;              // final encoder norm
    Tensor latent_w, latent_b;              // [d, d_dec], [d_dec]
    Tensor mask_token;                      // [d_dec]
    std::array<Tensor, 4> modality_embed;   // each [d_dec]
    std::vector<BlockParams> dec_blocks;
    Tensor dec_ln_g, dec_ln_b;              // final decoder norm
    Tensor out_w, out_b;                    // [d_dec, p^3], [p^3]

    // Every learnable tensor with its hierarchical name, in the fixed order
    // used by checkpoints and the optimizer.
    std::vector<std::pair<std::string, Tensor>> named_params() const;
};

// Truncated-normal(0.02) weights / zero biases / unit norms, all values
// snapped to f32-representable doubles.
ModelState init_model_state(const ModelConfig& config, uint64_t seed);

struct EncoderOutput {
    Tensor cls_out;            // [1, d] after the final norm
    TokenSequence tokens;      // visible tokens after the final norm
    std::vector<Tensor> per_block;  // hidden sequence (incl. cls) after each block
    MaskPlan plan;
    Dims3 volume_dims;
    Dims3 grid_dims;
};

// Transformer cores, exposed so heads and equivariance tests can drive them
// directly. Sequence shape is preserved.
Tensor transformer_forward(const Tensor& seq, const std::vector<BlockParams>& blocks,
                           const Tensor& final_ln_g, const Tensor& final_ln_b, int64_t heads,
                           std::vector<Tensor>* per_block = nullptr);

// Tokenize the subset's modalities, keep the plan's visible tokens, prepend
// cls, run the encoder.
EncoderOutput encode(const MultimodalVolume& volume, const ModalitySet& subset,
                     const MaskPlan& plan, const ModelState& state);

struct DecodeOutput {
    std::array<Tensor, 4> patch_preds;  // per modality [L, p^3], graph-connected
    ModalitySet modalities;
    Dims3 volume_dims;
    Dims3 grid_dims;
    int64_t p = 0;
    int64_t decoder_seq_len = 0;  // 1 + |subset| * L

    // Materialize one modality's predicted volume.
    std::vector<double> reconstruction(Modality m) const;
};

// Project to decoder width, insert mask tokens, add modality embeddings and
// decoder positional encodings, run the decoder, apply the shared output
// projection to every non-cls token.
DecodeOutput decode(const EncoderOutput& enc, const MaskPlan& plan, const ModelState& state);

// Mean over modalities (with >= 1 masked patch) of the mean over masked
// patches of the per-patch mean squared voxel error.
Tensor reconstruction_loss(const DecodeOutput& dec, const MultimodalVolume& target,
                           const MaskPlan& plan);

struct PretrainForward {
    Tensor loss;
    MaskPlan plan;
    EncoderOutput enc;
    DecodeOutput dec;
};

// Sample a plan over all four modalities, encode, decode, score.
PretrainForward forward_pretrain(const MultimodalVolume& volume, const ModelState& state,
                                 std::mt19937_64& rng);

// Generic named-parameter checkpoint: manifest.json (config + parameter
// table) beside params.bin (concatenated little-endian f32 blobs in manifest
// order).
void save_params(const std::filesystem::path& dir, const std::string& kind,
                 const std::string& config_json,
                 const std::vector<std::pair<std::string, Tensor>>& params);
// Returns (kind, config_json) and fills `params` values in place; every
// manifest entry must match a provided name/shape and vice versa.
std::pair<std::string, std::string> load_params(
    const std::filesystem::path& dir, const std::vector<std::pair<std::string, Tensor>>& params);
// Reads just (kind, config_json) without touching parameters.
std::pair<std::string, std::string> peek_manifest(const std::filesystem::path& dir);

void save_model(const ModelState& state, const std::filesystem::path& dir);
ModelState load_model(const std::filesystem::path& dir);
// Same, but the checkpoint's config must equal `expected`.
ModelState load_model(const std::filesystem::path& dir, const ModelConfig& expected);

std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace bmmae
