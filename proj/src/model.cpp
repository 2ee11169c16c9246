#include "bmmae/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bmmae/rng.hpp"

namespace bmmae {

void ModelConfig::validate() const {
    if (d <= 0 || depth <= 0 || heads <= 0 || mlp_dim <= 0 || d_dec <= 0 || dec_depth <= 0 ||
        dec_heads <= 0 || p <= 0)
        throw ConfigError("model config: all dimensions must be positive");
    if (d % heads != 0) throw ConfigError("model config: d must be divisible by heads");
    if (d_dec % dec_heads != 0)
        throw ConfigError("model config: d_dec must be divisible by dec_heads");
    if (d % 6 != 0 || d_dec % 6 != 0)
        throw ConfigError("model config: widths must be divisible by 6 for positional encoding");
    if (!(alpha > 0.0)) throw ConfigError("model config: alpha must be > 0");
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("model config: r must lie in [0, 1)");
}

ModelConfig ModelConfig::tiny() {
    return ModelConfig{96, 4, 4, 192, 48, 2, 4, 8, 1.0, 0.75};
}

ModelConfig ModelConfig::paper() {
    return ModelConfig{768, 12, 12, 1536, 384, 3, 12, 16, 1.0, 0.75};
}

namespace {

// Gaussian(0, std) truncated to +-2 std, every draw snapped to an
// f32-representable double so checkpoints round-trip bit-exactly.
Tensor trunc_normal(std::vector<int64_t> shape, double std_dev, std::mt19937_64& g) {
    int64_t n = 1;
    for (int64_t s : shape) n *= s;
    std::vector<double> data(static_cast<size_t>(n));
    for (double& v : data) {
        double z;
        do {
            z = rng::gauss(g);
        } while (std::abs(z) > 2.0);
        v = snap_f32(z * std_dev);
    }
    return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

Tensor const_param(std::vector<int64_t> shape, double v) {
    int64_t n = 1;
    for (int64_t s : shape) n *= s;
    return Tensor::from_data(std::move(shape), std::vector<double>(static_cast<size_t>(n), v),
                             /*requires_grad=*/true);
}

BlockParams init_block(int64_t width, int64_t mlp_dim, std::mt19937_64& g) {
    BlockParams b;
    b.ln1_g = const_param({width}, 1.0);
    b.ln1_b = const_param({width}, 0.0);
    b.wq = trunc_normal({width, width}, 0.02, g);
    b.bq = const_param({width}, 0.0);
    b.wk = trunc_normal({width, width}, 0.02, g);
    b.bk = const_param({width}, 0.0);
    b.wv = trunc_normal({width, width}, 0.02, g);
    b.bv = const_param({width}, 0.0);
    b.wo = trunc_normal({width, width}, 0.02, g);
    b.bo = const_param({width}, 0.0);
    b.ln2_g = const_param({width}, 1.0);
    b.ln2_b = const_param({width}, 0.0);
    b.mlp_w1 = trunc_normal({width, mlp_dim}, 0.02, g);
    b.mlp_b1 = const_param({mlp_dim}, 0.0);
    b.mlp_w2 = trunc_normal({mlp_dim, width}, 0.02, g);
    b.mlp_b2 = const_param({width}, 0.0);
    return b;
}

void append_block_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& base,
                         const BlockParams& b) {
    out.emplace_back(base + ".ln1.gamma", b.ln1_g);
    out.emplace_back(base + ".ln1.beta", b.ln1_b);
    out.emplace_back(base + ".attn.wq", b.wq);
    out.emplace_back(base + ".attn.bq", b.bq);
    out.emplace_back(base + ".attn.wk", b.wk);
    out.emplace_back(base + ".attn.bk", b.bk);
    out.emplace_back(base + ".attn.wv", b.wv);
    out.emplace_back(base + ".attn.bv", b.bv);
    out.emplace_back(base + ".attn.wo", b.wo);
    out.emplace_back(base + ".attn.bo", b.bo);
    out.emplace_back(base + ".ln2.gamma", b.ln2_g);
    out.emplace_back(base + ".ln2.beta", b.ln2_b);
    out.emplace_back(base + ".mlp.w1", b.mlp_w1);
    out.emplace_back(base + ".mlp.b1", b.mlp_b1);
    out.emplace_back(base + ".mlp.w2", b.mlp_w2);
    out.emplace_back(base + ".mlp.b2", b.mlp_b2);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> ModelState::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (Modality m : kAllModalities) {
        const std::string base = std::string("tokenizer.") + modality_name(m);
        out.emplace_back(base + ".weight", tokenizer.weight[static_cast<size_t>(m)]);
        out.emplace_back(base + ".bias", tokenizer.bias[static_cast<size_t>(m)]);
    }
    out.emplace_back("cls", cls);
    for (size_t i = 0; i < enc_blocks.size(); ++i)
        append_block_params(out, "encoder.block" + std::to_string(i), enc_blocks[i]);
    out.emplace_back("encoder.final_ln.gamma", enc_ln_g);
    out.emplace_back("encoder.final_ln.beta", enc_ln_b);
    out.emplace_back("latent.weight", latent_w);
    out.emplace_back("latent.bias", latent_b);
    out.emplace_back("mask_token", mask_token);
    for (Modality m : kAllModalities)
        out.emplace_back(std::string("modality_embed.") + modality_name(m),
                         modality_embed[static_cast<size_t>(m)]);
    for (size_t i = 0; i < dec_blocks.size(); ++i)
        append_block_params(out, "decoder.block" + std::to_string(i), dec_blocks[i]);
    out.emplace_back("decoder.final_ln.gamma", dec_ln_g);
    out.emplace_back("decoder.final_ln.beta", dec_ln_b);
    out.emplace_back("output.weight", out_w);
    out.emplace_back("output.bias", out_b);
    return out;
}

ModelState init_model_state(const ModelConfig& config, uint64_t seed) {
    config.validate();
    std::mt19937_64 g(mix_seed(seed, 0x6d6f64656cULL));
    const int64_t p3 = config.p * config.p * config.p;
    ModelState s;
    s.config = config;
    for (Modality m : kAllModalities) {
        s.tokenizer.weight[static_cast<size_t>(m)] = trunc_normal({p3, config.d}, 0.02, g);
        s.tokenizer.bias[static_cast<size_t>(m)] = const_param({config.d}, 0.0);
    }
    s.cls = trunc_normal({1, config.d}, 0.02, g);
    for (int64_t i = 0; i < config.depth; ++i)
        s.enc_blocks.push_back(init_block(config.d, config.mlp_dim, g));
    s.enc_ln_g = const_param({config.d}, 1.0);
    s.enc_ln_b = const_param({config.d}, 0.0);
    s.latent_w = trunc_normal({config.d, config.d_dec}, 0.02, g);
    s.latent_b = const_param({config.d_dec}, 0.0);
    s.mask_token = trunc_normal({config.d_dec}, 0.02, g);
    for (Modality m : kAllModalities)
        s.modality_embed[static_cast<size_t>(m)] = trunc_normal({config.d_dec}, 0.02, g);
    const int64_t dec_mlp = config.d_dec * 2;
    for (int64_t i = 0; i < config.dec_depth; ++i)
        s.dec_blocks.push_back(init_block(config.d_dec, dec_mlp, g));
    s.dec_ln_g = const_param({config.d_dec}, 1.0);
    s.dec_ln_b = const_param({config.d_dec}, 0.0);
    s.out_w = trunc_normal({config.d_dec, p3}, 0.02, g);
    s.out_b = const_param({p3}, 0.0);
    return s;
}

namespace {

Tensor attention(const Tensor& h, const BlockParams& b, int64_t heads) {
    const int64_t width = h.cols();
    const int64_t hd = width / heads;
    Tensor q = linear(h, b.wq, b.bq);
    Tensor k = linear(h, b.wk, b.bk);
    Tensor v = linear(h, b.wv, b.bv);
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int64_t i = 0; i < heads; ++i) {
        Tensor qh = slice_cols(q, i * hd, (i + 1) * hd);
        Tensor kh = slice_cols(k, i * hd, (i + 1) * hd);
        Tensor vh = slice_cols(v, i * hd, (i + 1) * hd);
        Tensor att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
        outs.push_back(matmul(att, vh));
    }
    return linear(concat_cols(outs), b.wo, b.bo);
}

}  // namespace

Tensor transformer_forward(const Tensor& seq, const std::vector<BlockParams>& blocks,
                           const Tensor& final_ln_g, const Tensor& final_ln_b, int64_t heads,
                           std::vector<Tensor>* per_block) {
    Tensor x = seq;
    for (const BlockParams& b : blocks) {
        x = add(x, attention(layernorm_rows(x, b.ln1_g, b.ln1_b), b, heads));
        Tensor m = linear(gelu(linear(layernorm_rows(x, b.ln2_g, b.ln2_b), b.mlp_w1, b.mlp_b1)),
                          b.mlp_w2, b.mlp_b2);
        x = add(x, m);
        if (per_block) per_block->push_back(x);
    }
    return layernorm_rows(x, final_ln_g, final_ln_b);
}

namespace {

Dims3 patch_grid_dims(const Dims3& dims, int64_t p) {
    if (dims.h % p != 0 || dims.w % p != 0 || dims.d % p != 0)
        throw DimensionError("volume dimensions must be divisible by the patch size");
    return Dims3{dims.h / p, dims.w / p, dims.d / p};
}

}  // namespace

EncoderOutput encode(const MultimodalVolume& volume, const ModalitySet& subset,
                     const MaskPlan& plan, const ModelState& state) {
    if (subset.empty()) throw ConfigError("encode: empty modality subset");
    if (plan.modalities != subset)
        throw ConfigError("encode: mask plan modalities do not match the requested subset");
    const ModelConfig& cfg = state.config;
    const Dims3 grid_dims = patch_grid_dims(volume.dims, cfg.p);
    if (plan.L != grid_dims.voxels())
        throw ConfigError("encode: mask plan token count does not match the patch grid");
    for (Modality m : subset)
        if (!volume.has(m))
            throw DataError(std::string("encode: volume lacks modality ") + modality_name(m));

    Tensor pe = sincos_pe(grid_dims, cfg.d);
    std::array<TokenSequence, 4> seqs;
    for (Modality m : subset) {
        PatchGrid pg = patchify(volume.grid(m), volume.dims, cfg.p);
        seqs[static_cast<size_t>(m)] = embed(pg, m, state.tokenizer, pe);
    }
    TokenSequence vis = gather_visible(seqs, plan);

    Tensor seq0 = concat_rows({state.cls, vis.tokens});
    EncoderOutput out;
    Tensor encoded = transformer_forward(seq0, state.enc_blocks, state.enc_ln_g, state.enc_ln_b,
                                         cfg.heads, &out.per_block);
    out.cls_out = slice_rows(encoded, 0, 1);
    out.tokens.tokens = slice_rows(encoded, 1, encoded.rows());
    out.tokens.provenance = std::move(vis.provenance);
    out.plan = plan;
    out.volume_dims = volume.dims;
    out.grid_dims = grid_dims;
    return out;
}

DecodeOutput decode(const EncoderOutput& enc, const MaskPlan& plan, const ModelState& state) {
    const ModelConfig& cfg = state.config;
    const int64_t L = plan.L;

    Tensor lat = linear(concat_rows({enc.cls_out, enc.tokens.tokens}), state.latent_w,
                        state.latent_b);
    Tensor cls_lat = slice_rows(lat, 0, 1);
    TokenSequence lat_tokens;
    lat_tokens.tokens = slice_rows(lat, 1, lat.rows());
    lat_tokens.provenance = enc.tokens.provenance;

    std::array<Tensor, 4> full = scatter_with_mask_tokens(lat_tokens, plan, state.mask_token);
    Tensor pe = sincos_pe(enc.grid_dims, cfg.d_dec);
    std::vector<Tensor> parts;
    parts.push_back(cls_lat);
    for (Modality m : plan.modalities) {
        Tensor zm = add(add_rowvec(full[static_cast<size_t>(m)],
                                   state.modality_embed[static_cast<size_t>(m)]),
                        pe);
        parts.push_back(zm);
    }
    Tensor seq = concat_rows(parts);
    Tensor decoded =
        transformer_forward(seq, state.dec_blocks, state.dec_ln_g, state.dec_ln_b, cfg.dec_heads);
    Tensor body = slice_rows(decoded, 1, decoded.rows());
    Tensor preds = linear(body, state.out_w, state.out_b);

    DecodeOutput out;
    out.decoder_seq_len = seq.rows();
    out.modalities = plan.modalities;
    out.volume_dims = enc.volume_dims;
    out.grid_dims = enc.grid_dims;
    out.p = cfg.p;
    int64_t row = 0;
    for (Modality m : plan.modalities) {
        out.patch_preds[static_cast<size_t>(m)] = slice_rows(preds, row, row + L);
        row += L;
    }
    return out;
}

std::vector<double> DecodeOutput::reconstruction(Modality m) const {
    const Tensor& t = patch_preds[static_cast<size_t>(m)];
    if (!t.defined()) throw ConfigError("reconstruction: modality was not decoded");
    return unpatchify(t.value(), grid_dims, p);
}

Tensor reconstruction_loss(const DecodeOutput& dec, const MultimodalVolume& target,
                           const MaskPlan& plan) {
    std::vector<Tensor> terms;
    for (Modality m : plan.modalities) {
        const std::vector<int64_t>& masked = plan.masked_of(m);
        if (masked.empty()) continue;
        if (!target.has(m))
            throw DataError(std::string("reconstruction loss: target lacks modality ") +
                            modality_name(m));
        PatchGrid pg = patchify(target.grid(m), target.dims, dec.p);
        terms.push_back(masked_patch_mse(dec.patch_preds[static_cast<size_t>(m)], pg.patches,
                                         masked));
    }
    if (terms.empty())
        throw ConfigError("reconstruction loss undefined: the plan masks no patches");
    return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

PretrainForward forward_pretrain(const MultimodalVolume& volume, const ModelState& state,
                                 std::mt19937_64& rng) {
    for (Modality m : kAllModalities)
        if (!volume.has(m))
            throw DataError(std::string("pretraining requires all four modalities; missing ") +
                            modality_name(m));
    const ModelConfig& cfg = state.config;
    const Dims3 grid_dims = patch_grid_dims(volume.dims, cfg.p);
    ModalitySet all(kAllModalities.begin(), kAllModalities.end());
    PretrainForward fw;
    fw.plan = sample_mask_plan(grid_dims.voxels(), all, cfg.r, cfg.alpha, rng);
    fw.enc = encode(volume, all, fw.plan, state);
    fw.dec = decode(fw.enc, fw.plan, state);
    fw.loss = reconstruction_loss(fw.dec, volume, fw.plan);
    return fw;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_params(const std::filesystem::path& dir, const std::string& kind,
                 const std::string& config_json,
                 const std::vector<std::pair<std::string, Tensor>>& params) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["kind"] = kind;
    manifest["config"] = nlohmann::json::parse(config_json);
    nlohmann::json plist = nlohmann::json::array();
    std::ofstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw DataError("cannot open params.bin for writing in " + dir.string());
    int64_t offset = 0;
    for (const auto& [name, t] : params) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["dtype"] = "f32";
        e["offset"] = offset;
        const int64_t nbytes = t.numel() * 4;
        e["nbytes"] = nbytes;
        plist.push_back(e);
        std::vector<float> buf(static_cast<size_t>(t.numel()));
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.value()[i]);
        bin.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * 4));
        offset += nbytes;
    }
    manifest["params"] = plist;
    bin.close();
    if (!bin) throw DataError("failed writing params.bin in " + dir.string());
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw DataError("cannot open manifest.json for writing in " + dir.string());
    mf << manifest.dump(2) << "\n";
    mf.close();
    if (!mf) throw DataError("failed writing manifest.json in " + dir.string());
}

namespace {

nlohmann::json read_manifest(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw DataError("checkpoint manifest not found in " + dir.string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedMetaError("malformed checkpoint manifest in " + dir.string() + ": " +
                                 e.what());
    }
    if (!manifest.contains("kind") || !manifest.contains("config") ||
        !manifest.contains("params"))
        throw MalformedMetaError("checkpoint manifest missing required keys in " + dir.string());
    return manifest;
}

}  // namespace

std::pair<std::string, std::string> peek_manifest(const std::filesystem::path& dir) {
    nlohmann::json manifest = read_manifest(dir);
    return {manifest["kind"].get<std::string>(), manifest["config"].dump()};
}

std::pair<std::string, std::string> load_params(
    const std::filesystem::path& dir, const std::vector<std::pair<std::string, Tensor>>& params) {
    nlohmann::json manifest = read_manifest(dir);

    std::ifstream bin(dir / "params.bin", std::ios::binary | std::ios::ate);
    if (!bin) throw DataError("checkpoint params.bin not found in " + dir.string());
    const int64_t file_size = static_cast<int64_t>(bin.tellg());
    bin.seekg(0);

    struct Entry {
        std::vector<int64_t> shape;
        int64_t offset = 0;
        int64_t nbytes = 0;
        bool used = false;
    };
    std::unordered_map<std::string, Entry> entries;
    try {
        for (const auto& e : manifest["params"]) {
            Entry ent;
            ent.shape = e["shape"].get<std::vector<int64_t>>();
            ent.offset = e["offset"].get<int64_t>();
            ent.nbytes = e["nbytes"].get<int64_t>();
            if (e["dtype"].get<std::string>() != "f32")
                throw MalformedMetaError("checkpoint parameter dtype must be f32");
            if (!entries.emplace(e["name"].get<std::string>(), std::move(ent)).second)
                throw MalformedMetaError("duplicate checkpoint parameter name");
        }
    } catch (const nlohmann::json::exception& e) {
        throw MalformedMetaError("malformed checkpoint parameter table in " + dir.string() +
                                 ": " + e.what());
    }

    for (const auto& [name, t] : params) {
        auto it = entries.find(name);
        if (it == entries.end())
            throw DataError("checkpoint is missing parameter '" + name + "' in " + dir.string());
        Entry& ent = it->second;
        if (ent.used) throw DataError("parameter '" + name + "' requested twice");
        ent.used = true;
        if (ent.shape != t.shape())
            throw ConfigError("checkpoint parameter '" + name + "' has mismatched shape");
        if (ent.nbytes != t.numel() * 4 || ent.offset < 0 || ent.offset + ent.nbytes > file_size)
            throw BlobSizeError("checkpoint parameter '" + name +
                                "' does not fit the params.bin blob");
        std::vector<float> buf(static_cast<size_t>(t.numel()));
        bin.seekg(ent.offset);
        bin.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * 4));
        if (!bin) throw BlobSizeError("short read from params.bin for parameter '" + name + "'");
        std::vector<double>& dst = const_cast<Tensor&>(t).value_mutable();
        for (size_t i = 0; i < buf.size(); ++i) dst[i] = static_cast<double>(buf[i]);
    }
    for (const auto& [name, ent] : entries)
        if (!ent.used)
            throw DataError("checkpoint has unexpected parameter '" + name + "' in " +
                            dir.string());
    return {manifest["kind"].get<std::string>(), manifest["config"].dump()};
}

std::string model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["d"] = c.d;
    j["depth"] = c.depth;
    j["heads"] = c.heads;
    j["mlp_dim"] = c.mlp_dim;
    j["d_dec"] = c.d_dec;
    j["dec_depth"] = c.dec_depth;
    j["dec_heads"] = c.dec_heads;
    j["p"] = c.p;
    j["alpha"] = c.alpha;
    j["r"] = c.r;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    ModelConfig c;
    try {
        nlohmann::json j = nlohmann::json::parse(text);
        c.d = j.at("d").get<int64_t>();
        c.depth = j.at("depth").get<int64_t>();
        c.heads = j.at("heads").get<int64_t>();
        c.mlp_dim = j.at("mlp_dim").get<int64_t>();
        c.d_dec = j.at("d_dec").get<int64_t>();
        c.dec_depth = j.at("dec_depth").get<int64_t>();
        c.dec_heads = j.at("dec_heads").get<int64_t>();
        c.p = j.at("p").get<int64_t>();
        c.alpha = j.at("alpha").get<double>();
        c.r = j.at("r").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw MalformedMetaError(std::string("malformed model config: ") + e.what());
    }
    c.validate();
    return c;
}

void save_model(const ModelState& state, const std::filesystem::path& dir) {
    save_params(dir, "bmmae.model", model_config_to_json(state.config), state.named_params());
}

ModelState load_model(const std::filesystem::path& dir) {
    auto [kind, config_json] = peek_manifest(dir);
    if (kind != "bmmae.model")
        throw DataError("checkpoint in " + dir.string() + " is of kind '" + kind +
                        "', expected 'bmmae.model'");
    ModelState state = init_model_state(model_config_from_json(config_json), /*seed=*/0);
    load_params(dir, state.named_params());
    return state;
}

ModelState load_model(const std::filesystem::path& dir, const ModelConfig& expected) {
    auto [kind, config_json] = peek_manifest(dir);
    if (kind != "bmmae.model")
        throw DataError("checkpoint in " + dir.string() + " is of kind '" + kind +
                        "', expected 'bmmae.model'");
    ModelConfig got = model_config_from_json(config_json);
    if (!(got == expected))
        throw ConfigError("checkpoint in " + dir.string() +
                          " was trained with a different model configuration");
    ModelState state = init_model_state(got, /*seed=*/0);
    load_params(dir, state.named_params());
    return state;
}

}  // namespace bmmae
