#include "bmmae/heads.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "bmmae/rng.hpp"

namespace bmmae {

std::array<int64_t, 4> selected_blocks(int64_t depth) {
    if (depth < 1) throw ConfigError("selected_blocks: depth must be positive");
    std::array<int64_t, 4> out{};
    for (int64_t q = 1; q <= 4; ++q) out[static_cast<size_t>(q - 1)] = std::max<int64_t>(1, depth * q / 4);
    return out;
}

std::vector<Tensor> aggregate_hidden_states(const std::vector<Tensor>& per_block,
                                            const ModalitySet& subset, const MaskPlan& plan) {
    if (subset.empty()) throw ConfigError("aggregate_hidden_states: empty subset");
    if (plan.modalities != subset)
        throw ConfigError("aggregate_hidden_states: plan does not cover the subset");
    const int64_t L = plan.L;
    for (Modality m : subset)
        if (static_cast<int64_t>(plan.visible_of(m).size()) != L || !plan.masked_of(m).empty())
            throw ConfigError(
                "aggregate_hidden_states: masked plan (aggregation needs every token)");
    const int64_t nm = static_cast<int64_t>(subset.size());
    const std::array<int64_t, 4> blocks = selected_blocks(static_cast<int64_t>(per_block.size()));

    std::vector<Tensor> grids;
    for (int64_t b : blocks) {
        const Tensor& snap = per_block.at(static_cast<size_t>(b - 1));
        if (snap.rows() != 1 + nm * L)
            throw ConfigError("aggregate_hidden_states: snapshot length mismatch");
        std::vector<Tensor> parts;
        for (int64_t mi = 0; mi < nm; ++mi)
            parts.push_back(slice_rows(snap, 1 + mi * L, 1 + (mi + 1) * L));
        grids.push_back(parts.size() == 1 ? parts[0]
                                          : scale(add_n(parts), 1.0 / static_cast<double>(nm)));
    }
    return grids;
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

namespace {

int64_t log2_exact(int64_t p) {
    int64_t s = 0, v = 1;
    while (v < p) {
        v *= 2;
        ++s;
    }
    if (v != p || s < 1)
        throw ConfigError("segmentation head requires a power-of-two patch size of at least 2");
    return s;
}

// He-style truncated normal for the convolutional stack (two-sigma cut).
Tensor he_normal(std::vector<int64_t> shape, int64_t fan_in, std::mt19937_64& g) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
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

Tensor zeros_param(std::vector<int64_t> shape) {
    int64_t n = 1;
    for (int64_t s : shape) n *= s;
    return Tensor::from_data(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                             /*requires_grad=*/true);
}

// Stage t input channels: the running path plus the fused skip, if any.
int64_t stage_in_channels(const SegConfig& c, int64_t t) {
    const int64_t path = t == 1 ? c.proj_ch : c.stage_ch[static_cast<size_t>(t - 2)];
    const bool has_skip = 4 - t >= 1;  // next-shallower grid exists
    return path + (has_skip ? c.proj_ch : 0);
}

// 1x1x1 convolution on a [C, V] channel map as a per-voxel linear layer.
Tensor conv1x1(const Tensor& map, const Tensor& w, const Tensor& b) {
    return transpose(linear(transpose(map), w, b));
}

}  // namespace

void SegConfig::validate() const {
    if (d <= 0 || depth <= 0 || proj_ch <= 0 || n_classes <= 0)
        throw ConfigError("segmentation config: dimensions must be positive");
    const int64_t stages = log2_exact(p);
    if (static_cast<int64_t>(stage_ch.size()) != stages)
        throw ConfigError("segmentation config: one conv width per upsampling stage required");
    for (int64_t c : stage_ch)
        if (c <= 0) throw ConfigError("segmentation config: stage widths must be positive");
}

SegConfig SegConfig::for_model(const ModelConfig& m) {
    SegConfig c;
    c.d = m.d;
    c.p = m.p;
    c.depth = m.depth;
    const int64_t stages = log2_exact(m.p);
    switch (stages) {
        case 1: c.stage_ch = {8}; break;
        case 2: c.stage_ch = {16, 8}; break;
        case 3: c.stage_ch = {16, 8, 6}; break;
        case 4: c.stage_ch = {16, 12, 8, 6}; break;
        default:
            c.stage_ch.assign(static_cast<size_t>(stages), 8);
            c.stage_ch.back() = 6;
            break;
    }
    c.validate();
    return c;
}

std::vector<std::pair<std::string, Tensor>> SegHead::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < 4; ++i) {
        out.emplace_back("proj" + std::to_string(i) + ".weight", proj_w[i]);
        out.emplace_back("proj" + std::to_string(i) + ".bias", proj_b[i]);
    }
    for (size_t t = 0; t < stage_w.size(); ++t) {
        out.emplace_back("stage" + std::to_string(t) + ".weight", stage_w[t]);
        out.emplace_back("stage" + std::to_string(t) + ".bias", stage_b[t]);
    }
    out.emplace_back("logit.weight", logit_w);
    out.emplace_back("logit.bias", logit_b);
    return out;
}

SegHead init_seg_head(const SegConfig& config, uint64_t seed) {
    config.validate();
    std::mt19937_64 g(mix_seed(seed, 0x7365676865ULL));
    SegHead h;
    h.config = config;
    for (size_t i = 0; i < 4; ++i) {
        h.proj_w[i] = he_normal({config.d, config.proj_ch}, config.d, g);
        h.proj_b[i] = zeros_param({config.proj_ch});
    }
    const int64_t stages = static_cast<int64_t>(config.stage_ch.size());
    for (int64_t t = 1; t <= stages; ++t) {
        const int64_t cin = stage_in_channels(config, t);
        const int64_t cout = config.stage_ch[static_cast<size_t>(t - 1)];
        h.stage_w.push_back(he_normal({cout, cin * 27}, cin * 27, g));
        h.stage_b.push_back(zeros_param({cout}));
    }
    const int64_t final_in = config.stage_ch.back() + 1;  // + subset-mean raw channel
    h.logit_w = he_normal({final_in, config.n_classes}, final_in, g);
    h.logit_b = zeros_param({config.n_classes});
    return h;
}

SegOutput segment(const MultimodalVolume& volume, const ModalitySet& subset,
                  const ModelState& model, const SegHead& head) {
    const SegConfig& cfg = head.config;
    if (model.config.d != cfg.d || model.config.p != cfg.p || model.config.depth != cfg.depth)
        throw ConfigError("segmentation head does not match the encoder geometry");

    const Dims3 dims = volume.dims;
    if (dims.h % cfg.p != 0 || dims.w % cfg.p != 0 || dims.d % cfg.p != 0)
        throw DimensionError("volume dimensions must be divisible by the patch size");
    const Dims3 grid{dims.h / cfg.p, dims.w / cfg.p, dims.d / cfg.p};

    MaskPlan plan = full_visibility_plan(grid.voxels(), subset);
    EncoderOutput enc = encode(volume, subset, plan, model);
    std::vector<Tensor> grids = aggregate_hidden_states(enc.per_block, subset, plan);

    // Project each [L, d] grid to a thin [ch, L] channel map at base resolution.
    std::array<Tensor, 4> proj;
    for (size_t i = 0; i < 4; ++i)
        proj[i] = transpose(linear(grids[i], head.proj_w[i], head.proj_b[i]));

    Tensor x = proj[3];
    Dims3 cur = grid;
    const int64_t stages = static_cast<int64_t>(cfg.stage_ch.size());
    for (int64_t t = 1; t <= stages; ++t) {
        x = upsample_nearest2(x, cur);
        cur = {cur.h * 2, cur.w * 2, cur.d * 2};
        const int64_t gi = 3 - t;
        if (gi >= 0) {
            Tensor skip = proj[static_cast<size_t>(gi)];
            Dims3 sd = grid;
            for (int64_t u = 0; u < t; ++u) {
                skip = upsample_nearest2(skip, sd);
                sd = {sd.h * 2, sd.w * 2, sd.d * 2};
            }
            x = concat_rows({x, skip});
        }
        x = gelu(conv3d_3x3x3(x, head.stage_w[static_cast<size_t>(t - 1)],
                              head.stage_b[static_cast<size_t>(t - 1)], cur));
    }

    // Fuse the subset-mean raw volume at full resolution.
    std::vector<double> raw(static_cast<size_t>(dims.voxels()), 0.0);
    for (Modality m : subset) {
        const std::vector<float>& gsrc = volume.grid(m);
        for (size_t i = 0; i < raw.size(); ++i) raw[i] += static_cast<double>(gsrc[i]);
    }
    for (double& v : raw) v /= static_cast<double>(subset.size());
    Tensor raw_map = Tensor::from_data({1, dims.voxels()}, std::move(raw));

    SegOutput out;
    out.logits = conv1x1(concat_rows({x, raw_map}), head.logit_w, head.logit_b);
    out.dims = dims;
    return out;
}

Tensor soft_dice_loss(const SegOutput& out, const SegmentationLabel& label) {
    if (label.dims != out.dims) throw DimensionError("soft_dice_loss: label shape mismatch");
    const int64_t V = out.dims.voxels();
    const int64_t C = out.logits.rows();
    Tensor probs = softmax_rows(transpose(out.logits));  // [V, C]
    std::vector<Tensor> dices;
    for (int64_t c = 0; c < C; ++c) {
        std::vector<double> y(static_cast<size_t>(V), 0.0);
        double ysum = 0.0;
        for (int64_t i = 0; i < V; ++i)
            if (label.grid[static_cast<size_t>(i)] == c) {
                y[static_cast<size_t>(i)] = 1.0;
                ysum += 1.0;
            }
        Tensor yc = Tensor::from_data({V, 1}, std::move(y));
        Tensor pc = slice_cols(probs, c, c + 1);
        Tensor inter = sum_all(mul(pc, yc));
        Tensor den = add_scalar(sum_all(pc), ysum);
        dices.push_back(div(add_scalar(scale(inter, 2.0), 1.0), add_scalar(den, 1.0)));
    }
    Tensor mean_dice = scale(add_n(dices), 1.0 / static_cast<double>(C));
    return sub(Tensor::scalar(1.0), mean_dice);
}

Tensor seg_loss(const SegOutput& out, const SegmentationLabel& label) {
    if (label.dims != out.dims) throw DimensionError("seg_loss: label shape mismatch");
    Tensor ce = cross_entropy_rows(transpose(out.logits), label.grid);
    return add(soft_dice_loss(out, label), ce);
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Tensor>> ClsHead::named_params() const {
    return {{"head.weight", w}, {"head.bias", b}};
}

ClsHead init_cls_head(int64_t d, uint64_t seed) {
    if (d <= 0) throw ConfigError("classification head: width must be positive");
    std::mt19937_64 g(mix_seed(seed, 0x636c73ULL));
    ClsHead h;
    std::vector<double> wv(static_cast<size_t>(d));
    for (double& v : wv) {
        double z;
        do {
            z = rng::gauss(g);
        } while (std::abs(z) > 2.0);
        v = snap_f32(z * 0.02);
    }
    h.w = Tensor::from_data({d, 1}, std::move(wv), /*requires_grad=*/true);
    h.b = zeros_param({1});
    return h;
}

namespace {

Tensor cls_embedding(const MultimodalVolume& volume, const ModalitySet& subset,
                     const ModelState& model) {
    const int64_t p = model.config.p;
    const Dims3 dims = volume.dims;
    if (dims.h % p != 0 || dims.w % p != 0 || dims.d % p != 0)
        throw DimensionError("volume dimensions must be divisible by the patch size");
    const Dims3 grid{dims.h / p, dims.w / p, dims.d / p};
    MaskPlan plan = full_visibility_plan(grid.voxels(), subset);
    return encode(volume, subset, plan, model).cls_out;
}

}  // namespace

Tensor classify(const MultimodalVolume& volume, const ModalitySet& subset,
                const ModelState& model, const ClsHead& head) {
    return linear(cls_embedding(volume, subset, model), head.w, head.b);
}

// ---------------------------------------------------------------------------
// Survival
// ---------------------------------------------------------------------------

std::vector<double> discretize_times(std::vector<double> times, int64_t K) {
    if (K < 2) throw ConfigError("discretize_times: K must be at least 2");
    std::sort(times.begin(), times.end());
    int64_t distinct = times.empty() ? 0 : 1;
    for (size_t i = 1; i < times.size(); ++i)
        if (times[i] != times[i - 1]) ++distinct;
    if (distinct < K)
        throw ConfigError("discretize_times: fewer than K distinct times (degenerate quantiles)");

    const int64_t n = static_cast<int64_t>(times.size());
    std::vector<double> cuts;
    for (int64_t j = 1; j < K; ++j) {
        const double h = static_cast<double>(n - 1) * static_cast<double>(j) /
                         static_cast<double>(K);
        const int64_t lo = static_cast<int64_t>(std::floor(h));
        const int64_t hi = std::min(lo + 1, n - 1);
        const double frac = h - static_cast<double>(lo);
        cuts.push_back(times[static_cast<size_t>(lo)] +
                       frac * (times[static_cast<size_t>(hi)] - times[static_cast<size_t>(lo)]));
    }
    for (size_t j = 1; j < cuts.size(); ++j)
        if (!(cuts[j] > cuts[j - 1]))
            throw ConfigError("discretize_times: tied quantiles (degenerate cut points)");
    return cuts;
}

int64_t assign_interval(double t, const std::vector<double>& cut_points) {
    int64_t k = 1;
    for (double c : cut_points)
        if (c < t) ++k;
    return k;
}

std::vector<std::pair<std::string, Tensor>> HazardHead::named_params() const {
    return {{"head.weight", w}, {"head.bias", b}};
}

HazardHead init_hazard_head(int64_t d, std::vector<double> cut_points, uint64_t seed) {
    if (d <= 0) throw ConfigError("hazard head: width must be positive");
    if (cut_points.empty()) throw ConfigError("hazard head: at least one cut point (K >= 2)");
    for (size_t j = 1; j < cut_points.size(); ++j)
        if (!(cut_points[j] > cut_points[j - 1]))
            throw ConfigError("hazard head: cut points must be strictly increasing");
    std::mt19937_64 g(mix_seed(seed, 0x68617aULL));
    const int64_t K = static_cast<int64_t>(cut_points.size()) + 1;
    HazardHead h;
    std::vector<double> wv(static_cast<size_t>(d * K));
    for (double& v : wv) {
        double z;
        do {
            z = rng::gauss(g);
        } while (std::abs(z) > 2.0);
        v = snap_f32(z * 0.02);
    }
    h.w = Tensor::from_data({d, K}, std::move(wv), /*requires_grad=*/true);
    h.b = zeros_param({K});
    h.cut_points = std::move(cut_points);
    return h;
}

Tensor survival_logits(const MultimodalVolume& volume, const ModalitySet& subset,
                       const ModelState& model, const HazardHead& head) {
    return linear(cls_embedding(volume, subset, model), head.w, head.b);
}

std::vector<double> hazards_from_logits(const Tensor& logits) {
    std::vector<double> h(logits.value().size());
    for (size_t i = 0; i < h.size(); ++i) {
        const double a = logits.value()[i];
        h[i] = a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
    }
    return h;
}

std::vector<double> survival_curve(const std::vector<double>& hazards) {
    std::vector<double> s(hazards.size());
    double acc = 1.0;
    for (size_t k = 0; k < hazards.size(); ++k) {
        if (!(hazards[k] >= 0.0 && hazards[k] < 1.0))
            throw NumericError("survival_curve: hazard outside [0, 1)");
        acc *= 1.0 - hazards[k];
        s[k] = acc;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_seg_head(const SegHead& head, const ModalitySet& subset,
                   const std::filesystem::path& dir) {
    nlohmann::json j;
    j["d"] = head.config.d;
    j["p"] = head.config.p;
    j["depth"] = head.config.depth;
    j["proj_ch"] = head.config.proj_ch;
    j["stage_ch"] = head.config.stage_ch;
    j["n_classes"] = head.config.n_classes;
    j["subset"] = subset_to_string(subset);
    save_params(dir, "bmmae.seg_head", j.dump(), head.named_params());
}

std::pair<SegHead, ModalitySet> load_seg_head(const std::filesystem::path& dir) {
    auto [kind, cfg_json] = peek_manifest(dir);
    if (kind != "bmmae.seg_head")
        throw DataError("checkpoint in " + dir.string() + " is not a segmentation head");
    SegConfig c;
    ModalitySet subset;
    try {
        nlohmann::json j = nlohmann::json::parse(cfg_json);
        c.d = j.at("d").get<int64_t>();
        c.p = j.at("p").get<int64_t>();
        c.depth = j.at("depth").get<int64_t>();
        c.proj_ch = j.at("proj_ch").get<int64_t>();
        c.stage_ch = j.at("stage_ch").get<std::vector<int64_t>>();
        c.n_classes = j.at("n_classes").get<int64_t>();
        subset = parse_subset(j.at("subset").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw MalformedMetaError(std::string("malformed segmentation head config: ") + e.what());
    }
    SegHead head = init_seg_head(c, 0);
    load_params(dir, head.named_params());
    return {std::move(head), std::move(subset)};
}

void save_cls_head(const ClsHead& head, int64_t d, const ModalitySet& subset,
                   const std::filesystem::path& dir) {
    nlohmann::json j;
    j["d"] = d;
    j["subset"] = subset_to_string(subset);
    save_params(dir, "bmmae.cls_head", j.dump(), head.named_params());
}

std::pair<ClsHead, ModalitySet> load_cls_head(const std::filesystem::path& dir) {
    auto [kind, cfg_json] = peek_manifest(dir);
    if (kind != "bmmae.cls_head")
        throw DataError("checkpoint in " + dir.string() + " is not a classification head");
    int64_t d = 0;
    ModalitySet subset;
    try {
        nlohmann::json j = nlohmann::json::parse(cfg_json);
        d = j.at("d").get<int64_t>();
        subset = parse_subset(j.at("subset").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw MalformedMetaError(std::string("malformed classification head config: ") + e.what());
    }
    ClsHead head = init_cls_head(d, 0);
    load_params(dir, head.named_params());
    return {std::move(head), std::move(subset)};
}

void save_hazard_head(const HazardHead& head, int64_t d, const ModalitySet& subset,
                      const std::filesystem::path& dir) {
    nlohmann::json j;
    j["d"] = d;
    j["K"] = head.K();
    j["cut_points"] = head.cut_points;
    j["subset"] = subset_to_string(subset);
    save_params(dir, "bmmae.hazard_head", j.dump(), head.named_params());
}

std::pair<HazardHead, ModalitySet> load_hazard_head(const std::filesystem::path& dir) {
    auto [kind, cfg_json] = peek_manifest(dir);
    if (kind != "bmmae.hazard_head")
        throw DataError("checkpoint in " + dir.string() + " is not a survival head");
    int64_t d = 0;
    std::vector<double> cuts;
    ModalitySet subset;
    try {
        nlohmann::json j = nlohmann::json::parse(cfg_json);
        d = j.at("d").get<int64_t>();
        cuts = j.at("cut_points").get<std::vector<double>>();
        if (j.at("K").get<int64_t>() != static_cast<int64_t>(cuts.size()) + 1)
            throw MalformedMetaError("hazard head: K does not match cut point count");
        subset = parse_subset(j.at("subset").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw MalformedMetaError(std::string("malformed survival head config: ") + e.what());
    }
    HazardHead head = init_hazard_head(d, std::move(cuts), 0);
    load_params(dir, head.named_params());
    return {std::move(head), std::move(subset)};
}

}  // namespace bmmae
