#include "bmmae/masking.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "bmmae/rng.hpp"

namespace bmmae {

using nlohmann::json;

void MaskPlan::validate() const {
    if (modalities.empty()) throw ConfigError("mask plan has no modalities");
    if (r < 0.0 || r > 1.0) throw ConfigError("masking ratio outside [0,1]");
    double wsum = 0.0;
    int64_t vis_total = 0;
    for (Modality m : kAllModalities) {
        const auto& vis = visible[static_cast<size_t>(m)];
        const auto& msk = masked[static_cast<size_t>(m)];
        if (!subset_contains(modalities, m)) {
            if (!vis.empty() || !msk.empty() || weights[static_cast<size_t>(m)] != 0.0)
                throw ConfigError("mask plan touches a modality it does not declare");
            continue;
        }
        const double w = weights[static_cast<size_t>(m)];
        if (w < 0.0) throw ConfigError("negative masking weight");
        wsum += w;
        vis_total += static_cast<int64_t>(vis.size());
        // visible ∪ masked = {0..L-1}, disjoint, both sorted.
        std::vector<char> seen(static_cast<size_t>(L), 0);
        for (const auto* lst : {&vis, &msk}) {
            for (size_t i = 0; i < lst->size(); ++i) {
                const int64_t v = (*lst)[i];
                if (v < 0 || v >= L) throw ConfigError("mask plan index out of range");
                if (i > 0 && (*lst)[i - 1] >= v) throw ConfigError("mask plan list not sorted");
                if (seen[static_cast<size_t>(v)]++) throw ConfigError("mask plan index repeated");
            }
        }
        if (static_cast<int64_t>(vis.size() + msk.size()) != L)
            throw ConfigError("mask plan does not partition the patch range");
    }
    if (std::fabs(wsum - 1.0) > 1e-9) throw ConfigError("masking weights do not sum to 1");
    if (vis_total != total_visible) throw ConfigError("visible counts disagree with total");
}

std::array<int64_t, 4> visible_quotas(const std::array<double, 4>& weights,
                                      const ModalitySet& mods, int64_t budget, int64_t L) {
    std::array<int64_t, 4> q{};
    std::vector<std::pair<double, Modality>> rema;  // fractional remainder, modality
    int64_t assigned = 0;
    for (Modality m : mods) {
        const double raw = weights[static_cast<size_t>(m)] * static_cast<double>(budget);
        int64_t fl = static_cast<int64_t>(std::floor(raw));
        double rem = raw - static_cast<double>(fl);
        if (fl > L) {
            fl = L;
            rem = 0.0;  // clamped: excess rejoins the shortfall pool
        }
        q[static_cast<size_t>(m)] = fl;
        assigned += fl;
        rema.emplace_back(rem, m);
    }
    // Descending remainder; ties keep canonical modality order (stable sort
    // over a canonically ordered list).
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    int64_t shortfall = budget - assigned;
    while (shortfall > 0) {
        bool progressed = false;
        for (const auto& [rem, m] : rema) {
            if (shortfall == 0) break;
            auto& slot = q[static_cast<size_t>(m)];
            if (slot < L) {
                ++slot;
                --shortfall;
                progressed = true;
            }
        }
        if (!progressed) throw ConfigError("visible budget exceeds total patch capacity");
    }
    return q;
}

MaskPlan mask_plan_from_weights(int64_t L, const ModalitySet& mods, double r, double alpha,
                                const std::array<double, 4>& weights, std::mt19937_64& rng) {
    if (L < 1) throw ConfigError("mask plan needs at least one patch");
    if (mods.empty()) throw ConfigError("mask plan needs at least one modality");
    if (r < 0.0 || r > 1.0) throw ConfigError("masking ratio outside [0,1]");

    MaskPlan plan;
    plan.r = r;
    plan.alpha = alpha;
    plan.L = L;
    plan.modalities = mods;
    plan.weights = weights;
    plan.total_visible = static_cast<int64_t>(std::floor(
        (1.0 - r) * static_cast<double>(mods.size()) * static_cast<double>(L)));

    const auto quotas = visible_quotas(weights, mods, plan.total_visible, L);
    for (Modality m : mods) {
        const int64_t k = quotas[static_cast<size_t>(m)];
        auto vis = rng::sample_without_replacement(rng, L, k);
        std::sort(vis.begin(), vis.end());
        std::vector<char> is_vis(static_cast<size_t>(L), 0);
        for (int64_t v : vis) is_vis[static_cast<size_t>(v)] = 1;
        auto& msk = plan.masked[static_cast<size_t>(m)];
        msk.reserve(static_cast<size_t>(L - k));
        for (int64_t i = 0; i < L; ++i)
            if (!is_vis[static_cast<size_t>(i)]) msk.push_back(i);
        plan.visible[static_cast<size_t>(m)] = std::move(vis);
    }
    plan.validate();
    return plan;
}

MaskPlan sample_mask_plan(int64_t L, const ModalitySet& mods, double r, double alpha,
                          std::mt19937_64& rng) {
    if (alpha <= 0.0) throw ConfigError("Dirichlet concentration must be positive");
    if (mods.empty()) throw ConfigError("mask plan needs at least one modality");
    std::array<double, 4> w{};
    double total = 0.0;
    for (Modality m : mods) {
        const double g = rng::gamma_sample(rng, alpha);
        w[static_cast<size_t>(m)] = g;
        total += g;
    }
    for (Modality m : mods) w[static_cast<size_t>(m)] /= total;
    return mask_plan_from_weights(L, mods, r, alpha, w, rng);
}

MaskPlan full_visibility_plan(int64_t L, const ModalitySet& mods) {
    if (mods.empty()) throw ConfigError("mask plan needs at least one modality");
    MaskPlan plan;
    plan.r = 0.0;
    plan.alpha = 0.0;
    plan.L = L;
    plan.modalities = mods;
    plan.total_visible = static_cast<int64_t>(mods.size()) * L;
    for (Modality m : mods) {
        plan.weights[static_cast<size_t>(m)] = 1.0 / static_cast<double>(mods.size());
        auto& vis = plan.visible[static_cast<size_t>(m)];
        vis.resize(static_cast<size_t>(L));
        for (int64_t i = 0; i < L; ++i) vis[static_cast<size_t>(i)] = i;
    }
    plan.validate();
    return plan;
}

TokenSequence gather_visible(const std::array<TokenSequence, 4>& seqs, const MaskPlan& plan) {
    plan.validate();
    std::vector<Tensor> parts;
    TokenSequence out;
    for (Modality m : plan.modalities) {
        const TokenSequence& seq = seqs[static_cast<size_t>(m)];
        if (!seq.tokens.defined())
            throw ConfigError(std::string("mask plan references absent modality ") +
                              modality_name(m));
        if (seq.tokens.rows() != plan.L ||
            static_cast<int64_t>(seq.provenance.size()) != plan.L)
            throw DimensionError("token sequence length does not match the plan");
        for (int64_t i = 0; i < plan.L; ++i)
            if (seq.provenance[static_cast<size_t>(i)] != std::pair(m, i))
                throw ConfigError("token sequence provenance out of order");
        const auto& vis = plan.visible_of(m);
        if (vis.empty()) continue;
        parts.push_back(gather_rows(seq.tokens, vis));
        for (int64_t i : vis) out.provenance.emplace_back(m, i);
    }
    if (parts.empty()) throw ConfigError("mask plan leaves no visible tokens");
    out.tokens = parts.size() == 1 ? parts[0] : concat_rows(parts);
    return out;
}

std::array<Tensor, 4> scatter_with_mask_tokens(const TokenSequence& encoded, const MaskPlan& plan,
                                               const Tensor& mask_token) {
    plan.validate();
    if (encoded.tokens.rows() != plan.total_visible ||
        static_cast<int64_t>(encoded.provenance.size()) != plan.total_visible)
        throw DimensionError("encoded sequence length does not match the plan");
    if (mask_token.numel() != encoded.tokens.cols())
        throw DimensionError("mask token width does not match encoded tokens");

    std::array<Tensor, 4> out;
    int64_t offset = 0;
    for (Modality m : plan.modalities) {
        const auto& vis = plan.visible_of(m);
        const int64_t n = static_cast<int64_t>(vis.size());
        for (int64_t j = 0; j < n; ++j)
            if (encoded.provenance[static_cast<size_t>(offset + j)] !=
                std::pair(m, vis[static_cast<size_t>(j)]))
                throw ConfigError("encoded provenance does not match the mask plan");
        if (n == 0) {
            // Fully masked modality: L copies of the mask token.
            out[static_cast<size_t>(m)] = scatter_rows_fill(
                Tensor::zeros({0, mask_token.numel()}), {}, plan.L, mask_token);
        } else {
            Tensor block = slice_rows(encoded.tokens, offset, offset + n);
            out[static_cast<size_t>(m)] = scatter_rows_fill(block, vis, plan.L, mask_token);
        }
        offset += n;
    }
    return out;
}

std::string MaskPlan::to_json() const {
    validate();
    json j;
    j["r"] = r;
    j["alpha"] = alpha;
    j["L"] = L;
    j["total_visible"] = total_visible;
    json mods = json::array(), w = json::array(), vis = json::object();
    for (Modality m : modalities) {
        mods.push_back(modality_name(m));
        w.push_back(weights[static_cast<size_t>(m)]);
        vis[modality_name(m)] = visible[static_cast<size_t>(m)];
    }
    j["modalities"] = mods;
    j["weights"] = w;
    j["visible"] = vis;
    return j.dump(2);
}

MaskPlan MaskPlan::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("mask plan json: ") + e.what());
    }
    MaskPlan plan;
    try {
        plan.r = j.at("r").get<double>();
        plan.alpha = j.at("alpha").get<double>();
        plan.L = j.at("L").get<int64_t>();
        plan.total_visible = j.at("total_visible").get<int64_t>();
        const auto& mods = j.at("modalities");
        const auto& w = j.at("weights");
        if (!mods.is_array() || mods.size() != w.size())
            throw DataError("mask plan json: modality/weight arity mismatch");
        for (size_t i = 0; i < mods.size(); ++i) {
            auto m = modality_from_name(mods[i].get<std::string>());
            if (!m) throw DataError("mask plan json: unknown modality");
            plan.modalities.push_back(*m);
            plan.weights[static_cast<size_t>(*m)] = w[i].get<double>();
            const auto& vis = j.at("visible").at(mods[i].get<std::string>());
            auto& vm = plan.visible[static_cast<size_t>(*m)];
            vm = vis.get<std::vector<int64_t>>();
            std::vector<char> is_vis(static_cast<size_t>(plan.L), 0);
            for (int64_t x : vm) {
                if (x < 0 || x >= plan.L) throw DataError("mask plan json: index out of range");
                is_vis[static_cast<size_t>(x)] = 1;
            }
            auto& mm = plan.masked[static_cast<size_t>(*m)];
            for (int64_t x = 0; x < plan.L; ++x)
                if (!is_vis[static_cast<size_t>(x)]) mm.push_back(x);
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("mask plan json: ") + e.what());
    }
    plan.modalities = canonical_subset(plan.modalities);
    plan.validate();
    return plan;
}

}  // namespace bmmae
