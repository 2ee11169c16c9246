#include "bmmae/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "bmmae/heads.hpp"

namespace bmmae {

CompositeMasks composite_masks(const SegmentationLabel& label) {
    CompositeMasks out;
    out.dims = label.dims;
    const size_t n = label.grid.size();
    out.wt.assign(n, 0);
    out.tc.assign(n, 0);
    out.et.assign(n, 0);
    for (size_t i = 0; i < n; ++i) {
        const uint8_t v = label.grid[i];
        if (v > 3) throw DataError("composite_masks: label outside {0,1,2,3}");
        if (v != 0) out.wt[i] = 1;
        if (v == 1 || v == 3) out.tc[i] = 1;
        if (v == 3) out.et[i] = 1;
    }
    return out;
}

double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth) {
    if (pred.size() != truth.size()) throw DimensionError("dice: mask shapes differ");
    int64_t inter = 0, p = 0, t = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] != 0, b = truth[i] != 0;
        p += a;
        t += b;
        inter += a && b;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

std::vector<uint8_t> argmax_labels(const Tensor& logits) {
    const int64_t C = logits.rows(), V = logits.cols();
    std::vector<uint8_t> out(static_cast<size_t>(V));
    for (int64_t i = 0; i < V; ++i) {
        int64_t best = 0;
        double bv = logits.value()[static_cast<size_t>(i)];
        for (int64_t c = 1; c < C; ++c) {
            const double v = logits.value()[static_cast<size_t>(c * V + i)];
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        out[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
    }
    return out;
}

RankingMetrics binary_ranking_metrics(const std::vector<double>& scores,
                                      const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw DimensionError("binary_ranking_metrics: score/label count mismatch");
    int64_t n_pos = 0, n_neg = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw DataError("binary_ranking_metrics: labels must be 0/1");
        (l == 1 ? n_pos : n_neg) += 1;
    }
    if (n_pos == 0 || n_neg == 0)
        throw DataError("binary_ranking_metrics: both classes required (metric undefined)");

    const size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    // Descending score; ties keep original index order (stable).
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    // AUC via midranks over ascending scores.
    std::vector<size_t> asc(order.rbegin(), order.rend());
    std::vector<double> rank(n);
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j + 1 < n && scores[asc[j + 1]] == scores[asc[i]]) ++j;
        const double mid = 0.5 * static_cast<double>((i + 1) + (j + 1));
        for (size_t k = i; k <= j; ++k) rank[asc[k]] = mid;
        i = j + 1;
    }
    double rank_sum_pos = 0.0;
    for (size_t i = 0; i < n; ++i)
        if (labels[i] == 1) rank_sum_pos += rank[i];
    const double auc =
        (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
        (static_cast<double>(n_pos) * static_cast<double>(n_neg));

    // Non-interpolated AP: mean precision at every positive's rank.
    double ap = 0.0;
    int64_t seen_pos = 0;
    for (size_t r = 0; r < n; ++r)
        if (labels[order[r]] == 1) {
            ++seen_pos;
            ap += static_cast<double>(seen_pos) / static_cast<double>(r + 1);
        }
    ap /= static_cast<double>(n_pos);
    return {auc, ap};
}

double concordance_index(const std::vector<std::vector<double>>& curves,
                         const std::vector<double>& cut_points,
                         const std::vector<double>& times, const std::vector<int>& events) {
    const size_t n = times.size();
    if (curves.size() != n || events.size() != n)
        throw DimensionError("concordance_index: input length mismatch");
    const size_t K = cut_points.size() + 1;
    for (size_t i = 0; i < n; ++i) {
        if (!(times[i] > 0.0)) throw DataError("concordance_index: times must be positive");
        if (events[i] != 0 && events[i] != 1)
            throw DataError("concordance_index: events must be 0/1");
        if (curves[i].size() != K)
            throw DimensionError("concordance_index: curve length must be K");
        for (size_t k = 1; k < K; ++k)
            if (curves[i][k] > curves[i][k - 1] + 1e-12)
                throw ConfigError("concordance_index: survival curves must be non-increasing");
    }

    double concordant = 0.0;
    int64_t comparable = 0;
    for (size_t i = 0; i < n; ++i) {
        if (events[i] != 1) continue;
        const size_t k = static_cast<size_t>(assign_interval(times[i], cut_points));
        for (size_t j = 0; j < n; ++j) {
            if (times[i] >= times[j] || i == j) continue;
            ++comparable;
            const double si = curves[i][k - 1], sj = curves[j][k - 1];
            if (si < sj)
                concordant += 1.0;
            else if (si == sj)
                concordant += 0.5;
        }
    }
    if (comparable == 0)
        throw DataError("concordance_index: no comparable pairs (metric undefined)");
    return concordant / static_cast<double>(comparable);
}

double harrell_cindex(const std::vector<double>& risks, const std::vector<double>& times,
                      const std::vector<int>& events) {
    const size_t n = times.size();
    if (risks.size() != n || events.size() != n)
        throw DimensionError("harrell_cindex: input length mismatch");
    double concordant = 0.0;
    int64_t comparable = 0;
    for (size_t i = 0; i < n; ++i) {
        if (events[i] != 1) continue;
        for (size_t j = 0; j < n; ++j) {
            if (times[i] >= times[j] || i == j) continue;
            ++comparable;
            if (risks[i] > risks[j])
                concordant += 1.0;
            else if (risks[i] == risks[j])
                concordant += 0.5;
        }
    }
    if (comparable == 0)
        throw DataError("harrell_cindex: no comparable pairs (metric undefined)");
    return concordant / static_cast<double>(comparable);
}

}  // namespace bmmae
