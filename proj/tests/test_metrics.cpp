#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "bmmae/heads.hpp"
#include "bmmae/metrics.hpp"
#include "bmmae/rng.hpp"

using namespace bmmae;

namespace {

// Quadratic-time pairwise oracles, written independently of the library
// implementations (which use rank statistics).

double oracle_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0;
    int64_t pairs = 0;
    for (size_t i = 0; i < s.size(); ++i)
        for (size_t j = 0; j < s.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j])
                wins += 1.0;
            else if (s[i] == s[j])
                wins += 0.5;
        }
    return wins / static_cast<double>(pairs);
}

double oracle_ap(const std::vector<double>& s, const std::vector<int>& y) {
    std::vector<size_t> idx(s.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return s[a] > s[b]; });
    double ap = 0.0;
    int64_t pos_seen = 0, total_pos = 0;
    for (int v : y) total_pos += v;
    for (size_t r = 0; r < idx.size(); ++r)
        if (y[idx[r]] == 1) {
            ++pos_seen;
            ap += static_cast<double>(pos_seen) / static_cast<double>(r + 1);
        }
    return ap / static_cast<double>(total_pos);
}

double oracle_cindex(const std::vector<std::vector<double>>& curves,
                     const std::vector<double>& cuts, const std::vector<double>& times,
                     const std::vector<int>& events, bool* defined = nullptr) {
    double num = 0.0;
    int64_t den = 0;
    for (size_t i = 0; i < times.size(); ++i)
        for (size_t j = 0; j < times.size(); ++j) {
            if (i == j || events[i] != 1 || !(times[i] < times[j])) continue;
            // interval of the earlier patient, recomputed by scanning
            size_t k = 1;
            for (double c : cuts)
                if (c < times[i]) ++k;
            ++den;
            if (curves[i][k - 1] < curves[j][k - 1])
                num += 1.0;
            else if (curves[i][k - 1] == curves[j][k - 1])
                num += 0.5;
        }
    if (defined) *defined = den > 0;
    return den > 0 ? num / static_cast<double>(den) : -1.0;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("composite masks: emptiness, single label-3 voxel, one voxel per class, nesting") {
    SegmentationLabel lab;
    lab.dims = {2, 2, 2};
    lab.grid.assign(8, 0);
    CompositeMasks bg = composite_masks(lab);
    for (size_t i = 0; i < 8; ++i) {
        CHECK(bg.wt[i] == 0);
        CHECK(bg.tc[i] == 0);
        CHECK(bg.et[i] == 0);
    }

    lab.grid[5] = 3;
    CompositeMasks one = composite_masks(lab);
    CHECK(one.wt[5] == 1);
    CHECK(one.tc[5] == 1);
    CHECK(one.et[5] == 1);

    lab.grid.assign(8, 0);
    lab.grid[1] = 1;
    lab.grid[2] = 2;
    lab.grid[3] = 3;
    CompositeMasks three = composite_masks(lab);
    auto count = [](const std::vector<uint8_t>& m) {
        int64_t c = 0;
        for (uint8_t v : m) c += v;
        return c;
    };
    CHECK(count(three.wt) == 3);
    CHECK(count(three.tc) == 2);
    CHECK(count(three.et) == 1);

    lab.grid[0] = 4;
    CHECK_THROWS_AS(composite_masks(lab), DataError);

    // Nesting ET within TC within WT on random grids.
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 200; ++trial) {
        SegmentationLabel r;
        r.dims = {3, 3, 3};
        r.grid.resize(27);
        for (uint8_t& v : r.grid) v = static_cast<uint8_t>(g() % 4);
        CompositeMasks m = composite_masks(r);
        for (size_t i = 0; i < 27; ++i) {
            CHECK(m.et[i] <= m.tc[i]);
            CHECK(m.tc[i] <= m.wt[i]);
        }
    }
}

TEST_CASE("dice: identity, disjointness, half overlap, both-empty, symmetry") {
    std::vector<uint8_t> a = {1, 1, 0, 0, 1, 1, 0, 0};
    CHECK(dice(a, a) == 1.0);
    std::vector<uint8_t> b = {0, 0, 1, 1, 0, 0, 1, 1};
    CHECK(dice(a, b) == 0.0);

    // |P| = |T| = 4, |P ^ T| = 2 -> 0.5.
    std::vector<uint8_t> c = {1, 0, 1, 0, 1, 0, 1, 0};
    std::vector<uint8_t> d = {1, 0, 0, 1, 1, 0, 0, 1};
    CHECK(dice(c, d) == 0.5);

    std::vector<uint8_t> e(8, 0);
    CHECK(dice(e, e) == 1.0);

    CHECK_THROWS_AS(dice(a, std::vector<uint8_t>(4, 0)), DimensionError);

    std::mt19937_64 g(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<uint8_t> p(16), q(16);
        for (auto& v : p) v = static_cast<uint8_t>(g() % 2);
        for (auto& v : q) v = static_cast<uint8_t>(g() % 2);
        const double pq = dice(p, q);
        CHECK(pq == dice(q, p));
        CHECK(pq >= 0.0);
        CHECK(pq <= 1.0);
    }
}

TEST_CASE("ranking metrics: hand cases and degenerate input") {
    RankingMetrics sep = binary_ranking_metrics({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
    CHECK(sep.auc == 1.0);
    CHECK(sep.ap == 1.0);

    RankingMetrics ties = binary_ranking_metrics({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
    CHECK(ties.auc == 0.5);

    RankingMetrics mixed = binary_ranking_metrics({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0});
    CHECK(mixed.auc == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(mixed.ap == doctest::Approx(5.0 / 6.0).epsilon(1e-12));

    CHECK_THROWS_AS(binary_ranking_metrics({0.1, 0.2}, {1, 1}), DataError);
    CHECK_THROWS_AS(binary_ranking_metrics({0.1, 0.2}, {0, 0}), DataError);
    CHECK_THROWS_AS(binary_ranking_metrics({0.1}, {0, 1}), DimensionError);
}

TEST_CASE("ranking metrics match the pairwise oracles on random instances") {
    std::mt19937_64 g(7);
    for (int trial = 0; trial < 300; ++trial) {
        const size_t n = 2 + g() % 40;
        std::vector<double> s(n);
        std::vector<int> y(n);
        bool tie_heavy = trial % 3 == 0;
        for (size_t i = 0; i < n; ++i) {
            s[i] = tie_heavy ? static_cast<double>(g() % 5) * 0.25 : rng::uniform(g, 0.0, 1.0);
            y[i] = static_cast<int>(g() % 2);
        }
        int64_t pos = 0;
        for (int v : y) pos += v;
        if (pos == 0 || pos == static_cast<int64_t>(n)) continue;

        RankingMetrics m = binary_ranking_metrics(s, y);
        CHECK(m.auc == oracle_auc(s, y));
        CHECK(m.ap == doctest::Approx(oracle_ap(s, y)).epsilon(1e-12));

        // Antisymmetry under score negation when no ties exist.
        if (!tie_heavy) {
            std::vector<double> neg(n);
            for (size_t i = 0; i < n; ++i) neg[i] = -s[i];
            CHECK(binary_ranking_metrics(neg, y).auc ==
                  doctest::Approx(1.0 - m.auc).epsilon(1e-12));
        }
    }
}

TEST_CASE("concordance: perfect ordering, all ties, hand-built case with censoring") {
    const std::vector<double> cuts = {3.0, 6.0};

    // Perfectly ordered: earlier event times get uniformly lower curves.
    std::vector<std::vector<double>> perfect = {
        {0.2, 0.1, 0.05}, {0.5, 0.3, 0.2}, {0.8, 0.7, 0.6}, {0.9, 0.85, 0.8}};
    std::vector<double> times = {1.0, 4.0, 7.0, 9.0};
    std::vector<int> events = {1, 1, 1, 0};
    CHECK(concordance_index(perfect, cuts, times, events) == 1.0);

    // Identical curves: every comparable pair ties.
    std::vector<std::vector<double>> same(4, {0.7, 0.5, 0.3});
    CHECK(concordance_index(same, cuts, times, events) == 0.5);

    // Hand case: P0(T=2,δ=1), P1(T=5,δ=1), P2(T=8,δ=0), P3(T=4,δ=1).
    // Comparable: (0,1)(0,2)(0,3) at k=1; (3,1) tie, (3,2) at k=2; (1,2) at
    // k=2 -> concordant = 1 + 0.5 + 1 + 1 = 3.5 of 6.
    std::vector<std::vector<double>> curves = {
        {0.9, 0.7, 0.5}, {0.7, 0.4, 0.2}, {0.95, 0.9, 0.85}, {0.7, 0.4, 0.3}};
    std::vector<double> t2 = {2.0, 5.0, 8.0, 4.0};
    std::vector<int> e2 = {1, 1, 0, 1};
    const double c = concordance_index(curves, cuts, t2, e2);
    CHECK(c == doctest::Approx(3.5 / 6.0).epsilon(1e-15));
    CHECK(c == oracle_cindex(curves, cuts, t2, e2));

    // No comparable pairs (all censored) is undefined.
    CHECK_THROWS_AS(concordance_index(same, cuts, times, {0, 0, 0, 0}), DataError);
    // Increasing curve rejected.
    std::vector<std::vector<double>> bad = {{0.2, 0.5, 0.1}, {0.5, 0.3, 0.2}};
    CHECK_THROWS_AS(concordance_index(bad, cuts, {1.0, 2.0}, {1, 1}), ConfigError);
}

TEST_CASE("concordance equals the brute-force oracle exactly on random instances") {
    std::mt19937_64 g(11);
    int checked = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const size_t n = 2 + g() % 29;
        const size_t K = 2 + g() % 6;
        std::vector<double> cuts;
        double c0 = rng::uniform(g, 1.0, 5.0);
        for (size_t k = 0; k + 1 < K; ++k) {
            cuts.push_back(c0);
            c0 += rng::uniform(g, 1.0, 5.0);
        }
        std::vector<std::vector<double>> curves(n);
        std::vector<double> times(n);
        std::vector<int> events(n);
        for (size_t i = 0; i < n; ++i) {
            double s = 1.0;
            for (size_t k = 0; k < K; ++k) {
                // occasional plateaus to exercise tie handling
                if (g() % 4 != 0) s *= rng::uniform(g, 0.55, 0.99);
                curves[i].push_back(s);
            }
            times[i] = rng::uniform(g, 0.5, 30.0);
            if (g() % 5 == 0) times[i] = std::round(times[i]);  // occasional time ties
            events[i] = g() % 3 != 0;
        }
        bool defined = false;
        const double want = oracle_cindex(curves, cuts, times, events, &defined);
        if (!defined) {
            CHECK_THROWS_AS(concordance_index(curves, cuts, times, events), DataError);
            continue;
        }
        CHECK(concordance_index(curves, cuts, times, events) == want);
        ++checked;
    }
    CHECK(checked > 80);
}

TEST_CASE("concordance is invariant under monotone curve transforms and matches Harrell "
          "for proportional curves") {
    std::mt19937_64 g(13);
    const std::vector<double> cuts = {5.0, 10.0, 15.0};
    const size_t n = 18;
    std::vector<double> risks(n), times(n);
    std::vector<int> events(n);
    std::vector<std::vector<double>> curves(n);
    for (size_t i = 0; i < n; ++i) {
        risks[i] = rng::uniform(g, 0.05, 2.0);
        times[i] = rng::uniform(g, 1.0, 20.0);
        events[i] = g() % 4 != 0;
        for (int k = 1; k <= 4; ++k)
            curves[i].push_back(std::exp(-risks[i] * static_cast<double>(k)));
    }
    const double base = concordance_index(curves, cuts, times, events);

    // Shared monotone transform (curves stay non-increasing).
    std::vector<std::vector<double>> cubed = curves;
    for (auto& c : cubed)
        for (double& v : c) v = v * v * v;
    CHECK(concordance_index(cubed, cuts, times, events) == base);

    // Uniformly ordered curves reduce to scalar-risk concordance.
    CHECK(harrell_cindex(risks, times, events) == base);
}

TEST_CASE("argmax labels pick the highest logit with low-class tie-breaks") {
    Tensor logits = Tensor::from_data({3, 4}, {// class 0
                                               0.5, 2.0, 1.0, 1.0,
                                               // class 1
                                               0.1, 3.0, 1.0, 0.5,
                                               // class 2
                                               0.6, 2.5, 0.2, 1.0});
    std::vector<uint8_t> lab = argmax_labels(logits);
    CHECK(lab == std::vector<uint8_t>{2, 1, 0, 0});
}

}  // TEST_SUITE("metrics")
