#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "bmmae/tokenizer.hpp"

using namespace bmmae;

namespace {

std::vector<float> random_grid(std::mt19937_64& rng, const Dims3& dims) {
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> g(static_cast<size_t>(dims.voxels()));
    for (float& x : g) x = dist(rng);
    return g;
}

TokenizerParams zero_params(int64_t pv, int64_t d) {
    TokenizerParams tp;
    for (Modality m : kAllModalities) {
        tp.weight[static_cast<size_t>(m)] = Tensor::zeros({pv, d});
        tp.bias[static_cast<size_t>(m)] = Tensor::zeros({d});
    }
    return tp;
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("patchify produces 512 rows of 4096 voxels at 128^3 with p=16") {
    std::vector<float> grid(static_cast<size_t>(128) * 128 * 128, 0.5f);
    PatchGrid pg = patchify(grid, {128, 128, 128}, 16);
    CHECK(pg.L() == 512);
    CHECK(pg.grid_dims == Dims3{8, 8, 8});
    CHECK(pg.patches.size() == 512u * 4096u);
}

TEST_CASE("patchify at 32^3 with p=8 gives 64 patches; indivisible shapes rejected") {
    std::vector<float> grid(32 * 32 * 32, 1.0f);
    CHECK(patchify(grid, {32, 32, 32}, 8).L() == 64);
    CHECK_THROWS_AS((void)patchify(grid, {32, 32, 32}, 5), DimensionError);
}

TEST_CASE("patchify rows follow the normative patch and voxel linearizations") {
    // Grid values encode their own voxel coordinates, so each row can be
    // checked against the documented index formulas directly.
    const Dims3 dims{4, 6, 8};
    std::vector<float> grid(static_cast<size_t>(dims.voxels()));
    for (int64_t i = 0; i < dims.voxels(); ++i) grid[static_cast<size_t>(i)] = static_cast<float>(i);
    const int64_t p = 2;
    PatchGrid pg = patchify(grid, dims, p);
    CHECK(pg.grid_dims == Dims3{2, 3, 4});
    for (int64_t a = 0; a < 2; ++a)
        for (int64_t b = 0; b < 3; ++b)
            for (int64_t c = 0; c < 4; ++c) {
                const int64_t row = ((a * 3) + b) * 4 + c;
                for (int64_t dh = 0; dh < p; ++dh)
                    for (int64_t dw = 0; dw < p; ++dw)
                        for (int64_t dd = 0; dd < p; ++dd) {
                            const double got =
                                pg.patches[static_cast<size_t>(row * 8 + (dh * p + dw) * p + dd)];
                            const double want = static_cast<double>(
                                linear_index(dims, a * p + dh, b * p + dw, c * p + dd));
                            CHECK(got == want);
                        }
            }
}

TEST_CASE("unpatchify inverts patchify exactly") {
    std::mt19937_64 rng(3);
    const Dims3 dims{16, 16, 16};
    auto grid = random_grid(rng, dims);
    PatchGrid pg = patchify(grid, dims, 4);
    auto back = unpatchify(pg.patches, pg.grid_dims, 4);
    REQUIRE(back.size() == grid.size());
    for (size_t i = 0; i < grid.size(); ++i)
        CHECK(back[i] == static_cast<double>(grid[i]));

    std::vector<double> zeros(pg.patches.size(), 0.0);
    for (double v : unpatchify(zeros, pg.grid_dims, 4)) CHECK(v == 0.0);

    CHECK_THROWS_AS((void)unpatchify(zeros, {3, 3, 3}, 4), DimensionError);
}

TEST_CASE("a modified patch touches exactly p^3 voxels inside one cube") {
    std::mt19937_64 rng(4);
    const Dims3 dims{16, 16, 16};
    const int64_t p = 4, pv = p * p * p;
    auto grid = random_grid(rng, dims);
    PatchGrid pg = patchify(grid, dims, p);
    auto base = unpatchify(pg.patches, pg.grid_dims, p);

    const int64_t target = 11;  // grid coordinate (0,2,3)
    for (int64_t j = 0; j < pv; ++j) pg.patches[static_cast<size_t>(target * pv + j)] += 5.0;
    auto touched = unpatchify(pg.patches, pg.grid_dims, p);

    int64_t n_diff = 0;
    int64_t min_h = 99, max_h = -1, min_w = 99, max_w = -1, min_d = 99, max_d = -1;
    for (int64_t h = 0; h < dims.h; ++h)
        for (int64_t w = 0; w < dims.w; ++w)
            for (int64_t d = 0; d < dims.d; ++d) {
                const size_t i = static_cast<size_t>(linear_index(dims, h, w, d));
                if (touched[i] != base[i]) {
                    ++n_diff;
                    min_h = std::min(min_h, h), max_h = std::max(max_h, h);
                    min_w = std::min(min_w, w), max_w = std::max(max_w, w);
                    min_d = std::min(min_d, d), max_d = std::max(max_d, d);
                }
            }
    CHECK(n_diff == pv);
    // target index 11 = ((0*4)+2)*4+3 -> cube origin (0, 8, 12).
    CHECK(min_h == 0);
    CHECK(max_h == 3);
    CHECK(min_w == 8);
    CHECK(max_w == 11);
    CHECK(min_d == 12);
    CHECK(max_d == 15);
}

TEST_CASE("positional encoding: origin row, range, and width validation") {
    Tensor pe = sincos_pe({4, 4, 4}, 24);
    REQUIRE(pe.rows() == 64);
    REQUIRE(pe.cols() == 24);
    // Row 0 = coordinate (0,0,0): per axis band of 8, first half sin(0)=0,
    // second half cos(0)=1.
    for (int axis = 0; axis < 3; ++axis)
        for (int64_t k = 0; k < 4; ++k) {
            CHECK(pe.value()[static_cast<size_t>(axis * 8 + k)] == 0.0);
            CHECK(pe.value()[static_cast<size_t>(axis * 8 + 4 + k)] == 1.0);
        }
    for (double v : pe.value()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS((void)sincos_pe({4, 4, 4}, 20), ConfigError);
}

TEST_CASE("positional encoding rows are collision-free over a 16^3 grid at d=96") {
    Tensor pe = sincos_pe({16, 16, 16}, 96);
    const int64_t L = pe.rows(), d = pe.cols();
    std::vector<int64_t> order(static_cast<size_t>(L));
    std::iota(order.begin(), order.end(), 0);
    const double* v = pe.value().data();
    std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return std::lexicographical_compare(v + x * d, v + (x + 1) * d, v + y * d,
                                            v + (y + 1) * d);
    });
    for (int64_t i = 0; i + 1 < L; ++i) {
        const double* a = v + order[static_cast<size_t>(i)] * d;
        const double* b = v + order[static_cast<size_t>(i + 1)] * d;
        CHECK(!std::equal(a, a + d, b));
    }
}

TEST_CASE("embed with zero parameters returns the positional encoding itself") {
    std::mt19937_64 rng(5);
    const Dims3 dims{8, 8, 8};
    PatchGrid pg = patchify(random_grid(rng, dims), dims, 4);
    Tensor pe = sincos_pe(pg.grid_dims, 24);
    TokenizerParams tp = zero_params(64, 24);
    TokenSequence seq = embed(pg, Modality::T2, tp, pe);
    REQUIRE(seq.tokens.rows() == pg.L());
    for (size_t i = 0; i < seq.tokens.value().size(); ++i)
        CHECK(seq.tokens.value()[i] == pe.value()[i]);
    // Provenance is the full (modality, patch) range in order.
    std::set<std::pair<Modality, int64_t>> seen;
    for (auto& pr : seq.provenance) {
        CHECK(pr.first == Modality::T2);
        seen.insert(pr);
    }
    CHECK(static_cast<int64_t>(seen.size()) == pg.L());
}

TEST_CASE("modality-specific weights give modality-specific tokens") {
    std::mt19937_64 rng(6);
    const Dims3 dims{8, 8, 8};
    PatchGrid pg = patchify(random_grid(rng, dims), dims, 4);
    Tensor pe = sincos_pe(pg.grid_dims, 24);
    TokenizerParams tp = zero_params(64, 24);
    std::uniform_real_distribution<double> dist(-0.1, 0.1);
    std::vector<double> w1(64 * 24), w2(64 * 24);
    for (double& x : w1) x = dist(rng);
    for (double& x : w2) x = dist(rng);
    tp.weight[0] = Tensor::from_data({64, 24}, w1);
    tp.weight[2] = Tensor::from_data({64, 24}, w2);
    TokenSequence a = embed(pg, Modality::T1, tp, pe);
    TokenSequence b = embed(pg, Modality::T2, tp, pe);
    bool differ = false;
    for (size_t i = 0; i < a.tokens.value().size() && !differ; ++i)
        differ = a.tokens.value()[i] != b.tokens.value()[i];
    CHECK(differ);
}

TEST_CASE("embedding weight gradient matches finite differences within 1e-4") {
    std::mt19937_64 rng(7);
    const Dims3 dims{4, 4, 4};
    PatchGrid pg = patchify(random_grid(rng, dims), dims, 2);
    Tensor pe = sincos_pe(pg.grid_dims, 12);
    TokenizerParams tp = zero_params(8, 12);
    std::uniform_real_distribution<double> dist(-0.5, 0.5);
    std::vector<double> wv(8 * 12), bv(12);
    for (double& x : wv) x = dist(rng);
    for (double& x : bv) x = dist(rng);
    tp.weight[1] = Tensor::from_data({8, 12}, wv, true);
    tp.bias[1] = Tensor::from_data({12}, bv, true);

    auto loss_of = [&]() {
        TokenSequence seq = embed(pg, Modality::T1c, tp, pe);
        return mean_all(mul(seq.tokens, seq.tokens));
    };
    Tensor loss = loss_of();
    loss.backward();
    auto grad_w = tp.weight[1].grad();
    auto grad_b = tp.bias[1].grad();

    const double h = 1e-5;
    auto fd_check = [&](Tensor& param, const std::vector<double>& analytic) {
        for (int64_t i = 0; i < param.numel(); ++i) {
            const double orig = param.value()[static_cast<size_t>(i)];
            param.value_mutable()[static_cast<size_t>(i)] = orig + h;
            const double fp = loss_of().item();
            param.value_mutable()[static_cast<size_t>(i)] = orig - h;
            const double fm = loss_of().item();
            param.value_mutable()[static_cast<size_t>(i)] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double ga = analytic[static_cast<size_t>(i)];
            CHECK(std::fabs(fd - ga) <= 1e-4 * std::max({1.0, std::fabs(fd), std::fabs(ga)}));
        }
    };
    fd_check(tp.weight[1], grad_w);
    fd_check(tp.bias[1], grad_b);
}

TEST_CASE("embed validates parameters and shapes") {
    std::mt19937_64 rng(8);
    const Dims3 dims{4, 4, 4};
    PatchGrid pg = patchify(random_grid(rng, dims), dims, 2);
    Tensor pe = sincos_pe(pg.grid_dims, 12);
    TokenizerParams missing;  // all tensors undefined
    CHECK_THROWS_AS((void)embed(pg, Modality::T1, missing, pe), ConfigError);
    TokenizerParams bad = zero_params(27, 12);  // wrong p^3
    CHECK_THROWS_AS((void)embed(pg, Modality::T1, bad, pe), DimensionError);
}

}  // TEST_SUITE
