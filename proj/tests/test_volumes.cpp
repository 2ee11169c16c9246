#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "bmmae/volumes.hpp"

using namespace bmmae;
namespace fs = std::filesystem;

namespace {

MultimodalVolume make_volume(const Dims3& dims, std::initializer_list<Modality> mods) {
    MultimodalVolume v;
    v.patient_id = "test";
    v.dims = dims;
    for (Modality m : mods) {
        auto& g = v.grid(m);
        g.resize(static_cast<size_t>(dims.voxels()));
        for (size_t i = 0; i < g.size(); ++i)
            g[i] = static_cast<float>(std::sin(0.37 * static_cast<double>(i) +
                                               static_cast<double>(m)));
    }
    return v;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("bmmae_test_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("volumes") {

TEST_CASE("preprocess center-crops 160^3 to 128^3 with offset 16 and standardizes") {
    const Dims3 in_dims{160, 160, 160};
    MultimodalVolume v;
    v.patient_id = "big";
    v.dims = in_dims;
    // Voxel value = h coordinate: lets the crop offset show up in the values.
    auto& g = v.grid(Modality::T2);
    g.resize(static_cast<size_t>(in_dims.voxels()));
    for (int64_t h = 0; h < 160; ++h)
        for (int64_t w = 0; w < 160; ++w)
            for (int64_t d = 0; d < 160; ++d)
                g[static_cast<size_t>(linear_index(in_dims, h, w, d))] = static_cast<float>(h);

    MultimodalVolume out = preprocess(v, {128, 128, 128});
    CHECK(out.dims == Dims3{128, 128, 128});
    REQUIRE(out.has(Modality::T2));
    REQUIRE(!out.has(Modality::T1));

    // Cropped h values are 16..143: mean 79.5, variance (128^2-1)/12.
    const double mean = 79.5;
    const double stdev = std::sqrt((128.0 * 128.0 - 1.0) / 12.0);
    CHECK(out.grid(Modality::T2)[0] ==
          doctest::Approx((16.0 - mean) / stdev).epsilon(1e-5));
    const int64_t last = out.dims.voxels() - 1;
    CHECK(out.grid(Modality::T2)[static_cast<size_t>(last)] ==
          doctest::Approx((143.0 - mean) / stdev).epsilon(1e-5));

    double m = 0, var = 0;
    for (float x : out.grid(Modality::T2)) m += x;
    m /= static_cast<double>(out.dims.voxels());
    for (float x : out.grid(Modality::T2)) var += (x - m) * (x - m);
    var /= static_cast<double>(out.dims.voxels());
    CHECK(std::fabs(m) < 1e-6);
    CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-6);
}

TEST_CASE("preprocess puts odd crop remainders on the high-index side") {
    const Dims3 in_dims{5, 4, 4};
    MultimodalVolume v = make_volume(in_dims, {Modality::T1});
    // h extent 5 -> crop 2 leaves remainder 3: low offset 1, high leftover 2.
    auto& g = v.grid(Modality::T1);
    for (int64_t h = 0; h < 5; ++h)
        for (int64_t w = 0; w < 4; ++w)
            for (int64_t d = 0; d < 4; ++d)
                g[static_cast<size_t>(linear_index(in_dims, h, w, d))] = static_cast<float>(h);
    MultimodalVolume out = preprocess(v, {2, 4, 4});
    // Kept h slices are {1, 2}: standardized to -1 and +1.
    CHECK(out.grid(Modality::T1)[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(out.grid(Modality::T1)[16] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("preprocess maps constant modalities to all zeros") {
    MultimodalVolume v = make_volume({4, 4, 4}, {Modality::T1, Modality::FLAIR});
    std::fill(v.grid(Modality::T1).begin(), v.grid(Modality::T1).end(), 3.25f);
    MultimodalVolume out = preprocess(v, {4, 4, 4});
    for (float x : out.grid(Modality::T1)) CHECK(x == 0.0f);
    // The non-constant modality still standardizes normally.
    double m = 0;
    for (float x : out.grid(Modality::FLAIR)) m += x;
    CHECK(std::fabs(m / 64.0) < 1e-6);
}

TEST_CASE("preprocess is idempotent within 1e-5 and rejects oversized crops") {
    MultimodalVolume v = make_volume({6, 6, 6}, {Modality::T1c});
    MultimodalVolume once = preprocess(v, {4, 6, 6});
    MultimodalVolume twice = preprocess(once, {4, 6, 6});
    for (size_t i = 0; i < once.grid(Modality::T1c).size(); ++i)
        CHECK(std::fabs(once.grid(Modality::T1c)[i] - twice.grid(Modality::T1c)[i]) < 1e-5);
    CHECK_THROWS_AS((void)preprocess(v, {8, 6, 6}), DimensionError);
}

TEST_CASE("synthetic cohort is reproducible from its seed") {
    auto a = generate_synthetic_cohort(4, {32, 32, 32}, 7, 8);
    auto b = generate_synthetic_cohort(4, {32, 32, 32}, 7, 8);
    REQUIRE(a.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(a[i].volume.patient_id == b[i].volume.patient_id);
        for (Modality m : kAllModalities) {
            REQUIRE(a[i].volume.has(m));
            CHECK(std::memcmp(a[i].volume.grid(m).data(), b[i].volume.grid(m).data(),
                              a[i].volume.grid(m).size() * sizeof(float)) == 0);
        }
        CHECK(a[i].seg->grid == b[i].seg->grid);
        CHECK(*a[i].subtype == *b[i].subtype);
        CHECK(a[i].survival->time == b[i].survival->time);
        CHECK(a[i].survival->event == b[i].survival->event);
    }
    auto c = generate_synthetic_cohort(4, {32, 32, 32}, 8, 8);
    bool any_diff = false;
    for (size_t i = 0; i < 4 && !any_diff; ++i)
        any_diff = std::memcmp(a[i].volume.grid(Modality::T1).data(),
                               c[i].volume.grid(Modality::T1).data(),
                               a[i].volume.grid(Modality::T1).size() * sizeof(float)) != 0;
    CHECK(any_diff);
}

TEST_CASE("synthetic labels are nested lesion subregions with valid task targets") {
    auto cohort = generate_synthetic_cohort(20, {32, 32, 32}, 41, 8);
    for (const auto& rec : cohort) {
        REQUIRE(rec.seg.has_value());
        int64_t n1 = 0, n2 = 0, n3 = 0;
        for (uint8_t v : rec.seg->grid) {
            REQUIRE(v <= 3);
            n1 += v == 1;
            n2 += v == 2;
            n3 += v == 3;
        }
        // Nesting (3 inside 1 inside 2) means every shell is non-empty and
        // the composite regions grow strictly.
        CHECK(n3 > 0);
        CHECK(n1 > 0);
        CHECK(n2 > 0);
        CHECK(n3 < n3 + n1);
        CHECK(n3 + n1 < n3 + n1 + n2);

        REQUIRE(rec.survival.has_value());
        CHECK(rec.survival->time > 0.0);
        CHECK((rec.survival->event == 0 || rec.survival->event == 1));
        REQUIRE(rec.subtype.has_value());
        CHECK((*rec.subtype == 0 || *rec.subtype == 1));
    }
}

TEST_CASE("enhancing volume fraction drives subtype with balanced prevalence") {
    // Monte-Carlo check over the generator: thresholding at the empirical
    // median must split the cohort about in half, and the built-in fixed
    // threshold must stay near balance too.
    auto cohort = generate_synthetic_cohort(200, {32, 32, 32}, 1234, 8);
    std::vector<double> vf;
    int builtin_pos = 0, censored = 0;
    for (const auto& rec : cohort) {
        int64_t n3 = 0;
        for (uint8_t v : rec.seg->grid) n3 += v == 3;
        vf.push_back(static_cast<double>(n3) / static_cast<double>(rec.volume.dims.voxels()));
        builtin_pos += *rec.subtype;
        censored += rec.survival->event == 0;
    }
    std::vector<double> sorted = vf;
    std::nth_element(sorted.begin(), sorted.begin() + 100, sorted.end());
    const double median = sorted[100];
    int above = 0;
    for (double x : vf) above += x > median;
    const double prevalence = above / 200.0;
    CHECK(prevalence > 0.4);
    CHECK(prevalence < 0.6);
    CHECK(builtin_pos / 200.0 > 0.35);
    CHECK(builtin_pos / 200.0 < 0.65);
    // Right-censoring should hover near the ~30% design point.
    CHECK(censored / 200.0 > 0.18);
    CHECK(censored / 200.0 < 0.45);
    // Subtype must match the documented rule exactly.
    for (size_t i = 0; i < vf.size(); ++i) {
        // threshold is a fixed internal constant; consistency check: patients
        // with clearly larger fractions than a positive one are positive too.
        if (*cohort[i].subtype == 0)
            for (size_t j = 0; j < vf.size(); ++j)
                if (*cohort[j].subtype == 1) CHECK(vf[j] > vf[i] - 1e-12);
    }
}

TEST_CASE("cohort generation rejects shapes not divisible by the patch size") {
    CHECK_THROWS_AS((void)generate_synthetic_cohort(1, {30, 32, 32}, 1, 8), DimensionError);
    CHECK_THROWS_AS((void)generate_synthetic_cohort(0, {32, 32, 32}, 1, 8), ConfigError);
}

TEST_CASE("save/load round-trips a cohort bit-exactly") {
    TempDir tmp("roundtrip");
    auto cohort = generate_synthetic_cohort(2, {16, 16, 16}, 99, 8);
    save_cohort(cohort, tmp.path);
    auto loaded = load_cohort(tmp.path);
    REQUIRE(loaded.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(loaded[i].volume.patient_id == cohort[i].volume.patient_id);
        CHECK(loaded[i].volume.dims == cohort[i].volume.dims);
        for (Modality m : kAllModalities) {
            REQUIRE(loaded[i].volume.has(m) == cohort[i].volume.has(m));
            CHECK(std::memcmp(loaded[i].volume.grid(m).data(), cohort[i].volume.grid(m).data(),
                              cohort[i].volume.grid(m).size() * sizeof(float)) == 0);
        }
        CHECK(loaded[i].seg->grid == cohort[i].seg->grid);
        CHECK(*loaded[i].subtype == *cohort[i].subtype);
        CHECK(loaded[i].survival->time == cohort[i].survival->time);
        CHECK(loaded[i].survival->event == cohort[i].survival->event);
    }
}

TEST_CASE("partial-modality volumes round-trip too") {
    TempDir tmp("partial");
    MultimodalVolume v = make_volume({16, 16, 16}, {Modality::T1c, Modality::FLAIR});
    v.patient_id = "p0000";
    CohortRecord rec;
    rec.volume = v;
    save_cohort({rec}, tmp.path);
    auto loaded = load_cohort(tmp.path);
    REQUIRE(loaded.size() == 1);
    CHECK(!loaded[0].volume.has(Modality::T1));
    CHECK(!loaded[0].volume.has(Modality::T2));
    CHECK(loaded[0].volume.has(Modality::T1c));
    CHECK(loaded[0].volume.has(Modality::FLAIR));
    CHECK(!loaded[0].seg.has_value());
    CHECK(!loaded[0].subtype.has_value());
    CHECK(!loaded[0].survival.has_value());
}

TEST_CASE("loader reports truncated blobs, unknown modalities, malformed meta") {
    TempDir tmp("errors");
    auto cohort = generate_synthetic_cohort(1, {16, 16, 16}, 5, 8);
    save_cohort(cohort, tmp.path);
    const fs::path pdir = tmp.path / "p0000";

    SUBCASE("truncated blob") {
        fs::resize_file(pdir / "T1.f32", 16 * 16 * 16 * 4 - 4);
        CHECK_THROWS_AS((void)load_cohort(tmp.path), BlobSizeError);
    }
    SUBCASE("segmentation blob with wrong size") {
        fs::resize_file(pdir / "seg.u8", 16 * 16 * 16 - 1);
        CHECK_THROWS_AS((void)load_cohort(tmp.path), BlobSizeError);
    }
    SUBCASE("unknown modality name") {
        std::ofstream f(pdir / "meta.json");
        f << R"({"patient_id":"p0000","shape":[16,16,16],"present":["T3"]})";
        f.close();
        CHECK_THROWS_AS((void)load_cohort(tmp.path), UnknownModalityError);
    }
    SUBCASE("malformed json") {
        std::ofstream f(pdir / "meta.json");
        f << "{not json";
        f.close();
        CHECK_THROWS_AS((void)load_cohort(tmp.path), MalformedMetaError);
    }
    SUBCASE("missing required field") {
        std::ofstream f(pdir / "meta.json");
        f << R"({"patient_id":"p0000","present":["T1"]})";
        f.close();
        CHECK_THROWS_AS((void)load_cohort(tmp.path), MalformedMetaError);
    }
    SUBCASE("bad survival record") {
        std::ofstream f(pdir / "meta.json");
        f << R"({"patient_id":"p0000","shape":[16,16,16],"present":["T1"],)"
          << R"("survival":{"time":-3.0,"event":1}})";
        f.close();
        CHECK_THROWS_AS((void)load_cohort(tmp.path), MalformedMetaError);
    }
}

}  // TEST_SUITE
