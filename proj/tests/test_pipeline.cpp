#include <doctest.h>

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "bmmae/optim.hpp"
#include "bmmae/pipeline.hpp"
#include "bmmae/png_io.hpp"

using namespace bmmae;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("bmmae_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<uint8_t> read_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    return nlohmann::json::parse(
        std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
}

// Independent decoder for the writer's output: walks chunks, verifies CRCs,
// inflates IDAT with zlib and undoes the (absent) per-row filtering.
struct ParsedPng {
    int64_t w = 0, h = 0;
    std::vector<uint8_t> pixels;
};

ParsedPng parse_png_gray(const fs::path& path) {
    const std::vector<uint8_t> bytes = read_bytes(path);
    const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    REQUIRE(bytes.size() >= 8);
    REQUIRE(std::equal(sig, sig + 8, bytes.begin()));

    auto be32 = [&](size_t at) {
        return (uint32_t(bytes[at]) << 24) | (uint32_t(bytes[at + 1]) << 16) |
               (uint32_t(bytes[at + 2]) << 8) | uint32_t(bytes[at + 3]);
    };

    ParsedPng png;
    std::vector<uint8_t> idat;
    bool saw_end = false;
    size_t at = 8;
    while (at + 12 <= bytes.size()) {
        const uint32_t len = be32(at);
        REQUIRE(at + 12 + len <= bytes.size());
        const std::string type(bytes.begin() + static_cast<ptrdiff_t>(at + 4),
                               bytes.begin() + static_cast<ptrdiff_t>(at + 8));
        uLong crc = crc32(0L, Z_NULL, 0);
        crc = crc32(crc, bytes.data() + at + 4, 4 + len);
        CHECK(static_cast<uint32_t>(crc) == be32(at + 8 + len));
        if (type == "IHDR") {
            png.w = be32(at + 8);
            png.h = be32(at + 12);
            CHECK(bytes[at + 16] == 8);  // bit depth
            CHECK(bytes[at + 17] == 0);  // grayscale
            CHECK(bytes[at + 20] == 0);  // no interlace
        } else if (type == "IDAT") {
            idat.insert(idat.end(), bytes.begin() + static_cast<ptrdiff_t>(at + 8),
                        bytes.begin() + static_cast<ptrdiff_t>(at + 8 + len));
        } else if (type == "IEND") {
            saw_end = true;
        }
        at += 12 + len;
    }
    REQUIRE(saw_end);
    REQUIRE(png.w > 0);
    REQUIRE(png.h > 0);

    std::vector<uint8_t> raw(static_cast<size_t>(png.h * (png.w + 1)));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    REQUIRE(uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) ==
            Z_OK);
    REQUIRE(raw_len == raw.size());
    for (int64_t y = 0; y < png.h; ++y) {
        REQUIRE(raw[static_cast<size_t>(y * (png.w + 1))] == 0);  // filter byte
        const uint8_t* row = raw.data() + y * (png.w + 1) + 1;
        png.pixels.insert(png.pixels.end(), row, row + png.w);
    }
    return png;
}

// Small 16^3 cohort with deterministic label overrides for CV tests.
std::vector<CohortRecord> labelled_cohort(int n, uint64_t seed) {
    std::vector<CohortRecord> cohort =
        prepare_cohort(generate_synthetic_cohort(n, {16, 16, 16}, seed));
    for (int i = 0; i < n; ++i) {
        cohort[static_cast<size_t>(i)].subtype = i % 2;
        SurvivalRecord sr;
        sr.time = 1.0 + static_cast<double>(i);
        sr.event = (i % 3 != 0) ? 1 : 0;
        cohort[static_cast<size_t>(i)].survival = sr;
    }
    return cohort;
}

RunConfig tiny_run(Task task, uint64_t seed) {
    RunConfig cfg;
    cfg.task = task;
    cfg.preset = "tiny";
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.base_lr = 1e-4;
    cfg.weight_decay = 0.05;
    cfg.warmup_epochs = 0;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("learning-rate schedule: ramp, peak, cosine midpoint, continuity") {
    CHECK(lr_schedule(0, 100, 10, 3e-4) == 0.0);
    CHECK(lr_schedule(10, 100, 10, 3e-4) == 3e-4);
    CHECK(lr_schedule(10 + 45, 100, 10, 3e-4) == doctest::Approx(1.5e-4).epsilon(1e-12));
    CHECK(lr_schedule(100, 100, 10, 3e-4) == doctest::Approx(0.0).epsilon(1e-18));
    // No warmup starts at the peak; warmup == total never reaches the decay.
    CHECK(lr_schedule(0, 50, 0, 1e-3) == 1e-3);
    CHECK(lr_schedule(49, 50, 50, 1e-3) == doctest::Approx(1e-3 * 49.0 / 50.0));
    for (int64_t s = 0; s <= 200; ++s) {
        const double lr = lr_schedule(s, 200, 25, 1e-3);
        CHECK(lr >= 0.0);
        CHECK(lr <= 1e-3);
    }
    // Continuity at the warmup/cosine junction: one-step jumps stay O(1/steps).
    const double before = lr_schedule(24, 200, 25, 1e-3);
    const double at = lr_schedule(25, 200, 25, 1e-3);
    const double after = lr_schedule(26, 200, 25, 1e-3);
    CHECK(std::abs(at - before) < 1e-3 * 0.05);
    CHECK(std::abs(after - at) < 1e-3 * 0.05);
}

TEST_CASE("run config: defaults, JSON round-trip, paper-scale manifest echoes") {
    RunConfig c;
    c.task = Task::Pretrain;
    c.paper_scale = true;
    RunConfig d = c.with_defaults();
    CHECK(d.preset == "paper");
    CHECK(d.epochs == 1000);
    CHECK(d.batch_size == 6);
    CHECK(d.base_lr == 1e-4);
    CHECK(d.weight_decay == 0.05);
    CHECK(d.warmup_epochs == 50);

    const nlohmann::json manifest = nlohmann::json::parse(run_manifest(d, "scratch"));
    CHECK(manifest.at("epochs") == 1000);
    CHECK(manifest.at("batch_size") == 6);
    CHECK(manifest.at("base_lr") == 1e-4);
    CHECK(manifest.at("weight_decay") == 0.05);
    CHECK(manifest.at("warmup_epochs") == 50);
    CHECK(manifest.at("init") == "scratch");
    CHECK(manifest.at("model").at("d") == 768);

    RunConfig desk;
    desk.task = Task::Seg;
    RunConfig dd = desk.with_defaults();
    CHECK(dd.preset == "tiny");
    CHECK(dd.epochs == 30);
    CHECK(dd.base_lr == 5e-4);
    CHECK(desk.with_defaults().K == 4);
    RunConfig surv;
    surv.task = Task::Surv;
    surv.paper_scale = true;
    CHECK(surv.with_defaults().K == 10);
    CHECK(surv.with_defaults().epochs == 5);
    CHECK(surv.with_defaults().warmup_epochs == 5);

    RunConfig rt = tiny_run(Task::Cls, 7);
    rt.dataset = "/data/x";
    rt.subset = parse_subset("T1c,FLAIR");
    rt.K = 6;
    rt.folds = 3;
    RunConfig back = run_config_from_json(run_config_to_json(rt));
    CHECK(back.task == Task::Cls);
    CHECK(back.preset == "tiny");
    CHECK(back.dataset == "/data/x");
    CHECK(back.subset == rt.subset);
    CHECK(back.epochs == rt.epochs);
    CHECK(back.batch_size == rt.batch_size);
    CHECK(back.base_lr == rt.base_lr);
    CHECK(back.weight_decay == rt.weight_decay);
    CHECK(back.warmup_epochs == rt.warmup_epochs);
    CHECK(back.seed == rt.seed);
    CHECK(back.K == 6);
    CHECK(back.folds == 3);
}

TEST_CASE("run config validation rejects contradictions") {
    CHECK_THROWS_AS(parse_task("classify"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json("{"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(R"({"epoch": 3})"), ConfigError);  // unknown key
    CHECK_THROWS_AS(run_config_from_json(R"({"epochs": "three"})"), ConfigError);

    RunConfig pre = tiny_run(Task::Pretrain, 1);
    pre.subset = parse_subset("T1,T2");
    CHECK_THROWS_AS(pre.validate(), ConfigError);  // pretraining needs all four

    RunConfig warm = tiny_run(Task::Seg, 1);
    warm.warmup_epochs = 5;
    warm.epochs = 3;
    CHECK_THROWS_AS(warm.validate(), ConfigError);

    RunConfig sub = tiny_run(Task::Cls, 1);
    sub.subset.clear();
    CHECK_THROWS_AS(sub.validate(), ConfigError);

    RunConfig bad_preset = tiny_run(Task::Seg, 1);
    bad_preset.preset = "huge";
    CHECK_THROWS_AS(bad_preset.validate(), ConfigError);

    RunConfig surv = tiny_run(Task::Surv, 1);
    surv.K = 1;
    CHECK_THROWS_AS(surv.validate(), ConfigError);
}

TEST_CASE("stratified folds balance every class and the overall sizes") {
    // 20 patients, 10 positives, 5 folds -> exactly 2 positives per fold.
    std::vector<int> labels(20);
    for (size_t i = 0; i < 20; ++i) labels[i] = i < 10 ? 1 : 0;
    const std::vector<int> fold = stratified_folds(labels, 5, 42);
    std::vector<int> pos(5, 0), tot(5, 0);
    for (size_t i = 0; i < 20; ++i) {
        ++tot[static_cast<size_t>(fold[i])];
        if (labels[i] == 1) ++pos[static_cast<size_t>(fold[i])];
    }
    for (int f = 0; f < 5; ++f) {
        CHECK(pos[static_cast<size_t>(f)] == 2);
        CHECK(tot[static_cast<size_t>(f)] == 4);
    }

    // Random instances: partition + per-class counts within +/-1.
    std::mt19937_64 g(9);
    for (int trial = 0; trial < 50; ++trial) {
        const size_t n = 8 + g() % 40;
        const int64_t F = 2 + static_cast<int64_t>(g() % 5);
        if (n < static_cast<size_t>(F)) continue;
        std::vector<int> lab(n);
        for (auto& v : lab) v = static_cast<int>(g() % 3);
        const std::vector<int> fo = stratified_folds(lab, F, g());
        for (int c = 0; c < 3; ++c) {
            std::vector<int64_t> cnt(static_cast<size_t>(F), 0);
            for (size_t i = 0; i < n; ++i)
                if (lab[i] == c) ++cnt[static_cast<size_t>(fo[i])];
            const auto [lo, hi] = std::minmax_element(cnt.begin(), cnt.end());
            CHECK(*hi - *lo <= 1);
        }
    }

    CHECK(stratified_folds(labels, 5, 42) == fold);           // deterministic
    CHECK(stratified_folds(labels, 5, 43) != fold);           // seed-sensitive
    CHECK_THROWS_AS(stratified_folds({0, 1}, 3, 1), ConfigError);
}

TEST_CASE("png writer output survives an independent decode") {
    const fs::path dir = fresh_dir("png");
    GrayImage img;
    img.width = 7;
    img.height = 5;
    for (int64_t i = 0; i < 35; ++i) img.pixels.push_back(static_cast<uint8_t>(i * 7 % 256));
    write_png_gray(dir / "grad.png", img);
    const ParsedPng back = parse_png_gray(dir / "grad.png");
    CHECK(back.w == 7);
    CHECK(back.h == 5);
    CHECK(back.pixels == img.pixels);

    const GrayImage win = window_to_gray({1.0, 3.0, 2.0, 3.0}, 2, 2);
    CHECK(win.pixels == std::vector<uint8_t>{0, 255, 128, 255});
    const GrayImage flat = window_to_gray({2.5, 2.5}, 2, 1);
    CHECK(flat.pixels == std::vector<uint8_t>{128, 128});

    const GrayImage up = upscale_nearest(win, 2);
    CHECK(up.width == 4);
    CHECK(up.height == 4);
    CHECK(up.pixels[0] == 0);
    CHECK(up.pixels[1] == 0);
    CHECK(up.pixels[2] == 255);
    CHECK(up.pixels[5] == 0);

    CHECK_THROWS_AS(write_png_gray(dir / "bad.png", GrayImage{2, 2, {1, 2, 3}}), ConfigError);
}

TEST_CASE("pretraining runs are reproducible and logged") {
    const std::vector<CohortRecord> cohort =
        prepare_cohort(generate_synthetic_cohort(3, {16, 16, 16}, 77));
    RunConfig cfg = tiny_run(Task::Pretrain, 5);
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;

    const fs::path a = fresh_dir("pre_a"), b = fresh_dir("pre_b");
    const PretrainResult ra = run_pretrain(cfg, cohort, a);
    const PretrainResult rb = run_pretrain(cfg, cohort, b);
    CHECK(ra.epoch_loss.size() == 2);
    CHECK(ra.epoch_loss == rb.epoch_loss);
    CHECK(read_bytes(a / "checkpoint" / "params.bin") ==
          read_bytes(b / "checkpoint" / "params.bin"));
    CHECK(read_bytes(a / "checkpoint" / "manifest.json") ==
          read_bytes(b / "checkpoint" / "manifest.json"));

    // loss.csv: header + one row per optimizer step (ceil(3/2)=2 per epoch).
    std::ifstream csv(a / "loss.csv");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(csv, line)) lines.push_back(line);
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "epoch,step,loss");
    CHECK(lines[1].rfind("1,1,", 0) == 0);
    CHECK(lines[4].rfind("2,4,", 0) == 0);

    const nlohmann::json manifest = read_json(a / "run_manifest.json");
    CHECK(manifest.at("task") == "pretrain");
    CHECK(manifest.at("epochs") == 2);
    CHECK(manifest.at("seed") == 5);

    ModelState reloaded = load_model(ra.checkpoint);
    CHECK(reloaded.config == ModelConfig::tiny());

    // A patient missing one modality is rejected.
    std::vector<CohortRecord> broken = cohort;
    broken[0].volume.grids[2].clear();
    CHECK_THROWS_AS(run_pretrain(cfg, broken, fresh_dir("pre_bad")), DataError);
}

TEST_CASE("segmentation fine-tune: manifests differ only in init, predictions isolated") {
    const std::vector<CohortRecord> cohort = labelled_cohort(5, 31);
    RunConfig pre_cfg = tiny_run(Task::Pretrain, 9);
    const fs::path pre_dir = fresh_dir("seg_pre");
    const PretrainResult pre = run_pretrain(pre_cfg, cohort, pre_dir);

    RunConfig cfg = tiny_run(Task::Seg, 9);
    cfg.subset = parse_subset("T1c");
    const fs::path scratch_dir = fresh_dir("seg_scratch"), ckpt_dir = fresh_dir("seg_ckpt");
    const FinetuneResult rs = run_finetune(cfg, "scratch", cohort, scratch_dir);
    const FinetuneResult rc =
        run_finetune(cfg, pre.checkpoint.string(), cohort, ckpt_dir);

    for (const char* key : {"dice_wt", "dice_tc", "dice_et"}) {
        REQUIRE(rs.metrics.count(key) == 1);
        CHECK(rs.metrics.at(key) >= 0.0);
        CHECK(rs.metrics.at(key) <= 1.0);
        CHECK(rc.metrics.at(key) >= 0.0);
        CHECK(rc.metrics.at(key) <= 1.0);
    }
    CHECK(fs::exists(scratch_dir / "checkpoint" / "params.bin"));
    CHECK(fs::exists(scratch_dir / "head" / "params.bin"));
    CHECK(fs::exists(scratch_dir / "metrics.json"));

    nlohmann::json ms = read_json(scratch_dir / "run_manifest.json");
    nlohmann::json mc = read_json(ckpt_dir / "run_manifest.json");
    CHECK(ms.at("init") == "scratch");
    CHECK(mc.at("init") == pre.checkpoint.string());
    ms.erase("init");
    mc.erase("init");
    CHECK(ms == mc);

    // Subset isolation: scrambling the unused modalities never changes the
    // segmentation logits.
    ModelState model = load_model(scratch_dir / "checkpoint");
    auto [head, subset] = load_seg_head(scratch_dir / "head");
    CHECK(subset == cfg.subset);
    MultimodalVolume vol = cohort[0].volume;
    const std::vector<double> base = segment(vol, cfg.subset, model, head).logits.value();
    std::mt19937_64 g(3);
    for (Modality m : {Modality::T1, Modality::T2, Modality::FLAIR})
        for (float& x : vol.grid(m)) x = static_cast<float>(g() % 97) * 0.17f;
    const std::vector<double> scrambled =
        segment(vol, cfg.subset, model, head).logits.value();
    CHECK(base == scrambled);
}

TEST_CASE("classification fine-tune runs stratified CV and reports spread") {
    const std::vector<CohortRecord> cohort = labelled_cohort(8, 13);
    RunConfig cfg = tiny_run(Task::Cls, 21);
    cfg.subset = parse_subset("T1");
    cfg.folds = 2;
    const fs::path dir = fresh_dir("cls");
    const FinetuneResult r = run_finetune(cfg, "scratch", cohort, dir);
    REQUIRE(r.metrics.count("auc") == 1);
    REQUIRE(r.metrics.count("ap") == 1);
    CHECK(r.metrics.at("auc") >= 0.0);
    CHECK(r.metrics.at("auc") <= 1.0);
    CHECK(r.metrics_std.count("auc") == 1);
    CHECK(fs::exists(dir / "fold_0" / "head" / "params.bin"));
    CHECK(fs::exists(dir / "fold_1" / "checkpoint" / "params.bin"));

    const nlohmann::json report = read_json(dir / "metrics.json");
    CHECK(report.at("per_fold").size() == 2);

    // Missing labels are a data error.
    std::vector<CohortRecord> unlabeled = cohort;
    unlabeled[3].subtype.reset();
    CHECK_THROWS_AS(run_finetune(cfg, "scratch", unlabeled, fresh_dir("cls_bad")), DataError);
}

TEST_CASE("survival fine-tune cross-validates the hazard head") {
    const std::vector<CohortRecord> cohort = labelled_cohort(10, 17);
    RunConfig cfg = tiny_run(Task::Surv, 23);
    cfg.subset = parse_subset("FLAIR");
    cfg.folds = 2;
    cfg.K = 3;
    const fs::path dir = fresh_dir("surv");
    const FinetuneResult r = run_finetune(cfg, "scratch", cohort, dir);
    REQUIRE(r.metrics.count("cindex") == 1);
    CHECK(r.metrics.at("cindex") >= 0.0);
    CHECK(r.metrics.at("cindex") <= 1.0);
    CHECK(fs::exists(dir / "fold_1" / "head" / "manifest.json"));

    std::vector<CohortRecord> missing = cohort;
    missing[0].survival.reset();
    CHECK_THROWS_AS(run_finetune(cfg, "scratch", missing, fresh_dir("surv_bad")), DataError);
}

TEST_CASE("cross-modal reconstruction masks exactly the non-source targets") {
    const std::vector<CohortRecord> cohort = labelled_cohort(1, 41);
    const ModelState model = init_model_state(ModelConfig::tiny(), 3);
    const fs::path dir = fresh_dir("rec");

    const ReconstructResult r = run_reconstruct(
        model, cohort[0].volume, parse_subset("T1"), parse_subset("T1c,T2,FLAIR"), dir);
    for (Modality m : {Modality::T1c, Modality::T2, Modality::FLAIR}) {
        CHECK(r.volumes[static_cast<size_t>(m)].size() == 16 * 16 * 16);
        CHECK(r.masked_mse.count(modality_name(m)) == 1);
        CHECK(r.masked_mse.at(modality_name(m)) > 0.0);
    }
    CHECK(r.volumes[static_cast<size_t>(Modality::T1)].empty());  // source not reconstructed
    // 4 modalities x 3 original planes + 3 targets x 3 reconstructed planes.
    CHECK(r.images.size() == 21);
    for (const fs::path& img : r.images) CHECK(fs::exists(img));
    CHECK(fs::exists(dir / "reconstruction.json"));

    // source == targets: nothing is masked and the pass still runs.
    const ReconstructResult same = run_reconstruct(model, cohort[0].volume, parse_subset("T1"),
                                                   parse_subset("T1"), fresh_dir("rec_same"));
    CHECK(same.volumes[static_cast<size_t>(Modality::T1)].size() == 16 * 16 * 16);
    CHECK(same.masked_mse.empty());

    CHECK_THROWS_AS(run_reconstruct(model, cohort[0].volume, {}, parse_subset("T1"),
                                    fresh_dir("rec_bad")),
                    ConfigError);
}

TEST_CASE("consistency matrix: subset order, symmetry, diagonal, exclusions") {
    const std::vector<ModalitySet> subsets = all_nonempty_subsets();
    REQUIRE(subsets.size() == 15);
    CHECK(subset_to_string(subsets[0]) == "T1");
    CHECK(subset_to_string(subsets[3]) == "FLAIR");
    CHECK(subset_to_string(subsets[4]) == "T1,T1c");
    CHECK(subset_to_string(subsets[9]) == "T2,FLAIR");
    CHECK(subset_to_string(subsets[10]) == "T1,T1c,T2");
    CHECK(subset_to_string(subsets[14]) == "T1,T1c,T2,FLAIR");

    // Aggregation oracle on synthetic embeddings, including one excluded
    // patient with a zero-norm embedding.
    std::vector<std::vector<std::vector<double>>> emb(3);
    std::mt19937_64 g(5);
    for (size_t i = 0; i < 3; ++i)
        for (size_t s = 0; s < 15; ++s) {
            std::vector<double> v(4);
            for (double& x : v) x = static_cast<double>(g() % 19) - 9.0;
            if (i == 1 && s == 7) v.assign(4, 0.0);
            emb[i].push_back(v);
        }
    const ConsistencyResult cr = consistency_from_embeddings(emb, {"a", "b", "c"});
    CHECK(cr.patients_used == 2);
    REQUIRE(cr.excluded.size() == 1);
    CHECK(cr.excluded[0] == "b");
    for (size_t a = 0; a < 15; ++a) {
        CHECK(cr.matrix[a][a] == doctest::Approx(1.0).epsilon(1e-6));
        for (size_t b = 0; b < 15; ++b) {
            CHECK(cr.matrix[a][b] == cr.matrix[b][a]);
            CHECK(cr.matrix[a][b] >= -1.0 - 1e-12);
            CHECK(cr.matrix[a][b] <= 1.0 + 1e-12);
        }
    }

    // End-to-end on a random-init model.
    const std::vector<CohortRecord> cohort = labelled_cohort(2, 47);
    const ModelState model = init_model_state(ModelConfig::tiny(), 8);
    const fs::path dir = fresh_dir("con");
    const ConsistencyResult full = run_consistency(model, cohort, dir);
    CHECK(full.patients_used == 2);
    for (size_t a = 0; a < 15; ++a)
        CHECK(full.matrix[a][a] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(fs::exists(dir / "matrix.json"));
    const ParsedPng heat = parse_png_gray(dir / "heatmap.png");
    CHECK(heat.w == 15 * 16);
    CHECK(heat.h == 15 * 16);
}

}  // TEST_SUITE("pipeline")
