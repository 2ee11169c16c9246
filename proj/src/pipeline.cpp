#include "bmmae/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "bmmae/masking.hpp"
#include "bmmae/metrics.hpp"
#include "bmmae/optim.hpp"
#include "bmmae/png_io.hpp"
#include "bmmae/rng.hpp"

namespace bmmae {

using nlohmann::json;

namespace {

constexpr uint64_t kTagData = 0x64617461;     // batch order stream
constexpr uint64_t kTagMask = 0x6d61736b;     // mask-plan stream
constexpr uint64_t kTagSplit = 0x73706c6974;  // train/val split
constexpr uint64_t kTagHead = 0x68656164;     // head initialization
constexpr uint64_t kTagFolds = 0x666f6c6473;  // fold shuffling

struct TaskDefaults {
    int64_t epochs, batch, warmup, K;
    double lr, wd;
};

TaskDefaults task_defaults(Task t, bool paper_scale) {
    switch (t) {
        case Task::Pretrain:
            return paper_scale ? TaskDefaults{1000, 6, 50, 4, 1e-4, 0.05}
                               : TaskDefaults{200, 2, 10, 4, 1e-4, 0.05};
        case Task::Seg:
            return paper_scale ? TaskDefaults{70, 2, 10, 4, 5e-4, 0.05}
                               : TaskDefaults{30, 2, 4, 4, 5e-4, 0.05};
        case Task::Cls:
            return {10, 2, 5, 4, 1e-4, 0.05};
        case Task::Surv:
            return paper_scale ? TaskDefaults{5, 2, 5, 10, 1e-4, 0.05}
                               : TaskDefaults{5, 2, 5, 4, 1e-4, 0.05};
    }
    throw ConfigError("unknown task");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw DataError("short write to " + path.string());
}

int64_t patch_count(const Dims3& dims, int64_t p) {
    if (dims.h % p != 0 || dims.w % p != 0 || dims.d % p != 0)
        throw DimensionError("volume dimensions must be divisible by the patch size");
    return (dims.h / p) * (dims.w / p) * (dims.d / p);
}

void check_finite_loss(double v) {
    if (!std::isfinite(v)) throw NumericError("training loss is not finite");
}

// Shuffled epoch order chunked into batches (final batch may be short).
std::vector<std::vector<size_t>> epoch_batches(size_t n, int64_t batch, std::mt19937_64& rng) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<size_t>> batches;
    for (size_t at = 0; at < n; at += static_cast<size_t>(batch)) {
        const size_t hi = std::min(n, at + static_cast<size_t>(batch));
        batches.emplace_back(order.begin() + static_cast<ptrdiff_t>(at),
                             order.begin() + static_cast<ptrdiff_t>(hi));
    }
    return batches;
}

ModelState make_init_model(const std::string& init, const ModelConfig& mc, uint64_t seed) {
    if (init == "scratch") return init_model_state(mc, seed);
    return load_model(init, mc);
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

std::vector<double> to_doubles(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

}  // namespace

Task parse_task(const std::string& name) {
    if (name == "pretrain") return Task::Pretrain;
    if (name == "seg") return Task::Seg;
    if (name == "cls") return Task::Cls;
    if (name == "surv") return Task::Surv;
    throw ConfigError("unknown task '" + name + "' (expected pretrain|seg|cls|surv)");
}

std::string task_name(Task t) {
    switch (t) {
        case Task::Pretrain: return "pretrain";
        case Task::Seg: return "seg";
        case Task::Cls: return "cls";
        case Task::Surv: return "surv";
    }
    throw ConfigError("unknown task");
}

ModelConfig RunConfig::model() const {
    if (preset == "tiny") return ModelConfig::tiny();
    if (preset == "paper") return ModelConfig::paper();
    throw ConfigError("unknown model preset '" + preset + "' (expected tiny|paper)");
}

RunConfig RunConfig::with_defaults() const {
    RunConfig c = *this;
    if (c.preset.empty()) c.preset = c.paper_scale ? "paper" : "tiny";
    const TaskDefaults d = task_defaults(c.task, c.paper_scale);
    if (c.epochs == 0) c.epochs = d.epochs;
    if (c.batch_size == 0) c.batch_size = d.batch;
    if (c.base_lr == 0.0) c.base_lr = d.lr;
    if (c.weight_decay < 0.0) c.weight_decay = d.wd;
    if (c.warmup_epochs < 0) c.warmup_epochs = d.warmup;
    if (c.K == 0) c.K = d.K;
    return c;
}

void RunConfig::validate() const {
    model().validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (warmup_epochs > epochs) throw ConfigError("epochs must be >= warmup_epochs");
    if (subset.empty()) throw ConfigError("modality subset must be non-empty");
    if (task == Task::Pretrain && subset.size() != kAllModalities.size())
        throw ConfigError("pretraining requires the full modality set");
    if ((task == Task::Cls || task == Task::Surv) && folds < 2)
        throw ConfigError("cross-validation needs folds >= 2");
    if (task == Task::Surv && K < 2) throw ConfigError("survival needs K >= 2 intervals");
}

std::string run_config_to_json(const RunConfig& c) {
    json j;
    j["task"] = task_name(c.task);
    j["preset"] = c.preset;
    j["dataset"] = c.dataset.string();
    j["subset"] = subset_to_string(c.subset);
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["base_lr"] = c.base_lr;
    j["weight_decay"] = c.weight_decay;
    j["warmup_epochs"] = c.warmup_epochs;
    j["seed"] = c.seed;
    j["K"] = c.K;
    j["folds"] = c.folds;
    j["paper_scale"] = c.paper_scale;
    return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig c;
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "task") c.task = parse_task(val.get<std::string>());
            else if (key == "preset") c.preset = val.get<std::string>();
            else if (key == "dataset") c.dataset = val.get<std::string>();
            else if (key == "subset") c.subset = parse_subset(val.get<std::string>());
            else if (key == "epochs") c.epochs = val.get<int64_t>();
            else if (key == "batch_size") c.batch_size = val.get<int64_t>();
            else if (key == "base_lr") c.base_lr = val.get<double>();
            else if (key == "weight_decay") c.weight_decay = val.get<double>();
            else if (key == "warmup_epochs") c.warmup_epochs = val.get<int64_t>();
            else if (key == "seed") c.seed = val.get<uint64_t>();
            else if (key == "K") c.K = val.get<int64_t>();
            else if (key == "folds") c.folds = val.get<int64_t>();
            else if (key == "paper_scale") c.paper_scale = val.get<bool>();
            else throw ConfigError("unknown run config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config field has the wrong type: ") + e.what());
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) throw ConfigError("cannot read run config file " + file.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return run_config_from_json(ss.str());
}

std::string run_manifest(const RunConfig& cfg, const std::string& init) {
    json j = json::parse(run_config_to_json(cfg));
    j["format_version"] = 1;
    j["model"] = json::parse(model_config_to_json(cfg.model()));
    j["init"] = init;
    return j.dump(2) + "\n";
}

std::vector<int> stratified_folds(const std::vector<int>& labels, int64_t folds, uint64_t seed) {
    if (folds < 1) throw ConfigError("fold count must be >= 1");
    if (labels.size() < static_cast<size_t>(folds)) throw ConfigError("fewer samples than folds");
    std::map<int, std::vector<size_t>> groups;
    for (size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    std::mt19937_64 g(mix_seed(seed, kTagFolds));
    std::vector<int> fold(labels.size(), 0);
    int64_t counter = 0;  // runs across groups so overall sizes stay within +/-1
    for (auto& group : groups) {
        std::shuffle(group.second.begin(), group.second.end(), g);
        for (size_t idx : group.second) fold[idx] = static_cast<int>(counter++ % folds);
    }
    return fold;
}

std::vector<CohortRecord> prepare_cohort(std::vector<CohortRecord> records) {
    for (CohortRecord& rec : records) rec.volume = preprocess(rec.volume, rec.volume.dims);
    return records;
}

// --- pre-training -----------------------------------------------------------

PretrainResult run_pretrain(const RunConfig& cfg0, const std::vector<CohortRecord>& cohort,
                            const std::filesystem::path& out_dir) {
    const RunConfig cfg = cfg0.with_defaults();
    cfg.validate();
    if (cohort.empty()) throw DataError("pretraining cohort is empty");
    for (const CohortRecord& rec : cohort)
        if (rec.volume.present().size() != kAllModalities.size())
            throw DataError("pretraining requires all four modalities; patient " +
                            rec.volume.patient_id + " is incomplete");

    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "run_manifest.json", run_manifest(cfg, "scratch"));

    ModelState state = init_model_state(cfg.model(), cfg.seed);
    AdamW opt(state.named_params(), {0.9, 0.95, 1e-8, cfg.weight_decay});

    const size_t n = cohort.size();
    const int64_t steps_per_epoch = (static_cast<int64_t>(n) + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = cfg.epochs * steps_per_epoch;
    const int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    std::mt19937_64 rng_data(mix_seed(cfg.seed, kTagData));
    std::mt19937_64 rng_mask(mix_seed(cfg.seed, kTagMask));

    std::ofstream csv(out_dir / "loss.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot open loss.csv for writing");
    csv << "epoch,step,loss\n";

    PretrainResult result;
    int64_t global_step = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double epoch_sum = 0.0;
        int64_t batches_n = 0;
        for (const auto& batch : epoch_batches(n, cfg.batch_size, rng_data)) {
            std::vector<Tensor> losses;
            for (size_t idx : batch)
                losses.push_back(forward_pretrain(cohort[idx].volume, state, rng_mask).loss);
            Tensor loss = scale(add_n(losses), 1.0 / static_cast<double>(losses.size()));
            const double loss_val = loss.item();
            check_finite_loss(loss_val);

            autodiff::GradStore gs;
            loss.backward_into(gs);
            opt.step(gs, lr_schedule(global_step, total_steps, warmup_steps, cfg.base_lr));
            ++global_step;

            csv << epoch << ',' << global_step << ',' << loss_val << '\n';
            epoch_sum += loss_val;
            ++batches_n;
        }
        result.epoch_loss.push_back(epoch_sum / static_cast<double>(batches_n));
    }
    csv.flush();
    if (!csv) throw DataError("short write to loss.csv");

    result.checkpoint = out_dir / "checkpoint";
    save_model(state, result.checkpoint);
    return result;
}

PretrainResult run_pretrain(const RunConfig& cfg, const std::filesystem::path& out_dir) {
    return run_pretrain(cfg, prepare_cohort(load_cohort(cfg.with_defaults().dataset)), out_dir);
}

// --- fine-tuning ------------------------------------------------------------

namespace {

// Generic supervised loop: `batch_loss` maps a batch of indices into the
// training order to a scalar loss; the optimizer owns all trainable tensors.
template <typename LossFn>
std::vector<double> train_loop(const RunConfig& cfg, size_t n, AdamW& opt, LossFn&& batch_loss,
                               std::mt19937_64& rng_data, std::ofstream& csv,
                               const std::string& csv_prefix) {
    const int64_t steps_per_epoch = (static_cast<int64_t>(n) + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = cfg.epochs * steps_per_epoch;
    const int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    std::vector<double> epoch_loss;
    int64_t global_step = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double epoch_sum = 0.0;
        int64_t batches_n = 0;
        for (const auto& batch : epoch_batches(n, cfg.batch_size, rng_data)) {
            Tensor loss = batch_loss(batch);
            const double loss_val = loss.item();
            check_finite_loss(loss_val);

            autodiff::GradStore gs;
            loss.backward_into(gs);
            opt.step(gs, lr_schedule(global_step, total_steps, warmup_steps, cfg.base_lr));
            ++global_step;

            csv << csv_prefix << epoch << ',' << global_step << ',' << loss_val << '\n';
            epoch_sum += loss_val;
            ++batches_n;
        }
        epoch_loss.push_back(epoch_sum / static_cast<double>(batches_n));
    }
    return epoch_loss;
}

void require_subset_present(const std::vector<CohortRecord>& cohort, const ModalitySet& subset) {
    for (const CohortRecord& rec : cohort)
        for (Modality m : subset)
            if (!rec.volume.has(m))
                throw DataError("patient " + rec.volume.patient_id + " is missing modality " +
                                modality_name(m));
}

FinetuneResult finetune_seg(const RunConfig& cfg, const std::string& init,
                            const std::vector<CohortRecord>& cohort,
                            const std::filesystem::path& out_dir) {
    for (const CohortRecord& rec : cohort)
        if (!rec.seg)
            throw DataError("segmentation labels missing for patient " + rec.volume.patient_id);
    if (cohort.size() < 2) throw DataError("segmentation fine-tuning needs >= 2 patients");

    // Seeded 80/20 split; identical for every init mode under the same config.
    std::vector<size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::mt19937_64 split_rng(mix_seed(cfg.seed, kTagSplit));
    std::shuffle(order.begin(), order.end(), split_rng);
    const size_t val_n = std::max<size_t>(1, cohort.size() / 5);
    std::vector<size_t> val(order.end() - static_cast<ptrdiff_t>(val_n), order.end());
    std::vector<size_t> train(order.begin(), order.end() - static_cast<ptrdiff_t>(val_n));

    ModelState model = make_init_model(init, cfg.model(), cfg.seed);
    SegHead head = init_seg_head(SegConfig::for_model(model.config), mix_seed(cfg.seed, kTagHead));
    auto params = model.named_params();
    for (auto& [name, t] : head.named_params()) params.emplace_back(name, t);
    AdamW opt(params, {0.9, 0.95, 1e-8, cfg.weight_decay});

    std::ofstream csv(out_dir / "loss.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot open loss.csv for writing");
    csv << "epoch,step,loss\n";
    std::mt19937_64 rng_data(mix_seed(cfg.seed, kTagData));

    FinetuneResult result;
    result.out_dir = out_dir;
    result.epoch_loss = train_loop(
        cfg, train.size(), opt,
        [&](const std::vector<size_t>& batch) {
            std::vector<Tensor> losses;
            for (size_t b : batch) {
                const CohortRecord& rec = cohort[train[b]];
                losses.push_back(seg_loss(segment(rec.volume, cfg.subset, model, head), *rec.seg));
            }
            return scale(add_n(losses), 1.0 / static_cast<double>(losses.size()));
        },
        rng_data, csv, "");

    // Held-out Dice per composite class.
    json per_patient = json::object();
    std::vector<double> wt, tc, et;
    for (size_t v : val) {
        const CohortRecord& rec = cohort[v];
        SegOutput so = segment(rec.volume, cfg.subset, model, head);
        CompositeMasks pred = composite_masks({so.dims, argmax_labels(so.logits)});
        CompositeMasks truth = composite_masks(*rec.seg);
        const double dwt = dice(pred.wt, truth.wt);
        const double dtc = dice(pred.tc, truth.tc);
        const double det = dice(pred.et, truth.et);
        wt.push_back(dwt);
        tc.push_back(dtc);
        et.push_back(det);
        per_patient[rec.volume.patient_id] = {{"dice_wt", dwt}, {"dice_tc", dtc}, {"dice_et", det}};
    }
    result.metrics = {{"dice_wt", mean_of(wt)}, {"dice_tc", mean_of(tc)}, {"dice_et", mean_of(et)}};

    save_model(model, out_dir / "checkpoint");
    save_seg_head(head, cfg.subset, out_dir / "head");

    json report;
    report["task"] = "seg";
    report["metrics"] = result.metrics;
    report["per_patient"] = per_patient;
    report["val_patients"] = [&] {
        json ids = json::array();
        for (size_t v : val) ids.push_back(cohort[v].volume.patient_id);
        return ids;
    }();
    write_text(out_dir / "metrics.json", report.dump(2) + "\n");
    return result;
}

FinetuneResult finetune_cls(const RunConfig& cfg, const std::string& init,
                            const std::vector<CohortRecord>& cohort,
                            const std::filesystem::path& out_dir) {
    std::vector<int> labels;
    for (const CohortRecord& rec : cohort) {
        if (!rec.subtype)
            throw DataError("subtype label missing for patient " + rec.volume.patient_id);
        labels.push_back(*rec.subtype);
    }

    const std::vector<int> fold_of = stratified_folds(labels, cfg.folds, cfg.seed);

    std::ofstream csv(out_dir / "loss.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot open loss.csv for writing");
    csv << "fold,epoch,step,loss\n";

    std::vector<double> aucs, aps;
    std::vector<std::vector<double>> fold_epoch_loss;
    json per_fold = json::array();
    for (int64_t f = 0; f < cfg.folds; ++f) {
        std::vector<size_t> train, val;
        for (size_t i = 0; i < cohort.size(); ++i)
            (fold_of[i] == f ? val : train).push_back(i);
        if (train.empty() || val.empty()) throw ConfigError("fold without train or val patients");

        ModelState model = make_init_model(init, cfg.model(), cfg.seed);
        ClsHead head =
            init_cls_head(model.config.d, mix_seed(mix_seed(cfg.seed, kTagHead), uint64_t(f)));
        auto params = model.named_params();
        for (auto& [name, t] : head.named_params()) params.emplace_back(name, t);
        AdamW opt(params, {0.9, 0.95, 1e-8, cfg.weight_decay});

        std::mt19937_64 rng_data(mix_seed(mix_seed(cfg.seed, kTagData), uint64_t(f)));
        fold_epoch_loss.push_back(train_loop(
            cfg, train.size(), opt,
            [&](const std::vector<size_t>& batch) {
                std::vector<Tensor> losses;
                for (size_t b : batch) {
                    const CohortRecord& rec = cohort[train[b]];
                    losses.push_back(bce_with_logit(classify(rec.volume, cfg.subset, model, head),
                                                    static_cast<double>(*rec.subtype)));
                }
                return scale(add_n(losses), 1.0 / static_cast<double>(losses.size()));
            },
            rng_data, csv, std::to_string(f) + ","));

        std::vector<double> scores;
        std::vector<int> truth;
        for (size_t v : val) {
            const double logit = classify(cohort[v].volume, cfg.subset, model, head).item();
            scores.push_back(1.0 / (1.0 + std::exp(-logit)));
            truth.push_back(labels[v]);
        }
        const RankingMetrics rm = binary_ranking_metrics(scores, truth);
        aucs.push_back(rm.auc);
        aps.push_back(rm.ap);
        per_fold.push_back({{"auc", rm.auc}, {"ap", rm.ap}, {"val_size", val.size()}});

        const std::filesystem::path fold_dir = out_dir / ("fold_" + std::to_string(f));
        save_model(model, fold_dir / "checkpoint");
        save_cls_head(head, model.config.d, cfg.subset, fold_dir / "head");
    }

    FinetuneResult result;
    result.out_dir = out_dir;
    result.metrics = {{"auc", mean_of(aucs)}, {"ap", mean_of(aps)}};
    result.metrics_std = {{"auc", sample_std(aucs)}, {"ap", sample_std(aps)}};
    for (size_t e = 0; e < fold_epoch_loss[0].size(); ++e) {
        double s = 0.0;
        for (const auto& fe : fold_epoch_loss) s += fe[e];
        result.epoch_loss.push_back(s / static_cast<double>(fold_epoch_loss.size()));
    }

    json report;
    report["task"] = "cls";
    report["metrics"] = result.metrics;
    report["std"] = result.metrics_std;
    report["per_fold"] = per_fold;
    write_text(out_dir / "metrics.json", report.dump(2) + "\n");
    return result;
}

FinetuneResult finetune_surv(const RunConfig& cfg, const std::string& init,
                             const std::vector<CohortRecord>& cohort,
                             const std::filesystem::path& out_dir) {
    std::vector<double> times;
    std::vector<int> events;
    for (const CohortRecord& rec : cohort) {
        if (!rec.survival)
            throw DataError("survival record missing for patient " + rec.volume.patient_id);
        times.push_back(rec.survival->time);
        events.push_back(rec.survival->event);
    }

    const std::vector<int> fold_of = stratified_folds(events, cfg.folds, cfg.seed);

    std::ofstream csv(out_dir / "loss.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot open loss.csv for writing");
    csv << "fold,epoch,step,loss\n";

    std::vector<double> cindices;
    std::vector<std::vector<double>> fold_epoch_loss;
    json per_fold = json::array();
    for (int64_t f = 0; f < cfg.folds; ++f) {
        std::vector<size_t> train, val;
        for (size_t i = 0; i < cohort.size(); ++i)
            (fold_of[i] == f ? val : train).push_back(i);
        if (train.empty() || val.empty()) throw ConfigError("fold without train or val patients");

        // Interval thresholds from the training fold only.
        std::vector<double> train_times;
        for (size_t t : train) train_times.push_back(times[t]);
        const std::vector<double> cuts = discretize_times(train_times, cfg.K);

        ModelState model = make_init_model(init, cfg.model(), cfg.seed);
        HazardHead head = init_hazard_head(
            model.config.d, cuts, mix_seed(mix_seed(cfg.seed, kTagHead), uint64_t(f)));
        auto params = model.named_params();
        for (auto& [name, t] : head.named_params()) params.emplace_back(name, t);
        AdamW opt(params, {0.9, 0.95, 1e-8, cfg.weight_decay});

        std::mt19937_64 rng_data(mix_seed(mix_seed(cfg.seed, kTagData), uint64_t(f)));
        fold_epoch_loss.push_back(train_loop(
            cfg, train.size(), opt,
            [&](const std::vector<size_t>& batch) {
                // The NLL sums over the patients of a batch.
                std::vector<Tensor> losses;
                for (size_t b : batch) {
                    const size_t i = train[b];
                    Tensor logits = survival_logits(cohort[i].volume, cfg.subset, model, head);
                    losses.push_back(hazard_nll(
                        logits, static_cast<int>(assign_interval(times[i], cuts)), events[i]));
                }
                return add_n(losses);
            },
            rng_data, csv, std::to_string(f) + ","));

        std::vector<std::vector<double>> curves;
        std::vector<double> val_times;
        std::vector<int> val_events;
        for (size_t v : val) {
            Tensor logits = survival_logits(cohort[v].volume, cfg.subset, model, head);
            curves.push_back(survival_curve(hazards_from_logits(logits)));
            val_times.push_back(times[v]);
            val_events.push_back(events[v]);
        }
        const double ci = concordance_index(curves, cuts, val_times, val_events);
        cindices.push_back(ci);
        per_fold.push_back({{"cindex", ci}, {"val_size", val.size()}});

        const std::filesystem::path fold_dir = out_dir / ("fold_" + std::to_string(f));
        save_model(model, fold_dir / "checkpoint");
        save_hazard_head(head, model.config.d, cfg.subset, fold_dir / "head");
    }

    FinetuneResult result;
    result.out_dir = out_dir;
    result.metrics = {{"cindex", mean_of(cindices)}};
    result.metrics_std = {{"cindex", sample_std(cindices)}};
    for (size_t e = 0; e < fold_epoch_loss[0].size(); ++e) {
        double s = 0.0;
        for (const auto& fe : fold_epoch_loss) s += fe[e];
        result.epoch_loss.push_back(s / static_cast<double>(fold_epoch_loss.size()));
    }

    json report;
    report["task"] = "surv";
    report["metrics"] = result.metrics;
    report["std"] = result.metrics_std;
    report["per_fold"] = per_fold;
    write_text(out_dir / "metrics.json", report.dump(2) + "\n");
    return result;
}

}  // namespace

FinetuneResult run_finetune(const RunConfig& cfg0, const std::string& init,
                            const std::vector<CohortRecord>& cohort,
                            const std::filesystem::path& out_dir) {
    const RunConfig cfg = cfg0.with_defaults();
    cfg.validate();
    if (cfg.task == Task::Pretrain)
        throw ConfigError("run_finetune expects task seg|cls|surv");
    if (cohort.empty()) throw DataError("fine-tuning cohort is empty");
    require_subset_present(cohort, cfg.subset);

    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "run_manifest.json", run_manifest(cfg, init));

    switch (cfg.task) {
        case Task::Seg: return finetune_seg(cfg, init, cohort, out_dir);
        case Task::Cls: return finetune_cls(cfg, init, cohort, out_dir);
        case Task::Surv: return finetune_surv(cfg, init, cohort, out_dir);
        default: throw ConfigError("run_finetune expects task seg|cls|surv");
    }
}

FinetuneResult run_finetune(const RunConfig& cfg, const std::string& init,
                            const std::filesystem::path& out_dir) {
    return run_finetune(cfg, init, prepare_cohort(load_cohort(cfg.with_defaults().dataset)),
                        out_dir);
}

// --- cross-modal reconstruction ---------------------------------------------

namespace {

// Extract the middle slice of a volume along one axis as a row-major image.
// Linear voxel order is ((h*W)+w)*D+d.
std::vector<double> mid_slice(const std::vector<double>& v, const Dims3& dims, int axis,
                              int64_t* out_w, int64_t* out_h) {
    std::vector<double> img;
    if (axis == 0) {  // axial: fix depth, rows h, cols w
        const int64_t dd = dims.d / 2;
        *out_h = dims.h, *out_w = dims.w;
        for (int64_t h = 0; h < dims.h; ++h)
            for (int64_t w = 0; w < dims.w; ++w)
                img.push_back(v[static_cast<size_t>((h * dims.w + w) * dims.d + dd)]);
    } else if (axis == 1) {  // coronal: fix w, rows h, cols d
        const int64_t ww = dims.w / 2;
        *out_h = dims.h, *out_w = dims.d;
        for (int64_t h = 0; h < dims.h; ++h)
            for (int64_t d = 0; d < dims.d; ++d)
                img.push_back(v[static_cast<size_t>((h * dims.w + ww) * dims.d + d)]);
    } else {  // sagittal: fix h, rows w, cols d
        const int64_t hh = dims.h / 2;
        *out_h = dims.w, *out_w = dims.d;
        for (int64_t w = 0; w < dims.w; ++w)
            for (int64_t d = 0; d < dims.d; ++d)
                img.push_back(v[static_cast<size_t>((hh * dims.w + w) * dims.d + d)]);
    }
    return img;
}

constexpr const char* kPlaneNames[3] = {"axial", "coronal", "sagittal"};

std::filesystem::path export_slices(const std::vector<double>& volume, const Dims3& dims,
                                    const std::filesystem::path& out_dir,
                                    const std::string& stem, int axis) {
    int64_t w = 0, h = 0;
    const std::vector<double> img = mid_slice(volume, dims, axis, &w, &h);
    const std::filesystem::path path =
        out_dir / (stem + "_" + kPlaneNames[axis] + ".png");
    write_png_gray(path, window_to_gray(img, w, h));
    return path;
}

}  // namespace

ReconstructResult run_reconstruct(const ModelState& model, const MultimodalVolume& volume,
                                  const ModalitySet& source, const ModalitySet& targets,
                                  const std::filesystem::path& out_dir) {
    if (source.empty()) throw ConfigError("reconstruction needs a non-empty source subset");
    if (targets.empty()) throw ConfigError("reconstruction needs a non-empty target subset");

    // Union in canonical modality order: source patches visible, remaining
    // target patches masked.
    ModalitySet mods;
    for (Modality m : kAllModalities)
        if (subset_contains(source, m) || subset_contains(targets, m)) mods.push_back(m);
    for (Modality m : mods)
        if (!volume.has(m))
            throw DataError("patient " + volume.patient_id + " is missing modality " +
                            modality_name(m));

    const int64_t L = patch_count(volume.dims, model.config.p);
    MaskPlan plan;
    plan.r = 1.0 - static_cast<double>(source.size()) / static_cast<double>(mods.size());
    plan.alpha = 0.0;
    plan.L = L;
    plan.total_visible = static_cast<int64_t>(source.size()) * L;
    plan.modalities = mods;
    std::vector<int64_t> all(static_cast<size_t>(L));
    std::iota(all.begin(), all.end(), int64_t{0});
    for (Modality m : mods) {
        const size_t mi = static_cast<size_t>(m);
        if (subset_contains(source, m)) {
            plan.weights[mi] = 1.0 / static_cast<double>(source.size());
            plan.visible[mi] = all;
        } else {
            plan.masked[mi] = all;
        }
    }
    plan.validate();

    EncoderOutput enc = encode(volume, mods, plan, model);
    DecodeOutput dec = decode(enc, plan, model);

    std::filesystem::create_directories(out_dir);
    ReconstructResult result;
    result.targets = targets;

    json mse_json = json::object();
    for (Modality m : mods) {
        const std::string name = modality_name(m);
        const std::vector<double> orig = to_doubles(volume.grid(m));
        for (int axis = 0; axis < 3; ++axis)
            result.images.push_back(export_slices(
                orig, volume.dims, out_dir, volume.patient_id + "_" + name + "_orig", axis));

        if (!subset_contains(targets, m)) continue;
        std::vector<double> recon = dec.reconstruction(m);
        for (int axis = 0; axis < 3; ++axis)
            result.images.push_back(export_slices(
                recon, volume.dims, out_dir, volume.patient_id + "_" + name + "_recon", axis));

        // Masked-region error against the ground-truth patches.
        const auto& masked = plan.masked_of(m);
        if (!masked.empty()) {
            const PatchGrid pg = patchify(volume.grid(m), volume.dims, model.config.p);
            const std::vector<double>& pred = dec.patch_preds[static_cast<size_t>(m)].value();
            const int64_t pv = model.config.p * model.config.p * model.config.p;
            double se = 0.0;
            for (int64_t row : masked)
                for (int64_t c = 0; c < pv; ++c) {
                    const double dDiff = pred[static_cast<size_t>(row * pv + c)] -
                                         pg.patches[static_cast<size_t>(row * pv + c)];
                    se += dDiff * dDiff;
                }
            const double mse = se / static_cast<double>(masked.size() * pv);
            result.masked_mse[name] = mse;
            mse_json[name] = mse;
        }
        result.volumes[static_cast<size_t>(m)] = std::move(recon);
    }

    json report;
    report["patient"] = volume.patient_id;
    report["source"] = subset_to_string(source);
    report["targets"] = subset_to_string(targets);
    report["masked_mse"] = mse_json;
    json imgs = json::array();
    for (const auto& p : result.images) imgs.push_back(p.filename().string());
    report["images"] = imgs;
    write_text(out_dir / "reconstruction.json", report.dump(2) + "\n");
    return result;
}

// --- embedding consistency ----------------------------------------------------

std::vector<ModalitySet> all_nonempty_subsets() {
    std::vector<ModalitySet> subsets;
    for (unsigned bits = 1; bits < 16; ++bits) {
        ModalitySet s;
        for (Modality m : kAllModalities)
            if (bits & (1u << static_cast<unsigned>(m))) s.push_back(m);
        subsets.push_back(std::move(s));
    }
    std::stable_sort(subsets.begin(), subsets.end(),
                     [](const ModalitySet& a, const ModalitySet& b) {
                         if (a.size() != b.size()) return a.size() < b.size();
                         return a < b;  // lexicographic in canonical modality order
                     });
    return subsets;
}

ConsistencyResult consistency_from_embeddings(
    const std::vector<std::vector<std::vector<double>>>& embeddings,
    const std::vector<std::string>& patient_ids) {
    if (embeddings.size() != patient_ids.size())
        throw ConfigError("one embedding list per patient id required");
    const size_t S = all_nonempty_subsets().size();

    ConsistencyResult result;
    result.subsets = all_nonempty_subsets();
    result.matrix.assign(S, std::vector<double>(S, 0.0));

    std::vector<size_t> usable;
    std::vector<std::vector<double>> norms(embeddings.size());
    for (size_t i = 0; i < embeddings.size(); ++i) {
        if (embeddings[i].size() != S)
            throw ConfigError("each patient needs one embedding per modality subset");
        bool ok = true;
        norms[i].resize(S);
        for (size_t s = 0; s < S; ++s) {
            double sq = 0.0;
            for (double x : embeddings[i][s]) sq += x * x;
            norms[i][s] = std::sqrt(sq);
            if (norms[i][s] == 0.0) ok = false;
        }
        if (ok)
            usable.push_back(i);
        else
            result.excluded.push_back(patient_ids[i]);
    }
    if (usable.empty()) throw DataError("no patient has nonzero embeddings under every subset");
    result.patients_used = static_cast<int64_t>(usable.size());

    for (size_t a = 0; a < S; ++a)
        for (size_t b = a; b < S; ++b) {
            double acc = 0.0;
            for (size_t i : usable) {
                const std::vector<double>& ea = embeddings[i][a];
                const std::vector<double>& eb = embeddings[i][b];
                if (ea.size() != eb.size())
                    throw ConfigError("embedding widths differ across subsets");
                double dot = 0.0;
                for (size_t k = 0; k < ea.size(); ++k) dot += ea[k] * eb[k];
                acc += dot / (norms[i][a] * norms[i][b]);
            }
            result.matrix[a][b] = result.matrix[b][a] = acc / static_cast<double>(usable.size());
        }
    return result;
}

ConsistencyResult run_consistency(const ModelState& model,
                                  const std::vector<CohortRecord>& cohort,
                                  const std::filesystem::path& out_dir) {
    if (cohort.empty()) throw DataError("consistency analysis needs a non-empty cohort");
    const std::vector<ModalitySet> subsets = all_nonempty_subsets();

    std::vector<std::vector<std::vector<double>>> embeddings;
    std::vector<std::string> ids;
    for (const CohortRecord& rec : cohort) {
        if (rec.volume.present().size() != kAllModalities.size())
            throw DataError("consistency analysis requires all four modalities; patient " +
                            rec.volume.patient_id + " is incomplete");
        const int64_t L = patch_count(rec.volume.dims, model.config.p);
        std::vector<std::vector<double>> per_subset;
        for (const ModalitySet& s : subsets) {
            EncoderOutput enc = encode(rec.volume, s, full_visibility_plan(L, s), model);
            per_subset.push_back(enc.cls_out.value());
        }
        embeddings.push_back(std::move(per_subset));
        ids.push_back(rec.volume.patient_id);
    }

    ConsistencyResult result = consistency_from_embeddings(embeddings, ids);
    for (const std::string& id : result.excluded)
        std::cerr << "warning: excluding patient " << id
                  << " (zero-norm embedding under some subset)\n";

    std::filesystem::create_directories(out_dir);
    json j;
    j["patients_used"] = result.patients_used;
    j["excluded"] = result.excluded;
    json names = json::array();
    for (const ModalitySet& s : result.subsets) names.push_back(subset_to_string(s));
    j["subsets"] = names;
    j["matrix"] = result.matrix;
    write_text(out_dir / "matrix.json", j.dump(2) + "\n");

    const size_t S = result.subsets.size();
    std::vector<double> flat;
    flat.reserve(S * S);
    for (const auto& row : result.matrix) flat.insert(flat.end(), row.begin(), row.end());
    write_png_gray(out_dir / "heatmap.png",
                   upscale_nearest(window_to_gray(flat, static_cast<int64_t>(S),
                                                  static_cast<int64_t>(S)),
                                   16));
    return result;
}

}  // namespace bmmae
