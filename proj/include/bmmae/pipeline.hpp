#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bmmae/heads.hpp"
#include "bmmae/model.hpp"
#include "bmmae/volumes.hpp"

namespace bmmae {

enum class Task { Pretrain, Seg, Cls, Surv };

Task parse_task(const std::string& name);  // ConfigError on unknown name
std::string task_name(Task t);

// One training/evaluation run. Unset numeric fields (epochs/batch_size 0,
// base_lr 0, weight_decay/warmup_epochs/K negative, preset empty) are filled
// from the per-task defaults table by with_defaults(); paper_scale selects
// the full-scale default column and the full-size model preset.
struct RunConfig {
    Task task = Task::Pretrain;
    std::string preset;  // "tiny" | "paper"
    std::filesystem::path dataset;
    ModalitySet subset = {Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR};
    int64_t epochs = 0;
    int64_t batch_size = 0;
    double base_lr = 0.0;
    double weight_decay = -1.0;
    int64_t warmup_epochs = -1;
    uint64_t seed = 0;
    int64_t K = 0;       // survival intervals
    int64_t folds = 5;   // cross-validation folds
    bool paper_scale = false;

    ModelConfig model() const;    // preset lookup; ConfigError on unknown preset
    RunConfig with_defaults() const;
    void validate() const;        // invariants, assuming defaults are applied
};

// JSON mirrors the field names above; unknown keys are rejected.
std::string run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& file);

// The manifest written at the start of every run; together with the dataset
// it fully determines the run. `init` is "scratch" or a checkpoint path.
std::string run_manifest(const RunConfig& cfg, const std::string& init);

// Deterministic stratified fold assignment: returns fold index (0..folds-1)
// per sample. Within each label class, fold counts differ by at most one;
// overall fold sizes differ by at most one.
std::vector<int> stratified_folds(const std::vector<int>& labels, int64_t folds, uint64_t seed);

// Standardize every present modality of every record to mean 0 / std 1
// (no cropping), matching the tokenizer's expected input scale.
std::vector<CohortRecord> prepare_cohort(std::vector<CohortRecord> records);

struct PretrainResult {
    std::filesystem::path checkpoint;   // <out_dir>/checkpoint
    std::vector<double> epoch_loss;     // mean batch loss per epoch
};

// Masked-autoencoding loop over a cohort in which every patient has all four
// modalities. Writes run_manifest.json, loss.csv (epoch,step,loss) and the
// final model checkpoint under out_dir.
PretrainResult run_pretrain(const RunConfig& cfg, const std::vector<CohortRecord>& cohort,
                            const std::filesystem::path& out_dir);
PretrainResult run_pretrain(const RunConfig& cfg, const std::filesystem::path& out_dir);

struct FinetuneResult {
    std::filesystem::path out_dir;
    std::map<std::string, double> metrics;      // task metrics (means)
    std::map<std::string, double> metrics_std;  // across folds; empty for seg
    std::vector<double> epoch_loss;             // mean train loss per epoch
};

// Task-specific fine-tuning. Segmentation trains on a seeded 80% split and
// reports WT/TC/ET Dice on the held-out 20%; classification and survival run
// stratified cross-validation and report mean +/- std of AUC/AP and C-index.
// `init` is "scratch" or a pretraining checkpoint path.
FinetuneResult run_finetune(const RunConfig& cfg, const std::string& init,
                            const std::vector<CohortRecord>& cohort,
                            const std::filesystem::path& out_dir);
FinetuneResult run_finetune(const RunConfig& cfg, const std::string& init,
                            const std::filesystem::path& out_dir);

struct ReconstructResult {
    ModalitySet targets;
    std::array<std::vector<double>, 4> volumes;  // filled for target modalities
    std::map<std::string, double> masked_mse;    // per fully-masked target modality
    std::vector<std::filesystem::path> images;
};

// One encode/decode pass with every source patch visible and every
// non-source target patch masked; exports mid-axial/coronal/sagittal slices
// of the originals and the target reconstructions.
ReconstructResult run_reconstruct(const ModelState& model, const MultimodalVolume& volume,
                                  const ModalitySet& source, const ModalitySet& targets,
                                  const std::filesystem::path& out_dir);

// All 15 non-empty modality subsets, ordered by size then lexicographically
// in canonical modality order.
std::vector<ModalitySet> all_nonempty_subsets();

struct ConsistencyResult {
    std::vector<ModalitySet> subsets;         // all_nonempty_subsets()
    std::vector<std::vector<double>> matrix;  // mean pairwise cosine, 15x15
    int64_t patients_used = 0;
    std::vector<std::string> excluded;        // zero-norm-embedding patients
};

// Pure aggregation step: embeddings[patient][subset] -> mean cosine matrix.
// Patients with any zero-norm embedding are excluded and reported.
ConsistencyResult consistency_from_embeddings(
    const std::vector<std::vector<std::vector<double>>>& embeddings,
    const std::vector<std::string>& patient_ids);

// Full-visibility cls embeddings under every subset for every patient,
// averaged cosine-similarity matrix; writes matrix.json and heatmap.png.
ConsistencyResult run_consistency(const ModelState& model,
                                  const std::vector<CohortRecord>& cohort,
                                  const std::filesystem::path& out_dir);

}  // namespace bmmae
