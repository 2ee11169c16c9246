// bmmae: masked-autoencoder pretraining and fine-tuning for multimodal 3D
// volumes. Subcommands: gen-synth, pretrain, finetune, reconstruct,
// consistency. Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 numeric failure.
#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>

#include "bmmae/common.hpp"
#include "bmmae/pipeline.hpp"
#include "bmmae/volumes.hpp"

namespace {

using namespace bmmae;

Dims3 parse_shape(const std::string& spec) {
    std::vector<int64_t> parts;
    std::string tok;
    std::istringstream ss(spec);
    while (std::getline(ss, tok, ',')) {
        try {
            parts.push_back(std::stoll(tok));
        } catch (const std::exception&) {
            throw ConfigError("cannot parse shape component '" + tok + "'");
        }
    }
    if (parts.size() == 1) return Dims3{parts[0], parts[0], parts[0]};
    if (parts.size() == 3) return Dims3{parts[0], parts[1], parts[2]};
    throw ConfigError("shape must be one edge length or H,W,D");
}

const CohortRecord& find_patient(const std::vector<CohortRecord>& cohort,
                                 const std::string& id) {
    for (const CohortRecord& rec : cohort)
        if (rec.volume.patient_id == id) return rec;
    throw DataError("patient '" + id + "' not found in the dataset");
}

int run(int argc, char** argv) {
    CLI::App app{"Multimodal masked-autoencoder pretraining and fine-tuning for 3D volumes"};
    app.require_subcommand(1);

    // gen-synth
    auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic multimodal cohort");
    int64_t gen_n = 8;
    std::string gen_shape = "32";
    uint64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--n", gen_n, "Number of patients")->required();
    gen->add_option("--shape", gen_shape, "Volume shape: edge length or H,W,D")->required();
    gen->add_option("--seed", gen_seed, "Generator seed")->required();
    gen->add_option("--out", gen_out, "Output dataset directory")->required();

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Masked-autoencoder pretraining");
    std::string pre_config;
    std::string pre_out = "runs/pretrain";
    bool pre_paper = false;
    pre->add_option("--config", pre_config, "Run config JSON file")->required();
    pre->add_option("--out", pre_out, "Output run directory");
    pre->add_flag("--paper-scale", pre_paper, "Use full-scale defaults (model and schedule)");

    // finetune
    auto* fin = app.add_subcommand("finetune", "Fine-tune a task head (seg|cls|surv)");
    std::string fin_task, fin_subset, fin_init, fin_config;
    std::string fin_out = "runs/finetune";
    bool fin_paper = false;
    fin->add_option("--task", fin_task, "Task: seg, cls or surv")->required();
    fin->add_option("--subset", fin_subset, "Input modalities, e.g. T1,FLAIR");
    fin->add_option("--init", fin_init, "scratch or a pretraining checkpoint path")->required();
    fin->add_option("--config", fin_config, "Run config JSON file")->required();
    fin->add_option("--out", fin_out, "Output run directory");
    fin->add_flag("--paper-scale", fin_paper, "Use full-scale defaults (model and schedule)");

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "Cross-modal reconstruction of one patient");
    std::string rec_ckpt, rec_source, rec_targets, rec_patient, rec_data;
    std::string rec_out = "runs/reconstruct";
    rec->add_option("--ckpt", rec_ckpt, "Pretraining checkpoint directory")->required();
    rec->add_option("--source", rec_source, "Visible modalities, e.g. T1")->required();
    rec->add_option("--targets", rec_targets, "Modalities to reconstruct")->required();
    rec->add_option("--patient", rec_patient, "Patient id")->required();
    rec->add_option("--data", rec_data, "Dataset directory")->required();
    rec->add_option("--out", rec_out, "Output directory for slices");

    // consistency
    auto* con = app.add_subcommand("consistency", "Embedding consistency across modality subsets");
    std::string con_ckpt, con_data;
    std::string con_out = "runs/consistency";
    con->add_option("--ckpt", con_ckpt, "Pretraining checkpoint directory")->required();
    con->add_option("--data", con_data, "Dataset directory")->required();
    con->add_option("--out", con_out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // command-line misuse is a configuration error
    }

    if (gen->parsed()) {
        save_cohort(generate_synthetic_cohort(static_cast<int>(gen_n), parse_shape(gen_shape),
                                              gen_seed),
                    gen_out);
        std::cout << "wrote " << gen_n << " patients to " << gen_out << "\n";
        return 0;
    }

    if (pre->parsed()) {
        RunConfig cfg = load_run_config(pre_config);
        cfg.task = Task::Pretrain;
        if (pre_paper) cfg.paper_scale = true;
        PretrainResult result = run_pretrain(cfg, pre_out);
        std::cout << "checkpoint: " << result.checkpoint.string() << "\n"
                  << "epoch 1 loss " << result.epoch_loss.front() << ", final loss "
                  << result.epoch_loss.back() << "\n";
        return 0;
    }

    if (fin->parsed()) {
        RunConfig cfg = load_run_config(fin_config);
        cfg.task = parse_task(fin_task);
        if (!fin_subset.empty()) cfg.subset = parse_subset(fin_subset);
        if (fin_paper) cfg.paper_scale = true;
        FinetuneResult result = run_finetune(cfg, fin_init, fin_out);
        for (const auto& [name, value] : result.metrics) {
            std::cout << name << ": " << value;
            if (auto it = result.metrics_std.find(name); it != result.metrics_std.end())
                std::cout << " +/- " << it->second;
            std::cout << "\n";
        }
        return 0;
    }

    if (rec->parsed()) {
        ModelState model = load_model(rec_ckpt);
        std::vector<CohortRecord> cohort = prepare_cohort(load_cohort(rec_data));
        const CohortRecord& patient = find_patient(cohort, rec_patient);
        ReconstructResult result =
            run_reconstruct(model, patient.volume, parse_subset(rec_source),
                            parse_subset(rec_targets), rec_out);
        for (const auto& [name, mse] : result.masked_mse)
            std::cout << name << " masked-region mse: " << mse << "\n";
        std::cout << result.images.size() << " slice images in " << rec_out << "\n";
        return 0;
    }

    if (con->parsed()) {
        ModelState model = load_model(con_ckpt);
        ConsistencyResult result =
            run_consistency(model, prepare_cohort(load_cohort(con_data)), con_out);
        std::cout << "matrix over " << result.subsets.size() << " subsets, "
                  << result.patients_used << " patients; outputs in " << con_out << "\n";
        return 0;
    }

    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const bmmae::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const bmmae::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const bmmae::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
