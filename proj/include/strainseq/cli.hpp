#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "strainseq/audit.hpp"
#include "strainseq/common.hpp"
#include "strainseq/models.hpp"
#include "strainseq/training.hpp"

namespace strainseq::cli {

// Everything a command can take from a JSON config file. Flags overlay these
// values; unknown keys anywhere in the file are rejected.
struct ExperimentConfig {
    std::string output_dir = "out";
    // Whether a config file or flag chose output_dir (the STRAINSEQ_OUT
    // environment variable fills in only when nothing did).
    bool output_dir_set = false;

    // dataset: exactly one source
    std::string dataset_source;  // "" (unset) | "synthetic" | "file"
    std::size_t dataset_paths = 500;
    std::size_t dataset_steps = 100;
    std::uint64_t dataset_seed = 0;
    std::string dataset_file;

    // model
    std::string architecture;  // "" until chosen
    models::GruConfig gru;
    models::ConvConfig conv;
    models::TransformerConfig transformer;
    bool model_seed_set = false;
    std::uint64_t model_seed = 0;  // defaults to the training seed when unset

    training::TrainConfig training;
    double train_fraction = 0.8;

    // hpo
    std::size_t trials = 20;
    std::uint64_t hpo_seed = 0;
    std::size_t workers = 1;

    audit::AuditConfig audit;

    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& file);
};

// Executes one command line (subcommand plus flags, no program name).
// Human-readable output goes to `out`, diagnostics to `err`. Returns the
// exit code: 0 success, 1 usage or input error, 2 numeric failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace strainseq::cli
