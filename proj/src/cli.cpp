#include "strainseq/cli.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "strainseq/dataset.hpp"
#include "strainseq/hpo.hpp"

namespace strainseq::cli {

namespace fs = std::filesystem;

namespace {

void check_keys(const nlohmann::json& j, const std::string& section,
                std::initializer_list<std::string_view> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
            const std::string where = section.empty() ? it.key() : section + "." + it.key();
            throw SchemaError("config: unknown key '" + where + "'");
        }
    }
}

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    try {
        check_keys(j, "", {"output_dir", "dataset", "model", "training", "hpo", "audit"});
        ExperimentConfig cfg;
        if (j.contains("output_dir")) {
            cfg.output_dir = j.at("output_dir").get<std::string>();
            cfg.output_dir_set = true;
        }

        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            cfg.dataset_source = d.value("source", std::string{});
            if (cfg.dataset_source == "synthetic") {
                check_keys(d, "dataset", {"source", "paths", "steps", "seed"});
                read_if(d, "paths", cfg.dataset_paths);
                read_if(d, "steps", cfg.dataset_steps);
                read_if(d, "seed", cfg.dataset_seed);
            } else if (cfg.dataset_source == "file") {
                check_keys(d, "dataset", {"source", "path"});
                cfg.dataset_file = d.at("path").get<std::string>();
            } else {
                throw SchemaError("config: dataset.source must be 'synthetic' or 'file'");
            }
        }

        if (j.contains("model")) {
            const auto& m = j.at("model");
            check_keys(m, "model",
                       {"architecture", "seed", "hidden", "filters", "kernel", "padding",
                        "d_model", "heads", "d_ff", "dropout", "mask", "positional"});
            if (m.contains("architecture")) {
                cfg.architecture = m.at("architecture").get<std::string>();
                models::architecture_from_string(cfg.architecture);  // validate now
            }
            if (m.contains("seed")) {
                cfg.model_seed = m.at("seed").get<std::uint64_t>();
                cfg.model_seed_set = true;
            }
            read_if(m, "hidden", cfg.gru.hidden);
            read_if(m, "filters", cfg.conv.filters);
            read_if(m, "kernel", cfg.conv.kernel);
            if (m.contains("padding")) {
                cfg.conv.padding = models::padding_from_string(m.at("padding").get<std::string>());
            }
            read_if(m, "d_model", cfg.transformer.d_model);
            read_if(m, "heads", cfg.transformer.heads);
            read_if(m, "d_ff", cfg.transformer.d_ff);
            read_if(m, "dropout", cfg.transformer.dropout);
            if (m.contains("mask")) {
                cfg.transformer.mask = models::mask_from_string(m.at("mask").get<std::string>());
            }
            if (m.contains("positional")) {
                cfg.transformer.positional =
                    models::positional_from_string(m.at("positional").get<std::string>());
            }
        }

        if (j.contains("training")) {
            const auto& t = j.at("training");
            check_keys(t, "training",
                       {"learning_rate", "batch_size", "max_epochs", "patience", "seed", "beta1",
                        "beta2", "epsilon", "clip_norm", "train_fraction"});
            read_if(t, "learning_rate", cfg.training.learning_rate);
            read_if(t, "batch_size", cfg.training.batch_size);
            read_if(t, "max_epochs", cfg.training.max_epochs);
            read_if(t, "patience", cfg.training.patience);
            read_if(t, "seed", cfg.training.seed);
            read_if(t, "beta1", cfg.training.beta1);
            read_if(t, "beta2", cfg.training.beta2);
            read_if(t, "epsilon", cfg.training.epsilon);
            read_if(t, "clip_norm", cfg.training.clip_norm);
            read_if(t, "train_fraction", cfg.train_fraction);
        }

        if (j.contains("hpo")) {
            const auto& h = j.at("hpo");
            check_keys(h, "hpo", {"trials", "seed", "workers"});
            read_if(h, "trials", cfg.trials);
            read_if(h, "seed", cfg.hpo_seed);
            read_if(h, "workers", cfg.workers);
        }

        if (j.contains("audit")) {
            const auto& a = j.at("audit");
            check_keys(a, "audit",
                       {"fractions", "tolerance", "localization_threshold", "path_ids",
                        "max_paths"});
            read_if(a, "fractions", cfg.audit.fractions);
            read_if(a, "tolerance", cfg.audit.tolerance);
            read_if(a, "localization_threshold", cfg.audit.localization_threshold);
            read_if(a, "path_ids", cfg.audit.path_ids);
            read_if(a, "max_paths", cfg.audit.max_paths);
        }
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("config: ") + e.what());
    }
}

ExperimentConfig ExperimentConfig::load(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open config '" + file.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("config '" + file.string() + "': " + e.what());
    }
    return from_json(j);
}

namespace {

dataset::PathDataset load_data(const ExperimentConfig& cfg) {
    if (cfg.dataset_source == "file") return dataset::load_csv(cfg.dataset_file);
    if (cfg.dataset_source == "synthetic") {
        if (cfg.dataset_paths == 0 || cfg.dataset_steps == 0) {
            throw InvalidInputError("dataset: paths and steps must be positive");
        }
        return dataset::synthesize(cfg.dataset_paths, cfg.dataset_steps, cfg.dataset_seed);
    }
    throw InvalidInputError("no dataset source: pass --data or a config dataset section");
}

models::SequenceModel build_model(const ExperimentConfig& cfg) {
    if (cfg.architecture.empty()) {
        throw InvalidInputError("no architecture: pass --arch or config model.architecture");
    }
    const auto arch = models::architecture_from_string(cfg.architecture);
    const std::uint64_t seed = cfg.model_seed_set ? cfg.model_seed : cfg.training.seed;
    switch (arch) {
        case models::Architecture::gru: return models::make_gru_model(cfg.gru, seed);
        case models::Architecture::conv: return models::make_conv_model(cfg.conv, seed);
        case models::Architecture::transformer:
            return models::make_transformer_model(cfg.transformer, seed);
    }
    throw InvalidInputError("unknown architecture '" + cfg.architecture + "'");
}

fs::path artifact_dir(const ExperimentConfig& cfg, const char* sub) {
    const fs::path dir = fs::path(cfg.output_dir) / sub;
    fs::create_directories(dir);
    return dir;
}

void write_json_file(const nlohmann::json& j, const fs::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

int cmd_generate(const ExperimentConfig& cfg, const std::string& out_file, std::ostream& out) {
    if (cfg.dataset_paths == 0 || cfg.dataset_steps == 0) {
        throw InvalidInputError("generate: --paths and --steps must be positive");
    }
    const auto data =
        dataset::synthesize(cfg.dataset_paths, cfg.dataset_steps, cfg.dataset_seed);
    const fs::path file =
        out_file.empty() ? artifact_dir(cfg, "dataset") / "paths.csv" : fs::path(out_file);
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    dataset::save_csv(data, file);

    double d_lo = std::numeric_limits<double>::infinity();
    double d_hi = -std::numeric_limits<double>::infinity();
    for (const auto& p : data.paths) {
        d_lo = std::min(d_lo, p.damage.back());
        d_hi = std::max(d_hi, p.damage.back());
    }
    out << "wrote " << data.size() << " paths x " << cfg.dataset_steps << " steps to "
        << file.string() << '\n';
    out << "final damage range [" << std::setprecision(6) << d_lo << ", " << d_hi << "]\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, std::ostream& out) {
    const auto data = load_data(cfg);
    auto model = build_model(cfg);
    const auto split = dataset::split(data, cfg.train_fraction, cfg.training.seed);
    const auto report = training::fit_on_split(model, split, cfg.training);

    const fs::path dir = artifact_dir(cfg, "models");
    const fs::path checkpoint = dir / (cfg.architecture + ".json");
    const fs::path history = dir / (cfg.architecture + "-history.json");
    models::save_model(model, checkpoint);
    write_json_file(training::history_to_json(report.history), history);

    out << cfg.architecture << ": " << model.parameter_count() << " parameters, "
        << split.train.size() << "/" << split.test.size() << " train/test paths\n";
    out << std::setprecision(6) << "stopped at epoch " << report.history.stopped_epoch
        << " (best " << report.history.best_epoch << "), best val MSE "
        << report.best_val_mse << '\n';
    out << "train MSE " << report.train_mse << ", test MSE " << report.test_mse << '\n';
    out << "checkpoint " << checkpoint.string() << '\n';
    return 0;
}

int cmd_tune(const ExperimentConfig& cfg, std::ostream& out) {
    if (cfg.architecture.empty()) {
        throw InvalidInputError("no architecture: pass --arch or config model.architecture");
    }
    const auto arch = models::architecture_from_string(cfg.architecture);
    const auto data = load_data(cfg);
    const auto split = dataset::split(data, cfg.train_fraction, cfg.training.seed);

    hpo::StudyConfig sc;
    sc.n_trials = cfg.trials;
    sc.seed = cfg.hpo_seed;
    sc.workers = cfg.workers;
    sc.base = cfg.training;
    const auto study = hpo::run_study(arch, hpo::space_for(arch), split, sc);

    const fs::path dir = artifact_dir(cfg, "studies");
    const fs::path json_file = dir / (cfg.architecture + "-study.json");
    const fs::path csv_file = dir / (cfg.architecture + "-study.csv");
    hpo::save_study(study, json_file);
    hpo::write_study_csv(study, csv_file);

    const auto& best = study.best();
    out << cfg.architecture << ": " << study.trials.size() << " trials, best trial "
        << best.index << std::setprecision(6) << " (train MSE " << best.train_mse
        << ", test MSE " << best.test_mse << ")\n";
    out << "best configuration:";
    for (const auto& [name, value] : best.config) out << ' ' << name << '=' << value;
    out << '\n';
    out << "study " << json_file.string() << '\n';
    return 0;
}

int cmd_audit(const ExperimentConfig& cfg, const std::string& model_file, bool matrix,
              std::ostream& out) {
    const auto data = load_data(cfg);
    const fs::path dir = artifact_dir(cfg, "audits");

    if (matrix) {
        if (!model_file.empty()) {
            throw InvalidInputError("audit: --matrix trains its own models, drop --model");
        }
        const auto rows = audit::architecture_causality_matrix(data, cfg.audit, cfg.training);
        audit::write_matrix_csv(rows, dir / "causality-matrix.csv");
        write_json_file(audit::matrix_to_json(rows), dir / "causality-matrix.json");
        for (const auto& r : rows) {
            out << std::left << std::setw(24) << r.label << ' ' << std::setw(14) << r.verdict
                << " max deviation " << std::setprecision(6) << r.max_deviation << '\n';
        }
        out << "matrix " << (dir / "causality-matrix.json").string() << '\n';
        return 0;
    }

    if (model_file.empty()) {
        throw InvalidInputError("audit: pass --model <checkpoint> (or --matrix)");
    }
    const auto model = models::load_model(model_file);
    const auto report = audit::prefix_consistency_audit(model, data, cfg.audit);
    const std::string stem = fs::path(model_file).stem().string();
    const fs::path json_file = dir / (stem + "-audit.json");
    audit::save_report(report, json_file);
    audit::write_report_csv(report, dir / (stem + "-audit.csv"));

    double max_dev = 0.0;
    for (const auto& e : report.entries) max_dev = std::max(max_dev, e.max_deviation);
    out << report.architecture << ": verdict " << report.verdict << ", "
        << std::setprecision(6) << 100.0 * report.consistent_path_fraction
        << "% of paths consistent, max deviation " << max_dev << '\n';
    out << "report " << json_file.string() << '\n';
    return 0;
}

int cmd_compare(const ExperimentConfig& cfg, const std::vector<std::string>& study_files,
                std::ostream& out) {
    const fs::path dir = artifact_dir(cfg, "studies");
    const fs::path csv_file = dir / "comparison.csv";
    std::ofstream csv(csv_file, std::ios::binary);
    if (!csv) throw IoError("cannot open '" + csv_file.string() + "' for writing");
    csv << "architecture,study,trials,best_trial,best_train_mse,best_test_mse\n";

    out << std::left << std::setw(14) << "architecture" << std::setw(8) << "trials"
        << std::setw(14) << "train_mse" << std::setw(14) << "test_mse" << '\n';
    for (const auto& file : study_files) {
        const auto study = hpo::load_study(file);
        const auto& best = study.best();
        char train_buf[40], test_buf[40];
        std::snprintf(train_buf, sizeof train_buf, "%.17g", best.train_mse);
        std::snprintf(test_buf, sizeof test_buf, "%.17g", best.test_mse);
        csv << study.architecture << ',' << file << ',' << study.trials.size() << ','
            << best.index << ',' << train_buf << ',' << test_buf << '\n';
        out << std::left << std::setw(14) << study.architecture << std::setw(8)
            << study.trials.size() << std::setw(14) << std::setprecision(6) << best.train_mse
            << std::setw(14) << best.test_mse << '\n';
    }
    if (!csv) throw IoError("write to '" + csv_file.string() + "' failed");
    out << "comparison " << csv_file.string() << '\n';
    return 0;
}

// Builds the effective config: file values first, then the flags the user
// actually passed, then the environment fallback for the output root.
ExperimentConfig effective_config(const CLI::App* cmd, const std::string& config_file,
                                  const std::string& outdir_flag) {
    ExperimentConfig cfg =
        config_file.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_file);
    if (cmd->count("--output-dir") > 0) {
        cfg.output_dir = outdir_flag;
        cfg.output_dir_set = true;
    }
    if (!cfg.output_dir_set) {
        if (const char* env = std::getenv("STRAINSEQ_OUT")) cfg.output_dir = env;
    }
    return cfg;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"damage-sequence toolkit: synthetic bilinear loading paths, three trainable "
                 "sequence architectures, Bayesian tuning, prefix-consistency audits"};
    app.name("strainseq");
    app.require_subcommand(1);

    std::string config_file, outdir, data_file, out_file, model_file, arch;
    std::vector<std::string> study_files;
    std::size_t paths = 0, steps = 0, batch = 0, epochs = 0, patience = 0, trials = 0,
                workers = 0, max_paths = 0;
    std::uint64_t seed = 0, model_seed = 0;
    double lr = 0.0, train_fraction = 0.0, tolerance = 0.0, threshold = 0.0, dropout = 0.0;
    int hidden = 0, filters = 0, kernel = 0, d_model = 0, heads = 0, d_ff = 0;
    std::string padding, mask, positional;
    std::vector<double> fractions;
    bool matrix = false;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "JSON experiment config");
        cmd->add_option("--output-dir", outdir, "artifact root (default $STRAINSEQ_OUT or ./out)");
    };
    const auto add_training = [&](CLI::App* cmd) {
        cmd->add_option("--lr", lr, "learning rate");
        cmd->add_option("--batch", batch, "paths per optimizer step");
        cmd->add_option("--epochs", epochs, "epoch ceiling");
        cmd->add_option("--patience", patience, "early-stopping patience");
        cmd->add_option("--seed", seed, "training seed (shuffle, dropout, split)");
        cmd->add_option("--train-fraction", train_fraction, "train share of the path split");
    };
    const auto add_model = [&](CLI::App* cmd) {
        cmd->add_option("--arch", arch, "gru | conv | transformer");
        cmd->add_option("--model-seed", model_seed, "weight-init seed (default: training seed)");
        cmd->add_option("--hidden", hidden, "gru hidden width");
        cmd->add_option("--filters", filters, "conv filters");
        cmd->add_option("--kernel", kernel, "conv kernel width");
        cmd->add_option("--padding", padding, "conv padding: causal | symmetric");
        cmd->add_option("--d-model", d_model, "transformer embedding width");
        cmd->add_option("--heads", heads, "attention heads");
        cmd->add_option("--d-ff", d_ff, "feedforward width");
        cmd->add_option("--dropout", dropout, "dropout rate at both sites");
        cmd->add_option("--mask", mask, "attention mask: none | causal");
        cmd->add_option("--positional", positional, "positional encoding: none | sinusoidal");
    };

    auto* gen = app.add_subcommand("generate", "synthesize a loading-path dataset CSV");
    add_common(gen);
    gen->add_option("--paths", paths, "number of paths");
    gen->add_option("--steps", steps, "steps per path");
    gen->add_option("--seed", seed, "synthesis seed");
    gen->add_option("--out", out_file, "CSV destination (default <output-dir>/dataset/paths.csv)");

    auto* train = app.add_subcommand("train", "train one architecture and save a checkpoint");
    add_common(train);
    train->add_option("--data", data_file, "dataset CSV");
    add_model(train);
    add_training(train);

    auto* tune = app.add_subcommand("tune", "run a Bayesian hyperparameter study");
    add_common(tune);
    tune->add_option("--data", data_file, "dataset CSV");
    tune->add_option("--arch", arch, "gru | conv | transformer");
    tune->add_option("--trials", trials, "trial count");
    tune->add_option("--tune-seed", seed, "study seed");
    tune->add_option("--workers", workers, "parallel trials per wave");
    tune->add_option("--epochs", epochs, "per-trial epoch ceiling");
    tune->add_option("--patience", patience, "per-trial early-stopping patience");
    tune->add_option("--train-fraction", train_fraction, "train share of the path split");

    auto* aud = app.add_subcommand("audit", "prefix-consistency audit of a checkpoint");
    add_common(aud);
    aud->add_option("--data", data_file, "dataset CSV");
    aud->add_option("--model", model_file, "model checkpoint JSON");
    aud->add_option("--fractions", fractions, "truncation fractions")->delimiter(',');
    aud->add_option("--tolerance", tolerance, "deviation ceiling for consistency");
    aud->add_option("--threshold", threshold, "localization threshold");
    aud->add_option("--paths", max_paths, "number of paths to audit (0 = all)");
    aud->add_flag("--matrix", matrix, "train + audit all five architecture/mode rows");
    aud->add_option("--epochs", epochs, "matrix training epochs");
    aud->add_option("--patience", patience, "matrix early-stopping patience");
    aud->add_option("--seed", seed, "matrix training seed");

    auto* cmp = app.add_subcommand("compare", "tabulate the best trials of saved studies");
    add_common(cmp);
    cmp->add_option("studies", study_files, "study JSON files")->required();

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("strainseq");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            ExperimentConfig cfg = effective_config(gen, config_file, outdir);
            cfg.dataset_source = "synthetic";
            if (gen->count("--paths")) cfg.dataset_paths = paths;
            if (gen->count("--steps")) cfg.dataset_steps = steps;
            if (gen->count("--seed")) cfg.dataset_seed = seed;
            return cmd_generate(cfg, out_file, out);
        }

        if (train->parsed()) {
            ExperimentConfig cfg = effective_config(train, config_file, outdir);
            if (train->count("--data")) {
                cfg.dataset_source = "file";
                cfg.dataset_file = data_file;
            }
            if (train->count("--arch")) cfg.architecture = arch;
            if (train->count("--model-seed")) {
                cfg.model_seed = model_seed;
                cfg.model_seed_set = true;
            }
            if (train->count("--hidden")) cfg.gru.hidden = hidden;
            if (train->count("--filters")) cfg.conv.filters = filters;
            if (train->count("--kernel")) cfg.conv.kernel = kernel;
            if (train->count("--padding")) cfg.conv.padding = models::padding_from_string(padding);
            if (train->count("--d-model")) cfg.transformer.d_model = d_model;
            if (train->count("--heads")) cfg.transformer.heads = heads;
            if (train->count("--d-ff")) cfg.transformer.d_ff = d_ff;
            if (train->count("--dropout")) cfg.transformer.dropout = dropout;
            if (train->count("--mask")) cfg.transformer.mask = models::mask_from_string(mask);
            if (train->count("--positional")) {
                cfg.transformer.positional = models::positional_from_string(positional);
            }
            if (train->count("--lr")) cfg.training.learning_rate = lr;
            if (train->count("--batch")) cfg.training.batch_size = batch;
            if (train->count("--epochs")) cfg.training.max_epochs = epochs;
            if (train->count("--patience")) cfg.training.patience = patience;
            if (train->count("--seed")) cfg.training.seed = seed;
            if (train->count("--train-fraction")) cfg.train_fraction = train_fraction;
            return cmd_train(cfg, out);
        }

        if (tune->parsed()) {
            ExperimentConfig cfg = effective_config(tune, config_file, outdir);
            if (tune->count("--data")) {
                cfg.dataset_source = "file";
                cfg.dataset_file = data_file;
            }
            if (tune->count("--arch")) cfg.architecture = arch;
            if (tune->count("--trials")) cfg.trials = trials;
            if (tune->count("--tune-seed")) cfg.hpo_seed = seed;
            if (tune->count("--workers")) cfg.workers = workers;
            if (tune->count("--epochs")) cfg.training.max_epochs = epochs;
            if (tune->count("--patience")) cfg.training.patience = patience;
            if (tune->count("--train-fraction")) cfg.train_fraction = train_fraction;
            return cmd_tune(cfg, out);
        }

        if (aud->parsed()) {
            ExperimentConfig cfg = effective_config(aud, config_file, outdir);
            if (aud->count("--data")) {
                cfg.dataset_source = "file";
                cfg.dataset_file = data_file;
            }
            if (aud->count("--fractions")) cfg.audit.fractions = fractions;
            if (aud->count("--tolerance")) cfg.audit.tolerance = tolerance;
            if (aud->count("--threshold")) cfg.audit.localization_threshold = threshold;
            if (aud->count("--paths")) cfg.audit.max_paths = max_paths;
            if (aud->count("--epochs")) cfg.training.max_epochs = epochs;
            if (aud->count("--patience")) cfg.training.patience = patience;
            if (aud->count("--seed")) cfg.training.seed = seed;
            return cmd_audit(cfg, model_file, matrix, out);
        }

        if (cmp->parsed()) {
            ExperimentConfig cfg = effective_config(cmp, config_file, outdir);
            return cmd_compare(cfg, study_files, out);
        }
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    err << "error: no command\n";
    return 1;
}

}  // namespace strainseq::cli
