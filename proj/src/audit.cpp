#include "strainseq/audit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>

namespace strainseq::audit {

using deformation::LoadingPath;

void AuditConfig::validate() const {
    if (fractions.empty()) throw InvalidInputError("AuditConfig: no truncation fractions");
    for (const double f : fractions) {
        if (!(f > 0.0 && f < 1.0)) {
            throw InvalidInputError("AuditConfig: fraction " + std::to_string(f) +
                                    " outside (0, 1)");
        }
    }
    if (!(tolerance > 0.0)) throw InvalidInputError("AuditConfig: tolerance must be positive");
    if (!std::isfinite(localization_threshold)) {
        throw InvalidInputError("AuditConfig: localization threshold must be finite");
    }
}

LoadingPath truncate_path(const LoadingPath& path, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw InvalidInputError("truncate_path: fraction " + std::to_string(fraction) +
                                " outside (0, 1)");
    }
    const std::size_t n = path.size();
    if (n == 0) throw InvalidInputError("truncate_path: empty path");
    // Ceiling with a relative nudge so that e.g. 0.75 * 400 landing at
    // 300.00000000000006 still keeps 300 steps, not 301.
    const double raw = fraction * static_cast<double>(n);
    const auto keep_signed =
        static_cast<std::int64_t>(std::ceil(raw - 1e-9 * static_cast<double>(n)));
    if (keep_signed < 1) {
        throw InvalidInputError("truncate_path: fraction " + std::to_string(fraction) +
                                " keeps no steps of a " + std::to_string(n) + "-step path");
    }
    const std::size_t keep = std::min(static_cast<std::size_t>(keep_signed), n);

    LoadingPath out;
    out.path_id = path.path_id;
    out.eps_bar_fail = path.eps_bar_fail;
    out.dt = path.dt;
    out.eps1.assign(path.eps1.begin(), path.eps1.begin() + static_cast<std::ptrdiff_t>(keep));
    out.eps2.assign(path.eps2.begin(), path.eps2.begin() + static_cast<std::ptrdiff_t>(keep));
    out.phi.assign(path.phi.begin(), path.phi.begin() + static_cast<std::ptrdiff_t>(keep));
    out.eps_bar.assign(path.eps_bar.begin(),
                       path.eps_bar.begin() + static_cast<std::ptrdiff_t>(keep));
    out.damage.assign(path.damage.begin(),
                      path.damage.begin() + static_cast<std::ptrdiff_t>(keep));
    out.validate(1e-12);
    return out;
}

std::int64_t predicted_localization(const std::vector<double>& prediction, double threshold) {
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        if (prediction[i] >= threshold) return static_cast<std::int64_t>(i);
    }
    return -1;
}

namespace {

std::vector<const LoadingPath*> select_paths(const dataset::PathDataset& data,
                                             const AuditConfig& config) {
    std::map<std::int64_t, const LoadingPath*> by_id;
    for (const auto& p : data.paths) by_id[p.path_id] = &p;

    std::vector<const LoadingPath*> selected;
    if (!config.path_ids.empty()) {
        for (const auto id : config.path_ids) {
            const auto it = by_id.find(id);
            if (it == by_id.end()) {
                throw InvalidInputError("audit: dataset has no path with id " +
                                        std::to_string(id));
            }
            selected.push_back(it->second);
        }
        std::sort(selected.begin(), selected.end(),
                  [](const auto* a, const auto* b) { return a->path_id < b->path_id; });
        return selected;
    }
    for (const auto& [id, p] : by_id) {
        if (config.max_paths != 0 && selected.size() == config.max_paths) break;
        selected.push_back(p);
    }
    return selected;
}

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}

}  // namespace

AuditReport prefix_consistency_audit(const models::SequenceModel& model,
                                     const dataset::PathDataset& data,
                                     const AuditConfig& config) {
    config.validate();
    if (data.empty()) throw InvalidInputError("audit: dataset is empty");
    const auto paths = select_paths(data, config);
    if (paths.empty()) throw InvalidInputError("audit: no paths selected");

    std::vector<double> fractions = config.fractions;
    std::sort(fractions.begin(), fractions.end());

    AuditReport report;
    report.architecture = std::string(models::to_string(model.architecture()));
    report.config = config;

    std::size_t consistent_paths = 0;
    for (const auto* path : paths) {
        const std::vector<double> full = model.predict(*path);
        const std::int64_t loc_full =
            predicted_localization(full, config.localization_threshold);
        bool path_consistent = true;
        for (const double fraction : fractions) {
            const LoadingPath truncated = truncate_path(*path, fraction);
            const std::vector<double> partial = model.predict(truncated);
            double max_dev = 0.0;
            double sum_dev = 0.0;
            for (std::size_t i = 0; i < partial.size(); ++i) {
                const double dev = std::abs(full[i] - partial[i]);
                max_dev = std::max(max_dev, dev);
                sum_dev += dev;
            }
            AuditEntry entry;
            entry.path_id = path->path_id;
            entry.fraction = fraction;
            entry.max_deviation = max_dev;
            entry.mean_deviation = sum_dev / static_cast<double>(partial.size());
            entry.localization_full = loc_full;
            entry.localization_truncated =
                predicted_localization(partial, config.localization_threshold);
            report.entries.push_back(entry);
            if (max_dev > config.tolerance) path_consistent = false;
        }
        if (path_consistent) ++consistent_paths;
    }

    // select_paths returns id order and fractions are sorted, so entries are
    // already (path_id, fraction)-ordered.
    report.consistent_path_fraction =
        static_cast<double>(consistent_paths) / static_cast<double>(paths.size());
    report.verdict = consistent_paths == paths.size() ? "consistent" : "inconsistent";
    return report;
}

std::vector<MatrixRow> architecture_causality_matrix(const dataset::PathDataset& data,
                                                     const AuditConfig& audit_config,
                                                     const training::TrainConfig& train_config) {
    audit_config.validate();
    if (data.empty()) throw InvalidInputError("causality matrix: dataset is empty");
    const dataset::DatasetSplit split = dataset::split(data, 0.8, train_config.seed);
    const RngStream base(train_config.seed);

    struct Cell {
        std::string label;
        std::function<models::SequenceModel(std::uint64_t)> build;
    };

    models::GruConfig gru_cfg;
    gru_cfg.hidden = 16;
    models::ConvConfig conv_causal;
    conv_causal.filters = 16;
    conv_causal.kernel = 5;
    conv_causal.padding = models::PaddingMode::causal;
    models::ConvConfig conv_symmetric = conv_causal;
    conv_symmetric.padding = models::PaddingMode::symmetric;
    models::TransformerConfig tf_masked;
    tf_masked.d_model = 16;
    tf_masked.heads = 2;
    tf_masked.d_ff = 32;
    tf_masked.mask = models::MaskMode::causal;
    models::TransformerConfig tf_unmasked = tf_masked;
    tf_unmasked.mask = models::MaskMode::none;

    const std::vector<Cell> cells{
        {"encoder-decoder-gru",
         [&](std::uint64_t s) { return models::make_gru_model(gru_cfg, s); }},
        {"conv-causal",
         [&](std::uint64_t s) { return models::make_conv_model(conv_causal, s); }},
        {"conv-symmetric",
         [&](std::uint64_t s) { return models::make_conv_model(conv_symmetric, s); }},
        {"transformer-masked",
         [&](std::uint64_t s) { return models::make_transformer_model(tf_masked, s); }},
        {"transformer-unmasked",
         [&](std::uint64_t s) { return models::make_transformer_model(tf_unmasked, s); }},
    };

    std::vector<MatrixRow> rows;
    rows.reserve(cells.size());
    for (const auto& cell : cells) {
        MatrixRow row;
        row.label = cell.label;
        try {
            models::SequenceModel model = cell.build(base.split(cell.label).seed());
            const training::FitReport fit = training::fit_on_split(model, split, train_config);
            const AuditReport report = prefix_consistency_audit(model, data, audit_config);
            row.verdict = report.verdict;
            row.consistent_path_fraction = report.consistent_path_fraction;
            row.test_mse = fit.test_mse;
            for (const auto& e : report.entries) {
                row.max_deviation = std::max(row.max_deviation, e.max_deviation);
            }
        } catch (const Error& e) {
            row.verdict = "error";
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// --- serialization -------------------------------------------------------------

nlohmann::json report_to_json(const AuditReport& report) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : report.entries) {
        entries.push_back({{"path_id", e.path_id},
                           {"fraction", e.fraction},
                           {"max_deviation", e.max_deviation},
                           {"mean_deviation", e.mean_deviation},
                           {"localization_full", e.localization_full},
                           {"localization_truncated", e.localization_truncated}});
    }
    return {{"format", "strainseq-audit"},
            {"version", 1},
            {"architecture", report.architecture},
            {"config",
             {{"fractions", report.config.fractions},
              {"tolerance", report.config.tolerance},
              {"localization_threshold", report.config.localization_threshold},
              {"path_ids", report.config.path_ids},
              {"max_paths", report.config.max_paths}}},
            {"consistent_path_fraction", report.consistent_path_fraction},
            {"verdict", report.verdict},
            {"entries", entries}};
}

AuditReport report_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "strainseq-audit") {
            throw SchemaError("audit json: unexpected format tag");
        }
        AuditReport report;
        report.architecture = j.at("architecture").get<std::string>();
        const auto& cj = j.at("config");
        report.config.fractions = cj.at("fractions").get<std::vector<double>>();
        report.config.tolerance = cj.at("tolerance").get<double>();
        report.config.localization_threshold = cj.at("localization_threshold").get<double>();
        report.config.path_ids = cj.at("path_ids").get<std::vector<std::int64_t>>();
        report.config.max_paths = cj.at("max_paths").get<std::size_t>();
        report.consistent_path_fraction = j.at("consistent_path_fraction").get<double>();
        report.verdict = j.at("verdict").get<std::string>();
        for (const auto& ej : j.at("entries")) {
            AuditEntry e;
            e.path_id = ej.at("path_id").get<std::int64_t>();
            e.fraction = ej.at("fraction").get<double>();
            e.max_deviation = ej.at("max_deviation").get<double>();
            e.mean_deviation = ej.at("mean_deviation").get<double>();
            e.localization_full = ej.at("localization_full").get<std::int64_t>();
            e.localization_truncated = ej.at("localization_truncated").get<std::int64_t>();
            report.entries.push_back(e);
        }
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("audit json: ") + e.what());
    }
}

void save_report(const AuditReport& report, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");
    out << report_to_json(report).dump(2) << '\n';
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

AuditReport load_report(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open '" + file.string() + "' for reading");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("audit '" + file.string() + "': " + e.what());
    }
    return report_from_json(j);
}

void write_report_csv(const AuditReport& report, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");
    out << "path_id,fraction,max_dev,mean_dev,loc_full,loc_trunc\n";
    for (const auto& e : report.entries) {
        out << e.path_id << ',' << g17(e.fraction) << ',' << g17(e.max_deviation) << ','
            << g17(e.mean_deviation) << ',' << e.localization_full << ','
            << e.localization_truncated << '\n';
    }
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

nlohmann::json matrix_to_json(const std::vector<MatrixRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"label", r.label},
                       {"verdict", r.verdict},
                       {"max_deviation", r.max_deviation},
                       {"consistent_path_fraction", r.consistent_path_fraction},
                       {"test_mse", r.test_mse},
                       {"error", r.error}});
    }
    return {{"format", "strainseq-causality-matrix"}, {"version", 1}, {"rows", out}};
}

void write_matrix_csv(const std::vector<MatrixRow>& rows, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");
    out << "label,verdict,max_deviation,consistent_path_fraction,test_mse\n";
    for (const auto& r : rows) {
        out << r.label << ',' << r.verdict << ',' << g17(r.max_deviation) << ','
            << g17(r.consistent_path_fraction) << ',' << g17(r.test_mse) << '\n';
    }
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

}  // namespace strainseq::audit
