#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "strainseq/common.hpp"
#include "strainseq/dataset.hpp"
#include "strainseq/deformation.hpp"
#include "strainseq/models.hpp"
#include "strainseq/training.hpp"

namespace strainseq::audit {

struct AuditConfig {
    std::vector<double> fractions{0.25, 0.5, 0.75, 0.9};
    double tolerance = 1e-9;  // absolute deviation ceiling for "consistent"
    double localization_threshold = 1.0;
    // Which paths to audit: explicit ids win; otherwise the first max_paths
    // in id order (0 = every path).
    std::vector<std::int64_t> path_ids;
    std::size_t max_paths = 0;

    void validate() const;
};

struct AuditEntry {
    std::int64_t path_id = 0;
    double fraction = 0.0;
    double max_deviation = 0.0;   // over the overlapping steps
    double mean_deviation = 0.0;
    std::int64_t localization_full = -1;  // first predicted step at threshold; -1 = never
    std::int64_t localization_truncated = -1;
};

struct AuditReport {
    std::string architecture;
    AuditConfig config;
    std::vector<AuditEntry> entries;  // sorted by (path_id, fraction)
    double consistent_path_fraction = 0.0;
    std::string verdict;  // "consistent" iff every entry is within tolerance
};

// Keeps the first ceil(fraction * n) steps of every series (tolerant of
// representation error in fraction * n). All path invariants survive because
// the series are prefix sums.
deformation::LoadingPath truncate_path(const deformation::LoadingPath& path, double fraction);

// First index where a prediction series crosses the threshold, -1 if never.
std::int64_t predicted_localization(const std::vector<double>& prediction, double threshold);

// The core check: for each audited path and fraction, compare the model's
// predictions on the truncated history against the same steps of its
// full-history predictions.
AuditReport prefix_consistency_audit(const models::SequenceModel& model,
                                     const dataset::PathDataset& data,
                                     const AuditConfig& config = {});

struct MatrixRow {
    std::string label;
    std::string verdict;  // consistent | inconsistent | error
    double max_deviation = 0.0;
    double consistent_path_fraction = 0.0;
    double test_mse = -1.0;  // from the row's brief fit
    std::string error;       // populated when verdict == "error"
};

// Trains one small instance of every architecture/mode combination on the
// dataset and audits each: encoder-decoder GRU, conv causal, conv symmetric,
// transformer masked, transformer unmasked. A failure in one row is recorded
// there and does not disturb the others.
std::vector<MatrixRow> architecture_causality_matrix(const dataset::PathDataset& data,
                                                     const AuditConfig& audit_config,
                                                     const training::TrainConfig& train_config);

nlohmann::json report_to_json(const AuditReport& report);
AuditReport report_from_json(const nlohmann::json& j);
void save_report(const AuditReport& report, const std::filesystem::path& file);
AuditReport load_report(const std::filesystem::path& file);
void write_report_csv(const AuditReport& report, const std::filesystem::path& file);

nlohmann::json matrix_to_json(const std::vector<MatrixRow>& rows);
void write_matrix_csv(const std::vector<MatrixRow>& rows, const std::filesystem::path& file);

}  // namespace strainseq::audit
