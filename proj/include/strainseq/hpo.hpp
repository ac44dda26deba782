#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "strainseq/common.hpp"
#include "strainseq/dataset.hpp"
#include "strainseq/models.hpp"
#include "strainseq/training.hpp"

namespace strainseq::hpo {

// How a dimension is presented to the surrogate: linear on its natural units,
// log10 for rates spanning decades, or a power-of-two grid (batch sizes).
enum class Scale { linear, log10, log2_grid };
std::string_view to_string(Scale s);
Scale scale_from_string(std::string_view s);

struct Dimension {
    std::string name;
    double lo = 0.0;
    double hi = 1.0;  // inclusive
    bool integer = false;
    Scale scale = Scale::linear;

    void validate() const;
    // Maps a natural-unit value into [0, 1] under the dimension's scale.
    double to_unit(double value) const;
    // Inverse map; integer and grid dimensions round to the nearest point,
    // so any u in [0, 1] lands inside the bounds.
    double from_unit(double u) const;
};

struct SearchSpace {
    std::vector<Dimension> dimensions;

    void validate() const;
    const Dimension& at(std::string_view name) const;
    bool has(std::string_view name) const;
};

// The tuning ranges for each architecture.
SearchSpace space_for(models::Architecture arch);

// One sampled point in natural units, keyed by dimension name.
using Configuration = std::map<std::string, double>;

struct TrialRecord {
    std::size_t index = 0;
    Configuration config;
    std::string status = "ok";  // "ok" | "diverged"
    double train_mse = -1.0;    // -1 sentinel while status is "diverged"
    double test_mse = -1.0;
    training::TrainHistory history;
};

struct Study {
    std::string architecture;
    SearchSpace space;
    std::uint64_t seed = 0;
    std::vector<TrialRecord> trials;
    std::size_t best_trial = 0;  // minimal test MSE among ok trials

    const TrialRecord& best() const;
};

// Proposes the next configuration. The first five trials come from a seeded
// low-discrepancy (rotated Halton) sweep; afterwards a Gaussian-process
// surrogate over the unit cube picks the expected-improvement maximizer
// among 1024 random candidates. Never fails: a singular surrogate fit falls
// back to plain random sampling.
Configuration suggest(const SearchSpace& space, const std::vector<TrialRecord>& history,
                      RngStream& rng);

struct StudyConfig {
    std::size_t n_trials = 20;
    std::uint64_t seed = 0;
    // 1 = fully sequential (deterministic suggestions, one per result).
    // >1 = wave mode: `workers` trials are proposed from the same history
    // snapshot and trained in parallel threads. Still seed-reproducible, but
    // the suggestion sequence differs from sequential mode.
    std::size_t workers = 1;
    training::TrainConfig base;  // epochs/patience/betas; lr, batch and seed set per trial
};

// Rounds a raw sample onto a trainable configuration; currently this snaps
// the transformer embedding size to a multiple of the head count (staying
// inside the dimension's bounds).
Configuration materialize(models::Architecture arch, const SearchSpace& space,
                          Configuration config);

models::SequenceModel build_trial_model(models::Architecture arch, const Configuration& config,
                                        std::uint64_t seed);

// Runs the full tuning loop: suggest → train (fit_on_split) → record, with
// diverged trials kept in the record and fed to the surrogate as strong
// penalties. Throws NumericError if every trial diverged.
Study run_study(models::Architecture arch, const SearchSpace& space,
                const dataset::DatasetSplit& split, const StudyConfig& config);

nlohmann::json study_to_json(const Study& study);
Study study_from_json(const nlohmann::json& j);
void save_study(const Study& study, const std::filesystem::path& file);
Study load_study(const std::filesystem::path& file);

// Flat per-trial table (trial, status, MSEs, best-so-far, one column per
// dimension) for plotting.
void write_study_csv(const Study& study, const std::filesystem::path& file);

}  // namespace strainseq::hpo
