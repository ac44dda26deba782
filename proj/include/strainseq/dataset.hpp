#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "strainseq/common.hpp"
#include "strainseq/deformation.hpp"

namespace strainseq::dataset {

// Per-feature affine transform fitted on training data: z = (x - shift) / scale
// for the step features (eps1, eps2, phi), in that order.
struct NormalizationParams {
    std::array<double, 3> shift{0.0, 0.0, 0.0};
    std::array<double, 3> scale{1.0, 1.0, 1.0};
    // Features whose training variance was ~zero; their scale is clamped to 1
    // so the transform stays defined.
    std::array<bool, 3> degenerate{false, false, false};
    bool fitted = false;
};

struct PathDataset {
    std::vector<deformation::LoadingPath> paths;

    std::size_t size() const { return paths.size(); }
    bool empty() const { return paths.empty(); }

    // Validates every path, requires unique path ids and a uniform step
    // count across the collection.
    void validate(double tolerance = 0.0) const;
};

struct DatasetSplit {
    PathDataset train;
    PathDataset test;
    double train_fraction = 0.0;
    std::uint64_t seed = 0;
};

// Optional column-name remapping for files written by other tools:
// maps a standard column name (e.g. "eps1") to the name that actually
// appears in the file's header.
using ColumnMap = std::map<std::string, std::string>;

// CSV schema (one row per step, header mandatory, LF line endings):
//   path_id,step,eps1,eps2,phi,eps_bar,eps_bar_fail,damage
// Floats are written with %.17g so a save/load round trip is bit-exact.
void save_csv(const PathDataset& data, const std::filesystem::path& file);

// Loads and fully validates: header schema, parseable numerics, per-path
// step contiguity starting at 0, constant eps_bar_fail per path, and the
// accumulation/damage identities within 1e-6.
PathDataset load_csv(const std::filesystem::path& file, const ColumnMap& columns = {});

// Sampling ranges for synthetic bilinear path generation. Direction angles
// default to a sector in which the damage history is locally identifiable
// from short feature windows; path_length is the total in-plane arc length,
// so the per-step magnitude is length / n_steps.
struct SynthesisRanges {
    std::array<double, 2> phi1_range{0.39269908169872414, 1.1780972450961724};  // [pi/8, 3pi/8]
    std::array<double, 2> phi2_range{0.39269908169872414, 1.1780972450961724};
    std::array<double, 2> switch_fraction_range{0.2, 0.8};
    std::array<double, 2> path_length_range{0.2, 0.4};
    // Failure-strain stand-in coefficients, see synthetic_failure_strain().
    double fail_c0 = 0.3;
    double fail_c1 = 0.4;
    double fail_phi_ref = 0.7853981633974483096;  // pi/4

    void validate() const;
};

// Deterministic synthetic corpus: per path the draws are phi1, phi2,
// switch_fraction, path_length, in that order, from RngStream(seed).
// Path ids run 0..n_paths-1.
PathDataset synthesize(std::size_t n_paths, std::size_t n_steps, std::uint64_t seed,
                       const SynthesisRanges& ranges = {});

// Fits per-feature mean/std on `data` (population std over all steps of all
// paths) and returns the transformed copy plus the fitted parameters.
std::pair<PathDataset, NormalizationParams> normalize_fit_transform(const PathDataset& data);

// Applies previously fitted parameters (e.g. to a test split or new data).
PathDataset apply_normalization(const PathDataset& data, const NormalizationParams& params);

// Seeded shuffle split at the path level; floor(fraction * n) paths go to
// train, the rest to test. Relative path order is preserved on both sides.
DatasetSplit split(const PathDataset& data, double train_fraction = 0.8,
                   std::uint64_t seed = 42);

}  // namespace strainseq::dataset
