#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "strainseq/common.hpp"

namespace strainseq::deformation {

// One step of in-plane principal strain increments.
struct StrainIncrement {
    double d_eps1 = 0.0;
    double d_eps2 = 0.0;
};

// A discrete loading path: cumulative principal strains, the direction angle
// of the segment each step belongs to, and the derived damage series.
// Stored as parallel arrays, one entry per step.
struct LoadingPath {
    std::int64_t path_id = 0;
    std::vector<double> eps1;
    std::vector<double> eps2;
    std::vector<double> phi;      // direction angle, piecewise constant
    std::vector<double> eps_bar;  // accumulated equivalent strain
    std::vector<double> damage;   // eps_bar / eps_bar_fail
    double eps_bar_fail = 1.0;
    double dt = 0.0025;           // nominal step duration; informational only

    std::size_t size() const { return eps1.size(); }

    // Internal consistency: equal array lengths, non-decreasing eps_bar
    // starting at >= 0, positive eps_bar_fail, damage == eps_bar /
    // eps_bar_fail within `tolerance`, and phi piecewise constant with at
    // most one switch. Throws InvalidInputError / ShapeError.
    void validate(double tolerance = 0.0) const;
};

// Parameters of a two-segment proportional (bilinear) path.
struct BilinearSpec {
    double phi1 = 0.0;              // direction of the first segment
    double phi2 = 0.0;              // direction of the second segment
    double switch_fraction = 0.5;   // in [0, 1]; segment boundary position
    std::size_t n_steps = 0;
    double step_magnitude = 0.0;    // Euclidean increment length per step
    double eps_bar_fail = 1.0;

    void validate() const;
};

// Equivalent plastic strain increment of one step under plane-stress
// proportional flow:
//   d_eps_bar = (2/sqrt(3)) * sqrt(d1^2 + d2^2 + d1*d2)
// The quadratic form is positive semi-definite, so the result is >= 0 for
// every real increment.
double equivalent_strain_increment(double d_eps1, double d_eps2);

// Left-Riemann accumulation: out[i] = sum of increments 0..i.
std::vector<double> accumulate_equivalent_strain(std::span<const StrainIncrement> increments);

// damage[i] = eps_bar[i] / eps_bar_fail. Throws on eps_bar_fail <= 0.
std::vector<double> damage_series(std::span<const double> eps_bar, double eps_bar_fail);

// First index where damage >= threshold, if any.
std::optional<std::size_t> localization_step(std::span<const double> damage,
                                             double threshold = 1.0);

// Build the full path for a bilinear spec: two proportional segments, the
// first floor(switch_fraction * n_steps) steps along phi1 and the rest along
// phi2, every increment of length step_magnitude. switch_fraction 0 or 1
// degenerates to a single proportional segment.
LoadingPath generate_bilinear_path(const BilinearSpec& spec, std::int64_t path_id = 0);

// Analytic stand-in for a forming-limit failure strain: a smooth convex
// curve over the final loading direction,
//   eps_bar_fail(phi) = c0 + c1 * (1 - cos(phi - phi_ref)).
// Minimum c0 at phi == phi_ref, growing toward either side.
double synthetic_failure_strain(double phi_final, double c0 = 0.3, double c1 = 0.4,
                                double phi_ref = 0.7853981633974483096 /* pi/4 */);

}  // namespace strainseq::deformation
