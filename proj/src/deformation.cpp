#include "strainseq/deformation.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace strainseq::deformation {

namespace {

// Direction changes below this are treated as the same proportional segment
// (guards against last-digit noise in round-tripped files).
constexpr double kPhiSwitchEps = 1e-12;

std::string shape_list(const LoadingPath& p) {
    return "eps1=" + std::to_string(p.eps1.size()) + " eps2=" + std::to_string(p.eps2.size()) +
           " phi=" + std::to_string(p.phi.size()) + " eps_bar=" + std::to_string(p.eps_bar.size()) +
           " damage=" + std::to_string(p.damage.size());
}

}  // namespace

void LoadingPath::validate(double tolerance) const {
    const std::size_t n = eps1.size();
    if (n == 0) {
        throw InvalidInputError("LoadingPath " + std::to_string(path_id) + ": no steps");
    }
    if (eps2.size() != n || phi.size() != n || eps_bar.size() != n || damage.size() != n) {
        throw ShapeError("LoadingPath " + std::to_string(path_id) +
                         ": unequal series lengths (" + shape_list(*this) + ")");
    }
    if (!(eps_bar_fail > 0.0)) {
        throw InvalidInputError("LoadingPath " + std::to_string(path_id) +
                                ": eps_bar_fail must be positive, got " +
                                std::to_string(eps_bar_fail));
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(eps1[i]) || !std::isfinite(eps2[i]) || !std::isfinite(phi[i]) ||
            !std::isfinite(eps_bar[i]) || !std::isfinite(damage[i])) {
            throw InvalidInputError("LoadingPath " + std::to_string(path_id) + ": non-finite value at step " +
                                    std::to_string(i));
        }
    }
    if (eps_bar[0] < -tolerance) {
        throw InvalidInputError("LoadingPath " + std::to_string(path_id) +
                                ": eps_bar starts below zero (" + std::to_string(eps_bar[0]) + ")");
    }
    for (std::size_t i = 1; i < n; ++i) {
        if (eps_bar[i] < eps_bar[i - 1] - tolerance) {
            throw InvalidInputError("LoadingPath " + std::to_string(path_id) +
                                    ": eps_bar decreases at step " + std::to_string(i));
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double expected = eps_bar[i] / eps_bar_fail;
        if (std::abs(damage[i] - expected) > tolerance) {
            throw InvalidInputError("LoadingPath " + std::to_string(path_id) +
                                    ": damage at step " + std::to_string(i) +
                                    " is inconsistent with eps_bar / eps_bar_fail");
        }
    }
    std::size_t switches = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (std::abs(phi[i] - phi[i - 1]) > kPhiSwitchEps) ++switches;
    }
    if (switches > 1) {
        throw InvalidInputError("LoadingPath " + std::to_string(path_id) + ": phi changes " +
                                std::to_string(switches) + " times; at most one switch allowed");
    }
}

void BilinearSpec::validate() const {
    if (n_steps == 0) throw InvalidInputError("BilinearSpec: n_steps must be positive");
    if (!(switch_fraction >= 0.0 && switch_fraction <= 1.0)) {
        throw InvalidInputError("BilinearSpec: switch_fraction must lie in [0, 1], got " +
                                std::to_string(switch_fraction));
    }
    if (!(step_magnitude > 0.0)) {
        throw InvalidInputError("BilinearSpec: step_magnitude must be positive, got " +
                                std::to_string(step_magnitude));
    }
    if (!(eps_bar_fail > 0.0)) {
        throw InvalidInputError("BilinearSpec: eps_bar_fail must be positive, got " +
                                std::to_string(eps_bar_fail));
    }
    if (!std::isfinite(phi1) || !std::isfinite(phi2)) {
        throw InvalidInputError("BilinearSpec: phi1/phi2 must be finite");
    }
}

double equivalent_strain_increment(double d_eps1, double d_eps2) {
    if (!std::isfinite(d_eps1) || !std::isfinite(d_eps2)) {
        throw InvalidInputError("equivalent_strain_increment: non-finite increment");
    }
    // The form equals (d1 + d2/2)^2 + 3/4 d2^2, so it cannot go negative;
    // the clamp only swallows last-bit rounding.
    const double q = d_eps1 * d_eps1 + d_eps2 * d_eps2 + d_eps1 * d_eps2;
    return (2.0 / std::sqrt(3.0)) * std::sqrt(std::max(q, 0.0));
}

std::vector<double> accumulate_equivalent_strain(std::span<const StrainIncrement> increments) {
    if (increments.empty()) {
        throw InvalidInputError("accumulate_equivalent_strain: no increments");
    }
    std::vector<double> out;
    out.reserve(increments.size());
    double acc = 0.0;
    for (const auto& inc : increments) {
        acc += equivalent_strain_increment(inc.d_eps1, inc.d_eps2);
        out.push_back(acc);
    }
    return out;
}

std::vector<double> damage_series(std::span<const double> eps_bar, double eps_bar_fail) {
    if (!(eps_bar_fail > 0.0)) {
        throw InvalidInputError("damage_series: eps_bar_fail must be positive, got " +
                                std::to_string(eps_bar_fail));
    }
    std::vector<double> out;
    out.reserve(eps_bar.size());
    for (double e : eps_bar) out.push_back(e / eps_bar_fail);
    return out;
}

std::optional<std::size_t> localization_step(std::span<const double> damage, double threshold) {
    for (std::size_t i = 0; i < damage.size(); ++i) {
        if (damage[i] >= threshold) return i;
    }
    return std::nullopt;
}

LoadingPath generate_bilinear_path(const BilinearSpec& spec, std::int64_t path_id) {
    spec.validate();
    const std::size_t n = spec.n_steps;
    // First segment holds floor(fraction * n) increments; fraction 0 leaves
    // it empty (a proportional path along phi2), fraction 1 fills the whole
    // path. The floor is tolerant of representation error: 0.7 * 10 lands a
    // hair below 7 in floating point and still counts as 7.
    const double raw = spec.switch_fraction * static_cast<double>(n);
    auto n1 = static_cast<std::size_t>(std::floor(raw + 1e-9 * static_cast<double>(n)));
    n1 = std::min(n1, n);

    const double d1a = spec.step_magnitude * std::cos(spec.phi1);
    const double d2a = spec.step_magnitude * std::sin(spec.phi1);
    const double d1b = spec.step_magnitude * std::cos(spec.phi2);
    const double d2b = spec.step_magnitude * std::sin(spec.phi2);

    LoadingPath path;
    path.path_id = path_id;
    path.eps_bar_fail = spec.eps_bar_fail;
    path.eps1.reserve(n);
    path.eps2.reserve(n);
    path.phi.reserve(n);

    std::vector<StrainIncrement> increments(n);
    double c1 = 0.0, c2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool first = i < n1;
        increments[i] = {first ? d1a : d1b, first ? d2a : d2b};
        c1 += increments[i].d_eps1;
        c2 += increments[i].d_eps2;
        path.eps1.push_back(c1);
        path.eps2.push_back(c2);
        path.phi.push_back(first ? spec.phi1 : spec.phi2);
    }
    path.eps_bar = accumulate_equivalent_strain(increments);
    path.damage = damage_series(path.eps_bar, spec.eps_bar_fail);
    path.validate();
    return path;
}

double synthetic_failure_strain(double phi_final, double c0, double c1, double phi_ref) {
    return c0 + c1 * (1.0 - std::cos(phi_final - phi_ref));
}

}  // namespace strainseq::deformation
