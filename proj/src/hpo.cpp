#include "strainseq/hpo.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <thread>

namespace strainseq::hpo {

std::string_view to_string(Scale s) {
    switch (s) {
        case Scale::linear: return "linear";
        case Scale::log10: return "log10";
        case Scale::log2_grid: return "log2_grid";
    }
    throw InvalidInputError("unknown Scale value");
}

Scale scale_from_string(std::string_view s) {
    if (s == "linear") return Scale::linear;
    if (s == "log10") return Scale::log10;
    if (s == "log2_grid") return Scale::log2_grid;
    throw InvalidInputError("unknown scale '" + std::string(s) + "'");
}

void Dimension::validate() const {
    if (name.empty()) throw InvalidInputError("Dimension: name must be nonempty");
    if (!(lo < hi)) {
        throw InvalidInputError("Dimension '" + name + "': bounds must satisfy lo < hi, got [" +
                                std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    if (scale != Scale::linear && !(lo > 0.0)) {
        throw InvalidInputError("Dimension '" + name + "': log scales need positive bounds");
    }
    if (integer || scale == Scale::log2_grid) {
        if (lo != std::floor(lo) || hi != std::floor(hi)) {
            throw InvalidInputError("Dimension '" + name + "': integer bounds must be whole");
        }
    }
    if (scale == Scale::log2_grid) {
        const double klo = std::log2(lo), khi = std::log2(hi);
        if (klo != std::floor(klo) || khi != std::floor(khi)) {
            throw InvalidInputError("Dimension '" + name +
                                    "': log2_grid bounds must be powers of two");
        }
    }
}

double Dimension::to_unit(double value) const {
    double u = 0.0;
    switch (scale) {
        case Scale::linear: u = (value - lo) / (hi - lo); break;
        case Scale::log10: u = std::log10(value / lo) / std::log10(hi / lo); break;
        case Scale::log2_grid: u = std::log2(value / lo) / std::log2(hi / lo); break;
    }
    return std::clamp(u, 0.0, 1.0);
}

double Dimension::from_unit(double u) const {
    u = std::clamp(u, 0.0, 1.0);
    switch (scale) {
        case Scale::linear: {
            const double v = lo + u * (hi - lo);
            return integer ? std::round(v) : v;
        }
        case Scale::log10:
            return std::pow(10.0, std::log10(lo) + u * std::log10(hi / lo));
        case Scale::log2_grid: {
            const double k = std::log2(lo) + u * std::log2(hi / lo);
            return std::exp2(std::round(k));
        }
    }
    throw InvalidInputError("unknown Scale value");
}

void SearchSpace::validate() const {
    if (dimensions.empty()) throw InvalidInputError("SearchSpace: no dimensions");
    for (std::size_t i = 0; i < dimensions.size(); ++i) {
        dimensions[i].validate();
        for (std::size_t j = 0; j < i; ++j) {
            if (dimensions[j].name == dimensions[i].name) {
                throw InvalidInputError("SearchSpace: duplicate dimension '" +
                                        dimensions[i].name + "'");
            }
        }
    }
}

const Dimension& SearchSpace::at(std::string_view name) const {
    for (const auto& d : dimensions) {
        if (d.name == name) return d;
    }
    throw InvalidInputError("SearchSpace: no dimension named '" + std::string(name) + "'");
}

bool SearchSpace::has(std::string_view name) const {
    for (const auto& d : dimensions) {
        if (d.name == name) return true;
    }
    return false;
}

SearchSpace space_for(models::Architecture arch) {
    // Batch size shares one grid across architectures.
    const Dimension batch{"batch_size", 16, 256, true, Scale::log2_grid};
    switch (arch) {
        case models::Architecture::gru:
            return {{{"learning_rate", 1e-5, 1e-3, false, Scale::log10},
                     {"hidden", 16, 128, true, Scale::linear},
                     batch}};
        case models::Architecture::conv:
            return {{{"learning_rate", 1e-5, 1e-3, false, Scale::log10},
                     {"filters", 16, 128, true, Scale::linear},
                     {"kernel", 3, 7, true, Scale::linear},
                     batch}};
        case models::Architecture::transformer:
            return {{{"learning_rate", 1e-5, 1e-2, false, Scale::log10},
                     {"d_model", 16, 128, true, Scale::linear},
                     {"heads", 1, 8, true, Scale::linear},
                     {"d_ff", 32, 256, true, Scale::linear},
                     batch}};
    }
    throw InvalidInputError("unknown architecture");
}

namespace {

constexpr std::size_t kInitialTrials = 5;
constexpr std::size_t kAcquisitionCandidates = 1024;

double config_value(const Configuration& config, std::string_view name) {
    const auto it = config.find(std::string(name));
    if (it == config.end()) {
        throw InvalidInputError("configuration missing dimension '" + std::string(name) + "'");
    }
    return it->second;
}

double radical_inverse(std::uint64_t n, std::uint64_t base) {
    double scale = 1.0 / static_cast<double>(base);
    double factor = scale;
    double r = 0.0;
    while (n != 0) {
        r += factor * static_cast<double>(n % base);
        n /= base;
        factor *= scale;
    }
    return r;
}

// Halton point for trial `index`, Cranley-Patterson rotated by offsets drawn
// from the stream's seed only, so peeking at the point does not advance the
// stream.
std::vector<double> halton_point(std::size_t index, std::size_t dims, std::uint64_t seed) {
    static constexpr std::array<std::uint64_t, 16> primes{2,  3,  5,  7,  11, 13, 17, 19,
                                                          23, 29, 31, 37, 41, 43, 47, 53};
    if (dims > primes.size()) {
        throw InvalidInputError("suggest: at most " + std::to_string(primes.size()) +
                                " dimensions supported");
    }
    std::vector<double> u(dims);
    for (std::size_t j = 0; j < dims; ++j) {
        const double rot =
            static_cast<double>(splitmix64(splitmix64(seed) + j) >> 11) * 0x1.0p-53;
        const double v = radical_inverse(index + 1, primes[j]) + rot;
        u[j] = v - std::floor(v);
    }
    return u;
}

double matern52(double distance, double lengthscale) {
    const double s = std::sqrt(5.0) * distance / lengthscale;
    return (1.0 + s + s * s / 3.0) * std::exp(-s);
}

double normal_pdf(double z) { return std::exp(-0.5 * z * z) * 0.3989422804014327; }
double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.7071067811865476); }

struct GpSurrogate {
    Eigen::MatrixXd x;       // n x d, unit cube
    Eigen::MatrixXd chol_l;  // lower Cholesky factor of K + noise I
    Eigen::VectorXd alpha;   // (K + noise I)^-1 y
    double lengthscale = 1.0;
    double y_best = 0.0;     // smallest standardized observation

    // Expected improvement (minimization) at a unit-cube point.
    double expected_improvement(const Eigen::VectorXd& point) const {
        const auto n = x.rows();
        Eigen::VectorXd k_star(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            k_star(i) = matern52((x.row(i).transpose() - point).norm(), lengthscale);
        }
        const double mean = k_star.dot(alpha);
        const Eigen::VectorXd v = chol_l.triangularView<Eigen::Lower>().solve(k_star);
        const double variance = 1.0 - v.squaredNorm();
        const double sd = std::sqrt(std::max(variance, 0.0));
        if (sd < 1e-12) return std::max(y_best - mean, 0.0);
        const double gamma = (y_best - mean) / sd;
        return sd * (gamma * normal_cdf(gamma) + normal_pdf(gamma));
    }
};

// Fits the surrogate on standardized targets, picking the lengthscale from a
// coarse grid by marginal likelihood. Returns nothing when the system is
// degenerate (constant targets or no factorizable kernel matrix).
std::optional<GpSurrogate> fit_surrogate(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    const auto n = y.size();
    if (n < 2) return std::nullopt;
    const double mean = y.mean();
    const double sd = std::sqrt((y.array() - mean).square().sum() / static_cast<double>(n));
    if (!(sd > 1e-12)) return std::nullopt;
    const Eigen::VectorXd ys = (y.array() - mean) / sd;

    static constexpr std::array<double, 8> grid{0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0};
    std::optional<GpSurrogate> best;
    double best_log_ml = -std::numeric_limits<double>::infinity();
    for (const double ell : grid) {
        Eigen::MatrixXd k(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j <= i; ++j) {
                const double v = matern52((x.row(i) - x.row(j)).norm(), ell);
                k(i, j) = v;
                k(j, i) = v;
            }
            k(i, i) += 1e-6;
        }
        const Eigen::LLT<Eigen::MatrixXd> llt(k);
        if (llt.info() != Eigen::Success) continue;
        const Eigen::MatrixXd l = llt.matrixL();
        const Eigen::VectorXd alpha = llt.solve(ys);
        const double log_ml = -0.5 * ys.dot(alpha) - l.diagonal().array().log().sum() -
                              0.5 * static_cast<double>(n) * std::log(2.0 * M_PI);
        if (log_ml > best_log_ml) {
            best_log_ml = log_ml;
            best = GpSurrogate{x, l, alpha, ell, ys.minCoeff()};
        }
    }
    return best;
}

std::vector<double> random_unit_point(std::size_t dims, RngStream& rng) {
    std::vector<double> u(dims);
    for (auto& v : u) v = rng.uniform01();
    return u;
}

Configuration from_unit_point(const SearchSpace& space, const std::vector<double>& u) {
    Configuration config;
    for (std::size_t j = 0; j < space.dimensions.size(); ++j) {
        config[space.dimensions[j].name] = space.dimensions[j].from_unit(u[j]);
    }
    return config;
}

}  // namespace

Configuration suggest(const SearchSpace& space, const std::vector<TrialRecord>& history,
                      RngStream& rng) {
    space.validate();
    const std::size_t dims = space.dimensions.size();
    if (history.size() < kInitialTrials) {
        return from_unit_point(space, halton_point(history.size(), dims, rng.seed()));
    }

    // Surrogate targets: observed test MSE; diverged trials sit at ten times
    // the worst observation so acquisition steers clear of that region.
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& t : history) {
        if (t.status == "ok") worst = std::max(worst, t.test_mse);
    }
    if (!std::isfinite(worst)) {
        return from_unit_point(space, random_unit_point(dims, rng));  // nothing usable yet
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(history.size()), static_cast<Eigen::Index>(dims));
    Eigen::VectorXd y(static_cast<Eigen::Index>(history.size()));
    for (std::size_t i = 0; i < history.size(); ++i) {
        for (std::size_t j = 0; j < dims; ++j) {
            const auto& dim = space.dimensions[j];
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                dim.to_unit(config_value(history[i].config, dim.name));
        }
        y(static_cast<Eigen::Index>(i)) =
            history[i].status == "ok" ? history[i].test_mse : worst * 10.0;
    }

    const auto surrogate = fit_surrogate(x, y);
    if (!surrogate) {
        return from_unit_point(space, random_unit_point(dims, rng));
    }

    std::vector<double> best_u;
    double best_ei = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd point(static_cast<Eigen::Index>(dims));
    for (std::size_t c = 0; c < kAcquisitionCandidates; ++c) {
        const std::vector<double> u = random_unit_point(dims, rng);
        for (std::size_t j = 0; j < dims; ++j) point(static_cast<Eigen::Index>(j)) = u[j];
        const double ei = surrogate->expected_improvement(point);
        if (ei > best_ei) {
            best_ei = ei;
            best_u = u;
        }
    }
    return from_unit_point(space, best_u);
}

Configuration materialize(models::Architecture arch, const SearchSpace& space,
                          Configuration config) {
    if (arch == models::Architecture::transformer) {
        const double heads = config_value(config, "heads");
        const double d_model = config_value(config, "d_model");
        const Dimension& dim = space.at("d_model");
        // Round the embedding width up to a head multiple; if that overshoots
        // the range, step back down — stays in bounds for any heads <= lo.
        double snapped = std::ceil(d_model / heads - 1e-9) * heads;
        while (snapped > dim.hi + 1e-9) snapped -= heads;
        if (snapped < heads) snapped = heads;
        config["d_model"] = snapped;
    }
    return config;
}

models::SequenceModel build_trial_model(models::Architecture arch, const Configuration& config,
                                        std::uint64_t seed) {
    switch (arch) {
        case models::Architecture::gru: {
            models::GruConfig cfg;
            cfg.hidden = static_cast<int>(config_value(config, "hidden"));
            return models::make_gru_model(cfg, seed);
        }
        case models::Architecture::conv: {
            models::ConvConfig cfg;
            cfg.filters = static_cast<int>(config_value(config, "filters"));
            cfg.kernel = static_cast<int>(config_value(config, "kernel"));
            return models::make_conv_model(cfg, seed);
        }
        case models::Architecture::transformer: {
            models::TransformerConfig cfg;
            cfg.d_model = static_cast<int>(config_value(config, "d_model"));
            cfg.heads = static_cast<int>(config_value(config, "heads"));
            cfg.d_ff = static_cast<int>(config_value(config, "d_ff"));
            return models::make_transformer_model(cfg, seed);
        }
    }
    throw InvalidInputError("unknown architecture");
}

const TrialRecord& Study::best() const {
    if (best_trial >= trials.size()) {
        throw StateError("Study: best_trial " + std::to_string(best_trial) + " out of range");
    }
    return trials[best_trial];
}

Study run_study(models::Architecture arch, const SearchSpace& space,
                const dataset::DatasetSplit& split, const StudyConfig& config) {
    space.validate();
    if (config.n_trials == 0) throw InvalidInputError("run_study: n_trials must be positive");
    const SearchSpace expected = space_for(arch);
    for (const auto& dim : expected.dimensions) {
        if (!space.has(dim.name)) {
            throw InvalidInputError("run_study: space lacks dimension '" + dim.name +
                                    "' required by " + std::string(to_string(arch)));
        }
    }
    for (const auto& dim : space.dimensions) {
        if (!expected.has(dim.name)) {
            throw InvalidInputError("run_study: dimension '" + dim.name + "' is not used by " +
                                    std::string(to_string(arch)));
        }
    }

    const RngStream base(config.seed);
    RngStream suggest_rng = base.split("suggest");

    Study study;
    study.architecture = std::string(to_string(arch));
    study.space = space;
    study.seed = config.seed;

    auto run_one = [&](TrialRecord& rec) {
        const std::uint64_t trial_seed =
            base.split("trial/" + std::to_string(rec.index)).seed();
        models::SequenceModel model = build_trial_model(arch, rec.config, trial_seed);
        training::TrainConfig tc = config.base;
        tc.learning_rate = config_value(rec.config, "learning_rate");
        tc.batch_size = static_cast<std::size_t>(config_value(rec.config, "batch_size"));
        tc.seed = trial_seed;
        try {
            const training::FitReport report = training::fit_on_split(model, split, tc);
            rec.status = "ok";
            rec.train_mse = report.train_mse;
            rec.test_mse = report.test_mse;
            rec.history = report.history;
        } catch (const training::DivergenceError& e) {
            rec.status = "diverged";
            rec.train_mse = -1.0;
            rec.test_mse = -1.0;
            rec.history = e.history();
        }
    };

    const std::size_t workers = std::max<std::size_t>(config.workers, 1);
    while (study.trials.size() < config.n_trials) {
        const std::size_t wave = std::min(workers, config.n_trials - study.trials.size());
        std::vector<TrialRecord> records(wave);
        for (std::size_t w = 0; w < wave; ++w) {
            records[w].index = study.trials.size() + w;
            records[w].config = materialize(arch, space, suggest(space, study.trials, suggest_rng));
        }
        if (wave == 1) {
            run_one(records[0]);
        } else {
            std::vector<std::thread> threads;
            std::vector<std::exception_ptr> errors(wave);
            threads.reserve(wave);
            for (std::size_t w = 0; w < wave; ++w) {
                threads.emplace_back([&, w] {
                    try {
                        run_one(records[w]);
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
            }
            for (auto& t : threads) t.join();
            for (const auto& e : errors) {
                if (e) std::rethrow_exception(e);
            }
        }
        for (auto& rec : records) study.trials.push_back(std::move(rec));
    }

    double best_mse = std::numeric_limits<double>::infinity();
    std::size_t best = config.n_trials;
    for (const auto& t : study.trials) {
        if (t.status == "ok" && t.test_mse < best_mse) {
            best_mse = t.test_mse;
            best = t.index;
        }
    }
    if (best == config.n_trials) {
        throw NumericError("run_study: all " + std::to_string(config.n_trials) +
                           " trials diverged");
    }
    study.best_trial = best;
    return study;
}

// --- serialization -------------------------------------------------------------

nlohmann::json study_to_json(const Study& study) {
    nlohmann::json dims = nlohmann::json::array();
    for (const auto& d : study.space.dimensions) {
        dims.push_back({{"name", d.name},
                        {"lo", d.lo},
                        {"hi", d.hi},
                        {"integer", d.integer},
                        {"scale", std::string(to_string(d.scale))}});
    }
    nlohmann::json trials = nlohmann::json::array();
    for (const auto& t : study.trials) {
        trials.push_back({{"index", t.index},
                          {"status", t.status},
                          {"config", t.config},
                          {"train_mse", t.train_mse},
                          {"test_mse", t.test_mse},
                          {"history", training::history_to_json(t.history)}});
    }
    return {{"format", "strainseq-study"},
            {"version", 1},
            {"architecture", study.architecture},
            {"seed", study.seed},
            {"best_trial", study.best_trial},
            {"space", {{"dimensions", dims}}},
            {"trials", trials}};
}

Study study_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "strainseq-study") {
            throw SchemaError("study json: unexpected format tag");
        }
        Study study;
        study.architecture = j.at("architecture").get<std::string>();
        study.seed = j.at("seed").get<std::uint64_t>();
        study.best_trial = j.at("best_trial").get<std::size_t>();
        for (const auto& dj : j.at("space").at("dimensions")) {
            Dimension d;
            d.name = dj.at("name").get<std::string>();
            d.lo = dj.at("lo").get<double>();
            d.hi = dj.at("hi").get<double>();
            d.integer = dj.at("integer").get<bool>();
            d.scale = scale_from_string(dj.at("scale").get<std::string>());
            study.space.dimensions.push_back(std::move(d));
        }
        study.space.validate();
        for (const auto& tj : j.at("trials")) {
            TrialRecord t;
            t.index = tj.at("index").get<std::size_t>();
            t.status = tj.at("status").get<std::string>();
            if (t.status != "ok" && t.status != "diverged") {
                throw SchemaError("study json: unknown trial status '" + t.status + "'");
            }
            t.config = tj.at("config").get<Configuration>();
            t.train_mse = tj.at("train_mse").get<double>();
            t.test_mse = tj.at("test_mse").get<double>();
            t.history = training::history_from_json(tj.at("history"));
            study.trials.push_back(std::move(t));
        }
        if (!study.trials.empty() && study.best_trial >= study.trials.size()) {
            throw SchemaError("study json: best_trial out of range");
        }
        return study;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("study json: ") + e.what());
    }
}

void save_study(const Study& study, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");
    out << study_to_json(study).dump(2) << '\n';
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

Study load_study(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open '" + file.string() + "' for reading");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("study '" + file.string() + "': " + e.what());
    }
    return study_from_json(j);
}

void write_study_csv(const Study& study, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");
    auto g17 = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    out << "trial,status,train_mse,test_mse,best_so_far";
    for (const auto& d : study.space.dimensions) out << ',' << d.name;
    out << '\n';
    double best_so_far = std::numeric_limits<double>::infinity();
    for (const auto& t : study.trials) {
        if (t.status == "ok") best_so_far = std::min(best_so_far, t.test_mse);
        out << t.index << ',' << t.status << ',' << g17(t.train_mse) << ',' << g17(t.test_mse)
            << ',' << g17(best_so_far);
        for (const auto& d : study.space.dimensions) {
            out << ',' << g17(config_value(t.config, d.name));
        }
        out << '\n';
    }
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

}  // namespace strainseq::hpo
