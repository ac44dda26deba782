#include "strainseq/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string_view>

namespace strainseq::dataset {

namespace {

constexpr std::array<std::string_view, 8> kColumns = {
    "path_id", "step", "eps1", "eps2", "phi", "eps_bar", "eps_bar_fail", "damage"};

// floor/ceil of fraction * n are sensitive to the last bit when the product
// lands on an integer (0.7 * 10 < 7 in doubles); nudge by a relative epsilon.
std::size_t tolerant_floor(double fraction, std::size_t n) {
    const double raw = fraction * static_cast<double>(n);
    const double nudged = std::floor(raw + 1e-9 * static_cast<double>(n));
    return static_cast<std::size_t>(std::max(0.0, nudged));
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

double parse_double(std::string_view field, std::size_t line_no, std::string_view column) {
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw SchemaError("csv line " + std::to_string(line_no) + ": column '" +
                          std::string(column) + "' is not a number: '" + std::string(field) + "'");
    }
    return value;
}

long long parse_int(std::string_view field, std::size_t line_no, std::string_view column) {
    long long value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw SchemaError("csv line " + std::to_string(line_no) + ": column '" +
                          std::string(column) + "' is not an integer: '" + std::string(field) + "'");
    }
    return value;
}

}  // namespace

void PathDataset::validate(double tolerance) const {
    std::set<std::int64_t> seen;
    for (const auto& p : paths) {
        if (!seen.insert(p.path_id).second) {
            throw InvalidInputError("PathDataset: duplicate path_id " + std::to_string(p.path_id));
        }
        p.validate(tolerance);
        if (p.size() != paths.front().size()) {
            throw ShapeError("PathDataset: path " + std::to_string(p.path_id) + " has " +
                             std::to_string(p.size()) + " steps but path " +
                             std::to_string(paths.front().path_id) + " has " +
                             std::to_string(paths.front().size()));
        }
    }
}

void save_csv(const PathDataset& data, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");

    std::vector<const deformation::LoadingPath*> ordered;
    ordered.reserve(data.paths.size());
    for (const auto& p : data.paths) ordered.push_back(&p);
    std::sort(ordered.begin(), ordered.end(),
              [](const auto* a, const auto* b) { return a->path_id < b->path_id; });

    out << "path_id,step,eps1,eps2,phi,eps_bar,eps_bar_fail,damage\n";
    char buf[256];
    for (const auto* p : ordered) {
        for (std::size_t i = 0; i < p->size(); ++i) {
            // %.17g round-trips doubles exactly, which makes save/load a
            // bitwise identity.
            const int len =
                std::snprintf(buf, sizeof(buf), "%lld,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                              static_cast<long long>(p->path_id), i, p->eps1[i], p->eps2[i],
                              p->phi[i], p->eps_bar[i], p->eps_bar_fail, p->damage[i]);
            out.write(buf, len);
        }
    }
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

PathDataset load_csv(const std::filesystem::path& file, const ColumnMap& columns) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open '" + file.string() + "' for reading");
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();

    std::vector<std::string_view> lines;
    {
        std::string_view rest = text;
        while (!rest.empty()) {
            const std::size_t pos = rest.find('\n');
            std::string_view line = rest.substr(0, pos);
            if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
            lines.push_back(line);
            if (pos == std::string_view::npos) break;
            rest = rest.substr(pos + 1);
        }
        while (!lines.empty() && lines.back().empty()) lines.pop_back();
    }
    if (lines.empty()) throw SchemaError("'" + file.string() + "': empty file");

    // Resolve each standard column to its index in the header. A ColumnMap
    // renames standard -> actual; extra columns are tolerated only when a
    // mapping is given (foreign files), otherwise the schema is exact.
    const auto header = split_fields(lines[0]);
    std::array<std::size_t, 8> index{};
    for (std::size_t c = 0; c < kColumns.size(); ++c) {
        const std::string standard(kColumns[c]);
        const auto it = columns.find(standard);
        const std::string wanted = it == columns.end() ? standard : it->second;
        std::size_t found = header.size();
        for (std::size_t h = 0; h < header.size(); ++h) {
            if (header[h] == wanted) {
                if (found != header.size()) {
                    throw SchemaError("'" + file.string() + "': duplicate column '" + wanted + "'");
                }
                found = h;
            }
        }
        if (found == header.size()) {
            throw SchemaError("'" + file.string() + "': missing column '" + wanted + "'");
        }
        index[c] = found;
    }
    if (columns.empty() && header.size() != kColumns.size()) {
        throw SchemaError("'" + file.string() + "': expected " +
                          std::to_string(kColumns.size()) + " columns, found " +
                          std::to_string(header.size()));
    }

    std::map<std::int64_t, deformation::LoadingPath> by_id;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const std::size_t line_no = li + 1;
        const auto fields = split_fields(lines[li]);
        if (fields.size() != header.size()) {
            throw SchemaError("csv line " + std::to_string(line_no) + ": expected " +
                              std::to_string(header.size()) + " fields, found " +
                              std::to_string(fields.size()));
        }
        const long long id = parse_int(fields[index[0]], line_no, "path_id");
        const long long step = parse_int(fields[index[1]], line_no, "step");
        auto& path = by_id[id];
        path.path_id = id;
        if (step < 0 || static_cast<std::size_t>(step) != path.size()) {
            throw SchemaError("csv line " + std::to_string(line_no) + ": path " +
                              std::to_string(id) + " expects step " +
                              std::to_string(path.size()) + ", found " + std::to_string(step));
        }
        const double fail = parse_double(fields[index[6]], line_no, "eps_bar_fail");
        if (path.size() == 0) {
            path.eps_bar_fail = fail;
        } else if (fail != path.eps_bar_fail) {
            throw SchemaError("csv line " + std::to_string(line_no) + ": eps_bar_fail changes " +
                              "within path " + std::to_string(id));
        }
        path.eps1.push_back(parse_double(fields[index[2]], line_no, "eps1"));
        path.eps2.push_back(parse_double(fields[index[3]], line_no, "eps2"));
        path.phi.push_back(parse_double(fields[index[4]], line_no, "phi"));
        path.eps_bar.push_back(parse_double(fields[index[5]], line_no, "eps_bar"));
        path.damage.push_back(parse_double(fields[index[7]], line_no, "damage"));
    }
    // A header with no rows is the legitimate serialization of an empty
    // dataset, so it loads back as one.
    PathDataset data;
    data.paths.reserve(by_id.size());
    for (auto& [id, path] : by_id) data.paths.push_back(std::move(path));

    // Revalidate the physics identities, not just the framing: eps_bar must
    // equal the accumulated equivalent strain of the stored increments, and
    // damage must equal eps_bar / eps_bar_fail, both within 1e-6.
    constexpr double kTol = 1e-6;
    data.validate(kTol);
    for (const auto& p : data.paths) {
        double prev1 = 0.0, prev2 = 0.0, acc = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc += deformation::equivalent_strain_increment(p.eps1[i] - prev1, p.eps2[i] - prev2);
            if (std::abs(acc - p.eps_bar[i]) > kTol) {
                throw InvalidInputError(
                    "'" + file.string() + "': path " + std::to_string(p.path_id) + " step " +
                    std::to_string(i) + ": eps_bar " + std::to_string(p.eps_bar[i]) +
                    " does not match accumulated increments (" + std::to_string(acc) + ")");
            }
            prev1 = p.eps1[i];
            prev2 = p.eps2[i];
        }
    }
    return data;
}

void SynthesisRanges::validate() const {
    auto check_range = [](const std::array<double, 2>& r, const char* name) {
        if (!(r[0] <= r[1]) || !std::isfinite(r[0]) || !std::isfinite(r[1])) {
            throw InvalidInputError(std::string("SynthesisRanges: bad ") + name + " range [" +
                                    std::to_string(r[0]) + ", " + std::to_string(r[1]) + "]");
        }
    };
    check_range(phi1_range, "phi1");
    check_range(phi2_range, "phi2");
    check_range(switch_fraction_range, "switch_fraction");
    check_range(path_length_range, "path_length");
    if (!(switch_fraction_range[0] >= 0.0 && switch_fraction_range[1] <= 1.0)) {
        throw InvalidInputError("SynthesisRanges: switch_fraction range must lie inside [0, 1]");
    }
    if (!(path_length_range[0] > 0.0)) {
        throw InvalidInputError("SynthesisRanges: path_length must be positive");
    }
    if (!(fail_c0 > 0.0) || fail_c1 < 0.0) {
        throw InvalidInputError("SynthesisRanges: failure-strain curve needs c0 > 0 and c1 >= 0");
    }
}

PathDataset synthesize(std::size_t n_paths, std::size_t n_steps, std::uint64_t seed,
                       const SynthesisRanges& ranges) {
    if (n_paths == 0) throw InvalidInputError("synthesize: n_paths must be positive");
    if (n_steps < 2) throw InvalidInputError("synthesize: need at least 2 steps per path");
    ranges.validate();

    RngStream rng(seed);
    PathDataset data;
    data.paths.reserve(n_paths);
    for (std::size_t i = 0; i < n_paths; ++i) {
        deformation::BilinearSpec spec;
        spec.phi1 = rng.uniform(ranges.phi1_range[0], ranges.phi1_range[1]);
        spec.phi2 = rng.uniform(ranges.phi2_range[0], ranges.phi2_range[1]);
        spec.switch_fraction =
            rng.uniform(ranges.switch_fraction_range[0], ranges.switch_fraction_range[1]);
        const double length = rng.uniform(ranges.path_length_range[0], ranges.path_length_range[1]);
        spec.n_steps = n_steps;
        spec.step_magnitude = length / static_cast<double>(n_steps);
        spec.eps_bar_fail = deformation::synthetic_failure_strain(spec.phi2, ranges.fail_c0,
                                                                  ranges.fail_c1, ranges.fail_phi_ref);
        data.paths.push_back(deformation::generate_bilinear_path(spec, static_cast<std::int64_t>(i)));
    }
    return data;
}

std::pair<PathDataset, NormalizationParams> normalize_fit_transform(const PathDataset& data) {
    if (data.empty()) throw InvalidInputError("normalize_fit_transform: empty dataset");

    NormalizationParams params;
    std::array<double, 3> sum{0.0, 0.0, 0.0};
    std::size_t n = 0;
    for (const auto& p : data.paths) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            sum[0] += p.eps1[i];
            sum[1] += p.eps2[i];
            sum[2] += p.phi[i];
        }
        n += p.size();
    }
    for (int f = 0; f < 3; ++f) params.shift[f] = sum[f] / static_cast<double>(n);

    std::array<double, 3> sq{0.0, 0.0, 0.0};
    for (const auto& p : data.paths) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double d0 = p.eps1[i] - params.shift[0];
            const double d1 = p.eps2[i] - params.shift[1];
            const double d2 = p.phi[i] - params.shift[2];
            sq[0] += d0 * d0;
            sq[1] += d1 * d1;
            sq[2] += d2 * d2;
        }
    }
    for (int f = 0; f < 3; ++f) {
        const double std_dev = std::sqrt(sq[f] / static_cast<double>(n));
        if (std_dev < 1e-12) {
            params.scale[f] = 1.0;
            params.degenerate[f] = true;
        } else {
            params.scale[f] = std_dev;
        }
    }
    params.fitted = true;
    return {apply_normalization(data, params), params};
}

PathDataset apply_normalization(const PathDataset& data, const NormalizationParams& params) {
    if (!params.fitted) throw StateError("apply_normalization: parameters were never fitted");
    PathDataset out = data;
    for (auto& p : out.paths) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            p.eps1[i] = (p.eps1[i] - params.shift[0]) / params.scale[0];
            p.eps2[i] = (p.eps2[i] - params.shift[1]) / params.scale[1];
            p.phi[i] = (p.phi[i] - params.shift[2]) / params.scale[2];
        }
    }
    return out;
}

DatasetSplit split(const PathDataset& data, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw InvalidInputError("split: train_fraction must lie in (0, 1), got " +
                                std::to_string(train_fraction));
    }
    const std::size_t n = data.size();
    const std::size_t n_train = std::min(tolerant_floor(train_fraction, n), n);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    RngStream rng(seed);
    rng.shuffle(order);

    std::vector<std::size_t> train_idx(order.begin(), order.begin() + n_train);
    std::vector<std::size_t> test_idx(order.begin() + n_train, order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());

    DatasetSplit out;
    out.train_fraction = train_fraction;
    out.seed = seed;
    out.train.paths.reserve(train_idx.size());
    out.test.paths.reserve(test_idx.size());
    for (std::size_t i : train_idx) out.train.paths.push_back(data.paths[i]);
    for (std::size_t i : test_idx) out.test.paths.push_back(data.paths[i]);
    return out;
}

}  // namespace strainseq::dataset
