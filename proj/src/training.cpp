#include "strainseq/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace strainseq::training {

using autograd::Matrix;
using autograd::Value;
using deformation::LoadingPath;
using models::SequenceModel;

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw InvalidInputError("TrainConfig: learning_rate must be positive, got " +
                                std::to_string(learning_rate));
    }
    if (batch_size < 1) throw InvalidInputError("TrainConfig: batch_size must be >= 1");
    if (max_epochs < 1) throw InvalidInputError("TrainConfig: max_epochs must be >= 1");
    if (patience < 1) throw InvalidInputError("TrainConfig: patience must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw InvalidInputError("TrainConfig: betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw InvalidInputError("TrainConfig: epsilon must be positive");
}

nlohmann::json history_to_json(const TrainHistory& h) {
    return {{"train_mse", h.train_mse},
            {"val_mse", h.val_mse},
            {"stopped_epoch", h.stopped_epoch},
            {"best_epoch", h.best_epoch}};
}

TrainHistory history_from_json(const nlohmann::json& j) {
    try {
        TrainHistory h;
        h.train_mse = j.at("train_mse").get<std::vector<double>>();
        h.val_mse = j.at("val_mse").get<std::vector<double>>();
        h.stopped_epoch = j.at("stopped_epoch").get<std::size_t>();
        h.best_epoch = j.at("best_epoch").get<std::size_t>();
        return h;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("history json: ") + e.what());
    }
}

double mse_loss(const std::vector<std::vector<double>>& pred,
                const std::vector<std::vector<double>>& target) {
    if (pred.size() != target.size()) {
        throw ShapeError("mse_loss: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(target.size()) + " targets");
    }
    if (pred.empty()) throw InvalidInputError("mse_loss: no sequences");
    double sse = 0.0;
    std::size_t steps = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != target[i].size()) {
            throw ShapeError("mse_loss: sequence " + std::to_string(i) + " has " +
                             std::to_string(pred[i].size()) + " predictions vs " +
                             std::to_string(target[i].size()) + " targets");
        }
        for (std::size_t t = 0; t < pred[i].size(); ++t) {
            const double d = pred[i][t] - target[i][t];
            sse += d * d;
        }
        steps += pred[i].size();
    }
    if (steps == 0) throw InvalidInputError("mse_loss: sequences are all empty");
    return sse / static_cast<double>(steps);
}

double evaluate_mse(const SequenceModel& model, const dataset::PathDataset& data) {
    if (data.empty()) throw InvalidInputError("evaluate_mse: empty dataset");
    std::vector<std::vector<double>> pred, target;
    pred.reserve(data.size());
    target.reserve(data.size());
    for (const auto& p : data.paths) {
        pred.push_back(model.predict(p));
        target.push_back(p.damage);
    }
    return mse_loss(pred, target);
}

// --- Adam ---------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<models::NamedParam> params, const TrainConfig& config)
    : params_(std::move(params)), config_(config) {
    config_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
}

void AdamOptimizer::zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
}

void AdamOptimizer::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Matrix& g = params_[i].value.grad();
        if (!g.allFinite()) {
            throw NumericError("adam: non-finite gradient in parameter block '" +
                               params_[i].name + "' at step " + std::to_string(t_));
        }
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
        const Matrix m_hat = m_[i] / bc1;
        const Matrix v_hat = v_[i] / bc2;
        params_[i].value.mutable_value().array() -=
            config_.learning_rate * m_hat.array() /
            (v_hat.array().sqrt() + config_.epsilon);
    }
}

// --- training loop -----------------------------------------------------------

namespace {

// Paths per graph chunk: bounds peak graph memory regardless of batch size.
// Chunks under one optimizer step are mathematically one batch — each chunk's
// loss is scaled by the full batch's step count before backward, so the
// accumulated gradient equals the single-graph gradient.
constexpr std::size_t kMaxGraphPaths = 64;

// Summed squared error of one chunk as a graph Value. GRU chunks (equal
// lengths) run batched; conv/transformer chunks hold a single path.
Value chunk_sse(const SequenceModel& model, const std::vector<const LoadingPath*>& chunk,
                bool training, RngStream* dropout_rng) {
    if (model.architecture() == models::Architecture::gru) {
        const auto& net = std::get<models::EncoderDecoderGru>(model.net);
        const std::size_t len = chunk[0]->size();
        const auto batch = static_cast<Eigen::Index>(chunk.size());
        std::vector<Value> steps;
        steps.reserve(len);
        for (std::size_t t = 0; t < len; ++t) {
            Matrix x(batch, models::kInputDim);
            for (Eigen::Index b = 0; b < batch; ++b) {
                const auto* p = chunk[static_cast<std::size_t>(b)];
                x(b, 0) = p->eps1[t];
                x(b, 1) = p->eps2[t];
                x(b, 2) = p->phi[t];
            }
            steps.push_back(Value::constant(std::move(x)));
        }
        // Targets stacked step-major to match encoder_decoder_forward.
        Matrix tgt(static_cast<Eigen::Index>(len) * batch, 1);
        for (Eigen::Index b = 0; b < batch; ++b) {
            const auto* p = chunk[static_cast<std::size_t>(b)];
            for (std::size_t t = 0; t < len; ++t) {
                tgt(static_cast<Eigen::Index>(t) * batch + b, 0) = p->damage[t];
            }
        }
        const Value pred = models::encoder_decoder_forward(net, steps);
        const Value diff = autograd::sub(pred, Value::constant(std::move(tgt)));
        return autograd::sum(autograd::mul(diff, diff));
    }

    const auto* p = chunk[0];
    const auto n = static_cast<Eigen::Index>(p->size());
    Matrix x(n, models::kInputDim);
    Matrix tgt(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto t = static_cast<std::size_t>(i);
        x(i, 0) = p->eps1[t];
        x(i, 1) = p->eps2[t];
        x(i, 2) = p->phi[t];
        tgt(i, 0) = p->damage[t];
    }
    const Value pred =
        model.forward_features(Value::constant(std::move(x)), training, dropout_rng);
    const Value diff = autograd::sub(pred, Value::constant(std::move(tgt)));
    return autograd::sum(autograd::mul(diff, diff));
}

// Splits the paths into graph-sized chunks: GRU groups equal lengths first
// (batched), the per-position architectures go one path at a time.
std::vector<std::vector<const LoadingPath*>> plan_chunks(
    const SequenceModel& model, const std::vector<const LoadingPath*>& paths) {
    std::vector<std::vector<const LoadingPath*>> chunks;
    if (model.architecture() == models::Architecture::gru) {
        std::map<std::size_t, std::vector<const LoadingPath*>> groups;
        for (const auto* p : paths) groups[p->size()].push_back(p);
        for (const auto& [len, group] : groups) {
            for (std::size_t at = 0; at < group.size(); at += kMaxGraphPaths) {
                const std::size_t end = std::min(at + kMaxGraphPaths, group.size());
                chunks.emplace_back(group.begin() + static_cast<std::ptrdiff_t>(at),
                                    group.begin() + static_cast<std::ptrdiff_t>(end));
            }
        }
    } else {
        for (const auto* p : paths) chunks.push_back({p});
    }
    return chunks;
}

// Runs the model over whole paths chunk by chunk, returning the total summed
// squared error. With grad_scale > 0 every chunk also backpropagates
// sse * grad_scale into the parameter grads (gradient accumulation); each
// chunk's graph is released before the next one is built.
double forward_paths(const SequenceModel& model, const std::vector<const LoadingPath*>& paths,
                     bool training, RngStream* dropout_rng, double grad_scale,
                     std::size_t& steps_out) {
    double total_sse = 0.0;
    steps_out = 0;
    for (const auto& chunk : plan_chunks(model, paths)) {
        const Value sse = chunk_sse(model, chunk, training, dropout_rng);
        const double value = sse.value()(0, 0);
        if (!std::isfinite(value)) {
            throw NumericError("non-finite squared error");
        }
        if (grad_scale > 0.0) {
            autograd::backward(autograd::mul_scalar(sse, grad_scale));
        }
        total_sse += value;
        for (const auto* p : chunk) steps_out += p->size();
    }
    return total_sse;
}

double clip_gradients(std::vector<models::NamedParam>& params, double clip_norm) {
    double sq = 0.0;
    for (const auto& p : params) sq += p.value.grad().squaredNorm();
    const double norm = std::sqrt(sq);
    if (clip_norm > 0.0 && norm > clip_norm) {
        const double scale = clip_norm / norm;
        for (auto& p : params) {
            // Scaling the stored grads in place keeps the optimizer oblivious.
            p.value.raw()->grad *= scale;
        }
    }
    return norm;
}

}  // namespace

TrainResult train(SequenceModel& model, const dataset::DatasetSplit& split,
                  const TrainConfig& config) {
    config.validate();
    if (split.train.empty() || split.test.empty()) {
        throw InvalidInputError("train: both split sides must be nonempty (train " +
                                std::to_string(split.train.size()) + ", test " +
                                std::to_string(split.test.size()) + " paths)");
    }
    const auto start = std::chrono::steady_clock::now();

    std::vector<const LoadingPath*> train_paths, test_paths;
    for (const auto& p : split.train.paths) train_paths.push_back(&p);
    for (const auto& p : split.test.paths) test_paths.push_back(&p);

    auto params = model.parameters();
    AdamOptimizer optimizer(params, config);
    RngStream base(config.seed);
    RngStream shuffle_rng = base.split("shuffle");
    RngStream dropout_rng = base.split("dropout");

    TrainHistory history;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<Matrix> best_params;
    auto snapshot = [&] {
        best_params.clear();
        for (const auto& p : params) best_params.push_back(p.value.value());
    };

    auto finish = [&](TrainHistory h) {
        h.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return h;
    };

    std::vector<std::size_t> order(train_paths.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_sse = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t at = 0; at < order.size(); at += config.batch_size) {
            const std::size_t end = std::min(at + config.batch_size, order.size());
            std::vector<const LoadingPath*> batch;
            batch.reserve(end - at);
            std::size_t batch_steps = 0;
            for (std::size_t i = at; i < end; ++i) {
                batch.push_back(train_paths[order[i]]);
                batch_steps += batch.back()->size();
            }

            try {
                optimizer.zero_grad();
                std::size_t counted = 0;
                // Mean loss over the batch's steps, accumulated chunk by chunk.
                epoch_sse += forward_paths(model, batch, true, &dropout_rng,
                                           1.0 / static_cast<double>(batch_steps), counted);
                clip_gradients(params, config.clip_norm);
                optimizer.step();
            } catch (const NumericError&) {
                history.stopped_epoch = epoch;
                throw DivergenceError("train: non-finite loss in epoch " + std::to_string(epoch),
                                      finish(history));
            }
            epoch_steps += batch_steps;
        }

        history.train_mse.push_back(epoch_sse / static_cast<double>(epoch_steps));
        history.stopped_epoch = epoch;
        double val = 0.0;
        try {
            std::size_t val_steps = 0;
            val = forward_paths(model, test_paths, false, nullptr, 0.0, val_steps) /
                  static_cast<double>(val_steps);
        } catch (const NumericError&) {
            throw DivergenceError("train: non-finite validation loss in epoch " +
                                      std::to_string(epoch),
                                  finish(history));
        }
        history.val_mse.push_back(val);

        if (val < best_val) {
            best_val = val;
            history.best_epoch = epoch;
            snapshot();
        } else if (epoch - history.best_epoch >= config.patience) {
            break;
        }
    }

    // Hand back the best-epoch weights.
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i].value.mutable_value() = best_params[i];
    }
    return {finish(history), best_val};
}

FitReport fit_on_split(SequenceModel& model, const dataset::DatasetSplit& raw_split,
                       const TrainConfig& config) {
    if (raw_split.train.empty() || raw_split.test.empty()) {
        throw InvalidInputError("fit_on_split: both split sides must be nonempty");
    }
    auto [train_transformed, norm] = dataset::normalize_fit_transform(raw_split.train);
    model.normalization = norm;

    dataset::DatasetSplit transformed;
    transformed.train = std::move(train_transformed);
    transformed.test = dataset::apply_normalization(raw_split.test, norm);
    transformed.train_fraction = raw_split.train_fraction;
    transformed.seed = raw_split.seed;

    TrainResult result = train(model, transformed, config);
    FitReport report;
    report.history = std::move(result.history);
    report.best_val_mse = result.best_val_mse;
    report.train_mse = evaluate_mse(model, raw_split.train);
    report.test_mse = evaluate_mse(model, raw_split.test);
    return report;
}

}  // namespace strainseq::training
