#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "strainseq/dataset.hpp"
#include "strainseq/models.hpp"

namespace strainseq::training {

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    std::size_t patience = 5;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 5.0;  // global gradient-norm ceiling; <= 0 disables clipping

    void validate() const;
};

struct TrainHistory {
    std::vector<double> train_mse;  // one entry per epoch run
    std::vector<double> val_mse;
    std::size_t stopped_epoch = 0;  // 1-based; the last epoch that ran
    std::size_t best_epoch = 0;     // epoch of the lowest validation MSE
    // Wall-clock seconds; kept in memory for logs only and deliberately
    // excluded from serialization so artifacts are byte-stable per seed.
    double wall_seconds = 0.0;
};

nlohmann::json history_to_json(const TrainHistory& h);
TrainHistory history_from_json(const nlohmann::json& j);

// Grand mean over all steps of all sequences of (pred - target)^2.
double mse_loss(const std::vector<std::vector<double>>& pred,
                const std::vector<std::vector<double>>& target);

// Mean squared error of model.predict against the stored damage series,
// computed per path exactly like downstream consumers would.
double evaluate_mse(const models::SequenceModel& model, const dataset::PathDataset& data);

// Adam with bias correction. step() consumes the gradients accumulated on
// the parameter nodes; callers zero them (or call zero_grad) between steps.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<models::NamedParam> params, const TrainConfig& config);

    void zero_grad();
    // Throws NumericError naming the parameter block if a gradient is
    // non-finite.
    void step();
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<models::NamedParam> params_;
    TrainConfig config_;
    std::vector<autograd::Matrix> m_;
    std::vector<autograd::Matrix> v_;
    std::size_t t_ = 0;
};

// Non-finite training or validation loss; carries whatever history had
// accumulated when training aborted.
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& what, TrainHistory history)
        : NumericError(what), history_(std::move(history)) {}
    const TrainHistory& history() const { return history_; }

private:
    TrainHistory history_;
};

struct TrainResult {
    TrainHistory history;
    double best_val_mse = 0.0;
};

// Trains the model in place on an already-normalized split: shuffled
// whole-path batches (equal lengths batched together), Adam with global-norm
// clipping, validation on the test side each epoch, early stopping after
// `patience` epochs without improvement. On return the parameters hold the
// best-epoch snapshot. Fully deterministic per config.seed.
TrainResult train(models::SequenceModel& model, const dataset::DatasetSplit& split,
                  const TrainConfig& config);

struct FitReport {
    TrainHistory history;
    double best_val_mse = 0.0;
    double train_mse = 0.0;
    double test_mse = 0.0;
};

// The standard pipeline: fit normalization on the raw train split, stamp it
// into the model, train on transformed features, then report final train and
// test MSE through the same per-path inference that predict() uses.
FitReport fit_on_split(models::SequenceModel& model, const dataset::DatasetSplit& raw_split,
                       const TrainConfig& config);

}  // namespace strainseq::training
