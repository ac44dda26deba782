#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstddef>
#include <vector>

#include "strainseq/autograd.hpp"
#include "strainseq/common.hpp"
#include "strainseq/dataset.hpp"
#include "strainseq/deformation.hpp"
#include "strainseq/models.hpp"
#include "strainseq/training.hpp"

using namespace strainseq;
using namespace strainseq::training;
using autograd::Matrix;
using autograd::Value;

namespace {

// independent extended-precision grand mean of squared differences
double oracle_mse(const std::vector<std::vector<double>>& pred,
                  const std::vector<std::vector<double>>& target) {
    long double sum = 0.0L;
    std::size_t n = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) {
        for (std::size_t i = 0; i < pred[p].size(); ++i) {
            const long double d =
                static_cast<long double>(pred[p][i]) - static_cast<long double>(target[p][i]);
            sum += d * d;
            ++n;
        }
    }
    return static_cast<double>(sum / static_cast<long double>(n));
}

// scalar Adam on f(x) = x^2 simulated in long double
std::vector<double> oracle_adam_on_square(double x0, double lr, int steps) {
    const long double b1 = 0.9L, b2 = 0.999L, eps = 1e-8L;
    long double x = x0, m = 0.0L, v = 0.0L;
    std::vector<double> trail;
    for (int t = 1; t <= steps; ++t) {
        const long double g = 2.0L * x;
        m = b1 * m + (1.0L - b1) * g;
        v = b2 * v + (1.0L - b2) * g * g;
        const long double mhat = m / (1.0L - std::pow(b1, static_cast<long double>(t)));
        const long double vhat = v / (1.0L - std::pow(b2, static_cast<long double>(t)));
        x -= lr * mhat / (std::sqrt(vhat) + eps);
        trail.push_back(static_cast<double>(x));
    }
    return trail;
}

deformation::LoadingPath proportional_path(std::size_t id, double phi, std::size_t n_steps,
                                           double fail) {
    deformation::BilinearSpec spec;
    spec.phi1 = spec.phi2 = phi;
    spec.switch_fraction = 0.5;
    spec.n_steps = n_steps;
    spec.step_magnitude = 0.002;
    spec.eps_bar_fail = fail;
    return deformation::generate_bilinear_path(spec, id);
}

dataset::DatasetSplit single_path_split() {
    dataset::DatasetSplit split;
    split.train.paths.push_back(proportional_path(0, 0.4, 60, 0.3));
    split.test.paths.push_back(proportional_path(0, 0.4, 60, 0.3));
    split.train_fraction = 0.5;
    return split;
}

dataset::DatasetSplit small_split(std::size_t n_paths = 6, std::size_t n_steps = 25) {
    auto data = dataset::synthesize(n_paths, n_steps, 99);
    return dataset::split(data, 0.5, 7);
}

}  // namespace

// ---- mse_loss -------------------------------------------------------------------

TEST_CASE("mse: identical sequences score zero") {
    std::vector<std::vector<double>> a{{0.1, 0.2, 0.3}, {1.0, 2.0}};
    CHECK(mse_loss(a, a) == 0.0);
}

TEST_CASE("mse: constant offset of 0.1 scores 0.01") {
    std::vector<std::vector<double>> target{{0.5, 1.5, -2.0}, {0.0, 3.0}};
    auto pred = target;
    for (auto& seq : pred) {
        for (auto& v : seq) v += 0.1;
    }
    CHECK(mse_loss(pred, target) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("mse: random pairs match an extended-precision oracle") {
    RngStream rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> pred, target;
        const std::size_t paths = 1 + rng.uniform_index(4);
        for (std::size_t p = 0; p < paths; ++p) {
            const std::size_t len = 1 + rng.uniform_index(30);
            std::vector<double> a(len), b(len);
            for (std::size_t i = 0; i < len; ++i) {
                a[i] = rng.uniform(-5.0, 5.0);
                b[i] = rng.uniform(-5.0, 5.0);
            }
            pred.push_back(a);
            target.push_back(b);
        }
        const double got = mse_loss(pred, target);
        CHECK(got == doctest::Approx(oracle_mse(pred, target)).epsilon(1e-12));
    }
}

TEST_CASE("mse: shape mismatches are rejected") {
    std::vector<std::vector<double>> a{{1.0, 2.0}};
    std::vector<std::vector<double>> b{{1.0, 2.0}, {3.0}};
    CHECK_THROWS_AS(mse_loss(a, b), ShapeError);
    std::vector<std::vector<double>> c{{1.0, 2.0, 3.0}};
    CHECK_THROWS_AS(mse_loss(a, c), ShapeError);
}

// ---- Adam -----------------------------------------------------------------------

TEST_CASE("adam: first step moves by learning_rate times the gradient sign") {
    Matrix x0(1, 4);
    x0 << 0.3, -0.2, 0.7, -0.9;
    auto x = Value::parameter(x0);
    Matrix w(1, 4);
    w << 0.5, -1.2, 2.0, -0.3;

    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    AdamOptimizer opt({{"x", x}}, cfg);
    autograd::backward(autograd::sum(autograd::mul(x, Value::constant(w))));
    opt.step();

    for (int j = 0; j < 4; ++j) {
        const double delta = x.value()(0, j) - x0(0, j);
        const double expected = -cfg.learning_rate * (w(0, j) > 0 ? 1.0 : -1.0);
        CHECK(std::abs(delta - expected) <= 1e-6 * cfg.learning_rate);
    }
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("adam: zero gradients leave parameters untouched") {
    Matrix x0(2, 2);
    x0 << 1.0, -2.0, 3.0, -4.0;
    auto x = Value::parameter(x0);
    TrainConfig cfg;
    AdamOptimizer opt({{"x", x}}, cfg);
    for (int t = 0; t < 5; ++t) {
        opt.zero_grad();
        autograd::backward(autograd::sum(autograd::mul(x, Value::constant(Matrix::Zero(2, 2)))));
        opt.step();
    }
    CHECK(x.value() == x0);
}

TEST_CASE("adam: 100 steps on x^2 track a long-double simulation") {
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    auto x = Value::parameter(Matrix::Constant(1, 1, 1.0));
    AdamOptimizer opt({{"x", x}}, cfg);

    const auto oracle = oracle_adam_on_square(1.0, 0.1, 100);
    std::vector<double> got;
    for (int t = 0; t < 100; ++t) {
        opt.zero_grad();
        autograd::backward(autograd::mul(x, x));
        opt.step();
        got.push_back(x.value()(0, 0));
        CHECK(got.back() == doctest::Approx(oracle[static_cast<std::size_t>(t)]).epsilon(1e-12));
    }
    // |x| falls strictly until it dips under 0.1
    double prev = 1.0;
    for (double v : got) {
        if (std::abs(prev) < 0.1) break;
        CHECK(std::abs(v) < std::abs(prev));
        prev = v;
    }
    CHECK(std::abs(got.back()) < 0.1);
}

TEST_CASE("adam: non-finite gradients abort naming the parameter block") {
    auto x = Value::parameter(Matrix::Constant(1, 1, 1.0));
    TrainConfig cfg;
    AdamOptimizer opt({{"frontal.weight", x}}, cfg);
    // two huge contributions overflow the accumulated gradient to infinity
    autograd::backward(autograd::sum(
        autograd::add(autograd::mul_scalar(x, 1e308), autograd::mul_scalar(x, 1e308))));
    CHECK_THROWS_WITH_AS(opt.step(),
                         doctest::Contains("frontal.weight"), NumericError);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
    cfg = TrainConfig{};
    cfg.patience = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
    cfg = TrainConfig{};
    cfg.clip_norm = -1.0;  // disables clipping, still valid
    CHECK_NOTHROW(cfg.validate());
}

// ---- train loop -------------------------------------------------------------------

TEST_CASE("train: overfits a single proportional path") {
    auto model = models::make_gru_model(models::GruConfig{8}, 3);
    TrainConfig cfg;
    // gentle rate: fast enough to overfit within 100 epochs, small enough
    // that the per-epoch loss stays almost monotone for the smoke check below
    cfg.learning_rate = 0.002;
    cfg.batch_size = 1;
    cfg.max_epochs = 100;
    cfg.patience = 100;
    cfg.seed = 3;

    auto split = single_path_split();
    const auto report = fit_on_split(model, split, cfg);
    CHECK(report.train_mse < 1e-3);

    // optimizer smoke test: loss on one repeated sample almost always falls
    std::size_t drops = 0;
    const auto& t = report.history.train_mse;
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (t[i] <= t[i - 1]) ++drops;
    }
    CHECK(t.size() >= 2);
    CHECK(static_cast<double>(drops) >= 0.9 * static_cast<double>(t.size() - 1));
}

TEST_CASE("train: patience 1 with immediately worsening validation stops at epoch 2") {
    // train target is large everywhere, validation target near zero: every
    // step toward the train curve drags validation error up from epoch one
    dataset::DatasetSplit split;
    split.train.paths.push_back(proportional_path(0, 0.4, 40, 0.02));
    split.test.paths.push_back(proportional_path(1, 0.4, 40, 10.0));
    split.train_fraction = 0.5;

    auto model = models::make_gru_model(models::GruConfig{6}, 5);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 1;
    cfg.max_epochs = 50;
    cfg.patience = 1;
    cfg.seed = 5;

    const auto report = fit_on_split(model, split, cfg);
    CHECK(report.history.stopped_epoch == 2);
    CHECK(report.history.best_epoch == 1);
    CHECK(report.history.val_mse.size() == 2);
    CHECK(report.history.val_mse[1] > report.history.val_mse[0]);
}

TEST_CASE("train: histories are bitwise reproducible per seed") {
    auto split = small_split();
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.batch_size = 2;
    cfg.max_epochs = 6;
    cfg.patience = 6;
    cfg.seed = 11;

    auto model_a = models::make_gru_model(models::GruConfig{4}, 21);
    auto model_b = models::make_gru_model(models::GruConfig{4}, 21);
    const auto ra = fit_on_split(model_a, split, cfg);
    const auto rb = fit_on_split(model_b, split, cfg);

    CHECK(ra.history.train_mse == rb.history.train_mse);
    CHECK(ra.history.val_mse == rb.history.val_mse);
    CHECK(ra.history.stopped_epoch == rb.history.stopped_epoch);
    CHECK(ra.history.best_epoch == rb.history.best_epoch);
    CHECK(ra.test_mse == rb.test_mse);
    const auto pa = model_a.parameters(), pb = model_b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].value.value() == pb[i].value.value());

    // a different shuffling seed takes a different trajectory
    cfg.seed = 12;
    auto model_c = models::make_gru_model(models::GruConfig{4}, 21);
    const auto rc = fit_on_split(model_c, split, cfg);
    CHECK(ra.history.train_mse != rc.history.train_mse);
}

TEST_CASE("train: early-stopping bookkeeping invariants") {
    auto split = small_split();
    TrainConfig cfg;
    cfg.learning_rate = 0.02;
    cfg.batch_size = 3;
    cfg.max_epochs = 30;
    cfg.patience = 3;
    cfg.seed = 17;

    auto model = models::make_conv_model(models::ConvConfig{}, 23);
    const auto report = fit_on_split(model, split, cfg);

    REQUIRE(!report.history.val_mse.empty());
    CHECK(report.history.stopped_epoch == report.history.val_mse.size());
    CHECK(report.history.stopped_epoch - report.history.best_epoch <= cfg.patience);
    CHECK(report.history.stopped_epoch <= cfg.max_epochs);

    double min_val = report.history.val_mse[0];
    for (double v : report.history.val_mse) min_val = std::min(min_val, v);
    CHECK(report.best_val_mse == min_val);
    CHECK(report.history.val_mse[report.history.best_epoch - 1] == min_val);

    // the returned parameters are the best-epoch snapshot, so scoring the
    // model again reproduces the best validation error
    CHECK(evaluate_mse(model, split.test) == doctest::Approx(min_val).epsilon(1e-12));
}

TEST_CASE("train: reaching max_epochs without stopping") {
    auto split = small_split(4, 15);
    TrainConfig cfg;
    cfg.learning_rate = 0.005;
    cfg.batch_size = 2;
    cfg.max_epochs = 4;
    cfg.patience = 50;
    cfg.seed = 2;

    auto model = models::make_gru_model(models::GruConfig{4}, 31);
    const auto report = fit_on_split(model, split, cfg);
    CHECK(report.history.stopped_epoch == 4);
    CHECK(report.history.train_mse.size() == 4);
    CHECK(report.history.val_mse.size() == 4);
}

TEST_CASE("train: runaway learning rate raises a divergence error with partial history") {
    auto split = single_path_split();
    auto model = models::make_gru_model(models::GruConfig{4}, 7);
    model.normalization = [] {
        dataset::NormalizationParams np;
        np.fitted = true;
        return np;
    }();
    TrainConfig cfg;
    cfg.learning_rate = 1e200;
    cfg.clip_norm = -1.0;  // no clipping: let the step explode
    cfg.batch_size = 1;
    cfg.max_epochs = 10;
    cfg.patience = 10;
    cfg.seed = 1;

    bool threw = false;
    try {
        train(model, split, cfg);
    } catch (const DivergenceError& e) {
        threw = true;
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
        CHECK(e.history().stopped_epoch >= 1);
        CHECK(e.history().stopped_epoch <= 2);
        CHECK(e.history().train_mse.size() <= 2);
    }
    CHECK(threw);
}

// ---- history serialization ---------------------------------------------------------

TEST_CASE("history: JSON round trip, wall time excluded") {
    TrainHistory h;
    h.train_mse = {0.5, 0.25, 0.13};
    h.val_mse = {0.6, 0.3, 0.31};
    h.stopped_epoch = 3;
    h.best_epoch = 2;
    h.wall_seconds = 123.4;

    const auto j = history_to_json(h);
    CHECK_FALSE(j.contains("wall_seconds"));
    const auto back = history_from_json(j);
    CHECK(back.train_mse == h.train_mse);
    CHECK(back.val_mse == h.val_mse);
    CHECK(back.stopped_epoch == h.stopped_epoch);
    CHECK(back.best_epoch == h.best_epoch);
    CHECK(back.wall_seconds == 0.0);
    CHECK(history_to_json(back).dump() == j.dump());
}
