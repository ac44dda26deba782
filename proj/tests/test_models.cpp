#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "strainseq/autograd.hpp"
#include "strainseq/common.hpp"
#include "strainseq/dataset.hpp"
#include "strainseq/deformation.hpp"
#include "strainseq/models.hpp"

using namespace strainseq;
using namespace strainseq::models;
using autograd::Value;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, RngStream& rng, double lo = -1.0,
                     double hi = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
    }
    return m;
}

GruCellParams zero_cell(int hidden) {
    GruCellParams p;
    p.update_x = Value::parameter(Matrix::Zero(kInputDim, hidden));
    p.update_h = Value::parameter(Matrix::Zero(hidden, hidden));
    p.update_b = Value::parameter(Matrix::Zero(1, hidden));
    p.reset_x = Value::parameter(Matrix::Zero(kInputDim, hidden));
    p.reset_h = Value::parameter(Matrix::Zero(hidden, hidden));
    p.reset_b = Value::parameter(Matrix::Zero(1, hidden));
    p.cand_x = Value::parameter(Matrix::Zero(kInputDim, hidden));
    p.cand_h = Value::parameter(Matrix::Zero(hidden, hidden));
    p.cand_b = Value::parameter(Matrix::Zero(1, hidden));
    return p;
}

GruCellParams random_cell(int hidden, RngStream& rng) {
    GruCellParams p;
    p.update_x = Value::parameter(random_matrix(kInputDim, hidden, rng));
    p.update_h = Value::parameter(random_matrix(hidden, hidden, rng));
    p.update_b = Value::parameter(random_matrix(1, hidden, rng));
    p.reset_x = Value::parameter(random_matrix(kInputDim, hidden, rng));
    p.reset_h = Value::parameter(random_matrix(hidden, hidden, rng));
    p.reset_b = Value::parameter(random_matrix(1, hidden, rng));
    p.cand_x = Value::parameter(random_matrix(kInputDim, hidden, rng));
    p.cand_h = Value::parameter(random_matrix(hidden, hidden, rng));
    p.cand_b = Value::parameter(random_matrix(1, hidden, rng));
    return p;
}

std::vector<Value> cell_values(const GruCellParams& p) {
    return {p.update_x, p.update_h, p.update_b, p.reset_x, p.reset_h,
            p.reset_b,  p.cand_x,   p.cand_h,   p.cand_b};
}

// feature steps for a batch-of-one sequence
std::vector<Value> step_features(Eigen::Index t, RngStream& rng) {
    std::vector<Value> steps;
    for (Eigen::Index i = 0; i < t; ++i) {
        steps.push_back(Value::constant(random_matrix(1, kInputDim, rng)));
    }
    return steps;
}

dataset::NormalizationParams identity_normalization() {
    dataset::NormalizationParams np;
    np.fitted = true;  // shift 0, scale 1
    return np;
}

deformation::LoadingPath path_of_length(std::size_t n, double phi = 0.5) {
    deformation::BilinearSpec spec;
    spec.phi1 = spec.phi2 = phi;
    spec.switch_fraction = 0.5;
    spec.n_steps = n;
    spec.step_magnitude = 0.001;
    spec.eps_bar_fail = 0.3;
    return deformation::generate_bilinear_path(spec, 0);
}

std::size_t gru_param_formula(std::size_t h) { return 6 * h * h + 25 * h + 1; }
std::size_t conv_param_formula(std::size_t f, std::size_t k) {
    return 3 * k * f + f + k * f + 1;
}
// embed (3d + d) + four projections (d^2 + d each) + two norms (2d each)
// + ffn (d*dff + dff + dff*d + d) + head (d + 1)
std::size_t transformer_param_formula(std::size_t d, std::size_t dff) {
    return 4 * d * d + 2 * d * dff + dff + 14 * d + 1;
}

}  // namespace

// ---- GRU cell ----------------------------------------------------------------

TEST_CASE("gru cell: zero parameters halve the hidden state") {
    const int hidden = 6;
    auto p = zero_cell(hidden);
    RngStream rng(1);
    auto x = Value::constant(random_matrix(2, kInputDim, rng));
    auto h = Value::constant(random_matrix(2, hidden, rng));

    const auto h_next = gru_cell_step(x, h, p);
    CHECK(h_next.value() == (0.5 * h.value()).eval());  // sigmoid(0) is exactly 1/2
}

TEST_CASE("gru cell: saturated update gate passes the candidate through") {
    const int hidden = 4;
    auto p = zero_cell(hidden);
    // push z to 1; with zero candidate weights h' = z * tanh(0) = 0
    p.update_b.mutable_value().setConstant(50.0);
    RngStream rng(2);
    auto x = Value::constant(random_matrix(1, kInputDim, rng));
    auto h = Value::constant(random_matrix(1, hidden, rng, 0.5, 2.0));

    const auto h_next = gru_cell_step(x, h, p);
    CHECK(h_next.value().cwiseAbs().maxCoeff() == 0.0);

    // and with a nonzero candidate bias, h' equals tanh(b_c) independent of h
    p.cand_b.mutable_value().setConstant(0.7);
    auto h2 = Value::constant(random_matrix(1, hidden, rng, -3.0, 3.0));
    const auto a = gru_cell_step(x, h, p);
    const auto b = gru_cell_step(x, h2, p);
    for (int j = 0; j < hidden; ++j) {
        CHECK(a.value()(0, j) == doctest::Approx(std::tanh(0.7)).epsilon(1e-15));
        CHECK(a.value()(0, j) == b.value()(0, j));
    }
}

TEST_CASE("gru cell: gradients match finite differences") {
    RngStream rng(3);
    auto p = random_cell(5, rng);
    auto x = Value::parameter(random_matrix(2, kInputDim, rng));
    auto h = Value::parameter(random_matrix(2, 5, rng));
    const Matrix w = random_matrix(2, 5, rng);

    auto inputs = cell_values(p);
    inputs.push_back(x);
    inputs.push_back(h);
    const double err = autograd::gradient_check(
        [&] { return autograd::sum(autograd::mul(gru_cell_step(x, h, p), Value::constant(w))); },
        inputs);
    CHECK(err < 1e-5);
}

TEST_CASE("gru cell: dimension mismatches are shape errors") {
    auto p = zero_cell(4);
    RngStream rng(4);
    auto x = Value::constant(random_matrix(1, kInputDim, rng));
    auto h_wrong = Value::constant(random_matrix(1, 3, rng));
    CHECK_THROWS_AS(gru_cell_step(x, h_wrong, p), ShapeError);
    auto x_wrong = Value::constant(random_matrix(1, 5, rng));
    auto h = Value::constant(random_matrix(1, 4, rng));
    CHECK_THROWS_AS(gru_cell_step(x_wrong, h, p), ShapeError);
}

// ---- encoder-decoder GRU -------------------------------------------------------

TEST_CASE("encoder-decoder: length-1 sequences work and sizes line up") {
    RngStream rng(5);
    EncoderDecoderGru net(GruConfig{8}, rng);
    auto steps = step_features(1, rng);
    const auto out = encoder_decoder_forward(net, steps);
    CHECK(out.rows() == 1);
    CHECK(out.cols() == 1);

    auto longer = step_features(9, rng);
    CHECK(encoder_decoder_forward(net, longer).rows() == 9);
}

TEST_CASE("encoder-decoder: zero head weights leave only the head bias") {
    RngStream rng(6);
    EncoderDecoderGru net(GruConfig{5}, rng);
    net.head_w.mutable_value().setZero();
    net.head_b.mutable_value()(0, 0) = 0.42;
    auto steps = step_features(7, rng);
    const auto out = encoder_decoder_forward(net, steps);
    for (Eigen::Index i = 0; i < 7; ++i) CHECK(out.value()(i, 0) == 0.42);
}

TEST_CASE("encoder-decoder: fused run equals the explicit step chain bitwise") {
    RngStream rng(7);
    EncoderDecoderGru net(GruConfig{6}, rng);
    auto steps = step_features(11, rng);

    const auto fused = encoder_decoder_forward(net, steps);
    const Matrix loss_w = random_matrix(11, 1, rng);
    autograd::backward(autograd::sum(autograd::mul(fused, Value::constant(loss_w))));
    std::vector<Matrix> fused_grads;
    for (const auto& p : net.parameters()) fused_grads.push_back(p.value.grad());

    auto params = net.parameters();
    std::vector<Value> values;
    for (auto& p : params) values.push_back(p.value);
    autograd::zero_grad(values);

    // the same computation written as a chain of per-step cell ops
    Value h = Value::constant(Matrix::Zero(1, 6));
    for (const auto& x : steps) h = gru_cell_step(x, h, net.encoder);
    std::vector<Value> dec_states;
    Value d = h;
    for (const auto& x : steps) {
        d = gru_cell_step(x, d, net.decoder);
        dec_states.push_back(d);
    }
    Value stacked = autograd::concat_rows(dec_states);
    Value chained = autograd::add_rowwise(autograd::matmul(stacked, net.head_w), net.head_b);

    CHECK(chained.value() == fused.value());

    autograd::backward(autograd::sum(autograd::mul(chained, Value::constant(loss_w))));
    // gradients accumulate in a different order across the two graph layouts,
    // so allow ulp-level noise while forward values stay exactly equal
    const auto names = net.parameters();
    for (std::size_t i = 0; i < names.size(); ++i) {
        INFO("parameter ", names[i].name);
        const double scale = std::max(1.0, fused_grads[i].cwiseAbs().maxCoeff());
        const double diff = (names[i].value.grad() - fused_grads[i]).cwiseAbs().maxCoeff();
        CHECK(diff / scale <= 1e-12);
    }
}

TEST_CASE("encoder-decoder: gradients match finite differences end to end") {
    RngStream rng(8);
    EncoderDecoderGru net(GruConfig{4}, rng);
    auto steps = step_features(3, rng);
    const Matrix w = random_matrix(3, 1, rng);

    std::vector<Value> inputs;
    for (auto& p : net.parameters()) inputs.push_back(p.value);
    const double err = autograd::gradient_check(
        [&] {
            return autograd::sum(
                autograd::mul(encoder_decoder_forward(net, steps), Value::constant(w)));
        },
        inputs);
    CHECK(err < 1e-5);
}

TEST_CASE("encoder-decoder: input validation") {
    RngStream rng(9);
    EncoderDecoderGru net(GruConfig{4}, rng);
    std::vector<Value> empty;
    CHECK_THROWS_AS(encoder_decoder_forward(net, empty), InvalidInputError);
    std::vector<Value> bad{Value::constant(random_matrix(1, 4, rng))};
    CHECK_THROWS_AS(encoder_decoder_forward(net, bad), ShapeError);
}

// ---- 1-D convolution -----------------------------------------------------------

TEST_CASE("conv: identity tap reproduces a feature channel causally") {
    ConvConfig cfg;
    cfg.filters = 2;
    cfg.kernel = 3;
    cfg.padding = PaddingMode::causal;
    RngStream rng(10);
    Conv1dNet net(cfg, rng);

    // layer 1, filter 0: pick out channel 0 at the newest tap (j = k-1);
    // layer 2: pass filter 0 through at the newest tap
    net.conv1_w.mutable_value().setZero();
    net.conv1_b.mutable_value().setZero();
    net.conv1_w.mutable_value()((cfg.kernel - 1) * kInputDim + 0, 0) = 1.0;
    net.conv2_w.mutable_value().setZero();
    net.conv2_b.mutable_value().setZero();
    net.conv2_w.mutable_value()((cfg.kernel - 1) * cfg.filters + 0, 0) = 1.0;

    const Eigen::Index t = 12;
    Matrix features = random_matrix(t, kInputDim, rng, 0.1, 1.0);  // positive: ReLU inert
    const auto out = conv1d_forward(net, Value::constant(features));
    REQUIRE(out.rows() == t);
    for (Eigen::Index i = 0; i < t; ++i) {
        CHECK(out.value()(i, 0) == doctest::Approx(features(i, 0)).epsilon(1e-15));
    }

    // causality: editing a later step never changes an earlier output
    Matrix tampered = features;
    tampered(t - 1, 0) = 9.0;
    tampered(t - 1, 1) = -9.0;
    const auto out2 = conv1d_forward(net, Value::constant(tampered));
    for (Eigen::Index i = 0; i + 1 < t; ++i) {
        CHECK(out2.value()(i, 0) == out.value()(i, 0));
    }
}

TEST_CASE("conv: zero weights leave the bias everywhere") {
    ConvConfig cfg;
    cfg.filters = 3;
    cfg.kernel = 5;
    RngStream rng(11);
    Conv1dNet net(cfg, rng);
    net.conv1_w.mutable_value().setZero();
    net.conv1_b.mutable_value().setZero();
    net.conv2_w.mutable_value().setZero();
    net.conv2_b.mutable_value()(0, 0) = -0.3;

    const auto out = conv1d_forward(net, Value::constant(random_matrix(8, kInputDim, rng)));
    for (Eigen::Index i = 0; i < 8; ++i) CHECK(out.value()(i, 0) == -0.3);
}

TEST_CASE("conv: output length equals input length in both padding modes") {
    for (auto mode : {PaddingMode::causal, PaddingMode::symmetric}) {
        ConvConfig cfg;
        cfg.filters = 4;
        cfg.kernel = 5;
        cfg.padding = mode;
        RngStream rng(12);
        Conv1dNet net(cfg, rng);
        for (Eigen::Index t : {1, 2, 7, 40}) {
            const auto out = conv1d_forward(net, Value::constant(random_matrix(t, kInputDim, rng)));
            CHECK(out.rows() == t);
            CHECK(out.cols() == 1);
        }
    }
}

TEST_CASE("conv: gradients match finite differences") {
    for (auto mode : {PaddingMode::causal, PaddingMode::symmetric}) {
        ConvConfig cfg;
        cfg.filters = 3;
        cfg.kernel = 3;
        cfg.padding = mode;
        RngStream rng(13);
        Conv1dNet net(cfg, rng);
        auto features = Value::parameter(random_matrix(6, kInputDim, rng));
        const Matrix w = random_matrix(6, 1, rng);

        std::vector<Value> inputs;
        for (auto& p : net.parameters()) inputs.push_back(p.value);
        inputs.push_back(features);
        const double err = autograd::gradient_check(
            [&] {
                return autograd::sum(
                    autograd::mul(conv1d_forward(net, features), Value::constant(w)));
            },
            inputs);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("conv: config validation") {
    ConvConfig cfg;
    cfg.kernel = 4;
    cfg.padding = PaddingMode::symmetric;  // even kernel cannot pad evenly
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
    cfg.padding = PaddingMode::causal;
    cfg.kernel = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
    cfg = ConvConfig{};
    cfg.filters = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
}

// ---- attention -----------------------------------------------------------------

TEST_CASE("attention: identical keys average the values") {
    RngStream rng(14);
    const Eigen::Index t = 5, dk = 3, dv = 2;
    Matrix k_row = random_matrix(1, dk, rng);
    Matrix k(t, dk);
    for (Eigen::Index i = 0; i < t; ++i) k.row(i) = k_row;
    auto q = Value::constant(random_matrix(4, dk, rng));
    auto v = Value::constant(random_matrix(t, dv, rng));

    const auto out = scaled_dot_product_attention(q, Value::constant(k), v, MaskMode::none);
    const Matrix mean = v.value().colwise().mean();
    for (Eigen::Index i = 0; i < 4; ++i) {
        for (Eigen::Index j = 0; j < dv; ++j) {
            CHECK(out.value()(i, j) == doctest::Approx(mean(0, j)).epsilon(1e-14));
        }
    }
}

TEST_CASE("attention: d_k = 4 halves the logits") {
    RngStream rng(15);
    auto q = Value::constant(random_matrix(3, 4, rng));
    auto k = Value::constant(random_matrix(6, 4, rng));
    auto v = Value::constant(random_matrix(6, 2, rng));

    const auto out = scaled_dot_product_attention(q, k, v, MaskMode::none);
    // 1/sqrt(4) is exactly 0.5, so the identical op sequence reproduces it
    const auto manual = autograd::matmul(
        autograd::softmax_rows(
            autograd::mul_scalar(autograd::matmul(q, autograd::transpose(k)), 0.5)),
        v);
    CHECK(out.value() == manual.value());
}

TEST_CASE("attention: causal weights beyond the diagonal are exactly zero") {
    RngStream rng(16);
    const Eigen::Index t = 6;
    auto q = Value::constant(random_matrix(t, 4, rng));
    auto k = Value::constant(random_matrix(t, 4, rng));
    // identity values turn the output into the raw weight matrix
    auto v = Value::constant(Matrix::Identity(t, t).eval());

    const auto w = scaled_dot_product_attention(q, k, v, MaskMode::causal);
    CHECK(w.value()(0, 0) == 1.0);
    for (Eigen::Index i = 0; i < t; ++i) {
        double row_sum = 0.0;
        for (Eigen::Index j = 0; j < t; ++j) {
            if (j > i) CHECK(w.value()(i, j) == 0.0);
            row_sum += w.value()(i, j);
        }
        CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("attention: shape validation") {
    RngStream rng(17);
    auto q = Value::constant(random_matrix(3, 4, rng));
    auto k = Value::constant(random_matrix(5, 3, rng));
    auto v = Value::constant(random_matrix(5, 2, rng));
    CHECK_THROWS_AS(scaled_dot_product_attention(q, k, v, MaskMode::none), ShapeError);
    auto k2 = Value::constant(random_matrix(5, 4, rng));
    auto v2 = Value::constant(random_matrix(4, 2, rng));
    CHECK_THROWS_AS(scaled_dot_product_attention(q, k2, v2, MaskMode::none), ShapeError);
}

// ---- transformer block -----------------------------------------------------------

TEST_CASE("transformer: single-head causal block accepts length-1 input") {
    TransformerConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 1;
    cfg.d_ff = 16;
    cfg.mask = MaskMode::causal;
    RngStream rng(18);
    TransformerBlockNet net(cfg, rng);

    const auto out = transformer_forward(net, Value::constant(random_matrix(1, kInputDim, rng)));
    CHECK(out.rows() == 1);
    CHECK(out.cols() == 1);
    CHECK(std::isfinite(out.value()(0, 0)));
}

TEST_CASE("transformer: inference is deterministic, training dropout is not a no-op") {
    TransformerConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.dropout = 0.1;
    RngStream rng(19);
    TransformerBlockNet net(cfg, rng);
    const Matrix features = random_matrix(6, kInputDim, rng);

    const auto a = transformer_forward(net, Value::constant(features));
    const auto b = transformer_forward(net, Value::constant(features));
    CHECK(a.value() == b.value());

    RngStream mask_rng(77);
    const auto trained = transformer_forward(net, Value::constant(features), true, &mask_rng);
    CHECK(trained.value() != a.value());

    // the same mask stream reproduces the same training pass
    RngStream mask_rng2(77);
    const auto trained2 = transformer_forward(net, Value::constant(features), true, &mask_rng2);
    CHECK(trained.value() == trained2.value());

    CHECK_THROWS_AS(transformer_forward(net, Value::constant(features), true, nullptr),
                    StateError);
}

TEST_CASE("transformer: gradients match finite differences with dropout off") {
    TransformerConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 12;
    cfg.dropout = 0.0;
    for (auto mask : {MaskMode::none, MaskMode::causal}) {
        cfg.mask = mask;
        RngStream rng(20);
        TransformerBlockNet net(cfg, rng);
        // push the feed-forward preactivations away from the relu kink so the
        // finite-difference probe never straddles it
        net.ff1_b.mutable_value().setConstant(2.0);
        auto features = Value::parameter(random_matrix(4, kInputDim, rng));
        const Matrix w = random_matrix(4, 1, rng);

        // the key-projection bias adds q_i . k_b uniformly across each logit row,
        // and row softmax is shift invariant, so its true gradient is identically
        // zero; the relative check would only measure finite-difference noise there
        std::vector<Value> inputs;
        for (auto& p : net.parameters()) {
            if (p.name != "attn.k.bias") inputs.push_back(p.value);
        }
        inputs.push_back(features);
        auto loss = [&] {
            return autograd::sum(
                autograd::mul(transformer_forward(net, features), Value::constant(w)));
        };
        const double err = autograd::gradient_check(loss, inputs);
        CHECK(err < 1e-5);

        autograd::zero_grad(inputs);
        autograd::backward(loss());
        CHECK(net.k_b.grad().cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("transformer: config validation") {
    TransformerConfig cfg;
    cfg.d_model = 10;
    cfg.heads = 4;  // 10 % 4 != 0
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
    cfg = TransformerConfig{};
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
    cfg = TransformerConfig{};
    cfg.heads = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
}

TEST_CASE("sinusoidal positions: classic table values") {
    const auto pe = sinusoidal_positions(10, 8);
    CHECK(pe.rows() == 10);
    CHECK(pe.cols() == 8);
    for (Eigen::Index j = 0; j < 8; j += 2) CHECK(pe(0, j) == 0.0);       // sin(0)
    for (Eigen::Index j = 1; j < 8; j += 2) CHECK(pe(0, j) == 1.0);       // cos(0)
    CHECK(pe(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
    CHECK(pe(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
    const double angle = 3.0 / std::pow(10000.0, 2.0 / 8.0);
    CHECK(pe(3, 2) == doctest::Approx(std::sin(angle)).epsilon(1e-15));
    CHECK(pe(3, 3) == doctest::Approx(std::cos(angle)).epsilon(1e-15));
}

// ---- SequenceModel factory and init --------------------------------------------

TEST_CASE("factories are deterministic per seed") {
    const auto a = make_gru_model(GruConfig{12}, 42);
    const auto b = make_gru_model(GruConfig{12}, 42);
    const auto c = make_gru_model(GruConfig{12}, 43);

    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool all_equal_ab = true, all_equal_ac = true;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].value.value() != pb[i].value.value()) all_equal_ab = false;
        if (pa[i].value.value() != pc[i].value.value()) all_equal_ac = false;
        CHECK(pa[i].name == pb[i].name);
    }
    CHECK(all_equal_ab);
    CHECK_FALSE(all_equal_ac);
    CHECK(a.seed == 42);
}

TEST_CASE("initialization: weights bounded by fan-in, biases zero") {
    const auto model = make_transformer_model(TransformerConfig{}, 7);
    for (const auto& p : model.parameters()) {
        const auto& m = p.value.value();
        const bool is_weight =
            p.name.find("weight") != std::string::npos || p.name.find(".w") != std::string::npos;
        if (is_weight) {
            const double bound = std::sqrt(1.0 / static_cast<double>(m.rows()));
            CHECK(m.cwiseAbs().maxCoeff() <= bound);
            CHECK(m.cwiseAbs().maxCoeff() > 0.0);
        } else if (p.name.find("gain") != std::string::npos) {
            CHECK(m.minCoeff() == 1.0);
            CHECK(m.maxCoeff() == 1.0);
        } else {
            CHECK(m.cwiseAbs().maxCoeff() == 0.0);  // every bias starts at zero
        }
    }
    const auto gru = make_gru_model(GruConfig{5}, 7);
    for (const auto& p : gru.parameters()) {
        if (p.name.find("bias") != std::string::npos) {
            CHECK(p.value.value().cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("parameter counts match the closed forms") {
    for (int h : {8, 16, 32}) {
        CHECK(make_gru_model(GruConfig{h}, 1).parameter_count() ==
              gru_param_formula(static_cast<std::size_t>(h)));
    }
    CHECK(make_gru_model(GruConfig{16}, 1).parameter_count() == 1937);

    for (int f : {8, 32}) {
        for (int k : {3, 5}) {
            ConvConfig cfg;
            cfg.filters = f;
            cfg.kernel = k;
            CHECK(make_conv_model(cfg, 1).parameter_count() ==
                  conv_param_formula(static_cast<std::size_t>(f), static_cast<std::size_t>(k)));
        }
    }
    {
        ConvConfig cfg;  // defaults: 32 filters, kernel 5
        CHECK(make_conv_model(cfg, 1).parameter_count() == 673);
    }

    for (int d : {8, 32}) {
        for (int dff : {16, 64}) {
            TransformerConfig cfg;
            cfg.d_model = d;
            cfg.heads = 4;
            cfg.d_ff = dff;
            CHECK(make_transformer_model(cfg, 1).parameter_count() ==
                  transformer_param_formula(static_cast<std::size_t>(d),
                                            static_cast<std::size_t>(dff)));
        }
    }
}

// ---- predict -------------------------------------------------------------------

TEST_CASE("predict: requires fitted normalization") {
    const auto model = make_conv_model(ConvConfig{}, 3);
    CHECK_THROWS_AS(model.predict(path_of_length(5)), StateError);
}

TEST_CASE("predict: constant-output model gives a constant series") {
    auto model = make_conv_model(ConvConfig{}, 3);
    model.normalization = identity_normalization();
    auto params = model.parameters();
    for (auto& p : params) p.value.mutable_value().setZero();
    // conv2 bias is the last block; make the constant visible
    for (auto& p : params) {
        if (p.name == "conv2.bias") p.value.mutable_value()(0, 0) = 0.65;
    }
    const auto pred = model.predict(path_of_length(14));
    REQUIRE(pred.size() == 14);
    for (double v : pred) CHECK(v == 0.65);
}

TEST_CASE("predict: output length tracks path length") {
    auto gru = make_gru_model(GruConfig{4}, 5);
    gru.normalization = identity_normalization();
    auto conv = make_conv_model(ConvConfig{}, 5);
    conv.normalization = identity_normalization();
    TransformerConfig tcfg;
    tcfg.d_model = 8;
    tcfg.heads = 2;
    tcfg.d_ff = 16;
    auto tr = make_transformer_model(tcfg, 5);
    tr.normalization = identity_normalization();

    for (std::size_t n : {std::size_t{1}, std::size_t{7}, std::size_t{100}, std::size_t{400}}) {
        const auto path = path_of_length(n);
        CHECK(gru.predict(path).size() == n);
        CHECK(conv.predict(path).size() == n);
        CHECK(tr.predict(path).size() == n);
    }
}

// ---- checkpoints ----------------------------------------------------------------

TEST_CASE("checkpoint: JSON round trip is bit-exact") {
    namespace fs = std::filesystem;
    TransformerConfig tcfg;
    tcfg.d_model = 8;
    tcfg.heads = 2;
    tcfg.d_ff = 16;
    tcfg.mask = MaskMode::causal;
    tcfg.positional = PositionalMode::sinusoidal;

    std::vector<SequenceModel> originals;
    originals.push_back(make_gru_model(GruConfig{6}, 11));
    originals.push_back(make_conv_model(ConvConfig{}, 12));
    originals.push_back(make_transformer_model(tcfg, 13));

    const auto path = path_of_length(9);
    for (auto& model : originals) {
        model.normalization = identity_normalization();
        model.normalization.shift = {0.01, -0.02, 0.5};
        model.normalization.scale = {1.2, 0.8, 2.0};

        const auto j = model_to_json(model);
        const auto back = model_from_json(j);
        CHECK(model_to_json(back).dump() == j.dump());
        CHECK(back.predict(path) == model.predict(path));
        CHECK(back.seed == model.seed);

        const auto file = fs::temp_directory_path() /
                          ("strainseq_model_" + std::string(to_string(model.architecture())) +
                           ".json");
        save_model(model, file);
        const auto loaded = load_model(file);
        CHECK(loaded.predict(path) == model.predict(path));
        fs::remove(file);
    }
}

TEST_CASE("checkpoint: malformed documents are rejected") {
    nlohmann::json j;
    j["format"] = "something-else";
    CHECK_THROWS_AS(model_from_json(j), SchemaError);
    CHECK_THROWS_AS(load_model("/nonexistent/strainseq-model.json"), IoError);
}

// ---- causality contracts ---------------------------------------------------------

TEST_CASE("causal architectures: prefix outputs equal full-run prefixes") {
    RngStream seed_rng(21);
    const Eigen::Index t = 30;

    auto check_prefix_stable = [&](auto&& forward) {
        RngStream rng(31);
        const Matrix features = random_matrix(t, kInputDim, rng);
        const Matrix full = forward(features);
        for (Eigen::Index cut : {Eigen::Index{1}, Eigen::Index{7}, Eigen::Index{15}, t - 1}) {
            const Matrix prefix = forward(features.topRows(cut).eval());
            for (Eigen::Index i = 0; i < cut; ++i) {
                CHECK(std::abs(prefix(i, 0) - full(i, 0)) <= 1e-12);
            }
        }
    };

    SUBCASE("conv causal") {
        ConvConfig cfg;
        cfg.filters = 4;
        cfg.kernel = 5;
        RngStream rng(22);
        Conv1dNet net(cfg, rng);
        check_prefix_stable([&](const Matrix& f) {
            return conv1d_forward(net, Value::constant(f)).value();
        });
    }

    SUBCASE("transformer causal, no positions") {
        TransformerConfig cfg;
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.d_ff = 16;
        cfg.mask = MaskMode::causal;
        RngStream rng(23);
        TransformerBlockNet net(cfg, rng);
        check_prefix_stable([&](const Matrix& f) {
            return transformer_forward(net, Value::constant(f)).value();
        });
    }

    SUBCASE("transformer causal, sinusoidal positions") {
        TransformerConfig cfg;
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.d_ff = 16;
        cfg.mask = MaskMode::causal;
        cfg.positional = PositionalMode::sinusoidal;
        RngStream rng(24);
        TransformerBlockNet net(cfg, rng);
        check_prefix_stable([&](const Matrix& f) {
            return transformer_forward(net, Value::constant(f)).value();
        });
    }

    SUBCASE("single GRU layer read incrementally") {
        RngStream rng(25);
        auto cell = random_cell(6, rng);
        auto head_w = Value::constant(random_matrix(6, 1, rng));
        const Matrix features = random_matrix(t, kInputDim, rng);

        auto run = [&](Eigen::Index len) {
            Value h = Value::constant(Matrix::Zero(1, 6));
            Matrix out(len, 1);
            for (Eigen::Index i = 0; i < len; ++i) {
                h = gru_cell_step(Value::constant(features.row(i).eval()), h, cell);
                out(i, 0) = autograd::matmul(h, head_w).value()(0, 0);
            }
            return out;
        };
        const Matrix full = run(t);
        for (Eigen::Index cut : {Eigen::Index{1}, Eigen::Index{12}, t - 1}) {
            const Matrix prefix = run(cut);
            for (Eigen::Index i = 0; i < cut; ++i) {
                CHECK(std::abs(prefix(i, 0) - full(i, 0)) <= 1e-12);
            }
        }
    }
}

TEST_CASE("non-causal architectures: prefixes genuinely deviate") {
    RngStream rng(26);
    const Eigen::Index t = 25;
    double worst_gru = 0.0, worst_tr = 0.0;

    for (int inst = 0; inst < 3; ++inst) {
        EncoderDecoderGru gru(GruConfig{6}, rng);
        TransformerConfig cfg;
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.d_ff = 16;
        cfg.mask = MaskMode::none;
        TransformerBlockNet tr(cfg, rng);

        for (int trial = 0; trial < 5; ++trial) {
            const Matrix features = random_matrix(t, kInputDim, rng);
            const Eigen::Index cut = t / 2;

            std::vector<Value> full_steps, prefix_steps;
            for (Eigen::Index i = 0; i < t; ++i) {
                full_steps.push_back(Value::constant(features.row(i).eval()));
                if (i < cut) prefix_steps.push_back(full_steps.back());
            }
            const auto g_full = encoder_decoder_forward(gru, full_steps).value();
            const auto g_pre = encoder_decoder_forward(gru, prefix_steps).value();
            for (Eigen::Index i = 0; i < cut; ++i) {
                worst_gru = std::max(worst_gru, std::abs(g_full(i, 0) - g_pre(i, 0)));
            }

            const auto t_full = transformer_forward(tr, Value::constant(features)).value();
            const auto t_pre =
                transformer_forward(tr, Value::constant(features.topRows(cut).eval())).value();
            for (Eigen::Index i = 0; i < cut; ++i) {
                worst_tr = std::max(worst_tr, std::abs(t_full(i, 0) - t_pre(i, 0)));
            }
        }
    }
    CHECK(worst_gru > 1e-6);
    CHECK(worst_tr > 1e-6);
}

TEST_CASE("architecture tags round trip through strings") {
    for (auto a : {Architecture::gru, Architecture::conv, Architecture::transformer}) {
        CHECK(architecture_from_string(to_string(a)) == a);
    }
    CHECK_THROWS_AS(architecture_from_string("mlp"), InvalidInputError);
    CHECK(padding_from_string("causal") == PaddingMode::causal);
    CHECK(mask_from_string("none") == MaskMode::none);
    CHECK(positional_from_string("sinusoidal") == PositionalMode::sinusoidal);
    CHECK_THROWS_AS(padding_from_string("same"), InvalidInputError);
}
