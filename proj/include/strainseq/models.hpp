#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "strainseq/autograd.hpp"
#include "strainseq/common.hpp"
#include "strainseq/dataset.hpp"
#include "strainseq/deformation.hpp"

namespace strainseq::models {

using autograd::Matrix;
using autograd::Value;

// Step features fed to every architecture: (eps1, eps2, phi).
inline constexpr int kInputDim = 3;

enum class Architecture { gru, conv, transformer };
std::string_view to_string(Architecture a);
Architecture architecture_from_string(std::string_view s);

enum class PaddingMode { causal, symmetric };
enum class MaskMode { none, causal };
enum class PositionalMode { none, sinusoidal };
std::string_view to_string(PaddingMode m);
PaddingMode padding_from_string(std::string_view s);
std::string_view to_string(MaskMode m);
MaskMode mask_from_string(std::string_view s);
std::string_view to_string(PositionalMode m);
PositionalMode positional_from_string(std::string_view s);

struct GruConfig {
    int hidden = 32;
    void validate() const;
};

struct ConvConfig {
    int filters = 32;
    int kernel = 5;
    PaddingMode padding = PaddingMode::causal;
    void validate() const;  // symmetric padding needs an odd kernel
};

struct TransformerConfig {
    int d_model = 32;
    int heads = 4;
    int d_ff = 64;
    double dropout = 0.1;  // both dropout sites share the rate
    MaskMode mask = MaskMode::none;
    PositionalMode positional = PositionalMode::none;
    void validate() const;  // d_model must divide evenly into heads
};

struct NamedParam {
    std::string name;
    Value value;
};

// One GRU cell's weights: input-to-hidden (x), hidden-to-hidden (h) and bias
// (b) for the update gate, reset gate, and candidate state.
struct GruCellParams {
    Value update_x, update_h, update_b;
    Value reset_x, reset_h, reset_b;
    Value cand_x, cand_h, cand_b;
};

//   z = sigmoid(x W_z + h U_z + b_z)
//   r = sigmoid(x W_r + h U_r + b_r)
//   c = tanh(x W_c + (r .* h) U_c + b_c)
//   h' = (1 - z) .* h + z .* c
// x is (batch x input_dim), h_prev is (batch x hidden).
Value gru_cell_step(const Value& x, const Value& h_prev, const GruCellParams& params);

// Encoder GRU consumes the whole sequence; its final hidden state becomes the
// decoder GRU's initial state; the decoder re-reads the same features and a
// linear head maps each decoder state to a scalar.
struct EncoderDecoderGru {
    GruConfig config;
    GruCellParams encoder;
    GruCellParams decoder;
    Value head_w, head_b;

    EncoderDecoderGru(const GruConfig& cfg, RngStream& rng);
    std::vector<NamedParam> parameters() const;
};

// x_steps[t] is the (batch x 3) feature matrix of step t; the result stacks
// the per-step predictions step-major as (n_steps * batch x 1): row t*batch+b
// is step t of batch item b. For batch 1 that is simply (n_steps x 1).
// Internally each GRU layer runs as one fused graph node with hand-rolled
// backpropagation-through-time; the op-level equivalent built from
// gru_cell_step produces bitwise-identical values and gradients but holds
// every intermediate alive, which is prohibitive for long batched sequences.
Value encoder_decoder_forward(const EncoderDecoderGru& net, std::span<const Value> x_steps);

// Two 1-D convolution layers over the step axis, ReLU between them, the
// second with a single output filter. Causal mode pads kernel-1 zero steps on
// the left; symmetric mode pads (kernel-1)/2 on each side (odd kernels).
// Layer weights are stored as ((channels * kernel) x filters) matrices, rows
// ordered tap-major: row j*channels + c is tap j, channel c.
struct Conv1dNet {
    ConvConfig config;
    Value conv1_w, conv1_b;
    Value conv2_w, conv2_b;

    Conv1dNet(const ConvConfig& cfg, RngStream& rng);
    std::vector<NamedParam> parameters() const;
};

// features is (T x 3); result is (T x 1).
Value conv1d_forward(const Conv1dNet& net, const Value& features);

// softmax(Q K^T / sqrt(d_k)) V with d_k = Q's column count. In causal mode
// row t's weights beyond column t are exactly 0.0: excluded entries never
// enter the exponentiation (equivalent to -inf logits).
Value scaled_dot_product_attention(const Value& q, const Value& k, const Value& v,
                                   MaskMode mask);

// Single pre-head transformer encoder block: linear embedding 3 -> d_model,
// optional sinusoidal positions, multi-head attention, and a position-wise
// feedforward, each followed by dropout + residual + layer norm; a linear
// head maps each position to a scalar.
struct TransformerBlockNet {
    TransformerConfig config;
    Value embed_w, embed_b;
    Value q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
    Value norm1_gain, norm1_bias;
    Value ff1_w, ff1_b, ff2_w, ff2_b;
    Value norm2_gain, norm2_bias;
    Value head_w, head_b;

    TransformerBlockNet(const TransformerConfig& cfg, RngStream& rng);
    std::vector<NamedParam> parameters() const;
};

// features is (T x 3); result is (T x 1). Training mode applies dropout and
// requires an RNG stream when the rate is nonzero.
Value transformer_forward(const TransformerBlockNet& net, const Value& features,
                          bool training = false, RngStream* dropout_rng = nullptr);

// The classic sinusoidal position table, (n_steps x d_model).
Matrix sinusoidal_positions(Eigen::Index n_steps, Eigen::Index d_model);

// A trainable sequence-to-sequence damage model: one of the three
// architectures plus the feature normalization fitted alongside it.
struct SequenceModel {
    std::variant<EncoderDecoderGru, Conv1dNet, TransformerBlockNet> net;
    dataset::NormalizationParams normalization;
    std::uint64_t seed = 0;

    Architecture architecture() const;
    std::vector<NamedParam> parameters() const;
    std::size_t parameter_count() const;

    // Builds the computation graph on already normalized (T x 3) features,
    // returning (T x 1) predictions.
    Value forward_features(const Value& features, bool training = false,
                           RngStream* dropout_rng = nullptr) const;

    // Inference on a raw path: applies the stored normalization to
    // (eps1, eps2, phi) per step and returns one damage prediction per step.
    // Requires fitted normalization.
    std::vector<double> predict(const deformation::LoadingPath& path) const;
};

SequenceModel make_gru_model(const GruConfig& cfg, std::uint64_t seed);
SequenceModel make_conv_model(const ConvConfig& cfg, std::uint64_t seed);
SequenceModel make_transformer_model(const TransformerConfig& cfg, std::uint64_t seed);

// Checkpoints: architecture tag, hyperparameters, normalization, creation
// seed, and all weights (row-major). JSON round trips are bit-exact.
nlohmann::json model_to_json(const SequenceModel& model);
SequenceModel model_from_json(const nlohmann::json& j);
void save_model(const SequenceModel& model, const std::filesystem::path& file);
SequenceModel load_model(const std::filesystem::path& file);

}  // namespace strainseq::models
