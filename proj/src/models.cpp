#include "strainseq/models.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <utility>

namespace strainseq::models {

using autograd::add;
using autograd::add_rowwise;
using autograd::block;
using autograd::concat_cols;
using autograd::concat_rows;
using autograd::dropout;
using autograd::layer_norm_rows;
using autograd::matmul;
using autograd::mul;
using autograd::mul_rowwise;
using autograd::mul_scalar;
using autograd::relu;
using autograd::sigmoid;
using autograd::softmax_rows;
using autograd::softmax_rows_causal;
using autograd::sub;
using autograd::transpose;

// --- enum names -------------------------------------------------------------

std::string_view to_string(Architecture a) {
    switch (a) {
        case Architecture::gru: return "gru";
        case Architecture::conv: return "conv";
        case Architecture::transformer: return "transformer";
    }
    throw StateError("to_string: bad Architecture value");
}

Architecture architecture_from_string(std::string_view s) {
    if (s == "gru") return Architecture::gru;
    if (s == "conv") return Architecture::conv;
    if (s == "transformer") return Architecture::transformer;
    throw InvalidInputError("unknown architecture '" + std::string(s) +
                            "' (expected gru, conv, or transformer)");
}

std::string_view to_string(PaddingMode m) {
    return m == PaddingMode::causal ? "causal" : "symmetric";
}

PaddingMode padding_from_string(std::string_view s) {
    if (s == "causal") return PaddingMode::causal;
    if (s == "symmetric") return PaddingMode::symmetric;
    throw InvalidInputError("unknown padding mode '" + std::string(s) + "'");
}

std::string_view to_string(MaskMode m) { return m == MaskMode::none ? "none" : "causal"; }

MaskMode mask_from_string(std::string_view s) {
    if (s == "none") return MaskMode::none;
    if (s == "causal") return MaskMode::causal;
    throw InvalidInputError("unknown mask mode '" + std::string(s) + "'");
}

std::string_view to_string(PositionalMode m) {
    return m == PositionalMode::none ? "none" : "sinusoidal";
}

PositionalMode positional_from_string(std::string_view s) {
    if (s == "none") return PositionalMode::none;
    if (s == "sinusoidal") return PositionalMode::sinusoidal;
    throw InvalidInputError("unknown positional mode '" + std::string(s) + "'");
}

// --- config validation ---------------------------------------------------------

void GruConfig::validate() const {
    if (hidden < 1) {
        throw InvalidInputError("GruConfig: hidden must be >= 1, got " + std::to_string(hidden));
    }
}

void ConvConfig::validate() const {
    if (filters < 1) {
        throw InvalidInputError("ConvConfig: filters must be >= 1, got " + std::to_string(filters));
    }
    if (kernel < 1) {
        throw InvalidInputError("ConvConfig: kernel must be >= 1, got " + std::to_string(kernel));
    }
    if (padding == PaddingMode::symmetric && kernel % 2 == 0) {
        throw InvalidInputError("ConvConfig: symmetric padding needs an odd kernel, got " +
                                std::to_string(kernel));
    }
}

void TransformerConfig::validate() const {
    if (d_model < 1 || heads < 1 || d_ff < 1) {
        throw InvalidInputError("TransformerConfig: d_model, heads, d_ff must be >= 1");
    }
    if (d_model % heads != 0) {
        throw InvalidInputError("TransformerConfig: d_model " + std::to_string(d_model) +
                                " is not divisible by heads " + std::to_string(heads));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw InvalidInputError("TransformerConfig: dropout must lie in [0, 1), got " +
                                std::to_string(dropout));
    }
}

// --- initialization ----------------------------------------------------------

namespace {

// Weights draw uniform [-sqrt(1/fan_in), +sqrt(1/fan_in)] with fan_in = row
// count (the x*W convention), filled row-major so the stream position pins
// every coefficient. Biases start at zero, layer-norm gains at one.
Value init_weight(Eigen::Index rows, Eigen::Index cols, RngStream& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(rows));
    Matrix w(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = rng.uniform(-bound, bound);
    }
    return Value::parameter(std::move(w));
}

Value zero_param(Eigen::Index rows, Eigen::Index cols) {
    return Value::parameter(Matrix::Zero(rows, cols));
}

Value ones_param(Eigen::Index rows, Eigen::Index cols) {
    return Value::parameter(Matrix::Ones(rows, cols));
}

GruCellParams make_gru_cell(int input_dim, int hidden, RngStream& rng) {
    GruCellParams p;
    p.update_x = init_weight(input_dim, hidden, rng);
    p.update_h = init_weight(hidden, hidden, rng);
    p.update_b = zero_param(1, hidden);
    p.reset_x = init_weight(input_dim, hidden, rng);
    p.reset_h = init_weight(hidden, hidden, rng);
    p.reset_b = zero_param(1, hidden);
    p.cand_x = init_weight(input_dim, hidden, rng);
    p.cand_h = init_weight(hidden, hidden, rng);
    p.cand_b = zero_param(1, hidden);
    return p;
}

void cell_params(std::vector<NamedParam>& out, const std::string& prefix,
                 const GruCellParams& p) {
    out.push_back({prefix + ".update_x", p.update_x});
    out.push_back({prefix + ".update_h", p.update_h});
    out.push_back({prefix + ".update_b", p.update_b});
    out.push_back({prefix + ".reset_x", p.reset_x});
    out.push_back({prefix + ".reset_h", p.reset_h});
    out.push_back({prefix + ".reset_b", p.reset_b});
    out.push_back({prefix + ".cand_x", p.cand_x});
    out.push_back({prefix + ".cand_h", p.cand_h});
    out.push_back({prefix + ".cand_b", p.cand_b});
}

}  // namespace

// --- GRU ---------------------------------------------------------------------

Value gru_cell_step(const Value& x, const Value& h_prev, const GruCellParams& p) {
    Value z = sigmoid(add_rowwise(add(matmul(x, p.update_x), matmul(h_prev, p.update_h)),
                                  p.update_b));
    Value r = sigmoid(add_rowwise(add(matmul(x, p.reset_x), matmul(h_prev, p.reset_h)),
                                  p.reset_b));
    Value cand = autograd::tanh(add_rowwise(
        add(matmul(x, p.cand_x), matmul(mul(r, h_prev), p.cand_h)), p.cand_b));
    Value keep = Value::constant(Matrix::Ones(h_prev.rows(), h_prev.cols()));
    return add(mul(sub(keep, z), h_prev), mul(z, cand));
}

EncoderDecoderGru::EncoderDecoderGru(const GruConfig& cfg, RngStream& rng) : config(cfg) {
    config.validate();
    encoder = make_gru_cell(kInputDim, config.hidden, rng);
    decoder = make_gru_cell(kInputDim, config.hidden, rng);
    head_w = init_weight(config.hidden, 1, rng);
    head_b = zero_param(1, 1);
}

std::vector<NamedParam> EncoderDecoderGru::parameters() const {
    std::vector<NamedParam> out;
    out.reserve(20);
    cell_params(out, "encoder", encoder);
    cell_params(out, "decoder", decoder);
    out.push_back({"head.weight", head_w});
    out.push_back({"head.bias", head_b});
    return out;
}

namespace {

// Fused GRU layer run: one graph node for the whole sequence. The forward
// pass mirrors gru_cell_step expression for expression, so values (and hence
// gradients) match the op-built graph bitwise; the node caches the per-step
// gates and states and replays them in the hand-written BPTT loop below.
// Memory: 4 (batch x hidden) matrices per step instead of ~40 graph nodes.
struct GruRunCache {
    std::vector<Matrix> h;  // h[0] = initial state, h[t+1] = state after step t
    std::vector<Matrix> z, r, c;
};

struct GruRunParents {
    autograd::Node* update_x;
    autograd::Node* update_h;
    autograd::Node* update_b;
    autograd::Node* reset_x;
    autograd::Node* reset_h;
    autograd::Node* reset_b;
    autograd::Node* cand_x;
    autograd::Node* cand_h;
    autograd::Node* cand_b;
    autograd::Node* h0;
    std::vector<autograd::Node*> x;
};

// Runs the cell over x_steps from h0. collect_all stacks all T states
// step-major as (T*batch x hidden); otherwise the value is the final state.
Value gru_run(const GruCellParams& p, std::span<const Value> x_steps, const Value& h0,
              bool collect_all) {
    const auto t_steps = static_cast<Eigen::Index>(x_steps.size());
    const Eigen::Index batch = h0.rows();
    const Eigen::Index hidden = h0.cols();

    auto cache = std::make_shared<GruRunCache>();
    cache->h.reserve(static_cast<std::size_t>(t_steps) + 1);
    cache->z.reserve(static_cast<std::size_t>(t_steps));
    cache->r.reserve(static_cast<std::size_t>(t_steps));
    cache->c.reserve(static_cast<std::size_t>(t_steps));
    cache->h.push_back(h0.value());

    const Matrix& w_z = p.update_x.value();
    const Matrix& u_z = p.update_h.value();
    const Matrix& b_z = p.update_b.value();
    const Matrix& w_r = p.reset_x.value();
    const Matrix& u_r = p.reset_h.value();
    const Matrix& b_r = p.reset_b.value();
    const Matrix& w_c = p.cand_x.value();
    const Matrix& u_c = p.cand_h.value();
    const Matrix& b_c = p.cand_b.value();

    for (const auto& xv : x_steps) {
        const Matrix& x = xv.value();
        const Matrix& h_prev = cache->h.back();
        const Matrix a_z = (x * w_z + h_prev * u_z) + b_z.replicate(batch, 1);
        Matrix z = (1.0 / (1.0 + (-a_z.array()).exp())).matrix();
        const Matrix a_r = (x * w_r + h_prev * u_r) + b_r.replicate(batch, 1);
        Matrix r = (1.0 / (1.0 + (-a_r.array()).exp())).matrix();
        const Matrix a_c =
            (x * w_c + r.cwiseProduct(h_prev) * u_c) + b_c.replicate(batch, 1);
        Matrix c = a_c.array().tanh().matrix();
        Matrix h_next =
            ((1.0 - z.array()) * h_prev.array() + z.array() * c.array()).matrix();
        cache->z.push_back(std::move(z));
        cache->r.push_back(std::move(r));
        cache->c.push_back(std::move(c));
        cache->h.push_back(std::move(h_next));
    }

    Matrix out;
    if (collect_all) {
        out.resize(t_steps * batch, hidden);
        for (Eigen::Index t = 0; t < t_steps; ++t) {
            out.middleRows(t * batch, batch) = cache->h[static_cast<std::size_t>(t) + 1];
        }
    } else {
        out = cache->h.back();
    }

    std::vector<std::shared_ptr<autograd::Node>> parents = {
        p.update_x.raw(), p.update_h.raw(), p.update_b.raw(),
        p.reset_x.raw(),  p.reset_h.raw(),  p.reset_b.raw(),
        p.cand_x.raw(),   p.cand_h.raw(),   p.cand_b.raw(),
        h0.raw()};
    GruRunParents ptr{parents[0].get(), parents[1].get(), parents[2].get(),
                      parents[3].get(), parents[4].get(), parents[5].get(),
                      parents[6].get(), parents[7].get(), parents[8].get(),
                      parents[9].get(),
                      {}};
    ptr.x.reserve(static_cast<std::size_t>(t_steps));
    for (const auto& xv : x_steps) {
        parents.push_back(xv.raw());
        ptr.x.push_back(xv.raw().get());
    }

    auto node = std::make_shared<autograd::Node>();
    node->value = std::move(out);
    node->parents = std::move(parents);
    for (const auto& par : node->parents) {
        node->requires_grad = node->requires_grad || par->requires_grad;
    }
    if (node->requires_grad) {
        node->backprop = [cache, ptr, batch, collect_all](autograd::Node& self) {
            const auto t_steps = static_cast<Eigen::Index>(cache->z.size());
            const Matrix& u_z = ptr.update_h->value;
            const Matrix& u_r = ptr.reset_h->value;
            const Matrix& u_c = ptr.cand_h->value;
            const Matrix& w_z = ptr.update_x->value;
            const Matrix& w_r = ptr.reset_x->value;
            const Matrix& w_c = ptr.cand_x->value;

            Matrix dh = collect_all
                            ? Matrix(Matrix::Zero(batch, self.value.cols()))
                            : self.grad;
            for (Eigen::Index t = t_steps - 1; t >= 0; --t) {
                if (collect_all) dh += self.grad.middleRows(t * batch, batch);
                const auto ti = static_cast<std::size_t>(t);
                const Matrix& h_prev = cache->h[ti];
                const Matrix& z = cache->z[ti];
                const Matrix& r = cache->r[ti];
                const Matrix& c = cache->c[ti];
                const Matrix& x = ptr.x[ti]->value;

                const Matrix dz = dh.cwiseProduct(c - h_prev);
                const Matrix dc = dh.cwiseProduct(z);
                Matrix dh_prev = (dh.array() * (1.0 - z.array())).matrix();

                const Matrix da_c = (dc.array() * (1.0 - c.array().square())).matrix();
                if (ptr.cand_x->requires_grad) {
                    ptr.cand_x->grad.noalias() += x.transpose() * da_c;
                }
                if (ptr.cand_h->requires_grad) {
                    ptr.cand_h->grad.noalias() +=
                        r.cwiseProduct(h_prev).transpose() * da_c;
                }
                if (ptr.cand_b->requires_grad) ptr.cand_b->grad += da_c.colwise().sum();
                const Matrix drh = da_c * u_c.transpose();
                const Matrix dr = drh.cwiseProduct(h_prev);
                dh_prev += drh.cwiseProduct(r);

                const Matrix da_z =
                    (dz.array() * z.array() * (1.0 - z.array())).matrix();
                const Matrix da_r =
                    (dr.array() * r.array() * (1.0 - r.array())).matrix();
                if (ptr.update_x->requires_grad) {
                    ptr.update_x->grad.noalias() += x.transpose() * da_z;
                }
                if (ptr.update_h->requires_grad) {
                    ptr.update_h->grad.noalias() += h_prev.transpose() * da_z;
                }
                if (ptr.update_b->requires_grad) ptr.update_b->grad += da_z.colwise().sum();
                if (ptr.reset_x->requires_grad) {
                    ptr.reset_x->grad.noalias() += x.transpose() * da_r;
                }
                if (ptr.reset_h->requires_grad) {
                    ptr.reset_h->grad.noalias() += h_prev.transpose() * da_r;
                }
                if (ptr.reset_b->requires_grad) ptr.reset_b->grad += da_r.colwise().sum();

                dh_prev.noalias() += da_z * u_z.transpose();
                dh_prev.noalias() += da_r * u_r.transpose();
                if (ptr.x[ti]->requires_grad) {
                    ptr.x[ti]->grad.noalias() += da_z * w_z.transpose();
                    ptr.x[ti]->grad.noalias() += da_r * w_r.transpose();
                    ptr.x[ti]->grad.noalias() += da_c * w_c.transpose();
                }
                dh = std::move(dh_prev);
            }
            if (ptr.h0->requires_grad) ptr.h0->grad += dh;
        };
    }
    return Value::wrap(std::move(node));
}

}  // namespace

Value encoder_decoder_forward(const EncoderDecoderGru& net, std::span<const Value> x_steps) {
    if (x_steps.empty()) {
        throw InvalidInputError("encoder_decoder_forward: empty step sequence");
    }
    const Eigen::Index batch = x_steps[0].rows();
    for (const auto& x : x_steps) {
        if (x.cols() != kInputDim || x.rows() != batch) {
            throw ShapeError("encoder_decoder_forward: every step must be (" +
                             std::to_string(batch) + "x" + std::to_string(kInputDim) + ")");
        }
    }
    const Value h0 = Value::constant(Matrix::Zero(batch, net.config.hidden));
    const Value encoded = gru_run(net.encoder, x_steps, h0, false);
    const Value states = gru_run(net.decoder, x_steps, encoded, true);  // (T*batch x hidden)
    return add_rowwise(matmul(states, net.head_w), net.head_b);         // (T*batch x 1)
}

// --- 1D convolution ---------------------------------------------------------

Conv1dNet::Conv1dNet(const ConvConfig& cfg, RngStream& rng) : config(cfg) {
    config.validate();
    conv1_w = init_weight(static_cast<Eigen::Index>(kInputDim) * config.kernel, config.filters,
                          rng);
    conv1_b = zero_param(1, config.filters);
    conv2_w = init_weight(static_cast<Eigen::Index>(config.filters) * config.kernel, 1, rng);
    conv2_b = zero_param(1, 1);
}

std::vector<NamedParam> Conv1dNet::parameters() const {
    return {{"conv1.weight", conv1_w},
            {"conv1.bias", conv1_b},
            {"conv2.weight", conv2_w},
            {"conv2.bias", conv2_b}};
}

namespace {

// One convolution layer as im2col + matmul: gather the k taps as column
// blocks (tap-major), multiply by the ((channels*k) x filters) weight.
Value conv_layer(const Value& x, const Value& w, const Value& b, int kernel,
                 PaddingMode padding) {
    const Eigen::Index t = x.rows();
    const Eigen::Index channels = x.cols();
    const Eigen::Index left =
        padding == PaddingMode::causal ? kernel - 1 : (kernel - 1) / 2;
    const Eigen::Index right = padding == PaddingMode::causal ? 0 : (kernel - 1) / 2;

    std::vector<Value> parts;
    if (left > 0) parts.push_back(Value::constant(Matrix::Zero(left, channels)));
    parts.push_back(x);
    if (right > 0) parts.push_back(Value::constant(Matrix::Zero(right, channels)));
    const Value padded = parts.size() == 1 ? x : concat_rows(parts);

    std::vector<Value> taps;
    taps.reserve(static_cast<std::size_t>(kernel));
    for (int j = 0; j < kernel; ++j) taps.push_back(block(padded, j, t, 0, channels));
    const Value gathered = taps.size() == 1 ? taps[0] : concat_cols(taps);
    return add_rowwise(matmul(gathered, w), b);
}

}  // namespace

Value conv1d_forward(const Conv1dNet& net, const Value& features) {
    if (features.cols() != kInputDim) {
        throw ShapeError("conv1d_forward: features must have " + std::to_string(kInputDim) +
                         " columns, got " + std::to_string(features.cols()));
    }
    const Value hidden =
        relu(conv_layer(features, net.conv1_w, net.conv1_b, net.config.kernel,
                        net.config.padding));
    return conv_layer(hidden, net.conv2_w, net.conv2_b, net.config.kernel, net.config.padding);
}

// --- transformer -------------------------------------------------------------

Value scaled_dot_product_attention(const Value& q, const Value& k, const Value& v,
                                   MaskMode mask) {
    if (q.cols() != k.cols()) {
        throw ShapeError("attention: Q width " + std::to_string(q.cols()) +
                         " differs from K width " + std::to_string(k.cols()));
    }
    if (k.rows() != v.rows()) {
        throw ShapeError("attention: K rows " + std::to_string(k.rows()) +
                         " differ from V rows " + std::to_string(v.rows()));
    }
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    const Value scores = mul_scalar(matmul(q, transpose(k)), inv_sqrt_dk);
    const Value weights =
        mask == MaskMode::causal ? softmax_rows_causal(scores) : softmax_rows(scores);
    return matmul(weights, v);
}

Matrix sinusoidal_positions(Eigen::Index n_steps, Eigen::Index d_model) {
    Matrix pe(n_steps, d_model);
    for (Eigen::Index t = 0; t < n_steps; ++t) {
        for (Eigen::Index j = 0; j < d_model; ++j) {
            const double exponent =
                static_cast<double>(j - (j % 2)) / static_cast<double>(d_model);
            const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
            pe(t, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

TransformerBlockNet::TransformerBlockNet(const TransformerConfig& cfg, RngStream& rng)
    : config(cfg) {
    config.validate();
    const Eigen::Index d = config.d_model;
    embed_w = init_weight(kInputDim, d, rng);
    embed_b = zero_param(1, d);
    q_w = init_weight(d, d, rng);
    q_b = zero_param(1, d);
    k_w = init_weight(d, d, rng);
    k_b = zero_param(1, d);
    v_w = init_weight(d, d, rng);
    v_b = zero_param(1, d);
    out_w = init_weight(d, d, rng);
    out_b = zero_param(1, d);
    norm1_gain = ones_param(1, d);
    norm1_bias = zero_param(1, d);
    ff1_w = init_weight(d, config.d_ff, rng);
    ff1_b = zero_param(1, config.d_ff);
    ff2_w = init_weight(config.d_ff, d, rng);
    ff2_b = zero_param(1, d);
    norm2_gain = ones_param(1, d);
    norm2_bias = zero_param(1, d);
    head_w = init_weight(d, 1, rng);
    head_b = zero_param(1, 1);
}

std::vector<NamedParam> TransformerBlockNet::parameters() const {
    return {{"embed.weight", embed_w}, {"embed.bias", embed_b},
            {"attn.q.weight", q_w},    {"attn.q.bias", q_b},
            {"attn.k.weight", k_w},    {"attn.k.bias", k_b},
            {"attn.v.weight", v_w},    {"attn.v.bias", v_b},
            {"attn.out.weight", out_w}, {"attn.out.bias", out_b},
            {"norm1.gain", norm1_gain}, {"norm1.bias", norm1_bias},
            {"ffn.w1", ff1_w},          {"ffn.b1", ff1_b},
            {"ffn.w2", ff2_w},          {"ffn.b2", ff2_b},
            {"norm2.gain", norm2_gain}, {"norm2.bias", norm2_bias},
            {"head.weight", head_w},    {"head.bias", head_b}};
}

Value transformer_forward(const TransformerBlockNet& net, const Value& features, bool training,
                          RngStream* dropout_rng) {
    if (features.cols() != kInputDim) {
        throw ShapeError("transformer_forward: features must have " +
                         std::to_string(kInputDim) + " columns, got " +
                         std::to_string(features.cols()));
    }
    const auto& cfg = net.config;
    const bool use_dropout = training && cfg.dropout > 0.0;
    if (use_dropout && dropout_rng == nullptr) {
        throw StateError("transformer_forward: training-mode dropout requires an RNG stream");
    }

    Value e = add_rowwise(matmul(features, net.embed_w), net.embed_b);
    if (cfg.positional == PositionalMode::sinusoidal) {
        e = add(e, Value::constant(sinusoidal_positions(features.rows(), cfg.d_model)));
    }

    const Value q = add_rowwise(matmul(e, net.q_w), net.q_b);
    const Value k = add_rowwise(matmul(e, net.k_w), net.k_b);
    const Value v = add_rowwise(matmul(e, net.v_w), net.v_b);
    const Eigen::Index d_k = cfg.d_model / cfg.heads;
    const Eigen::Index t = features.rows();
    std::vector<Value> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
        const Eigen::Index c0 = static_cast<Eigen::Index>(h) * d_k;
        heads.push_back(scaled_dot_product_attention(block(q, 0, t, c0, d_k),
                                                     block(k, 0, t, c0, d_k),
                                                     block(v, 0, t, c0, d_k), cfg.mask));
    }
    Value attn = heads.size() == 1 ? heads[0] : concat_cols(heads);
    attn = add_rowwise(matmul(attn, net.out_w), net.out_b);
    // Dropout draws run attention-site first, feedforward-site second.
    if (use_dropout) attn = dropout(attn, cfg.dropout, *dropout_rng, true);

    Value s1 = add(e, attn);
    s1 = add_rowwise(mul_rowwise(layer_norm_rows(s1), net.norm1_gain), net.norm1_bias);

    Value f = add_rowwise(matmul(relu(add_rowwise(matmul(s1, net.ff1_w), net.ff1_b)), net.ff2_w),
                          net.ff2_b);
    if (use_dropout) f = dropout(f, cfg.dropout, *dropout_rng, true);

    Value s2 = add(s1, f);
    s2 = add_rowwise(mul_rowwise(layer_norm_rows(s2), net.norm2_gain), net.norm2_bias);
    return add_rowwise(matmul(s2, net.head_w), net.head_b);
}

// --- SequenceModel ------------------------------------------------------------

Architecture SequenceModel::architecture() const {
    if (std::holds_alternative<EncoderDecoderGru>(net)) return Architecture::gru;
    if (std::holds_alternative<Conv1dNet>(net)) return Architecture::conv;
    return Architecture::transformer;
}

std::vector<NamedParam> SequenceModel::parameters() const {
    return std::visit([](const auto& n) { return n.parameters(); }, net);
}

std::size_t SequenceModel::parameter_count() const {
    std::size_t count = 0;
    for (const auto& p : parameters()) count += static_cast<std::size_t>(p.value.value().size());
    return count;
}

Value SequenceModel::forward_features(const Value& features, bool training,
                                      RngStream* dropout_rng) const {
    if (features.cols() != kInputDim) {
        throw ShapeError("forward_features: features must have " + std::to_string(kInputDim) +
                         " columns, got " + std::to_string(features.cols()));
    }
    if (features.rows() < 1) {
        throw ShapeError("forward_features: need at least one step");
    }
    if (const auto* gru = std::get_if<EncoderDecoderGru>(&net)) {
        std::vector<Value> steps;
        steps.reserve(static_cast<std::size_t>(features.rows()));
        for (Eigen::Index i = 0; i < features.rows(); ++i) {
            steps.push_back(block(features, i, 1, 0, kInputDim));
        }
        // Batch 1, so the stacked (T*1 x 1) output is already per-step order.
        return encoder_decoder_forward(*gru, steps);
    }
    if (const auto* conv = std::get_if<Conv1dNet>(&net)) {
        return conv1d_forward(*conv, features);
    }
    return transformer_forward(std::get<TransformerBlockNet>(net), features, training,
                               dropout_rng);
}

std::vector<double> SequenceModel::predict(const deformation::LoadingPath& path) const {
    if (!normalization.fitted) {
        throw StateError("predict: model carries no fitted normalization parameters");
    }
    const std::size_t n = path.size();
    if (n == 0) throw InvalidInputError("predict: empty path");
    if (path.eps2.size() != n || path.phi.size() != n) {
        throw ShapeError("predict: path " + std::to_string(path.path_id) +
                         " has unequal feature lengths");
    }
    Matrix f(static_cast<Eigen::Index>(n), kInputDim);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        f(r, 0) = (path.eps1[i] - normalization.shift[0]) / normalization.scale[0];
        f(r, 1) = (path.eps2[i] - normalization.shift[1]) / normalization.scale[1];
        f(r, 2) = (path.phi[i] - normalization.shift[2]) / normalization.scale[2];
    }
    const Value out = forward_features(Value::constant(std::move(f)), false, nullptr);
    std::vector<double> pred(n);
    for (std::size_t i = 0; i < n; ++i) pred[i] = out.value()(static_cast<Eigen::Index>(i), 0);
    return pred;
}

SequenceModel make_gru_model(const GruConfig& cfg, std::uint64_t seed) {
    RngStream rng(seed);
    return SequenceModel{EncoderDecoderGru(cfg, rng), {}, seed};
}

SequenceModel make_conv_model(const ConvConfig& cfg, std::uint64_t seed) {
    RngStream rng(seed);
    return SequenceModel{Conv1dNet(cfg, rng), {}, seed};
}

SequenceModel make_transformer_model(const TransformerConfig& cfg, std::uint64_t seed) {
    RngStream rng(seed);
    return SequenceModel{TransformerBlockNet(cfg, rng), {}, seed};
}

// --- serialization -------------------------------------------------------------

namespace {

nlohmann::json matrix_data(const Matrix& m) {
    nlohmann::json data = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
    }
    return data;
}

}  // namespace

nlohmann::json model_to_json(const SequenceModel& model) {
    nlohmann::json j;
    j["format"] = "strainseq-model";
    j["version"] = 1;
    j["architecture"] = std::string(to_string(model.architecture()));
    j["seed"] = model.seed;

    nlohmann::json hp;
    if (const auto* gru = std::get_if<EncoderDecoderGru>(&model.net)) {
        hp["hidden"] = gru->config.hidden;
    } else if (const auto* conv = std::get_if<Conv1dNet>(&model.net)) {
        hp["filters"] = conv->config.filters;
        hp["kernel"] = conv->config.kernel;
        hp["padding"] = std::string(to_string(conv->config.padding));
    } else {
        const auto& cfg = std::get<TransformerBlockNet>(model.net).config;
        hp["d_model"] = cfg.d_model;
        hp["heads"] = cfg.heads;
        hp["d_ff"] = cfg.d_ff;
        hp["dropout"] = cfg.dropout;
        hp["mask"] = std::string(to_string(cfg.mask));
        hp["positional"] = std::string(to_string(cfg.positional));
    }
    j["hyperparameters"] = std::move(hp);

    j["normalization"] = {
        {"shift", model.normalization.shift},
        {"scale", model.normalization.scale},
        {"degenerate", model.normalization.degenerate},
        {"fitted", model.normalization.fitted},
    };

    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.parameters()) {
        const Matrix& w = p.value.value();
        params.push_back({{"name", p.name},
                          {"rows", w.rows()},
                          {"cols", w.cols()},
                          {"data", matrix_data(w)}});
    }
    j["parameters"] = std::move(params);
    return j;
}

SequenceModel model_from_json(const nlohmann::json& j) {
    try {
        const std::string format = j.at("format").get<std::string>();
        if (format != "strainseq-model") {
            throw SchemaError("model json: unexpected format tag '" + format + "'");
        }
        const auto arch = architecture_from_string(j.at("architecture").get<std::string>());
        const auto seed = j.at("seed").get<std::uint64_t>();
        const auto& hp = j.at("hyperparameters");

        SequenceModel model = [&] {
            switch (arch) {
                case Architecture::gru: {
                    GruConfig cfg;
                    cfg.hidden = hp.at("hidden").get<int>();
                    return make_gru_model(cfg, seed);
                }
                case Architecture::conv: {
                    ConvConfig cfg;
                    cfg.filters = hp.at("filters").get<int>();
                    cfg.kernel = hp.at("kernel").get<int>();
                    cfg.padding = padding_from_string(hp.at("padding").get<std::string>());
                    return make_conv_model(cfg, seed);
                }
                case Architecture::transformer: {
                    TransformerConfig cfg;
                    cfg.d_model = hp.at("d_model").get<int>();
                    cfg.heads = hp.at("heads").get<int>();
                    cfg.d_ff = hp.at("d_ff").get<int>();
                    cfg.dropout = hp.at("dropout").get<double>();
                    cfg.mask = mask_from_string(hp.at("mask").get<std::string>());
                    cfg.positional =
                        positional_from_string(hp.at("positional").get<std::string>());
                    return make_transformer_model(cfg, seed);
                }
            }
            throw SchemaError("model json: bad architecture");
        }();

        const auto& norm = j.at("normalization");
        model.normalization.shift = norm.at("shift").get<std::array<double, 3>>();
        model.normalization.scale = norm.at("scale").get<std::array<double, 3>>();
        model.normalization.degenerate = norm.at("degenerate").get<std::array<bool, 3>>();
        model.normalization.fitted = norm.at("fitted").get<bool>();

        std::map<std::string, const nlohmann::json*> stored;
        for (const auto& entry : j.at("parameters")) {
            stored[entry.at("name").get<std::string>()] = &entry;
        }
        auto params = model.parameters();
        if (stored.size() != params.size()) {
            throw SchemaError("model json: expected " + std::to_string(params.size()) +
                              " parameter blocks, found " + std::to_string(stored.size()));
        }
        for (auto& p : params) {
            const auto it = stored.find(p.name);
            if (it == stored.end()) {
                throw SchemaError("model json: missing parameter block '" + p.name + "'");
            }
            const auto& entry = *it->second;
            const auto rows = entry.at("rows").get<Eigen::Index>();
            const auto cols = entry.at("cols").get<Eigen::Index>();
            Matrix& w = p.value.mutable_value();
            if (rows != w.rows() || cols != w.cols()) {
                throw SchemaError("model json: parameter '" + p.name + "' has shape " +
                                  std::to_string(rows) + "x" + std::to_string(cols) +
                                  ", expected " + std::to_string(w.rows()) + "x" +
                                  std::to_string(w.cols()));
            }
            const auto& data = entry.at("data");
            if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
                throw SchemaError("model json: parameter '" + p.name + "' data length " +
                                  std::to_string(data.size()) + " != " +
                                  std::to_string(rows * cols));
            }
            std::size_t idx = 0;
            for (Eigen::Index r = 0; r < rows; ++r) {
                for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = data[idx++].get<double>();
            }
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("model json: ") + e.what());
    }
}

void save_model(const SequenceModel& model, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open '" + file.string() + "' for writing");
    out << model_to_json(model).dump(2) << '\n';
    if (!out) throw IoError("write to '" + file.string() + "' failed");
}

SequenceModel load_model(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open '" + file.string() + "' for reading");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("'" + file.string() + "': " + e.what());
    }
    return model_from_json(j);
}

}  // namespace strainseq::models
