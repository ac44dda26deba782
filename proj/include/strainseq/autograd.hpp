#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "strainseq/common.hpp"

namespace strainseq::autograd {

using Matrix = Eigen::MatrixXd;

// One node of a define-by-run computation graph. `parents` are the operands
// the node was built from; `backprop` scatters the node's adjoint into the
// parents' grads. Grad matrices are allocated lazily during backward().
struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool is_parameter = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
};

// Shared handle to a graph node. Graphs are rebuilt every forward pass;
// parameters are long-lived nodes that successive graphs link to, so their
// grads accumulate across backward() calls until zero_grad().
class Value {
public:
    Value() = default;

    static Value constant(Matrix m);
    static Value parameter(Matrix m);
    // Adopts an op-built node; used by the op implementations below.
    static Value wrap(std::shared_ptr<Node> n);

    bool defined() const { return node_ != nullptr; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return checked().value.rows(); }
    Eigen::Index cols() const { return checked().value.cols(); }

    const Matrix& value() const { return checked().value; }
    // In-place mutation is only sound between graph builds (optimizer steps,
    // finite-difference probes); nodes downstream of an existing graph are
    // not recomputed.
    Matrix& mutable_value() { return checked().value; }

    const Matrix& grad() const;
    void zero_grad();

    // Internal handle for the op implementations.
    const std::shared_ptr<Node>& raw() const { return node_; }

private:
    explicit Value(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    Node& checked() const;
    std::shared_ptr<Node> node_;
};

// --- elementwise and broadcast arithmetic -------------------------------

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);  // elementwise
Value add_scalar(const Value& a, double s);
Value mul_scalar(const Value& a, double s);
// Broadcast a 1 x m row over every row of an n x m matrix.
Value add_rowwise(const Value& a, const Value& row);
Value mul_rowwise(const Value& a, const Value& row);

// --- structure ------------------------------------------------------------

Value matmul(const Value& a, const Value& b);
Value transpose(const Value& a);
Value block(const Value& a, Eigen::Index row0, Eigen::Index rows, Eigen::Index col0,
            Eigen::Index cols);
Value concat_rows(std::span<const Value> parts);
Value concat_cols(std::span<const Value> parts);

// --- nonlinearities ---------------------------------------------------------

Value sigmoid(const Value& a);
Value tanh(const Value& a);
Value relu(const Value& a);
// Row-wise softmax with a max shift for stability.
Value softmax_rows(const Value& a);
// Square score matrix where row i may only attend to columns 0..i. Excluded
// entries never enter the exponentiation, so their weights are exactly 0.0
// and entries of row i are bitwise independent of anything after step i.
Value softmax_rows_causal(const Value& a);
// Per-row standardization: (x - mean) / sqrt(var + eps), population variance.
Value layer_norm_rows(const Value& a, double eps = 1e-5);
// Inverted-scaling dropout: keep with probability 1-rate and divide by the
// keep rate during training; identity when training == false.
Value dropout(const Value& a, double rate, RngStream& rng, bool training);

// --- reductions -----------------------------------------------------------

Value sum(const Value& a);   // 1x1
Value mean(const Value& a);  // 1x1

// --- reverse pass and verification -----------------------------------------

// Reverse-mode sweep from a 1x1 root: visits each reachable grad-requiring
// node exactly once in reverse topological order and accumulates adjoints
// into Node::grad. Parameter grads are *not* cleared first; callers zero
// them between steps.
void backward(const Value& root);

void zero_grad(std::span<Value> params);

// Compares backward() gradients of `make_loss` against central finite
// differences for every coordinate of every input, returning the largest
// relative error  |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
// `make_loss` must rebuild the loss graph from the inputs' current values.
double gradient_check(const std::function<Value()>& make_loss, std::span<Value> inputs,
                      double h = 1e-6);

}  // namespace strainseq::autograd
