#include "strainseq/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>
#include <utility>

namespace strainseq::autograd {

namespace {

std::string shape_str(const Matrix& m) {
    return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

void check_defined(const Value& v, const char* op) {
    if (!v.defined()) throw StateError(std::string(op) + ": operand is an empty Value");
}

void check_same_shape(const char* op, const Value& a, const Value& b) {
    check_defined(a, op);
    check_defined(b, op);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
}

void check_row(const char* op, const Value& a, const Value& row) {
    check_defined(a, op);
    check_defined(row, op);
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError(std::string(op) + ": row operand must be (1x" +
                         std::to_string(a.cols()) + "), got " + shape_str(row.value()));
    }
}

std::shared_ptr<Node> make_op(Matrix value, std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents) n->requires_grad = n->requires_grad || p->requires_grad;
    return n;
}

Value finish(std::shared_ptr<Node> n, std::function<void(Node&)> backprop) {
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Value::wrap(std::move(n));
}

}  // namespace

Value Value::wrap(std::shared_ptr<Node> n) { return Value(std::move(n)); }

Value Value::constant(Matrix m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    return Value(std::move(n));
}

Value Value::parameter(Matrix m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    n->requires_grad = true;
    n->is_parameter = true;
    return Value(std::move(n));
}

Node& Value::checked() const {
    if (!node_) throw StateError("Value: use of an empty handle");
    return *node_;
}

const Matrix& Value::grad() const {
    Node& n = checked();
    if (!n.requires_grad) throw StateError("Value::grad: node does not require gradients");
    if (n.grad.size() == 0) throw StateError("Value::grad: no gradient has been accumulated");
    return n.grad;
}

void Value::zero_grad() {
    Node& n = checked();
    if (!n.requires_grad) throw StateError("Value::zero_grad: node does not require gradients");
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
}

void zero_grad(std::span<Value> params) {
    for (auto& p : params) p.zero_grad();
}

// --- arithmetic -------------------------------------------------------------

Value add(const Value& a, const Value& b) {
    check_same_shape("add", a, b);
    auto n = make_op(a.value() + b.value(), {a.raw(), b.raw()});
    Node *pa = n->parents[0].get(), *pb = n->parents[1].get();
    return finish(std::move(n), [pa, pb](Node& self) {
        if (pa->requires_grad) pa->grad += self.grad;
        if (pb->requires_grad) pb->grad += self.grad;
    });
}

Value sub(const Value& a, const Value& b) {
    check_same_shape("sub", a, b);
    auto n = make_op(a.value() - b.value(), {a.raw(), b.raw()});
    Node *pa = n->parents[0].get(), *pb = n->parents[1].get();
    return finish(std::move(n), [pa, pb](Node& self) {
        if (pa->requires_grad) pa->grad += self.grad;
        if (pb->requires_grad) pb->grad -= self.grad;
    });
}

Value mul(const Value& a, const Value& b) {
    check_same_shape("mul", a, b);
    auto n = make_op(a.value().cwiseProduct(b.value()), {a.raw(), b.raw()});
    Node *pa = n->parents[0].get(), *pb = n->parents[1].get();
    return finish(std::move(n), [pa, pb](Node& self) {
        if (pa->requires_grad) pa->grad += self.grad.cwiseProduct(pb->value);
        if (pb->requires_grad) pb->grad += self.grad.cwiseProduct(pa->value);
    });
}

Value add_scalar(const Value& a, double s) {
    check_defined(a, "add_scalar");
    auto n = make_op((a.value().array() + s).matrix(), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) {
        if (pa->requires_grad) pa->grad += self.grad;
    });
}

Value mul_scalar(const Value& a, double s) {
    check_defined(a, "mul_scalar");
    auto n = make_op(a.value() * s, {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa, s](Node& self) {
        if (pa->requires_grad) pa->grad += s * self.grad;
    });
}

Value add_rowwise(const Value& a, const Value& row) {
    check_row("add_rowwise", a, row);
    auto n = make_op(a.value() + row.value().replicate(a.rows(), 1), {a.raw(), row.raw()});
    Node *pa = n->parents[0].get(), *pr = n->parents[1].get();
    return finish(std::move(n), [pa, pr](Node& self) {
        if (pa->requires_grad) pa->grad += self.grad;
        if (pr->requires_grad) pr->grad += self.grad.colwise().sum();
    });
}

Value mul_rowwise(const Value& a, const Value& row) {
    check_row("mul_rowwise", a, row);
    auto n = make_op(a.value().cwiseProduct(row.value().replicate(a.rows(), 1)),
                     {a.raw(), row.raw()});
    Node *pa = n->parents[0].get(), *pr = n->parents[1].get();
    return finish(std::move(n), [pa, pr](Node& self) {
        if (pa->requires_grad) {
            pa->grad += self.grad.cwiseProduct(pr->value.replicate(self.grad.rows(), 1));
        }
        if (pr->requires_grad) pr->grad += self.grad.cwiseProduct(pa->value).colwise().sum();
    });
}

// --- structure ---------------------------------------------------------------

Value matmul(const Value& a, const Value& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.value()) + " * " +
                         shape_str(b.value()));
    }
    auto n = make_op(a.value() * b.value(), {a.raw(), b.raw()});
    Node *pa = n->parents[0].get(), *pb = n->parents[1].get();
    return finish(std::move(n), [pa, pb](Node& self) {
        if (pa->requires_grad) pa->grad.noalias() += self.grad * pb->value.transpose();
        if (pb->requires_grad) pb->grad.noalias() += pa->value.transpose() * self.grad;
    });
}

Value transpose(const Value& a) {
    check_defined(a, "transpose");
    auto n = make_op(a.value().transpose(), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) {
        if (pa->requires_grad) pa->grad += self.grad.transpose();
    });
}

Value block(const Value& a, Eigen::Index row0, Eigen::Index rows, Eigen::Index col0,
            Eigen::Index cols) {
    check_defined(a, "block");
    if (row0 < 0 || col0 < 0 || rows < 1 || cols < 1 || row0 + rows > a.rows() ||
        col0 + cols > a.cols()) {
        throw ShapeError("block: region [" + std::to_string(row0) + "+" + std::to_string(rows) +
                         ", " + std::to_string(col0) + "+" + std::to_string(cols) +
                         "] outside " + shape_str(a.value()));
    }
    auto n = make_op(a.value().block(row0, col0, rows, cols), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa, row0, rows, col0, cols](Node& self) {
        if (pa->requires_grad) pa->grad.block(row0, col0, rows, cols) += self.grad;
    });
}

Value concat_rows(std::span<const Value> parts) {
    if (parts.empty()) throw InvalidInputError("concat_rows: no operands");
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        check_defined(p, "concat_rows");
        if (p.cols() != parts[0].cols()) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.value()) + " vs " +
                             shape_str(parts[0].value()));
        }
        total += p.rows();
    }
    Matrix v(total, parts[0].cols());
    std::vector<std::shared_ptr<Node>> parents;
    parents.reserve(parts.size());
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleRows(off, p.rows()) = p.value();
        off += p.rows();
        parents.push_back(p.raw());
    }
    auto n = make_op(std::move(v), std::move(parents));
    return finish(std::move(n), [](Node& self) {
        Eigen::Index off = 0;
        for (const auto& p : self.parents) {
            if (p->requires_grad) p->grad += self.grad.middleRows(off, p->value.rows());
            off += p->value.rows();
        }
    });
}

Value concat_cols(std::span<const Value> parts) {
    if (parts.empty()) throw InvalidInputError("concat_cols: no operands");
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        check_defined(p, "concat_cols");
        if (p.rows() != parts[0].rows()) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.value()) + " vs " +
                             shape_str(parts[0].value()));
        }
        total += p.cols();
    }
    Matrix v(parts[0].rows(), total);
    std::vector<std::shared_ptr<Node>> parents;
    parents.reserve(parts.size());
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        off += p.cols();
        parents.push_back(p.raw());
    }
    auto n = make_op(std::move(v), std::move(parents));
    return finish(std::move(n), [](Node& self) {
        Eigen::Index off = 0;
        for (const auto& p : self.parents) {
            if (p->requires_grad) p->grad += self.grad.middleCols(off, p->value.cols());
            off += p->value.cols();
        }
    });
}

// --- nonlinearities -----------------------------------------------------------

Value sigmoid(const Value& a) {
    check_defined(a, "sigmoid");
    auto n = make_op((1.0 / (1.0 + (-a.value().array()).exp())).matrix(), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) {
        if (!pa->requires_grad) return;
        pa->grad.array() +=
            self.grad.array() * self.value.array() * (1.0 - self.value.array());
    });
}

Value tanh(const Value& a) {
    check_defined(a, "tanh");
    auto n = make_op(a.value().array().tanh().matrix(), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) {
        if (!pa->requires_grad) return;
        pa->grad.array() += self.grad.array() * (1.0 - self.value.array().square());
    });
}

Value relu(const Value& a) {
    check_defined(a, "relu");
    auto n = make_op(a.value().cwiseMax(0.0), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) {
        if (!pa->requires_grad) return;
        pa->grad.array() +=
            (pa->value.array() > 0.0).cast<double>() * self.grad.array();
    });
}

namespace {

// Shared softmax adjoint: dx = p .* (g - <g, p>) per row. Rows whose excluded
// entries hold exact zeros contribute exact zeros back, so the causal variant
// reuses it unchanged.
void softmax_backprop(Node* pa, Node& self) {
    if (!pa->requires_grad) return;
    for (Eigen::Index i = 0; i < self.value.rows(); ++i) {
        const double dot = self.grad.row(i).cwiseProduct(self.value.row(i)).sum();
        pa->grad.row(i).array() +=
            self.value.row(i).array() * (self.grad.row(i).array() - dot);
    }
}

}  // namespace

Value softmax_rows(const Value& a) {
    check_defined(a, "softmax_rows");
    const Matrix& m = a.value();
    Matrix v(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        Eigen::RowVectorXd e = (m.row(i).array() - mx).exp().matrix();
        v.row(i) = e / e.sum();
    }
    auto n = make_op(std::move(v), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) { softmax_backprop(pa, self); });
}

Value softmax_rows_causal(const Value& a) {
    check_defined(a, "softmax_rows_causal");
    const Matrix& m = a.value();
    if (m.rows() != m.cols()) {
        throw ShapeError("softmax_rows_causal: matrix must be square, got " + shape_str(m));
    }
    // Entries beyond the diagonal are excluded from the exponentiation rather
    // than masked with -inf, so they end up exactly 0.0 and row i is bitwise
    // independent of columns > i.
    Matrix v = Matrix::Zero(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const auto head = m.row(i).head(i + 1);
        const double mx = head.maxCoeff();
        Eigen::RowVectorXd e = (head.array() - mx).exp().matrix();
        v.row(i).head(i + 1) = e / e.sum();
    }
    auto n = make_op(std::move(v), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) { softmax_backprop(pa, self); });
}

Value layer_norm_rows(const Value& a, double eps) {
    check_defined(a, "layer_norm_rows");
    if (!(eps > 0.0)) {
        throw InvalidInputError("layer_norm_rows: eps must be positive, got " +
                                std::to_string(eps));
    }
    const Matrix& m = a.value();
    Matrix v(m.rows(), m.cols());
    std::vector<double> inv_std(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mu = m.row(i).mean();
        const double var = (m.row(i).array() - mu).square().mean();
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = inv;
        v.row(i) = ((m.row(i).array() - mu) * inv).matrix();
    }
    auto n = make_op(std::move(v), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa, inv_std = std::move(inv_std)](Node& self) {
        if (!pa->requires_grad) return;
        for (Eigen::Index i = 0; i < self.value.rows(); ++i) {
            const auto y = self.value.row(i).array();
            const auto gy = self.grad.row(i).array();
            const double mean_g = gy.mean();
            const double mean_gy = (gy * y).mean();
            pa->grad.row(i).array() +=
                inv_std[static_cast<std::size_t>(i)] * (gy - mean_g - y * mean_gy);
        }
    });
}

Value dropout(const Value& a, double rate, RngStream& rng, bool training) {
    check_defined(a, "dropout");
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw InvalidInputError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return a;  // identity at inference

    const double keep = 1.0 - rate;
    Matrix mask(a.rows(), a.cols());
    // Row-major draw order pins the mask to the stream position.
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
        for (Eigen::Index j = 0; j < mask.cols(); ++j) {
            mask(i, j) = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        }
    }
    auto n = make_op(a.value().cwiseProduct(mask), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa, mask = std::move(mask)](Node& self) {
        if (pa->requires_grad) pa->grad += self.grad.cwiseProduct(mask);
    });
}

// --- reductions -----------------------------------------------------------------

Value sum(const Value& a) {
    check_defined(a, "sum");
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    auto n = make_op(std::move(v), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) {
        if (pa->requires_grad) pa->grad.array() += self.grad(0, 0);
    });
}

Value mean(const Value& a) {
    check_defined(a, "mean");
    Matrix v(1, 1);
    v(0, 0) = a.value().mean();
    auto n = make_op(std::move(v), {a.raw()});
    Node* pa = n->parents[0].get();
    return finish(std::move(n), [pa](Node& self) {
        if (pa->requires_grad) {
            pa->grad.array() += self.grad(0, 0) / static_cast<double>(pa->value.size());
        }
    });
}

// --- reverse pass ----------------------------------------------------------------

void backward(const Value& root) {
    if (!root.defined()) throw StateError("backward: empty root");
    if (root.rows() != 1 || root.cols() != 1) {
        throw InvalidInputError("backward: root must be 1x1, got " + shape_str(root.value()));
    }
    Node* r = root.raw().get();
    if (!r->requires_grad) return;  // nothing reachable requires gradients

    // Iterative post-order DFS over grad-requiring ancestors; recursion is
    // not an option for step-chained graphs several thousand nodes deep.
    struct Frame {
        Node* n;
        std::size_t next = 0;
    };
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited{r};
    std::vector<Frame> stack{{r}};
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p});
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    // Fresh intermediates get zeroed here; parameters keep whatever they
    // have so grads accumulate until the caller clears them.
    for (Node* n : topo) {
        if (n->grad.size() == 0) n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
    }
    r->grad(0, 0) += 1.0;

    // Reversed post-order puts every consumer before the node it reads, so
    // each node's adjoint is final when its backprop runs; the visited set
    // above guarantees every node is processed exactly once.
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

double gradient_check(const std::function<Value()>& make_loss, std::span<Value> inputs,
                      double h) {
    if (!(h > 0.0)) throw InvalidInputError("gradient_check: h must be positive");
    if (inputs.empty()) throw InvalidInputError("gradient_check: no inputs to perturb");
    for (auto& v : inputs) {
        if (!v.defined() || !v.requires_grad()) {
            throw InvalidInputError("gradient_check: inputs must be parameters");
        }
        v.zero_grad();
    }

    Value loss = make_loss();
    if (loss.rows() != 1 || loss.cols() != 1) {
        throw ShapeError("gradient_check: loss must be 1x1, got " + shape_str(loss.value()));
    }
    backward(loss);
    std::vector<Matrix> analytic;
    analytic.reserve(inputs.size());
    for (auto& v : inputs) analytic.push_back(v.grad());

    double max_rel = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Matrix& x = inputs[k].mutable_value();
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                const double orig = x(i, j);
                x(i, j) = orig + h;
                const double up = make_loss().value()(0, 0);
                x(i, j) = orig - h;
                const double down = make_loss().value()(0, 0);
                x(i, j) = orig;
                const double fd = (up - down) / (2.0 * h);
                const double ad = analytic[k](i, j);
                const double rel =
                    std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
                max_rel = std::max(max_rel, rel);
            }
        }
    }
    return max_rel;
}

}  // namespace strainseq::autograd
