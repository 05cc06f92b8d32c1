#include "batcl/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

namespace batcl {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// ParameterStore
// ---------------------------------------------------------------------------

void ParameterStore::add(const std::string& name, Mat value) {
    if (name.empty()) throw Error("ParameterStore: empty parameter name");
    if (contains(name)) throw Error("ParameterStore: duplicate parameter '" + name + "'");
    if (!value.allFinite())
        throw Error("ParameterStore: non-finite values in parameter '" + name + "'");
    Entry e;
    e.grad = Mat::Zero(value.rows(), value.cols());
    e.value = std::move(value);
    names_.push_back(name);
    index_.emplace(name, std::move(e));
}

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParameterStore: unknown parameter '" + name + "'");
    return it->second;
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParameterStore: unknown parameter '" + name + "'");
    return it->second;
}

void ParameterStore::zero_grads() {
    for (auto& [name, e] : index_) e.grad.setZero();
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : index_) n += static_cast<std::size_t>(e.value.size());
    return n;
}

std::map<std::string, Mat> ParameterStore::snapshot_values() const {
    std::map<std::string, Mat> out;
    for (const auto& [name, e] : index_) out.emplace(name, e.value);
    return out;
}

std::map<std::string, Mat> ParameterStore::snapshot_grads() const {
    std::map<std::string, Mat> out;
    for (const auto& [name, e] : index_) out.emplace(name, e.grad);
    return out;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Node& Tape::node(Value v) {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw Error("Tape: value handle does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Value v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw Error("Tape: value handle does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Value Tape::leaf(Mat value) {
    if (frozen_) throw Error("Tape: cannot record after backward");
    if (check_finite_ && !value.allFinite()) throw Error("leaf: non-finite input rejected");
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::param(ParameterStore& store, const std::string& name) {
    if (frozen_) throw Error("Tape: cannot record after backward");
    const Mat& v = store.value(name);
    if (check_finite_ && !v.allFinite())
        throw Error("param: non-finite values in parameter '" + name + "'");
    Node n;
    n.value = v;
    n.store = &store;
    n.param_name = name;
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

const Mat& Tape::value(Value v) const { return node(v).value; }

Mat Tape::node_grad(Value v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
}

void Tape::add_grad(int id, const Mat& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

void Tape::backward(Value root) {
    const Node& r = node(root);
    if (r.value.rows() != 1 || r.value.cols() != 1)
        throw Error("backward: root must be a scalar, got " + shape_str(r.value));
    frozen_ = true;
    for (auto& n : nodes_) n.has_grad = false;
    add_grad(root.id, Mat::Ones(1, 1));
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.has_grad || !n.backprop) continue;
        n.backprop(*this);
    }
    for (auto& n : nodes_) {
        if (n.store && n.has_grad) n.store->grad(n.param_name) += n.grad;
    }
}

// Shared recording helper for all ops.
Value record_op(Tape& tape, const char* op, Mat out, std::function<void(Tape&)> backprop) {
    if (tape.frozen_) throw Error("Tape: cannot record after backward");
    if (tape.check_finite_ && !out.allFinite())
        throw Error(std::string(op) + ": non-finite values in result");
    Tape::Node n;
    n.value = std::move(out);
    n.backprop = std::move(backprop);
    tape.nodes_.push_back(std::move(n));
    return Value{&tape, static_cast<int>(tape.nodes_.size()) - 1};
}

// Grants op lambdas access to node values/grads by id.
class GradAccess {
public:
    explicit GradAccess(Tape& t) : t_(t) {}
    const Mat& val(int id) const { return t_.nodes_[static_cast<std::size_t>(id)].value; }
    const Mat& grad(int id) const { return t_.nodes_[static_cast<std::size_t>(id)].grad; }
    void add(int id, const Mat& g) { t_.add_grad(id, g); }

private:
    Tape& t_;
};

namespace {

Tape& same_tape(Value a, Value b, const char* op) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw Error(std::string(op) + ": operands must live on the same tape");
    return *a.tape;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

Value matmul(Value a, Value b) {
    Tape& t = same_tape(a, b, "matmul");
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    if (av.cols() != bv.rows())
        throw Error("matmul: shape mismatch " + shape_str(av) + " * " + shape_str(bv));
    Mat out = av * bv;
    const int aid = a.id, bid = b.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "matmul", std::move(out), [aid, bid, oid](Tape& tp) {
        GradAccess g(tp);
        const Mat& go = g.grad(oid);
        g.add(aid, go * g.val(bid).transpose());
        g.add(bid, g.val(aid).transpose() * go);
    });
}

Value add(Value a, Value b) {
    Tape& t = same_tape(a, b, "add");
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
    const bool row_bcast = !same && bv.rows() == 1 && av.cols() == bv.cols();
    if (!same && !row_bcast)
        throw Error("add: shape mismatch " + shape_str(av) + " + " + shape_str(bv));
    Mat out = row_bcast ? Mat(av.rowwise() + bv.row(0)) : Mat(av + bv);
    const int aid = a.id, bid = b.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "add", std::move(out), [aid, bid, oid, row_bcast](Tape& tp) {
        GradAccess g(tp);
        const Mat& go = g.grad(oid);
        g.add(aid, go);
        if (row_bcast)
            g.add(bid, go.colwise().sum());
        else
            g.add(bid, go);
    });
}

Value sub(Value a, Value b) {
    Tape& t = same_tape(a, b, "sub");
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols())
        throw Error("sub: shape mismatch " + shape_str(av) + " - " + shape_str(bv));
    Mat out = av - bv;
    const int aid = a.id, bid = b.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "sub", std::move(out), [aid, bid, oid](Tape& tp) {
        GradAccess g(tp);
        const Mat& go = g.grad(oid);
        g.add(aid, go);
        g.add(bid, -go);
    });
}

Value mul(Value a, Value b) {
    Tape& t = same_tape(a, b, "mul");
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols())
        throw Error("mul: shape mismatch " + shape_str(av) + " * " + shape_str(bv));
    Mat out = av.cwiseProduct(bv);
    const int aid = a.id, bid = b.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "mul", std::move(out), [aid, bid, oid](Tape& tp) {
        GradAccess g(tp);
        const Mat& go = g.grad(oid);
        g.add(aid, go.cwiseProduct(g.val(bid)));
        g.add(bid, go.cwiseProduct(g.val(aid)));
    });
}

Value sigmoid(Value x) {
    Tape& t = *x.tape;
    Mat out = t.value(x).unaryExpr([](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    });
    const int xid = x.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "sigmoid", std::move(out), [xid, oid](Tape& tp) {
        GradAccess g(tp);
        const Mat& s = g.val(oid);
        g.add(xid, g.grad(oid).cwiseProduct(s.cwiseProduct(Mat(Mat::Ones(s.rows(), s.cols()) - s))));
    });
}

Value tanh(Value x) {
    Tape& t = *x.tape;
    Mat out = t.value(x).unaryExpr([](double v) { return std::tanh(v); });
    const int xid = x.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "tanh", std::move(out), [xid, oid](Tape& tp) {
        GradAccess g(tp);
        const Mat& th = g.val(oid);
        g.add(xid, g.grad(oid).cwiseProduct(Mat(Mat::Ones(th.rows(), th.cols()) - th.cwiseProduct(th))));
    });
}

Value concat(Value a, Value b) {
    Tape& t = same_tape(a, b, "concat");
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    if (av.rows() != bv.rows())
        throw Error("concat: shape mismatch " + shape_str(av) + " | " + shape_str(bv));
    Mat out(av.rows(), av.cols() + bv.cols());
    out.leftCols(av.cols()) = av;
    out.rightCols(bv.cols()) = bv;
    const int aid = a.id, bid = b.id, oid = static_cast<int>(t.node_count());
    const auto ac = av.cols(), bc = bv.cols();
    return record_op(t, "concat", std::move(out), [aid, bid, oid, ac, bc](Tape& tp) {
        GradAccess g(tp);
        const Mat& go = g.grad(oid);
        g.add(aid, go.leftCols(ac));
        g.add(bid, go.rightCols(bc));
    });
}

Value slice(Value x, int col_begin, int col_count) {
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    if (col_begin < 0 || col_count <= 0 || col_begin + col_count > xv.cols())
        throw Error("slice: columns [" + std::to_string(col_begin) + ", " +
                    std::to_string(col_begin + col_count) + ") out of range for " + shape_str(xv));
    Mat out = xv.middleCols(col_begin, col_count);
    const int xid = x.id, oid = static_cast<int>(t.node_count());
    const auto rows = xv.rows(), cols = xv.cols();
    return record_op(t, "slice", std::move(out), [xid, oid, col_begin, col_count, rows, cols](Tape& tp) {
        GradAccess g(tp);
        Mat gx = Mat::Zero(rows, cols);
        gx.middleCols(col_begin, col_count) = g.grad(oid);
        g.add(xid, gx);
    });
}

Value dropout(Value x, double p, bool train, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: p must lie in [0,1), got " + format_double(p));
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    if (!train || p == 0.0) {
        // Exact identity; no randomness consumed.
        Mat out = xv;
        const int xid = x.id, oid = static_cast<int>(t.node_count());
        return record_op(t, "dropout", std::move(out), [xid, oid](Tape& tp) {
            GradAccess g(tp);
            g.add(xid, g.grad(oid));
        });
    }
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - p);
    Mat mask(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
        for (Eigen::Index j = 0; j < mask.cols(); ++j)
            mask(i, j) = uni(rng) < p ? 0.0 : keep_scale;
    Mat out = xv.cwiseProduct(mask);
    const int xid = x.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "dropout", std::move(out), [xid, oid, mask = std::move(mask)](Tape& tp) {
        GradAccess g(tp);
        g.add(xid, g.grad(oid).cwiseProduct(mask));
    });
}

Value softmax_cross_entropy(Value logits, const std::vector<int>& targets) {
    Tape& t = *logits.tape;
    const Mat& z = t.value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != z.rows())
        throw Error("softmax_cross_entropy: " + std::to_string(targets.size()) +
                    " targets for logits " + shape_str(z));
    for (int c : targets)
        if (c < 0 || c >= z.cols())
            throw Error("softmax_cross_entropy: target class " + std::to_string(c) +
                        " out of range for " + std::to_string(z.cols()) + " classes");
    const Eigen::Index n = z.rows();
    Mat probs(z.rows(), z.cols());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = z.row(i).maxCoeff();
        Eigen::ArrayXd e = (z.row(i).array() - m).exp();
        const double denom = e.sum();
        probs.row(i) = (e / denom).matrix();
        loss += m + std::log(denom) - z(i, targets[static_cast<std::size_t>(i)]);
    }
    Mat out(1, 1);
    out(0, 0) = loss / static_cast<double>(n);
    const int lid = logits.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "softmax_cross_entropy", std::move(out),
                     [lid, oid, targets, probs = std::move(probs), n](Tape& tp) {
                         GradAccess g(tp);
                         const double go = g.grad(oid)(0, 0);
                         Mat gz = probs;
                         for (Eigen::Index i = 0; i < n; ++i)
                             gz(i, targets[static_cast<std::size_t>(i)]) -= 1.0;
                         gz *= go / static_cast<double>(n);
                         g.add(lid, gz);
                     });
}

Value mean_squared_error(Value pred, Value target) {
    Tape& t = same_tape(pred, target, "mean_squared_error");
    const Mat& p = t.value(pred);
    const Mat& y = t.value(target);
    if (p.rows() != y.rows() || p.cols() != y.cols())
        throw Error("mean_squared_error: shape mismatch " + shape_str(p) + " vs " + shape_str(y));
    const double n = static_cast<double>(p.size());
    Mat out(1, 1);
    out(0, 0) = (p - y).squaredNorm() / n;
    const int pid = pred.id, yid = target.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "mean_squared_error", std::move(out), [pid, yid, oid, n](Tape& tp) {
        GradAccess g(tp);
        const double go = g.grad(oid)(0, 0);
        Mat d = (2.0 * go / n) * (g.val(pid) - g.val(yid));
        g.add(pid, d);
        g.add(yid, -d);
    });
}

Value sum(Value x) {
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    Mat out(1, 1);
    out(0, 0) = xv.sum();
    const int xid = x.id, oid = static_cast<int>(t.node_count());
    const auto rows = xv.rows(), cols = xv.cols();
    return record_op(t, "sum", std::move(out), [xid, oid, rows, cols](Tape& tp) {
        GradAccess g(tp);
        g.add(xid, Mat(Mat::Constant(rows, cols, g.grad(oid)(0, 0))));
    });
}

Value scale(Value x, double k) {
    Tape& t = *x.tape;
    if (!std::isfinite(k)) throw Error("scale: non-finite factor rejected");
    Mat out = k * t.value(x);
    const int xid = x.id, oid = static_cast<int>(t.node_count());
    return record_op(t, "scale", std::move(out), [xid, oid, k](Tape& tp) {
        GradAccess g(tp);
        g.add(xid, Mat(k * g.grad(oid)));
    });
}

Mat softmax_row(const Mat& logits) {
    if (logits.rows() != 1) throw Error("softmax_row: expected a 1xC row, got " + shape_str(logits));
    const double m = logits.maxCoeff();
    Eigen::ArrayXd e = (logits.row(0).array() - m).exp();
    Mat out(1, logits.cols());
    out.row(0) = (e / e.sum()).matrix();
    return out;
}

std::map<std::string, Mat> finite_difference_gradient(const std::function<double()>& f,
                                                      ParameterStore& store, double step) {
    if (!(step > 0.0)) throw Error("finite_difference_gradient: step must be positive");
    const double f0 = f();
    const double f1 = f();
    if (f0 != f1)
        throw Error("finite_difference_gradient: f is not deterministic (" + format_double(f0) +
                    " vs " + format_double(f1) + ")");
    std::map<std::string, Mat> grads;
    for (const std::string& name : store.names()) {
        Mat& theta = store.value(name);
        Mat g(theta.rows(), theta.cols());
        for (Eigen::Index i = 0; i < theta.rows(); ++i) {
            for (Eigen::Index j = 0; j < theta.cols(); ++j) {
                const double orig = theta(i, j);
                theta(i, j) = orig + step;
                const double fp = f();
                theta(i, j) = orig - step;
                const double fm = f();
                theta(i, j) = orig;
                g(i, j) = (fp - fm) / (2.0 * step);
            }
        }
        grads.emplace(name, std::move(g));
    }
    return grads;
}

}  // namespace batcl
