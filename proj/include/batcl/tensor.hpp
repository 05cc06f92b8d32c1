#pragma once

#include "batcl/common.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace batcl {

/// Named trainable matrices with parallel gradient slots. Names are unique
/// and iteration follows insertion order, so importance diagonals computed
/// at different times line up index-by-index.
class ParameterStore {
public:
    void add(const std::string& name, Mat value);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Mat& value(const std::string& name) const { return entry(name).value; }
    Mat& value(const std::string& name) { return entry(name).value; }
    const Mat& grad(const std::string& name) const { return entry(name).grad; }
    Mat& grad(const std::string& name) { return entry(name).grad; }

    void zero_grads();

    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }
    /// Total scalar coefficients across all parameters.
    std::size_t scalar_count() const;

    /// Deep copy of all current values (name -> matrix).
    std::map<std::string, Mat> snapshot_values() const;
    std::map<std::string, Mat> snapshot_grads() const;

private:
    struct Entry {
        Mat value;
        Mat grad;
    };
    Entry& entry(const std::string& name);
    const Entry& entry(const std::string& name) const;

    std::vector<std::string> names_;
    std::map<std::string, Entry> index_;
};

class Tape;

/// Lightweight handle to a node on a tape.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
};

/// Reverse-mode tape over dense matrices. Records forward operations in
/// topological (append) order; backward() replays them once in reverse.
///
/// Gradients accumulate into the bound ParameterStore; callers zero them
/// explicitly. backward() may be invoked more than once (each sweep adds
/// its full contribution again), but no new operations may be recorded
/// after the first sweep.
class Tape {
public:
    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Constant leaf; no gradient is propagated to any store through it.
    Value leaf(Mat value);
    /// Leaf bound to store[name]; backward adds d(root)/d(param) into
    /// the store's gradient slot.
    Value param(ParameterStore& store, const std::string& name);

    const Mat& value(Value v) const;
    /// Node gradient from the most recent backward sweep (zero matrix if
    /// the node was not reached).
    Mat node_grad(Value v) const;

    void backward(Value root);

    std::size_t node_count() const { return nodes_.size(); }
    bool finite_checks() const { return check_finite_; }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool has_grad = false;
        std::function<void(Tape&)> backprop;  // null for leaves
        ParameterStore* store = nullptr;      // set for param leaves
        std::string param_name;
    };

    friend Value record_op(Tape& tape, const char* op, Mat out,
                           std::function<void(Tape&)> backprop);
    friend class GradAccess;

    Node& node(Value v);
    const Node& node(Value v) const;
    void add_grad(int id, const Mat& g);

    std::vector<Node> nodes_;
    bool check_finite_;
    bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Forward operations. Each op validates shapes (diagnostics name both
// shapes), records a backward rule, and rejects non-finite results.
// ---------------------------------------------------------------------------

/// a (m×k) * b (k×n) -> m×n.
Value matmul(Value a, Value b);
/// Elementwise sum. As the one broadcast LSTM needs, `b` may be a 1×n row
/// added to every row of a.
Value add(Value a, Value b);
/// Elementwise difference, same shapes.
Value sub(Value a, Value b);
/// Elementwise (Hadamard) product, same shapes.
Value mul(Value a, Value b);
Value sigmoid(Value x);
Value tanh(Value x);
/// Column-wise concatenation [a | b]; row counts must match.
Value concat(Value a, Value b);
/// Columns [begin, begin+count) of x.
Value slice(Value x, int col_begin, int col_count);
/// Inverted dropout: train mode zeroes each element with probability p and
/// scales survivors by 1/(1-p). Eval mode (or p == 0) is the exact identity
/// and consumes no randomness. Requires p in [0,1).
Value dropout(Value x, double p, bool train, Rng& rng);
/// Mean over rows of -log softmax(logits)[target]; scalar output.
/// targets[i] must lie in [0, logits.cols()).
Value softmax_cross_entropy(Value logits, const std::vector<int>& targets);
/// mean((pred - target)^2) over all coefficients; scalar output.
Value mean_squared_error(Value pred, Value target);
/// Sum of all coefficients; scalar output.
Value sum(Value x);
/// k * x for a scalar constant k.
Value scale(Value x, double k);

/// Softmax of a single row (plain math, not taped).
Mat softmax_row(const Mat& logits);

/// Central-difference gradient of f with respect to every coefficient in
/// the store: (f(th + h e_i) - f(th - h e_i)) / (2h). f must be
/// deterministic; two baseline evaluations that disagree are rejected.
/// Independent of the tape (uses forward evaluations only).
std::map<std::string, Mat> finite_difference_gradient(
    const std::function<double()>& f, ParameterStore& store, double step);

}  // namespace batcl
