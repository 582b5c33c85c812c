#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Every operation below
// returns a fresh node that remembers its inputs and how to push gradients
// back into them; backward() walks the recorded graph once in reverse
// topological order. Leaf tensors created with requires_grad accumulate
// gradients across backward calls until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mlman {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents that require grad.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);
    static Tensor uniform(Shape shape, double low, double high, std::mt19937_64& rng,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    // Leading extent for matrices, 1 for vectors.
    std::size_t rows() const;
    // Trailing extent.
    std::size_t cols() const;

    std::span<const double> values() const;
    // Direct write access; used for initialization and optimizer updates.
    std::span<double> mutable_values();
    double at(std::size_t i) const;
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    bool requires_grad() const;
    bool is_leaf() const;
    // Empty span when the tensor does not track gradients.
    std::span<const double> grad() const;
    void zero_grad();

    // Copy of the values, outside any graph.
    Tensor detach() const;
    // Deep copy keeping requires_grad, as a new leaf.
    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    // Used by operation implementations.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// Reverse-topological record of the graph reachable from one root.
class Tape {
public:
    static Tape record(const Tensor& root);

    // Nodes in topological order (inputs before outputs).
    const std::vector<detail::Node*>& order() const { return order_; }
    std::size_t size() const { return order_.size(); }

    // Seeds d(root)/d(root) = 1 and runs reverse accumulation. Interior grads
    // are reset first so that only leaves accumulate across calls.
    void backward();

private:
    std::shared_ptr<detail::Node> root_;
    std::vector<detail::Node*> order_;
};

// Gradient of a scalar loss with respect to every requires_grad tensor.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. Vectors have rank 1, matrices rank 2.

// numpy-style: vector operands act as a row (left) or column (right).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double constant);
// x: T x n, bias: n. Adds bias to every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sq_l2(const Tensor& a);

// Column-wise concatenation of same-row-count matrices, or plain
// concatenation of vectors.
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_cols(std::initializer_list<Tensor> parts);
// Row stacking. Vectors count as single rows; the result is a matrix.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
// Column range of a matrix, or sub-range of a vector.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
// Row r of a matrix as a vector.
Tensor row(const Tensor& a, std::size_t r);
// Rows of table selected by index; gradient scatters back into table.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

// Softmax along axis (0 = down columns, 1 = along rows; vectors use axis 0).
Tensor softmax(const Tensor& a, std::size_t axis);

// x: T x d_in, filters: w x d_in x d_c, bias: d_c. Zero padding of (w-1)/2
// on each side keeps the output at T x d_c. w must be odd.
Tensor conv1d_same(const Tensor& x, const Tensor& filters, const Tensor& bias);

// Column-wise max / mean of a T x d matrix, returning a d-vector. Max routes
// its gradient to the first maximal row of each column.
Tensor pool_max_rows(const Tensor& x);
Tensor pool_mean_rows(const Tensor& x);
// Element-wise max / mean over same-shaped tensors.
Tensor elementwise_max(std::span<const Tensor> parts);
Tensor elementwise_mean(std::span<const Tensor> parts);

// Inverted dropout: zeroes entries with probability rate and scales the
// survivors by 1/(1-rate) when training; identity otherwise.
Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng);

struct LstmWeights {
    Tensor input;      // d_in x 4*d_h
    Tensor recurrent;  // d_h x 4*d_h
    Tensor bias;       // 4*d_h
    std::size_t hidden() const { return recurrent.rows(); }
};

struct LstmState {
    Tensor h;
    Tensor c;
};

// One LSTM cell step. Gate blocks of the 4*d_h pre-activation are ordered
// input, forget, candidate, output.
LstmState lstm_step(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev,
                    const LstmWeights& weights);
// Same cell when x * W_input has already been computed (a 4*d_h vector).
LstmState lstm_cell(const Tensor& projected_x, const Tensor& h_prev, const Tensor& c_prev,
                    const Tensor& recurrent, const Tensor& bias);

// ---------------------------------------------------------------------------

// Ordered collection of named learnable tensors.
class ParameterSet {
public:
    void add(std::string name, Tensor tensor);
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;
    void zero_grad();

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// Plain SGD: value -= lr * grad, then grads are zeroed.
void sgd_step(ParameterSet& params, double lr);

}  // namespace mlman
