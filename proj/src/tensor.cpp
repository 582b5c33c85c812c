#include "mlman/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mlman/errors.hpp"

namespace mlman {

using detail::Node;

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) {
        throw DimensionError("tensor shape must have at least one extent");
    }
    for (auto d : shape) {
        if (d == 0) {
            throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
    }
}

using BackwardFn = std::function<void(Node&)>;

// Builds an output node. The graph edge is only kept when some input tracks
// gradients; otherwise the result is a plain constant.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool tracked = false;
    for (const auto* in : inputs) {
        tracked = tracked || in->requires_grad();
    }
    if (tracked) {
        node->requires_grad = true;
        node->leaf = false;
        for (const auto* in : inputs) {
            node->parents.push_back(in->node());
        }
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                     BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool tracked = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
    if (tracked) {
        node->requires_grad = true;
        node->leaf = false;
        for (const auto& in : inputs) {
            node->parents.push_back(in.node());
        }
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

// Returns the parent's grad buffer, or nullptr when it is not tracked.
double* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) {
        return nullptr;
    }
    p.ensure_grad();
    return p.grad.data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

void require_rank(const Tensor& a, std::size_t lo, std::size_t hi, const char* op) {
    if (a.rank() < lo || a.rank() > hi) {
        throw DimensionError(std::string(op) + ": unsupported rank for shape " +
                             shape_str(a.shape()));
    }
}

template <class F, class D>
Tensor unary(const Tensor& a, F forward, D derivative) {
    auto x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = forward(x[i]);
    }
    return make_result(a.shape(), std::move(out), {&a}, [derivative](Node& self) {
        double* g = parent_grad(self, 0);
        if (!g) {
            return;
        }
        const auto& x = self.parents[0]->value;
        for (std::size_t i = 0; i < x.size(); ++i) {
            g[i] += self.grad[i] * derivative(x[i], self.value[i]);
        }
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (shape_size(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_size(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    if (requires_grad) {
        node_->ensure_grad();
    }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
    if (rows.empty()) {
        throw DimensionError("matrix needs at least one row");
    }
    std::vector<double> flat;
    for (const auto& r : rows) {
        if (r.size() != rows.front().size()) {
            throw DimensionError("ragged matrix rows");
        }
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), rows.front().size()}, std::move(flat), requires_grad);
}

Tensor Tensor::uniform(Shape shape, double low, double high, std::mt19937_64& rng,
                       bool requires_grad) {
    check_shape(shape);
    std::uniform_real_distribution<double> dist(low, high);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) {
        x = dist(rng);
    }
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) {
        throw ContractError("use of an undefined tensor");
    }
    return node_->shape;
}

std::size_t Tensor::size() const { return shape_size(shape()); }

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : shape()[0]; }

std::size_t Tensor::cols() const { return shape().back(); }

std::span<const double> Tensor::values() const {
    shape();
    return node_->value;
}

std::span<double> Tensor::mutable_values() {
    shape();
    return node_->value;
}

double Tensor::at(std::size_t i) const {
    if (i >= size()) {
        throw DimensionError("index " + std::to_string(i) + " out of range for " +
                             shape_str(shape()));
    }
    return node_->value[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    if (rank() != 2 || r >= shape()[0] || c >= shape()[1]) {
        throw DimensionError("index (" + std::to_string(r) + "," + std::to_string(c) +
                             ") out of range for " + shape_str(shape()));
    }
    return node_->value[r * shape()[1] + c];
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    }
    return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

std::span<const double> Tensor::grad() const {
    if (!requires_grad()) {
        return {};
    }
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (requires_grad()) {
        node_->grad.assign(node_->value.size(), 0.0);
    }
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

Tensor Tensor::clone() const { return Tensor(shape(), node_->value, requires_grad()); }

// ---------------------------------------------------------------------------
// Tape

Tape Tape::record(const Tensor& root) {
    Tape tape;
    tape.root_ = root.node();
    if (!tape.root_ || !tape.root_->requires_grad) {
        return tape;
    }
    // Iterative post-order DFS; children are emitted before their consumers.
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(tape.root_.get(), 0);
    seen.insert(tape.root_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::backward() {
    if (!root_ || !root_->requires_grad) {
        return;
    }
    for (Node* n : order_) {
        if (!n->leaf) {
            n->grad.clear();
        }
    }
    root_->ensure_grad();
    root_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) {
            n->backward(*n);
        }
    }
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " +
                            shape_str(loss.shape()));
    }
    Tape::record(loss).backward();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 1, 2, "matmul");
    require_rank(b, 1, 2, "matmul");
    const bool a_vec = a.rank() == 1;
    const bool b_vec = b.rank() == 1;
    const std::size_t m = a_vec ? 1 : a.shape()[0];
    const std::size_t k = a.cols();
    const std::size_t kb = b_vec ? b.shape()[0] : b.shape()[0];
    const std::size_t n = b_vec ? 1 : b.shape()[1];
    if (k != kb) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Shape out_shape;
    if (!a_vec) {
        out_shape.push_back(m);
    }
    if (!b_vec) {
        out_shape.push_back(n);
    }
    if (out_shape.empty()) {
        out_shape.push_back(1);
    }
    auto av = a.values();
    auto bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) {
                continue;
            }
            const double* brow = bv.data() + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
    return make_result(std::move(out_shape), std::move(out), {&a, &b},
                       [m, k, n](Node& self) {
                           const auto& g = self.grad;
                           const auto& av = self.parents[0]->value;
                           const auto& bv = self.parents[1]->value;
                           if (double* ga = parent_grad(self, 0)) {
                               for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t p = 0; p < k; ++p) {
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) {
                                           acc += g[i * n + j] * bv[p * n + j];
                                       }
                                       ga[i * k + p] += acc;
                                   }
                               }
                           }
                           if (double* gb = parent_grad(self, 1)) {
                               for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t p = 0; p < k; ++p) {
                                       const double aip = av[i * k + p];
                                       for (std::size_t j = 0; j < n; ++j) {
                                           gb[p * n + j] += aip * g[i * n + j];
                                       }
                                   }
                               }
                           }
                       });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, 2, "transpose");
    const std::size_t r = a.shape()[0];
    const std::size_t c = a.shape()[1];
    auto v = a.values();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = v[i * c + j];
        }
    }
    return make_result({c, r}, std::move(out), {&a}, [r, c](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    g[i * c + j] += self.grad[j * r + i];
                }
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_shape(shape);
    if (shape_size(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    auto v = a.values();
    return make_result(std::move(shape), std::vector<double>(v.begin(), v.end()), {&a},
                       [](Node& self) {
                           if (double* g = parent_grad(self, 0)) {
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                   g[i] += self.grad[i];
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Element-wise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto x = a.values();
    auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (double* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto x = a.values();
    auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] - y[i];
    }
    return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] -= self.grad[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto x = a.values();
    auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * y[i];
    }
    return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        const auto& x = self.parents[0]->value;
        const auto& y = self.parents[1]->value;
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i] * y[i];
            }
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i] * x[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        a, [factor](double x) { return factor * x; },
        [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double constant) {
    return unary(
        a, [constant](double x) { return x + constant; }, [](double, double) { return 1.0; });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_rank(x, 1, 2, "add_row_bias");
    require_rank(bias, 1, 1, "add_row_bias");
    const std::size_t r = x.rows();
    const std::size_t c = x.cols();
    if (bias.size() != c) {
        throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                             " does not fit rows of " + shape_str(x.shape()));
    }
    auto xv = x.values();
    auto bv = bias.values();
    std::vector<double> out(xv.begin(), xv.end());
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] += bv[j];
        }
    }
    return make_result(x.shape(), std::move(out), {&x, &bias}, [r, c](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    g[j] += self.grad[i * c + j];
                }
            }
        }
    });
}

Tensor abs(const Tensor& a) {
    return unary(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
    return unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
    return unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor log(const Tensor& a) {
    return unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double x : a.values()) {
        total += x;
    }
    return make_result({1}, {total}, {&a}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += self.grad[0];
            }
        }
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor sq_l2(const Tensor& a) {
    double total = 0.0;
    for (double x : a.values()) {
        total += x * x;
    }
    return make_result({1}, {total}, {&a}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            const auto& x = self.parents[0]->value;
            for (std::size_t i = 0; i < x.size(); ++i) {
                g[i] += 2.0 * x[i] * self.grad[0];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Structure

Tensor concat_cols(std::initializer_list<Tensor> parts) {
    return concat_cols(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: nothing to concatenate");
    }
    const std::size_t rank = parts.front().rank();
    const std::size_t r = parts.front().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank(p, 1, 2, "concat_cols");
        if (p.rank() != rank || p.rows() != r) {
            throw DimensionError("concat_cols: " + shape_str(p.shape()) + " does not line up with " +
                                 shape_str(parts.front().shape()));
        }
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> out(r * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto v = parts[k].values();
        for (std::size_t i = 0; i < r; ++i) {
            std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + offset);
        }
        offset += widths[k];
    }
    Shape shape = rank == 1 ? Shape{total} : Shape{r, total};
    return make_result_n(std::move(shape), std::move(out), parts,
                         [r, total, widths](Node& self) {
                             std::size_t offset = 0;
                             for (std::size_t k = 0; k < widths.size(); ++k) {
                                 if (double* g = parent_grad(self, k)) {
                                     for (std::size_t i = 0; i < r; ++i) {
                                         for (std::size_t j = 0; j < widths[k]; ++j) {
                                             g[i * widths[k] + j] +=
                                                 self.grad[i * total + offset + j];
                                         }
                                     }
                                 }
                                 offset += widths[k];
                             }
                         });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ContractError("concat_rows: nothing to concatenate");
    }
    const std::size_t c = parts.front().cols();
    std::vector<std::size_t> sizes;
    std::size_t total_rows = 0;
    for (const auto& p : parts) {
        require_rank(p, 1, 2, "concat_rows");
        if (p.cols() != c) {
            throw DimensionError("concat_rows: width of " + shape_str(p.shape()) +
                                 " differs from " + shape_str(parts.front().shape()));
        }
        sizes.push_back(p.size());
        total_rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(total_rows * c);
    for (const auto& p : parts) {
        auto v = p.values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return make_result_n({total_rows, c}, std::move(out), parts, [sizes](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            if (double* g = parent_grad(self, k)) {
                for (std::size_t i = 0; i < sizes[k]; ++i) {
                    g[i] += self.grad[offset + i];
                }
            }
            offset += sizes[k];
        }
    });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require_rank(a, 2, 2, "slice_rows");
    const std::size_t c = a.cols();
    if (count == 0 || begin + count > a.rows()) {
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + "," +
                             std::to_string(begin + count) + ") outside " + shape_str(a.shape()));
    }
    auto v = a.values();
    std::vector<double> out(v.begin() + begin * c, v.begin() + (begin + count) * c);
    return make_result({count, c}, std::move(out), {&a}, [begin, c](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[begin * c + i] += self.grad[i];
            }
        }
    });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    require_rank(a, 1, 2, "slice_cols");
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    if (count == 0 || begin + count > c) {
        throw DimensionError("slice_cols: columns [" + std::to_string(begin) + "," +
                             std::to_string(begin + count) + ") outside " + shape_str(a.shape()));
    }
    auto v = a.values();
    std::vector<double> out(r * count);
    for (std::size_t i = 0; i < r; ++i) {
        std::copy_n(v.data() + i * c + begin, count, out.data() + i * count);
    }
    Shape shape = a.rank() == 1 ? Shape{count} : Shape{r, count};
    return make_result(std::move(shape), std::move(out), {&a}, [r, c, begin, count](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < count; ++j) {
                    g[i * c + begin + j] += self.grad[i * count + j];
                }
            }
        }
    });
}

Tensor row(const Tensor& a, std::size_t r) {
    require_rank(a, 2, 2, "row");
    return reshape(slice_rows(a, r, 1), {a.cols()});
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
    require_rank(table, 2, 2, "gather_rows");
    if (indices.empty()) {
        throw ContractError("gather_rows: no indices");
    }
    const std::size_t c = table.cols();
    auto v = table.values();
    std::vector<double> out(indices.size() * c);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= table.rows()) {
            throw DimensionError("gather_rows: index " + std::to_string(indices[i]) +
                                 " outside table " + shape_str(table.shape()));
        }
        std::copy_n(v.data() + indices[i] * c, c, out.data() + i * c);
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return make_result({idx.size(), c}, std::move(out), {&table}, [idx, c](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    g[idx[i] * c + j] += self.grad[i * c + j];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax

Tensor softmax(const Tensor& a, std::size_t axis) {
    require_rank(a, 1, 2, "softmax");
    if (axis >= a.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(a.shape()));
    }
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    // Normalize groups of `len` entries spaced `stride` apart.
    const bool along_rows = a.rank() == 1 || axis == 1;
    const std::size_t groups = along_rows ? r : c;
    const std::size_t len = along_rows ? c : r;
    const std::size_t stride = along_rows ? 1 : c;
    auto x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = along_rows ? gi * c : gi;
        double mx = x[base];
        for (std::size_t t = 1; t < len; ++t) {
            mx = std::max(mx, x[base + t * stride]);
        }
        double z = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            double e = std::exp(x[base + t * stride] - mx);
            out[base + t * stride] = e;
            z += e;
        }
        for (std::size_t t = 0; t < len; ++t) {
            out[base + t * stride] /= z;
        }
    }
    return make_result(a.shape(), std::move(out), {&a},
                       [groups, len, stride, along_rows, c](Node& self) {
                           double* g = parent_grad(self, 0);
                           if (!g) {
                               return;
                           }
                           const auto& y = self.value;
                           const auto& dy = self.grad;
                           for (std::size_t gi = 0; gi < groups; ++gi) {
                               const std::size_t base = along_rows ? gi * c : gi;
                               double dot = 0.0;
                               for (std::size_t t = 0; t < len; ++t) {
                                   dot += dy[base + t * stride] * y[base + t * stride];
                               }
                               for (std::size_t t = 0; t < len; ++t) {
                                   const std::size_t i = base + t * stride;
                                   g[i] += y[i] * (dy[i] - dot);
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

Tensor conv1d_same(const Tensor& x, const Tensor& filters, const Tensor& bias) {
    require_rank(x, 2, 2, "conv1d_same");
    if (filters.rank() != 3) {
        throw DimensionError("conv1d_same: filters must be window x d_in x d_c, got " +
                             shape_str(filters.shape()));
    }
    const std::size_t w = filters.shape()[0];
    const std::size_t d_in = filters.shape()[1];
    const std::size_t d_c = filters.shape()[2];
    if (w % 2 == 0) {
        throw ConfigError("conv1d_same: window size must be odd, got " + std::to_string(w));
    }
    if (x.cols() != d_in) {
        throw DimensionError("conv1d_same: input " + shape_str(x.shape()) +
                             " does not match filters " + shape_str(filters.shape()));
    }
    if (bias.rank() != 1 || bias.size() != d_c) {
        throw DimensionError("conv1d_same: bias " + shape_str(bias.shape()) + " vs " +
                             std::to_string(d_c) + " filters");
    }
    const std::size_t T = x.rows();
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(w / 2);
    auto xv = x.values();
    auto fv = filters.values();
    auto bv = bias.values();
    std::vector<double> out(T * d_c);
    for (std::size_t t = 0; t < T; ++t) {
        double* o = out.data() + t * d_c;
        std::copy(bv.begin(), bv.end(), o);
        for (std::size_t j = 0; j < w; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - half;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) {
                continue;
            }
            const double* xrow = xv.data() + static_cast<std::size_t>(src) * d_in;
            const double* ftap = fv.data() + j * d_in * d_c;
            for (std::size_t i = 0; i < d_in; ++i) {
                const double xi = xrow[i];
                if (xi == 0.0) {
                    continue;
                }
                const double* frow = ftap + i * d_c;
                for (std::size_t c = 0; c < d_c; ++c) {
                    o[c] += xi * frow[c];
                }
            }
        }
    }
    return make_result(
        {T, d_c}, std::move(out), {&x, &filters, &bias}, [T, w, d_in, d_c, half](Node& self) {
            const auto& xv = self.parents[0]->value;
            const auto& fv = self.parents[1]->value;
            const auto& g = self.grad;
            double* gx = parent_grad(self, 0);
            double* gf = parent_grad(self, 1);
            double* gb = parent_grad(self, 2);
            for (std::size_t t = 0; t < T; ++t) {
                const double* go = g.data() + t * d_c;
                if (gb) {
                    for (std::size_t c = 0; c < d_c; ++c) {
                        gb[c] += go[c];
                    }
                }
                for (std::size_t j = 0; j < w; ++j) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - half;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) {
                        continue;
                    }
                    const std::size_t s = static_cast<std::size_t>(src);
                    for (std::size_t i = 0; i < d_in; ++i) {
                        const std::size_t fbase = (j * d_in + i) * d_c;
                        if (gx) {
                            double acc = 0.0;
                            for (std::size_t c = 0; c < d_c; ++c) {
                                acc += go[c] * fv[fbase + c];
                            }
                            gx[s * d_in + i] += acc;
                        }
                        if (gf) {
                            const double xi = xv[s * d_in + i];
                            for (std::size_t c = 0; c < d_c; ++c) {
                                gf[fbase + c] += xi * go[c];
                            }
                        }
                    }
                }
            }
        });
}

Tensor pool_max_rows(const Tensor& x) {
    require_rank(x, 1, 2, "pool_max_rows");
    const std::size_t r = x.rows();
    const std::size_t c = x.cols();
    auto v = x.values();
    std::vector<double> out(v.begin(), v.begin() + c);
    std::vector<std::size_t> arg(c, 0);
    for (std::size_t i = 1; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            // Strict comparison keeps the lowest row on ties.
            if (v[i * c + j] > out[j]) {
                out[j] = v[i * c + j];
                arg[j] = i;
            }
        }
    }
    return make_result({c}, std::move(out), {&x}, [arg, c](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t j = 0; j < c; ++j) {
                g[arg[j] * c + j] += self.grad[j];
            }
        }
    });
}

Tensor pool_mean_rows(const Tensor& x) {
    require_rank(x, 1, 2, "pool_mean_rows");
    const std::size_t r = x.rows();
    const std::size_t c = x.cols();
    auto v = x.values();
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j] += v[i * c + j];
        }
    }
    const double inv = 1.0 / static_cast<double>(r);
    for (auto& o : out) {
        o *= inv;
    }
    return make_result({c}, std::move(out), {&x}, [r, c, inv](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    g[i * c + j] += self.grad[j] * inv;
                }
            }
        }
    });
}

Tensor elementwise_max(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ContractError("elementwise_max: no inputs");
    }
    for (const auto& p : parts) {
        require_same_shape(p, parts.front(), "elementwise_max");
    }
    const std::size_t n = parts.front().size();
    std::vector<double> out(parts.front().values().begin(), parts.front().values().end());
    std::vector<std::size_t> arg(n, 0);
    for (std::size_t k = 1; k < parts.size(); ++k) {
        auto v = parts[k].values();
        for (std::size_t i = 0; i < n; ++i) {
            if (v[i] > out[i]) {
                out[i] = v[i];
                arg[i] = k;
            }
        }
    }
    return make_result_n(parts.front().shape(), std::move(out), parts, [arg](Node& self) {
        for (std::size_t i = 0; i < arg.size(); ++i) {
            if (double* g = parent_grad(self, arg[i])) {
                g[i] += self.grad[i];
            }
        }
    });
}

Tensor elementwise_mean(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ContractError("elementwise_mean: no inputs");
    }
    for (const auto& p : parts) {
        require_same_shape(p, parts.front(), "elementwise_mean");
    }
    const std::size_t n = parts.front().size();
    const double inv = 1.0 / static_cast<double>(parts.size());
    std::vector<double> out(n, 0.0);
    for (const auto& p : parts) {
        auto v = p.values();
        for (std::size_t i = 0; i < n; ++i) {
            out[i] += v[i];
        }
    }
    for (auto& o : out) {
        o *= inv;
    }
    return make_result_n(parts.front().shape(), std::move(out), parts, [inv](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            if (double* g = parent_grad(self, k)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    g[i] += self.grad[i] * inv;
                }
            }
        }
    });
}

Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ContractError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) {
        return x;
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.size());
    for (auto& m : mask) {
        m = unit(rng) < rate ? 0.0 : keep_scale;
    }
    auto v = x.values();
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i] * mask[i];
    }
    return make_result(x.shape(), std::move(out), {&x}, [mask = std::move(mask)](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < mask.size(); ++i) {
                g[i] += self.grad[i] * mask[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// LSTM

namespace {

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct CellCache {
    std::vector<double> i, f, g, o, tanh_c;
};

}  // namespace

LstmState lstm_cell(const Tensor& projected_x, const Tensor& h_prev, const Tensor& c_prev,
                    const Tensor& recurrent, const Tensor& bias) {
    const std::size_t d = h_prev.size();
    if (h_prev.rank() != 1 || c_prev.rank() != 1 || c_prev.size() != d) {
        throw DimensionError("lstm: state shapes " + shape_str(h_prev.shape()) + " / " +
                             shape_str(c_prev.shape()) + " disagree");
    }
    if (recurrent.rank() != 2 || recurrent.shape()[0] != d || recurrent.shape()[1] != 4 * d) {
        throw DimensionError("lstm: recurrent weights " + shape_str(recurrent.shape()) +
                             " do not fit hidden size " + std::to_string(d));
    }
    if (projected_x.size() != 4 * d || bias.size() != 4 * d) {
        throw DimensionError("lstm: gate pre-activations " + shape_str(projected_x.shape()) +
                             " / bias " + shape_str(bias.shape()) + " do not fit hidden size " +
                             std::to_string(d));
    }
    auto zx = projected_x.values();
    auto hp = h_prev.values();
    auto cp = c_prev.values();
    auto wh = recurrent.values();
    auto bv = bias.values();

    std::vector<double> z(4 * d);
    for (std::size_t j = 0; j < 4 * d; ++j) {
        z[j] = zx[j] + bv[j];
    }
    for (std::size_t r = 0; r < d; ++r) {
        const double h = hp[r];
        if (h == 0.0) {
            continue;
        }
        for (std::size_t j = 0; j < 4 * d; ++j) {
            z[j] += h * wh[r * 4 * d + j];
        }
    }
    auto cache = std::make_shared<CellCache>();
    cache->i.resize(d);
    cache->f.resize(d);
    cache->g.resize(d);
    cache->o.resize(d);
    cache->tanh_c.resize(d);
    std::vector<double> out(2 * d);  // [h; c]
    for (std::size_t k = 0; k < d; ++k) {
        const double i = sigmoid_scalar(z[k]);
        const double f = sigmoid_scalar(z[d + k]);
        const double g = std::tanh(z[2 * d + k]);
        const double o = sigmoid_scalar(z[3 * d + k]);
        const double c = f * cp[k] + i * g;
        const double tc = std::tanh(c);
        cache->i[k] = i;
        cache->f[k] = f;
        cache->g[k] = g;
        cache->o[k] = o;
        cache->tanh_c[k] = tc;
        out[k] = o * tc;
        out[d + k] = c;
    }
    Tensor hc = make_result({2 * d}, std::move(out), {&projected_x, &h_prev, &c_prev, &recurrent, &bias},
                            [d, cache](Node& self) {
                                const auto& C = *cache;
                                const auto& cp = self.parents[2]->value;
                                const auto& hp = self.parents[1]->value;
                                std::vector<double> dz(4 * d);
                                std::vector<double> dc_prev(d);
                                for (std::size_t k = 0; k < d; ++k) {
                                    const double dh = self.grad[k];
                                    const double dc = self.grad[d + k] +
                                                      dh * C.o[k] * (1.0 - C.tanh_c[k] * C.tanh_c[k]);
                                    const double d_o = dh * C.tanh_c[k];
                                    const double d_i = dc * C.g[k];
                                    const double d_g = dc * C.i[k];
                                    const double d_f = dc * cp[k];
                                    dc_prev[k] = dc * C.f[k];
                                    dz[k] = d_i * C.i[k] * (1.0 - C.i[k]);
                                    dz[d + k] = d_f * C.f[k] * (1.0 - C.f[k]);
                                    dz[2 * d + k] = d_g * (1.0 - C.g[k] * C.g[k]);
                                    dz[3 * d + k] = d_o * C.o[k] * (1.0 - C.o[k]);
                                }
                                if (double* g = parent_grad(self, 0)) {
                                    for (std::size_t j = 0; j < 4 * d; ++j) {
                                        g[j] += dz[j];
                                    }
                                }
                                if (double* g = parent_grad(self, 1)) {
                                    const auto& wh = self.parents[3]->value;
                                    for (std::size_t r = 0; r < d; ++r) {
                                        double acc = 0.0;
                                        for (std::size_t j = 0; j < 4 * d; ++j) {
                                            acc += wh[r * 4 * d + j] * dz[j];
                                        }
                                        g[r] += acc;
                                    }
                                }
                                if (double* g = parent_grad(self, 2)) {
                                    for (std::size_t k = 0; k < d; ++k) {
                                        g[k] += dc_prev[k];
                                    }
                                }
                                if (double* g = parent_grad(self, 3)) {
                                    for (std::size_t r = 0; r < d; ++r) {
                                        if (hp[r] == 0.0) {
                                            continue;
                                        }
                                        for (std::size_t j = 0; j < 4 * d; ++j) {
                                            g[r * 4 * d + j] += hp[r] * dz[j];
                                        }
                                    }
                                }
                                if (double* g = parent_grad(self, 4)) {
                                    for (std::size_t j = 0; j < 4 * d; ++j) {
                                        g[j] += dz[j];
                                    }
                                }
                            });
    return {slice_cols(hc, 0, d), slice_cols(hc, d, d)};
}

LstmState lstm_step(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev,
                    const LstmWeights& weights) {
    if (x.rank() != 1 || weights.input.rank() != 2 || weights.input.rows() != x.size()) {
        throw DimensionError("lstm_step: input " + shape_str(x.shape()) +
                             " does not fit input weights " + shape_str(weights.input.shape()));
    }
    return lstm_cell(matmul(x, weights.input), h_prev, c_prev, weights.recurrent, weights.bias);
}

// ---------------------------------------------------------------------------
// Parameters

void ParameterSet::add(std::string name, Tensor tensor) {
    if (!tensor.defined() || !tensor.is_leaf()) {
        throw ContractError("parameter '" + name + "' must be a defined leaf tensor");
    }
    if (contains(name)) {
        throw ContractError("duplicate parameter '" + name + "'");
    }
    entries_.emplace_back(std::move(name), std::move(tensor));
}

const Tensor& ParameterSet::get(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) {
            return t;
        }
    }
    throw ContractError("unknown parameter '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const auto& e) { return e.first == name; });
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        n += e.second.size();
    }
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& e : entries_) {
        e.second.zero_grad();
    }
}

void sgd_step(ParameterSet& params, double lr) {
    for (auto& [name, t] : params.entries()) {
        if (!t.requires_grad()) {
            continue;
        }
        Tensor handle = t;
        auto g = handle.grad();
        auto v = handle.mutable_values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] -= lr * g[i];
        }
        handle.zero_grad();
    }
}

}  // namespace mlman
