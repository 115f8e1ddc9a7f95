#pragma once

// Minimal reverse-mode automatic differentiation over 2-D double matrices.
//
// Every op returns a Var that remembers its parents and a backward closure when
// gradients are enabled and at least one parent requires them. Leaves created
// with requires_grad=true (trainable parameters) accumulate gradients across
// backward() calls until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cwsam/matrix.hpp"

namespace cwsam::ag {

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    // Lazily allocated gradient buffer with the value's shape.
    Matrix& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Matrix value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad = Matrix(); }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Runs reverse accumulation from a 1x1 output.
void backward(const Var& scalar);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Builds an op result. The backward closure receives the result node and must
// only touch parents with requires_grad set.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

Var constant(Matrix value);

Var matmul(const Var& a, const Var& b);     // a[m,k] b[k,n]
Var matmul_nt(const Var& a, const Var& b);  // a[m,k] b[n,k]^T
// x[n,in] w[out,in]^T + bias[1,out]; bias may be undefined.
Var linear(const Var& x, const Var& w, const Var& bias = {});

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast [1,c] over rows

Var relu(const Var& x);
Var gelu(const Var& x);

// Normalizes each row over its columns.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var softmax_rows(const Var& x);

Var slice_cols(const Var& x, std::size_t start, std::size_t count);
Var slice_rows(const Var& x, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);

// out.row(i) = x.row(index[i]), or zeros when index[i] < 0.
Var gather_rows(const Var& x, std::vector<std::ptrdiff_t> index);
Var reshape(const Var& x, std::size_t rows, std::size_t cols);

Var sum(const Var& x);

// Scaled dot-product attention over `groups` independent row blocks.
// q: [groups*nq, dim], k and v: [groups*nk, dim]; dim splits into `heads`.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::size_t groups);

}  // namespace cwsam::ag
