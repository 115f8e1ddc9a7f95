#include "cwsam/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "cwsam/kernels.hpp"

namespace cwsam::ag {
namespace {

thread_local bool g_grad_enabled = true;

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("autograd: ") + what);
}

bool wants(const Var& v) { return v.defined() && v.requires_grad(); }

Matrix& gbuf(const Var& v) { return v.node()->grad_buffer(); }

void add_into(Matrix& dst, const Matrix& src) {
    kernels::active().axpy(dst.size(), 1.0, src.ptr(), dst.ptr());
}

}  // namespace

Matrix& Node::grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Matrix(value.rows(), value.cols());
    return grad;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    if (g_grad_enabled) {
        for (const Var& p : parents) any = any || wants(p);
    }
    if (any) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const Var& p : parents)
            if (p.defined()) node->parents.push_back(p.node());
        node->backward = std::move(backward_fn);
    }
    return Var(std::move(node));
}

Var constant(Matrix value) { return Var(std::move(value), false); }

void backward(const Var& scalar) {
    require(scalar.defined() && scalar.rows() == 1 && scalar.cols() == 1, "backward needs a 1x1 value");
    if (!scalar.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{scalar.node().get(), 0}};
    seen.insert(scalar.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && parent->backward && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    scalar.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->grad.empty() && node->backward) node->backward(*node);
    }
    // Interior gradients are not needed once propagated.
    for (Node* node : order)
        if (node->backward) node->grad = Matrix();
}

Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "matmul shape mismatch");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Matrix out(m, n);
    kernels::active().gemm_nn(m, n, k, a.value().ptr(), k, b.value().ptr(), n, out.ptr(), n, false);
    return make_op(std::move(out), {a, b}, [a, b, m, n, k](Node& self) {
        const auto& K = kernels::active();
        if (wants(a)) K.gemm_nt(m, k, n, self.grad.ptr(), n, b.value().ptr(), n, gbuf(a).ptr(), k, true);
        if (wants(b)) K.gemm_tn(k, n, m, a.value().ptr(), k, self.grad.ptr(), n, gbuf(b).ptr(), n, true);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    require(a.cols() == b.cols(), "matmul_nt shape mismatch");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Matrix out(m, n);
    kernels::active().gemm_nt(m, n, k, a.value().ptr(), k, b.value().ptr(), k, out.ptr(), n, false);
    return make_op(std::move(out), {a, b}, [a, b, m, n, k](Node& self) {
        const auto& K = kernels::active();
        if (wants(a)) K.gemm_nn(m, k, n, self.grad.ptr(), n, b.value().ptr(), k, gbuf(a).ptr(), k, true);
        if (wants(b)) K.gemm_tn(n, k, m, self.grad.ptr(), n, a.value().ptr(), k, gbuf(b).ptr(), k, true);
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require(x.cols() == w.cols(), "linear input width mismatch");
    require(!bias.defined() || (bias.rows() == 1 && bias.cols() == w.rows()), "linear bias shape");
    const std::size_t n = x.rows(), in = x.cols(), out_dim = w.rows();
    Matrix out(n, out_dim);
    kernels::active().gemm_nt(n, out_dim, in, x.value().ptr(), in, w.value().ptr(), in, out.ptr(), out_dim, false);
    if (bias.defined()) {
        for (std::size_t r = 0; r < n; ++r) kernels::active().axpy(out_dim, 1.0, bias.value().ptr(), out.row(r));
    }
    return make_op(std::move(out), {x, w, bias}, [x, w, bias, n, in, out_dim](Node& self) {
        const auto& K = kernels::active();
        if (wants(x)) K.gemm_nn(n, in, out_dim, self.grad.ptr(), out_dim, w.value().ptr(), in, gbuf(x).ptr(), in, true);
        if (wants(w)) K.gemm_tn(out_dim, in, n, self.grad.ptr(), out_dim, x.value().ptr(), in, gbuf(w).ptr(), in, true);
        if (wants(bias)) {
            Matrix& gb = gbuf(bias);
            for (std::size_t r = 0; r < n; ++r) K.axpy(out_dim, 1.0, self.grad.row(r), gb.ptr());
        }
    });
}

Var add(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (wants(a)) add_into(gbuf(a), self.grad);
        if (wants(b)) add_into(gbuf(b), self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape mismatch");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (wants(a)) add_into(gbuf(a), self.grad);
        if (wants(b)) kernels::active().axpy(self.grad.size(), -1.0, self.grad.ptr(), gbuf(b).ptr());
    });
}

Var mul(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mul shape mismatch");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (wants(a)) {
            Matrix& g = gbuf(a);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value()[i];
        }
        if (wants(b)) {
            Matrix& g = gbuf(b);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value()[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Matrix out = a.value();
    for (double& v : out.values()) v *= s;
    return make_op(std::move(out), {a}, [a, s](Node& self) {
        kernels::active().axpy(self.grad.size(), s, self.grad.ptr(), gbuf(a).ptr());
    });
}

Var add_row(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row shape mismatch");
    Matrix out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += row.value()[c];
    return make_op(std::move(out), {a, row}, [a, row](Node& self) {
        if (wants(a)) add_into(gbuf(a), self.grad);
        if (wants(row)) {
            Matrix& g = gbuf(row);
            for (std::size_t r = 0; r < self.grad.rows(); ++r)
                kernels::active().axpy(g.size(), 1.0, self.grad.row(r), g.ptr());
        }
    });
}

Var relu(const Var& x) {
    Matrix out = x.value();
    for (double& v : out.values()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
    return make_op(std::move(out), {x}, [x](Node& self) {
        Matrix& g = gbuf(x);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x.value()[i] > 0.0) g[i] += self.grad[i];
    });
}

Var gelu(const Var& x) {
    Matrix out = x.value();
    for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    return make_op(std::move(out), {x}, [x](Node& self) {
        Matrix& g = gbuf(x);
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x.value()[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const std::size_t n = x.rows(), c = x.cols();
    require(gamma.rows() == 1 && gamma.cols() == c && beta.rows() == 1 && beta.cols() == c,
            "layer_norm parameter shape");
    Matrix out(n, c);
    auto xhat = std::make_shared<Matrix>(n, c);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x.value().row(r);
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (xr[j] - mean) * is;
            (*xhat)(r, j) = h;
            out(r, j) = h * gamma.value()[j] + beta.value()[j];
        }
    }
    return make_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, n, c](Node& self) {
        if (wants(gamma) || wants(beta)) {
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < c; ++j) {
                    if (wants(gamma)) gbuf(gamma)[j] += self.grad(r, j) * (*xhat)(r, j);
                    if (wants(beta)) gbuf(beta)[j] += self.grad(r, j);
                }
            }
        }
        if (!wants(x)) return;
        Matrix& gx = gbuf(x);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = self.grad(r, j) * gamma.value()[j];
                mean_d += d;
                mean_dh += d * (*xhat)(r, j);
            }
            mean_d *= inv_c;
            mean_dh *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = self.grad(r, j) * gamma.value()[j];
                gx(r, j) += (*inv_std)[r] * (d - mean_d - (*xhat)(r, j) * mean_dh);
            }
        }
    });
}

namespace {

void softmax_row_inplace(double* row, std::size_t n) {
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

// dS = P * (dP - rowsum(dP * P)), in place over dp.
void softmax_row_backward(const double* p, double* dp, std::size_t n) {
    double dotv = 0.0;
    for (std::size_t j = 0; j < n; ++j) dotv += dp[j] * p[j];
    for (std::size_t j = 0; j < n; ++j) dp[j] = p[j] * (dp[j] - dotv);
}

}  // namespace

Var softmax_rows(const Var& x) {
    Matrix out = x.value();
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_row_inplace(out.row(r), out.cols());
    auto probs = std::make_shared<Matrix>(out);
    return make_op(std::move(out), {x}, [x, probs](Node& self) {
        Matrix d = self.grad;
        Matrix& g = gbuf(x);
        for (std::size_t r = 0; r < d.rows(); ++r) {
            softmax_row_backward(probs->row(r), d.row(r), d.cols());
            for (std::size_t j = 0; j < d.cols(); ++j) g(r, j) += d(r, j);
        }
    });
}

Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
    require(start + count <= x.cols(), "slice_cols out of range");
    Matrix out(x.rows(), count);
    for (std::size_t r = 0; r < x.rows(); ++r)
        std::copy_n(x.value().row(r) + start, count, out.row(r));
    return make_op(std::move(out), {x}, [x, start, count](Node& self) {
        Matrix& g = gbuf(x);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t j = 0; j < count; ++j) g(r, start + j) += self.grad(r, j);
    });
}

Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
    require(start + count <= x.rows(), "slice_rows out of range");
    const std::size_t c = x.cols();
    Matrix out(count, c);
    std::copy_n(x.value().row(start), count * c, out.ptr());
    return make_op(std::move(out), {x}, [x, start, count, c](Node& self) {
        kernels::active().axpy(count * c, 1.0, self.grad.ptr(), gbuf(x).row(start));
    });
}

Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols of nothing");
    const std::size_t rows = parts[0].rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        require(p.rows() == rows, "concat_cols row mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.value().row(r), p.cols(), out.row(r) + off);
        off += p.cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return make_op(std::move(out), ps, [ps](Node& self) {
        std::size_t o = 0;
        for (const Var& p : ps) {
            if (wants(p)) {
                Matrix& g = gbuf(p);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t j = 0; j < g.cols(); ++j) g(r, j) += self.grad(r, o + j);
            }
            o += p.cols();
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows of nothing");
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    for (const Var& p : parts) {
        require(p.cols() == cols, "concat_rows column mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy_n(p.value().ptr(), p.value().size(), out.row(off));
        off += p.rows();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return make_op(std::move(out), ps, [ps](Node& self) {
        std::size_t o = 0;
        for (const Var& p : ps) {
            if (wants(p)) kernels::active().axpy(p.value().size(), 1.0, self.grad.row(o), gbuf(p).ptr());
            o += p.rows();
        }
    });
}

Var gather_rows(const Var& x, std::vector<std::ptrdiff_t> index) {
    const std::size_t c = x.cols();
    Matrix out(index.size(), c);
    for (std::size_t i = 0; i < index.size(); ++i) {
        const std::ptrdiff_t src = index[i];
        if (src < 0) continue;
        require(static_cast<std::size_t>(src) < x.rows(), "gather_rows index out of range");
        std::copy_n(x.value().row(static_cast<std::size_t>(src)), c, out.row(i));
    }
    auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(std::move(index));
    return make_op(std::move(out), {x}, [x, idx, c](Node& self) {
        Matrix& g = gbuf(x);
        const auto& K = kernels::active();
        for (std::size_t i = 0; i < idx->size(); ++i) {
            const std::ptrdiff_t src = (*idx)[i];
            if (src >= 0) K.axpy(c, 1.0, self.grad.row(i), g.row(static_cast<std::size_t>(src)));
        }
    });
}

Var reshape(const Var& x, std::size_t rows, std::size_t cols) {
    require(rows * cols == x.value().size(), "reshape size mismatch");
    Matrix out = x.value();
    out.reshape(rows, cols);
    return make_op(std::move(out), {x}, [x](Node& self) { add_into(gbuf(x), self.grad); });
}

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return make_op(Matrix(1, 1, s), {x}, [x](Node& self) {
        const double g = self.grad[0];
        for (double& v : gbuf(x).values()) v += g;
    });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::size_t groups) {
    const std::size_t dim = q.cols();
    require(heads > 0 && dim % heads == 0, "attention dim not divisible by heads");
    require(k.cols() == dim && v.cols() == dim, "attention width mismatch");
    require(groups > 0 && q.rows() % groups == 0 && k.rows() % groups == 0 && k.rows() == v.rows(),
            "attention group mismatch");
    const std::size_t nq = q.rows() / groups, nk = k.rows() / groups, dh = dim / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& K = kernels::active();

    Matrix out(q.rows(), dim);
    // probabilities per (group, head), each nq x nk
    auto probs = std::make_shared<std::vector<double>>(groups * heads * nq * nk);
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* p = probs->data() + (g * heads + h) * nq * nk;
            const double* qp = q.value().row(g * nq) + h * dh;
            const double* kp = k.value().row(g * nk) + h * dh;
            const double* vp = v.value().row(g * nk) + h * dh;
            K.gemm_nt(nq, nk, dh, qp, dim, kp, dim, p, nk, false);
            for (std::size_t i = 0; i < nq * nk; ++i) p[i] *= sc;
            for (std::size_t i = 0; i < nq; ++i) softmax_row_inplace(p + i * nk, nk);
            K.gemm_nn(nq, dh, nk, p, nk, vp, dim, out.row(g * nq) + h * dh, dim, false);
        }
    }
    return make_op(std::move(out), {q, k, v}, [q, k, v, probs, heads, groups, nq, nk, dh, dim, sc](Node& self) {
        const auto& K = kernels::active();
        std::vector<double> dp(nq * nk);
        for (std::size_t g = 0; g < groups; ++g) {
            for (std::size_t h = 0; h < heads; ++h) {
                const double* p = probs->data() + (g * heads + h) * nq * nk;
                const double* dout = self.grad.row(g * nq) + h * dh;
                const double* qp = q.value().row(g * nq) + h * dh;
                const double* kp = k.value().row(g * nk) + h * dh;
                const double* vp = v.value().row(g * nk) + h * dh;
                if (wants(v)) K.gemm_tn(nk, dh, nq, p, nk, dout, dim, gbuf(v).row(g * nk) + h * dh, dim, true);
                if (!wants(q) && !wants(k)) continue;
                K.gemm_nt(nq, nk, dh, dout, dim, vp, dim, dp.data(), nk, false);
                for (std::size_t i = 0; i < nq; ++i) softmax_row_backward(p + i * nk, dp.data() + i * nk, nk);
                for (double& d : dp) d *= sc;
                if (wants(q)) K.gemm_nn(nq, dh, nk, dp.data(), nk, kp, dim, gbuf(q).row(g * nq) + h * dh, dim, true);
                if (wants(k)) K.gemm_tn(nk, dh, nq, dp.data(), nk, qp, dim, gbuf(k).row(g * nk) + h * dh, dim, true);
            }
        }
    });
}

}  // namespace cwsam::ag
