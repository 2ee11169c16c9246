#include "bmmae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "bmmae/kernels/kernels.hpp"

namespace bmmae {

using autodiff::GradStore;
using autodiff::Node;
using autodiff::NodePtr;

namespace autodiff {

double* GradStore::get(const Node* n, int64_t numel) {
    auto it = slots_.find(n);
    if (it == slots_.end())
        it = slots_.emplace(n, std::vector<double>(static_cast<size_t>(numel), 0.0)).first;
    return it->second.data();
}

const double* GradStore::find(const Node* n) const {
    auto it = slots_.find(n);
    return it == slots_.end() ? nullptr : it->second.data();
}

}  // namespace autodiff

namespace {

NodePtr make_node(std::vector<int64_t> shape, std::vector<Tensor> inputs) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.resize(static_cast<size_t>(n->numel()));
    for (const Tensor& t : inputs) {
        n->inputs.push_back(t.node_ptr());
        n->requires_grad = n->requires_grad || t.node()->requires_grad;
    }
    return n;
}

double* grad_of(GradStore& gs, const NodePtr& n) {
    return n->requires_grad ? gs.get(n.get(), n->numel()) : nullptr;
}

void check(bool cond, const char* msg) {
    if (!cond) throw DimensionError(msg);
}

}  // namespace

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data,
                         bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    if (static_cast<int64_t>(data.size()) != n->numel())
        throw DimensionError("tensor data size does not match shape");
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(n->numel()), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

double Tensor::item() const {
    check(numel() == 1, "item() requires a scalar tensor");
    return n_->value[0];
}

const std::vector<double>& Tensor::grad() const {
    if (n_->grad.empty()) n_->grad.assign(static_cast<size_t>(numel()), 0.0);
    return n_->grad;
}

void Tensor::zero_grad() { n_->grad.assign(static_cast<size_t>(numel()), 0.0); }

namespace {

// Post-order over the requires_grad subgraph.
void topo_order(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* in = node->inputs[next++].get();
            if (in->requires_grad && !seen.count(in)) {
                seen.insert(in);
                stack.emplace_back(in, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace

void Tensor::backward_into(GradStore& gs) const {
    check(numel() == 1, "backward requires a scalar root");
    if (!n_->requires_grad) return;
    gs.pin(n_);
    std::vector<Node*> order;
    topo_order(n_.get(), order);
    gs.get(n_.get(), 1)[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backprop) continue;
        const double* g = gs.find(node);
        if (!g) continue;
        node->backprop(*node, g, gs);
    }
}

void Tensor::backward() const {
    GradStore gs;
    backward_into(gs);
    gs.for_each([](const Node* node, const std::vector<double>& buf) {
        Node* n = const_cast<Node*>(node);
        if (n->grad.empty()) n->grad.assign(buf.size(), 0.0);
        kernels::axpy(static_cast<int64_t>(buf.size()), 1.0, buf.data(), n->grad.data());
    });
}

// --- binary / unary elementwise ---------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add: shape mismatch");
    auto n = make_node(a.shape(), {a, b});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) n->value[i] = a.value()[i] + b.value()[i];
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        const int64_t m = self.numel();
        for (const auto& in : self.inputs)
            if (double* gi = grad_of(gs, in)) kernels::axpy(m, 1.0, g, gi);
    };
    return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "sub: shape mismatch");
    auto n = make_node(a.shape(), {a, b});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) n->value[i] = a.value()[i] - b.value()[i];
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        const int64_t m = self.numel();
        if (double* ga = grad_of(gs, self.inputs[0])) kernels::axpy(m, 1.0, g, ga);
        if (double* gb = grad_of(gs, self.inputs[1])) kernels::axpy(m, -1.0, g, gb);
    };
    return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul: shape mismatch");
    auto n = make_node(a.shape(), {a, b});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) n->value[i] = a.value()[i] * b.value()[i];
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        const int64_t m = self.numel();
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (double* ga = grad_of(gs, self.inputs[0]))
            for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * bv[i];
        if (double* gb = grad_of(gs, self.inputs[1]))
            for (int64_t i = 0; i < m; ++i) gb[i] += g[i] * av[i];
    };
    return Tensor(n);
}

Tensor div(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "div: shape mismatch");
    auto n = make_node(a.shape(), {a, b});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) n->value[i] = a.value()[i] / b.value()[i];
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        const int64_t m = self.numel();
        const auto& bv = self.inputs[1]->value;
        const auto& y = self.value;
        if (double* ga = grad_of(gs, self.inputs[0]))
            for (int64_t i = 0; i < m; ++i) ga[i] += g[i] / bv[i];
        if (double* gb = grad_of(gs, self.inputs[1]))
            for (int64_t i = 0; i < m; ++i) gb[i] -= g[i] * y[i] / bv[i];
    };
    return Tensor(n);
}

Tensor scale(const Tensor& a, double s) {
    auto n = make_node(a.shape(), {a});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) n->value[i] = a.value()[i] * s;
    n->backprop = [s](const Node& self, const double* g, GradStore& gs) {
        if (double* ga = grad_of(gs, self.inputs[0])) kernels::axpy(self.numel(), s, g, ga);
    };
    return Tensor(n);
}

Tensor add_scalar(const Tensor& a, double c) {
    auto n = make_node(a.shape(), {a});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) n->value[i] = a.value()[i] + c;
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        if (double* ga = grad_of(gs, self.inputs[0])) kernels::axpy(self.numel(), 1.0, g, ga);
    };
    return Tensor(n);
}

Tensor add_n(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "add_n: empty input list");
    auto n = make_node(xs[0].shape(), xs);
    const int64_t m = n->numel();
    std::memset(n->value.data(), 0, sizeof(double) * static_cast<size_t>(m));
    for (const Tensor& x : xs) {
        check(x.shape() == xs[0].shape(), "add_n: shape mismatch");
        kernels::axpy(m, 1.0, x.value().data(), n->value.data());
    }
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        for (const auto& in : self.inputs)
            if (double* gi = grad_of(gs, in)) kernels::axpy(self.numel(), 1.0, g, gi);
    };
    return Tensor(n);
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    const int64_t rows = x.rows(), cols = x.cols();
    check(v.numel() == cols, "add_rowvec: width mismatch");
    auto n = make_node(x.shape(), {x, v});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
            n->value[r * cols + c] = x.value()[r * cols + c] + v.value()[c];
    n->backprop = [rows, cols](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0]))
            kernels::axpy(rows * cols, 1.0, g, gx);
        if (double* gv = grad_of(gs, self.inputs[1]))
            for (int64_t r = 0; r < rows; ++r) kernels::axpy(cols, 1.0, g + r * cols, gv);
    };
    return Tensor(n);
}

// --- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols(), n_ = b.cols();
    check(b.rows() == k, "matmul: inner dimension mismatch");
    auto n = make_node({m, n_}, {a, b});
    kernels::gemm_nn(m, n_, k, a.value().data(), b.value().data(), n->value.data(), false);
    n->backprop = [m, k, n_](const Node& self, const double* g, GradStore& gs) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (double* ga = grad_of(gs, self.inputs[0]))
            kernels::gemm_nt(m, k, n_, g, bv.data(), ga, true);
        if (double* gb = grad_of(gs, self.inputs[1]))
            kernels::gemm_tn(k, n_, m, av.data(), g, gb, true);
    };
    return Tensor(n);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols(), n_ = b.rows();
    check(b.cols() == k, "matmul_nt: inner dimension mismatch");
    auto n = make_node({m, n_}, {a, b});
    kernels::gemm_nt(m, n_, k, a.value().data(), b.value().data(), n->value.data(), false);
    n->backprop = [m, k, n_](const Node& self, const double* g, GradStore& gs) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (double* ga = grad_of(gs, self.inputs[0]))
            kernels::gemm_nn(m, k, n_, g, bv.data(), ga, true);
        if (double* gb = grad_of(gs, self.inputs[1]))
            kernels::gemm_tn(n_, k, m, g, av.data(), gb, true);
    };
    return Tensor(n);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

// --- layout ops ---------------------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "concat_rows: empty input list");
    const int64_t cols = xs[0].cols();
    int64_t rows = 0;
    for (const Tensor& x : xs) {
        check(x.cols() == cols, "concat_rows: width mismatch");
        rows += x.rows();
    }
    auto n = make_node({rows, cols}, xs);
    int64_t off = 0;
    for (const Tensor& x : xs) {
        std::memcpy(n->value.data() + off, x.value().data(),
                    sizeof(double) * static_cast<size_t>(x.numel()));
        off += x.numel();
    }
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        int64_t off = 0;
        for (const auto& in : self.inputs) {
            if (double* gi = grad_of(gs, in)) kernels::axpy(in->numel(), 1.0, g + off, gi);
            off += in->numel();
        }
    };
    return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "concat_cols: empty input list");
    const int64_t rows = xs[0].rows();
    int64_t cols = 0;
    for (const Tensor& x : xs) {
        check(x.rows() == rows, "concat_cols: height mismatch");
        cols += x.cols();
    }
    auto n = make_node({rows, cols}, xs);
    int64_t off = 0;
    for (const Tensor& x : xs) {
        const int64_t w = x.cols();
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(n->value.data() + r * cols + off, x.value().data() + r * w,
                        sizeof(double) * static_cast<size_t>(w));
        off += w;
    }
    n->backprop = [rows, cols](const Node& self, const double* g, GradStore& gs) {
        int64_t off = 0;
        for (const auto& in : self.inputs) {
            const int64_t w = in->shape[1];
            if (double* gi = grad_of(gs, in))
                for (int64_t r = 0; r < rows; ++r)
                    kernels::axpy(w, 1.0, g + r * cols + off, gi + r * w);
            off += w;
        }
    };
    return Tensor(n);
}

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
    const int64_t cols = x.cols();
    check(0 <= r0 && r0 <= r1 && r1 <= x.rows(), "slice_rows: out of range");
    auto n = make_node({r1 - r0, cols}, {x});
    std::memcpy(n->value.data(), x.value().data() + r0 * cols,
                sizeof(double) * static_cast<size_t>(n->numel()));
    n->backprop = [r0, cols](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0]))
            kernels::axpy(self.numel(), 1.0, g, gx + r0 * cols);
    };
    return Tensor(n);
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
    const int64_t rows = x.rows(), cols = x.cols(), w = c1 - c0;
    check(0 <= c0 && c0 <= c1 && c1 <= cols, "slice_cols: out of range");
    auto n = make_node({rows, w}, {x});
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(n->value.data() + r * w, x.value().data() + r * cols + c0,
                    sizeof(double) * static_cast<size_t>(w));
    n->backprop = [rows, cols, c0, w](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0]))
            for (int64_t r = 0; r < rows; ++r)
                kernels::axpy(w, 1.0, g + r * w, gx + r * cols + c0);
    };
    return Tensor(n);
}

Tensor gather_rows(const Tensor& x, std::vector<int64_t> idx) {
    const int64_t cols = x.cols();
    for (int64_t i : idx) check(0 <= i && i < x.rows(), "gather_rows: index out of range");
    auto n = make_node({static_cast<int64_t>(idx.size()), cols}, {x});
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(n->value.data() + static_cast<int64_t>(r) * cols,
                    x.value().data() + idx[r] * cols, sizeof(double) * static_cast<size_t>(cols));
    n->backprop = [idx = std::move(idx), cols](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0]))
            for (size_t r = 0; r < idx.size(); ++r)
                kernels::axpy(cols, 1.0, g + static_cast<int64_t>(r) * cols, gx + idx[r] * cols);
    };
    return Tensor(n);
}

Tensor scatter_rows_fill(const Tensor& src, std::vector<int64_t> dst, int64_t out_rows,
                         const Tensor& fill) {
    const int64_t cols = src.cols();
    check(fill.numel() == cols, "scatter_rows_fill: fill width mismatch");
    check(static_cast<int64_t>(dst.size()) == src.rows(), "scatter_rows_fill: index count");
    std::vector<int64_t> src_of_out(static_cast<size_t>(out_rows), -1);
    for (size_t j = 0; j < dst.size(); ++j) {
        check(0 <= dst[j] && dst[j] < out_rows, "scatter_rows_fill: index out of range");
        check(src_of_out[static_cast<size_t>(dst[j])] == -1, "scatter_rows_fill: duplicate index");
        src_of_out[static_cast<size_t>(dst[j])] = static_cast<int64_t>(j);
    }
    auto n = make_node({out_rows, cols}, {src, fill});
    for (int64_t r = 0; r < out_rows; ++r) {
        const double* from = src_of_out[static_cast<size_t>(r)] >= 0
                                 ? src.value().data() + src_of_out[static_cast<size_t>(r)] * cols
                                 : fill.value().data();
        std::memcpy(n->value.data() + r * cols, from, sizeof(double) * static_cast<size_t>(cols));
    }
    n->backprop = [src_of_out = std::move(src_of_out), cols](const Node& self, const double* g,
                                                             GradStore& gs) {
        double* gsrc = grad_of(gs, self.inputs[0]);
        double* gfill = grad_of(gs, self.inputs[1]);
        for (size_t r = 0; r < src_of_out.size(); ++r) {
            const double* gr = g + static_cast<int64_t>(r) * cols;
            if (src_of_out[r] >= 0) {
                if (gsrc) kernels::axpy(cols, 1.0, gr, gsrc + src_of_out[r] * cols);
            } else if (gfill) {
                kernels::axpy(cols, 1.0, gr, gfill);
            }
        }
    };
    return Tensor(n);
}

Tensor transpose(const Tensor& x) {
    const int64_t rows = x.rows(), cols = x.cols();
    auto n = make_node({cols, rows}, {x});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) n->value[c * rows + r] = x.value()[r * cols + c];
    n->backprop = [rows, cols](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0]))
            for (int64_t c = 0; c < cols; ++c)
                for (int64_t r = 0; r < rows; ++r) gx[r * cols + c] += g[c * rows + r];
    };
    return Tensor(n);
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
    auto n = make_node(std::move(shape), {x});
    check(n->numel() == x.numel(), "reshape: element count mismatch");
    n->value = x.value();
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0])) kernels::axpy(self.numel(), 1.0, g, gx);
    };
    return Tensor(n);
}

// --- nonlinearities -----------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
    const int64_t rows = x.rows(), cols = x.cols();
    auto n = make_node(x.shape(), {x});
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.value().data() + r * cols;
        double* yr = n->value.data() + r * cols;
        double mx = xr[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            denom += yr[c];
        }
        double inv = 1.0 / denom;
        for (int64_t c = 0; c < cols; ++c) yr[c] *= inv;
    }
    n->backprop = [rows, cols](const Node& self, const double* g, GradStore& gs) {
        double* gx = grad_of(gs, self.inputs[0]);
        if (!gx) return;
        for (int64_t r = 0; r < rows; ++r) {
            const double* yr = self.value.data() + r * cols;
            const double* gr = g + r * cols;
            double dot = kernels::dot(cols, yr, gr);
            double* gxr = gx + r * cols;
            for (int64_t c = 0; c < cols; ++c) gxr[c] += yr[c] * (gr[c] - dot);
        }
    };
    return Tensor(n);
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int64_t rows = x.rows(), cols = x.cols();
    check(gamma.numel() == cols && beta.numel() == cols, "layernorm: affine width mismatch");
    auto n = make_node(x.shape(), {x, gamma, beta});
    std::vector<double> means(static_cast<size_t>(rows)), rstds(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        double mean, var;
        kernels::mean_var(cols, x.value().data() + r * cols, &mean, &var);
        means[static_cast<size_t>(r)] = mean;
        double rstd = 1.0 / std::sqrt(var + eps);
        rstds[static_cast<size_t>(r)] = rstd;
        const double* xr = x.value().data() + r * cols;
        double* yr = n->value.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c)
            yr[c] = (xr[c] - mean) * rstd * gamma.value()[c] + beta.value()[c];
    }
    n->backprop = [rows, cols, means = std::move(means), rstds = std::move(rstds)](
                      const Node& self, const double* g, GradStore& gs) {
        const auto& xv = self.inputs[0]->value;
        const auto& gv = self.inputs[1]->value;
        double* gx = grad_of(gs, self.inputs[0]);
        double* gg = grad_of(gs, self.inputs[1]);
        double* gb = grad_of(gs, self.inputs[2]);
        std::vector<double> xhat(static_cast<size_t>(cols));
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = xv.data() + r * cols;
            const double* gr = g + r * cols;
            const double mean = means[static_cast<size_t>(r)];
            const double rstd = rstds[static_cast<size_t>(r)];
            for (int64_t c = 0; c < cols; ++c) xhat[static_cast<size_t>(c)] = (xr[c] - mean) * rstd;
            if (gb) kernels::axpy(cols, 1.0, gr, gb);
            if (gg)
                for (int64_t c = 0; c < cols; ++c) gg[c] += gr[c] * xhat[static_cast<size_t>(c)];
            if (gx) {
                double sum_d = 0.0, sum_dx = 0.0;
                for (int64_t c = 0; c < cols; ++c) {
                    double d = gr[c] * gv[c];
                    sum_d += d;
                    sum_dx += d * xhat[static_cast<size_t>(c)];
                }
                const double inv = 1.0 / static_cast<double>(cols);
                double* gxr = gx + r * cols;
                for (int64_t c = 0; c < cols; ++c) {
                    double d = gr[c] * gv[c];
                    gxr[c] += rstd * (d - inv * sum_d - xhat[static_cast<size_t>(c)] * inv * sum_dx);
                }
            }
        }
    };
    return Tensor(n);
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& x) {
    auto n = make_node(x.shape(), {x});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) {
        double v = x.value()[i];
        n->value[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        double* gx = grad_of(gs, self.inputs[0]);
        if (!gx) return;
        const auto& xv = self.inputs[0]->value;
        const int64_t m = self.numel();
        for (int64_t i = 0; i < m; ++i) {
            double v = xv[i];
            double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    };
    return Tensor(n);
}

Tensor sigmoid(const Tensor& x) {
    auto n = make_node(x.shape(), {x});
    const int64_t m = n->numel();
    for (int64_t i = 0; i < m; ++i) {
        double v = x.value()[i];
        n->value[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        double* gx = grad_of(gs, self.inputs[0]);
        if (!gx) return;
        const int64_t m = self.numel();
        for (int64_t i = 0; i < m; ++i) {
            double y = self.value[i];
            gx[i] += g[i] * y * (1.0 - y);
        }
    };
    return Tensor(n);
}

Tensor sum_all(const Tensor& x) {
    auto n = make_node({1}, {x});
    n->value[0] = kernels::sum(x.numel(), x.value().data());
    n->backprop = [](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0])) {
            const int64_t m = self.inputs[0]->numel();
            for (int64_t i = 0; i < m; ++i) gx[i] += g[0];
        }
    };
    return Tensor(n);
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// --- 3D conv / resampling -------------------------------------------------------

Tensor conv3d_3x3x3(const Tensor& x, const Tensor& w, const Tensor& b, const Dims3& dims) {
    const int64_t cin = x.rows(), v = x.cols();
    const int64_t cout = w.rows();
    check(v == dims.voxels(), "conv3d: dims/voxel mismatch");
    check(w.cols() == cin * 27, "conv3d: weight shape mismatch");
    check(b.numel() == cout, "conv3d: bias shape mismatch");
    const int64_t H = dims.h, W = dims.w, D = dims.d;

    // Enumerates the overlap of the volume with itself shifted by (dh,dw,dd)
    // as contiguous d-runs; fn(dst_off, src_off, len) with src = dst + shift.
    auto for_runs = [H, W, D](int64_t dh, int64_t dw, int64_t dd, auto&& fn) {
        const int64_t h0 = std::max<int64_t>(0, -dh), h1 = std::min(H, H - dh);
        const int64_t w0 = std::max<int64_t>(0, -dw), w1 = std::min(W, W - dw);
        const int64_t d0 = std::max<int64_t>(0, -dd), d1 = std::min(D, D - dd);
        const int64_t len = d1 - d0;
        if (len <= 0) return;
        for (int64_t h = h0; h < h1; ++h)
            for (int64_t ww = w0; ww < w1; ++ww) {
                const int64_t dst = (h * W + ww) * D + d0;
                const int64_t src = ((h + dh) * W + (ww + dw)) * D + (d0 + dd);
                fn(dst, src, len);
            }
    };

    auto n = make_node({cout, v}, {x, w, b});
    for (int64_t co = 0; co < cout; ++co) {
        double* out = n->value.data() + co * v;
        const double bias = b.value()[co];
        for (int64_t i = 0; i < v; ++i) out[i] = bias;
        for (int64_t ci = 0; ci < cin; ++ci) {
            const double* in = x.value().data() + ci * v;
            for (int64_t o = 0; o < 27; ++o) {
                const double wt = w.value()[co * cin * 27 + ci * 27 + o];
                if (wt == 0.0) continue;
                const int64_t dh = o / 9 - 1, dw = (o / 3) % 3 - 1, dd = o % 3 - 1;
                for_runs(dh, dw, dd, [&](int64_t dst, int64_t src, int64_t len) {
                    kernels::axpy(len, wt, in + src, out + dst);
                });
            }
        }
    }
    n->backprop = [cin, cout, v, for_runs](const Node& self, const double* g, GradStore& gs) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        double* gx = grad_of(gs, self.inputs[0]);
        double* gw = grad_of(gs, self.inputs[1]);
        double* gb = grad_of(gs, self.inputs[2]);
        for (int64_t co = 0; co < cout; ++co) {
            const double* gout = g + co * v;
            if (gb) gb[co] += kernels::sum(v, gout);
            for (int64_t ci = 0; ci < cin; ++ci) {
                for (int64_t o = 0; o < 27; ++o) {
                    const int64_t dh = o / 9 - 1, dw = (o / 3) % 3 - 1, dd = o % 3 - 1;
                    const int64_t wi = co * cin * 27 + ci * 27 + o;
                    if (gw) {
                        double acc = 0.0;
                        for_runs(dh, dw, dd, [&](int64_t dst, int64_t src, int64_t len) {
                            acc += kernels::dot(len, xv.data() + ci * v + src, gout + dst);
                        });
                        gw[wi] += acc;
                    }
                    if (gx) {
                        const double wt = wv[wi];
                        if (wt != 0.0)
                            for_runs(dh, dw, dd, [&](int64_t dst, int64_t src, int64_t len) {
                                kernels::axpy(len, wt, gout + dst, gx + ci * v + src);
                            });
                    }
                }
            }
        }
    };
    return Tensor(n);
}

Tensor upsample_nearest2(const Tensor& x, const Dims3& dims) {
    const int64_t c = x.rows(), v = x.cols();
    check(v == dims.voxels(), "upsample: dims/voxel mismatch");
    const int64_t H = dims.h, W = dims.w, D = dims.d;
    const Dims3 od{2 * H, 2 * W, 2 * D};
    auto n = make_node({c, od.voxels()}, {x});
    for (int64_t ch = 0; ch < c; ++ch) {
        const double* in = x.value().data() + ch * v;
        double* out = n->value.data() + ch * od.voxels();
        for (int64_t h = 0; h < od.h; ++h)
            for (int64_t w = 0; w < od.w; ++w) {
                const double* src = in + ((h / 2) * W + (w / 2)) * D;
                double* dst = out + (h * od.w + w) * od.d;
                for (int64_t d = 0; d < od.d; ++d) dst[d] = src[d / 2];
            }
    }
    n->backprop = [c, v, H, W, D, od](const Node& self, const double* g, GradStore& gs) {
        double* gx = grad_of(gs, self.inputs[0]);
        if (!gx) return;
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* gout = g + ch * od.voxels();
            double* gin = gx + ch * v;
            for (int64_t h = 0; h < od.h; ++h)
                for (int64_t w = 0; w < od.w; ++w) {
                    double* dst = gin + ((h / 2) * W + (w / 2)) * D;
                    const double* src = gout + (h * od.w + w) * od.d;
                    for (int64_t d = 0; d < od.d; ++d) dst[d / 2] += src[d];
                }
        }
    };
    return Tensor(n);
}

// --- losses ---------------------------------------------------------------------

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<uint8_t>& labels) {
    const int64_t rows = logits.rows(), cols = logits.cols();
    check(static_cast<int64_t>(labels.size()) == rows, "cross_entropy: label count mismatch");
    for (uint8_t l : labels) check(l < cols, "cross_entropy: label out of range");
    auto n = make_node({1}, {logits});
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = logits.value().data() + r * cols;
        double mx = xr[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double lse = 0.0;
        for (int64_t c = 0; c < cols; ++c) lse += std::exp(xr[c] - mx);
        total += (mx + std::log(lse)) - xr[labels[static_cast<size_t>(r)]];
    }
    n->value[0] = total / static_cast<double>(rows);
    n->backprop = [rows, cols, labels](const Node& self, const double* g, GradStore& gs) {
        double* gx = grad_of(gs, self.inputs[0]);
        if (!gx) return;
        const auto& xv = self.inputs[0]->value;
        const double s = g[0] / static_cast<double>(rows);
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = xv.data() + r * cols;
            double mx = xr[0];
            for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
            double denom = 0.0;
            for (int64_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
            double* gxr = gx + r * cols;
            for (int64_t c = 0; c < cols; ++c) {
                double p = std::exp(xr[c] - mx) / denom;
                gxr[c] += s * (p - (labels[static_cast<size_t>(r)] == c ? 1.0 : 0.0));
            }
        }
    };
    return Tensor(n);
}

Tensor bce_with_logit(const Tensor& logit, double target) {
    check(logit.numel() == 1, "bce_with_logit: scalar logit expected");
    auto n = make_node({1}, {logit});
    const double z = logit.value()[0];
    n->value[0] = softplus(z) - target * z;
    n->backprop = [target](const Node& self, const double* g, GradStore& gs) {
        if (double* gx = grad_of(gs, self.inputs[0])) {
            const double z = self.inputs[0]->value[0];
            const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            gx[0] += g[0] * (sig - target);
        }
    };
    return Tensor(n);
}

Tensor hazard_nll_op(const Tensor& logits, int interval, int event) {
    const int64_t k = logits.numel();
    if (interval < 1 || interval > k) throw ConfigError("hazard_nll: interval out of range");
    if (event != 0 && event != 1) throw ConfigError("hazard_nll: event must be 0 or 1");
    auto n = make_node({1}, {logits});
    // -[delta*log(sigma(a_k)) + sum_{j<=k-delta} log(1-sigma(a_j))]
    // log(sigma(a)) = -softplus(-a); log(1-sigma(a)) = -softplus(a)
    double loss = 0.0;
    const auto& a = logits.value();
    if (event == 1) loss += softplus(-a[static_cast<size_t>(interval - 1)]);
    for (int j = 0; j < interval - event; ++j) loss += softplus(a[static_cast<size_t>(j)]);
    n->value[0] = loss;
    n->backprop = [interval, event](const Node& self, const double* g, GradStore& gs) {
        double* gx = grad_of(gs, self.inputs[0]);
        if (!gx) return;
        const auto& a = self.inputs[0]->value;
        auto sig = [](double v) {
            return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        };
        if (event == 1) gx[interval - 1] -= g[0] * sig(-a[static_cast<size_t>(interval - 1)]);
        for (int j = 0; j < interval - event; ++j) gx[j] += g[0] * sig(a[static_cast<size_t>(j)]);
    };
    return Tensor(n);
}

Tensor masked_patch_mse(const Tensor& pred, const std::vector<double>& target,
                        const std::vector<int64_t>& masked) {
    const int64_t rows = pred.rows(), cols = pred.cols();
    check(static_cast<int64_t>(target.size()) == rows * cols, "masked_patch_mse: target size");
    check(!masked.empty(), "masked_patch_mse: empty masked set");
    for (int64_t i : masked) check(0 <= i && i < rows, "masked_patch_mse: index out of range");
    auto n = make_node({1}, {pred});
    double total = 0.0;
    for (int64_t i : masked) {
        const double* pr = pred.value().data() + i * cols;
        const double* tr = target.data() + i * cols;
        double acc = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            double d = pr[c] - tr[c];
            acc += d * d;
        }
        total += acc / static_cast<double>(cols);
    }
    n->value[0] = total / static_cast<double>(masked.size());
    n->backprop = [target, masked, cols](const Node& self, const double* g, GradStore& gs) {
        double* gx = grad_of(gs, self.inputs[0]);
        if (!gx) return;
        const auto& pv = self.inputs[0]->value;
        const double s = 2.0 * g[0] / (static_cast<double>(cols) * static_cast<double>(masked.size()));
        for (int64_t i : masked) {
            const double* pr = pv.data() + i * cols;
            const double* tr = target.data() + i * cols;
            double* gr = gx + i * cols;
            for (int64_t c = 0; c < cols; ++c) gr[c] += s * (pr[c] - tr[c]);
        }
    };
    return Tensor(n);
}

}  // namespace bmmae
