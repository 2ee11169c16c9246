#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "bmmae/common.hpp"

namespace bmmae {

namespace autodiff {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Gradient buffers for one backward pass. Kept outside the nodes so several
// workers can differentiate graphs that share parameter leaves without
// touching shared state; nodes stay read-only during backward. Slots are
// keyed by node address, so the store pins every graph differentiated into
// it: otherwise a freed graph's addresses could be reused by a later one and
// its stale slots would collide.
class GradStore {
public:
    double* get(const Node* n, int64_t numel);
    const double* find(const Node* n) const;
    void pin(NodePtr root) { pinned_.push_back(std::move(root)); }
    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (const auto& [node, buf] : slots_) fn(node, buf);
    }

private:
    std::unordered_map<const Node*, std::vector<double>> slots_;
    std::vector<NodePtr> pinned_;
};

struct Node {
    std::vector<int64_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // accumulated by Tensor::backward for inspection
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    // Accumulates input gradients given d(root)/d(self).
    std::function<void(const Node& self, const double* gself, GradStore& gs)> backprop;

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t s : shape) n *= s;
        return n;
    }
};

}  // namespace autodiff

// Handle to a node of a dynamically built computation graph. Values are f64.
// Shapes are mostly 2D row-major matrices; 3D volumes travel as [C, H*W*D]
// with dims passed alongside.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(autodiff::NodePtr n) : n_(std::move(n)) {}

    static Tensor from_data(std::vector<int64_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const { return n_->shape; }
    int64_t numel() const { return n_->numel(); }
    int64_t rows() const { return n_->shape.at(0); }
    int64_t cols() const { return n_->shape.at(1); }
    const std::vector<double>& value() const { return n_->value; }
    std::vector<double>& value_mutable() { return n_->value; }
    double item() const;

    bool requires_grad() const { return n_->requires_grad; }
    const std::vector<double>& grad() const;
    void zero_grad();

    autodiff::Node* node() const { return n_.get(); }
    autodiff::NodePtr node_ptr() const { return n_; }

    // Reverse-mode differentiation from a scalar root. Gradients land in the
    // store; backward() additionally accumulates them into node.grad of every
    // requires_grad node for inspection.
    void backward() const;
    void backward_into(autodiff::GradStore& gs) const;

private:
    autodiff::NodePtr n_;
};

// --- graph ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x*w + b

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
Tensor add_n(const std::vector<Tensor>& xs);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // broadcast v over rows

Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1);
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor gather_rows(const Tensor& x, std::vector<int64_t> idx);
// out has `out_rows` rows; row dst[j] = src row j, uncovered rows = fill.
Tensor scatter_rows_fill(const Tensor& src, std::vector<int64_t> dst, int64_t out_rows,
                         const Tensor& fill);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);

Tensor softmax_rows(const Tensor& x);
Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// 3D conv / resampling over [C, H*W*D] maps. Weights: [Cout, Cin*27] for the
// 3x3x3 kernel with offset order ((dh*3)+dw)*3+dd, dh/dw/dd in {-1,0,1}+1.
Tensor conv3d_3x3x3(const Tensor& x, const Tensor& w, const Tensor& b, const Dims3& dims);
Tensor upsample_nearest2(const Tensor& x, const Dims3& dims);  // -> [C, 8*V]

// Losses (scalar outputs).
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<uint8_t>& labels);
Tensor bce_with_logit(const Tensor& logit, double target);
Tensor hazard_nll_op(const Tensor& logits, int interval, int event);
// Mean over `masked` patch rows of the per-row mean squared voxel error.
Tensor masked_patch_mse(const Tensor& pred, const std::vector<double>& target,
                        const std::vector<int64_t>& masked);

// Stable softplus: log(1 + exp(x)).
double softplus(double x);

}  // namespace bmmae
