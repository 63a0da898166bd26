#pragma once

// Reverse-mode autodiff over Tensor. A Var wraps a graph node; ops build the
// tape when grad mode is on and at least one input requires gradients.
// backward(loss) accumulates into each bound Param's grad tensor. The trainer
// is single-threaded, so grad mode is a plain global.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tbwm/rng.hpp"
#include "tbwm/tensor.hpp"

namespace tbwm::ad {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m;  // AdamW first moment
    Tensor v;  // AdamW second moment

    Param(std::string n, Tensor init);
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Param* param = nullptr;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    static Var constant(Tensor t);
    static Var leaf(Param& p);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const NodePtr& node() const { return node_; }

    int rows() const { return node_->value.rows(); }
    int cols() const { return node_->value.cols(); }

private:
    NodePtr node_;
};

bool grad_enabled();
void set_grad_enabled(bool on);

// RAII guard for forward-only regions (collection, evaluation, imagination
// stepping of the frozen world model).
class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Seeds d(loss)/d(loss) = 1 (loss must be 1x1) and propagates to all leaves.
void backward(const Var& loss);

// --- elementwise / broadcast ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_rowvec(const Var& a, const Var& v);   // v: (1, n)
Var mul_rowvec(const Var& a, const Var& v);   // v: (1, n)
Var mul_colvec_const(const Var& a, const std::vector<double>& w);
Var mul_mask(const Var& a, const Tensor& mask);
Var silu(const Var& a);
Var tanh_v(const Var& a);
Var sigmoid_v(const Var& a);
Var dropout(const Var& a, double p, Rng& rng);

// --- linear algebra / shaping ---
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// Row-major reinterpretation (same element count, shared layout).
Var reshape(const Var& a, int rows, int cols);
Var slice_rows(const Var& a, int r0, int r1);
Var slice_cols(const Var& a, int c0, int c1);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

// --- normalization / softmax / losses ---
Var layernorm_rows(const Var& a, double eps = 1e-6);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
// Per-row cross-entropy with integer targets; returns (rows, 1).
Var ce_rows(const Var& logits, const std::vector<int>& targets);
// Per-row cross-entropy against a fixed target distribution; returns (rows, 1).
Var ce_rows_dist(const Var& logits, const Tensor& target_probs);

// --- reductions / indexing ---
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);                       // (m, n) -> (m, 1)
Var select_cols(const Var& a, const std::vector<int>& idx);  // (m, 1)
Var gather_rows(const Var& table, const std::vector<int>& indices);
Var stopgrad(const Var& a);

// Reinterprets an NCHW batch as one latent vector per spatial cell:
// (N, C*H*W) -> (N*H*W, C), and its inverse.
Var nchw_to_rows(const Var& x, int C, int H, int W);
Var rows_to_nchw(const Var& x, int C, int H, int W);

// --- image ops (x is (N, C*H*W) row-major NCHW) ---
Var conv2d(const Var& x, int C, int H, int W, const Var& w, const Var& b,
           int kh, int kw, int stride, int pad_top, int pad_left,
           int pad_bottom, int pad_right);
Var group_norm(const Var& x, int C, int H, int W, int groups, const Var& gain,
               const Var& bias, double eps = 1e-6);
Var batch_norm(const Var& x, int C, int H, int W, const Var& gain,
               const Var& bias, Tensor& running_mean, Tensor& running_var,
               bool training, double momentum = 0.1, double eps = 1e-5);
Var upsample2x_nearest(const Var& x, int C, int H, int W);

}  // namespace tbwm::ad
