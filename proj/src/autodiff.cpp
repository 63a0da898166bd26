#include "tbwm/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "tbwm/kernels.hpp"

namespace tbwm::ad {

namespace {

bool g_grad_enabled = true;

void check_2d(const Var& v, const char* op) {
    if (!v.defined() || v.value().shape().size() != 2)
        throw std::invalid_argument(std::string(op) + ": expects a 2D tensor");
}

bool any_requires(std::span<const NodePtr> parents) {
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

Var make(Tensor value, std::vector<NodePtr> parents,
         std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_grad_enabled && any_requires(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(fn);
    }
    return Var(n);
}

void accum(const NodePtr& p, const Tensor& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    double* dst = p->grad.data();
    const double* src = g.data();
    const std::int64_t n = g.size();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

Param::Param(std::string n, Tensor init)
    : name(std::move(n)),
      value(std::move(init)),
      grad(value.shape()),
      m(value.shape()),
      v(value.shape()) {}

void Node::ensure_grad() {
    if (!grad.defined()) grad = Tensor(value.shape());
}

Var Var::constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(n);
}

Var Var::leaf(Param& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;  // shares storage
    n->requires_grad = g_grad_enabled;
    n->param = &p;
    return Var(n);
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

void backward(const Var& loss) {
    if (!loss.defined() || loss.value().size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar");
    if (!loss.node()->requires_grad) return;

    // Topological order by iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* parent = node->parents[idx++].get();
            if (parent && parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad.data()[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->grad.defined()) continue;  // unreachable from the loss
        if (n->backprop) n->backprop(*n);
        if (n->param) {
            double* dst = n->param->grad.data();
            const double* src = n->grad.data();
            const std::int64_t sz = n->grad.size();
            for (std::int64_t i = 0; i < sz; ++i) dst[i] += src[i];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("add: shape mismatch");
    Tensor out = a.value().clone();
    const double* pb = b.value().data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] += pb[i];
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn](Node& n) {
        accum(an, n.grad);
        accum(bn, n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("sub: shape mismatch");
    Tensor out = a.value().clone();
    const double* pb = b.value().data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] -= pb[i];
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn](Node& n) {
        accum(an, n.grad);
        if (!bn->requires_grad) return;
        bn->ensure_grad();
        double* dst = bn->grad.data();
        const double* g = n.grad.data();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) dst[i] -= g[i];
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("mul: shape mismatch");
    Tensor out = a.value().clone();
    const double* pb = b.value().data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] *= pb[i];
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn](Node& n) {
        const double* g = n.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            double* dst = an->grad.data();
            const double* pb = bn->value.data();
            for (std::int64_t i = 0; i < n.grad.size(); ++i)
                dst[i] += g[i] * pb[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            double* dst = bn->grad.data();
            const double* pa = an->value.data();
            for (std::int64_t i = 0; i < n.grad.size(); ++i)
                dst[i] += g[i] * pa[i];
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a.value().clone();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] *= c;
    auto an = a.node();
    return make(std::move(out), {an}, [an, c](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = n.grad.data();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) dst[i] += c * g[i];
    });
}

Var add_rowvec(const Var& a, const Var& v) {
    check_2d(a, "add_rowvec");
    if (v.value().rows() != 1 || v.value().cols() != a.value().cols())
        throw std::invalid_argument("add_rowvec: bias shape mismatch");
    const int rows = a.rows(), cols = a.cols();
    Tensor out = a.value().clone();
    const double* pv = v.value().data();
    for (int i = 0; i < rows; ++i) {
        double* po = out.data() + static_cast<std::int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) po[j] += pv[j];
    }
    auto an = a.node(), vn = v.node();
    return make(std::move(out), {an, vn}, [an, vn, rows, cols](Node& n) {
        accum(an, n.grad);
        if (!vn->requires_grad) return;
        vn->ensure_grad();
        double* dst = vn->grad.data();
        const double* g = n.grad.data();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j)
                dst[j] += g[static_cast<std::int64_t>(i) * cols + j];
    });
}

Var mul_rowvec(const Var& a, const Var& v) {
    check_2d(a, "mul_rowvec");
    if (v.value().rows() != 1 || v.value().cols() != a.value().cols())
        throw std::invalid_argument("mul_rowvec: vector shape mismatch");
    const int rows = a.rows(), cols = a.cols();
    Tensor out = a.value().clone();
    const double* pv = v.value().data();
    for (int i = 0; i < rows; ++i) {
        double* po = out.data() + static_cast<std::int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) po[j] *= pv[j];
    }
    auto an = a.node(), vn = v.node();
    return make(std::move(out), {an, vn}, [an, vn, rows, cols](Node& n) {
        const double* g = n.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            double* dst = an->grad.data();
            const double* pv = vn->value.data();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    const std::int64_t o = static_cast<std::int64_t>(i) * cols + j;
                    dst[o] += g[o] * pv[j];
                }
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            double* dst = vn->grad.data();
            const double* pa = an->value.data();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    const std::int64_t o = static_cast<std::int64_t>(i) * cols + j;
                    dst[j] += g[o] * pa[o];
                }
        }
    });
}

Var mul_colvec_const(const Var& a, const std::vector<double>& w) {
    check_2d(a, "mul_colvec_const");
    const int rows = a.rows(), cols = a.cols();
    if (static_cast<int>(w.size()) != rows)
        throw std::invalid_argument("mul_colvec_const: weight length mismatch");
    Tensor out = a.value().clone();
    for (int i = 0; i < rows; ++i) {
        double* po = out.data() + static_cast<std::int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) po[j] *= w[i];
    }
    auto an = a.node();
    return make(std::move(out), {an}, [an, w, rows, cols](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = n.grad.data();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                const std::int64_t o = static_cast<std::int64_t>(i) * cols + j;
                dst[o] += g[o] * w[i];
            }
    });
}

Var mul_mask(const Var& a, const Tensor& mask) {
    if (!a.value().same_shape(mask))
        throw std::invalid_argument("mul_mask: shape mismatch");
    Tensor out = a.value().clone();
    const double* pm = mask.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] *= pm[i];
    auto an = a.node();
    return make(std::move(out), {an}, [an, mask](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = n.grad.data();
        const double* pm = mask.data();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) dst[i] += g[i] * pm[i];
    });
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var silu(const Var& a) {
    Tensor out = a.value().clone();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] *= sigmoid(po[i]);
    auto an = a.node();
    return make(std::move(out), {an}, [an](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = n.grad.data();
        const double* x = an->value.data();
        for (std::int64_t i = 0; i < n.grad.size(); ++i) {
            const double s = sigmoid(x[i]);
            dst[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
}

Var tanh_v(const Var& a) {
    Tensor out = a.value().clone();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] = std::tanh(po[i]);
    auto an = a.node();
    return make(std::move(out), {an}, [an](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = n.grad.data();
        const double* y = n.value.data();
        for (std::int64_t i = 0; i < n.grad.size(); ++i)
            dst[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Var sigmoid_v(const Var& a) {
    Tensor out = a.value().clone();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] = sigmoid(po[i]);
    auto an = a.node();
    return make(std::move(out), {an}, [an](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = n.grad.data();
        const double* y = n.value.data();
        for (std::int64_t i = 0; i < n.grad.size(); ++i)
            dst[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var dropout(const Var& a, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: bad p");
    if (p == 0.0) return a;
    Tensor mask(a.value().shape());
    const double keep = 1.0 - p;
    double* pm = mask.data();
    for (std::int64_t i = 0; i < mask.size(); ++i)
        pm[i] = rng.uniform() < p ? 0.0 : 1.0 / keep;
    return mul_mask(a, mask);
}

// ---------------------------------------------------------------------------
// linear algebra / shaping

Var matmul(const Var& a, const Var& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul: inner dim mismatch");
    Tensor out(m, n);
    kernels::matmul(a.value().data(), b.value().data(), out.data(), m, k, n);
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn, m, k, n](Node& nd) {
        const double* g = nd.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += G * B^T : (m x n) * (k x n)^T
            kernels::matmul_nt(g, bn->value.data(), an->grad.data(), m, n, k,
                               /*accumulate=*/true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB += A^T * G : (m x k)^T * (m x n)
            kernels::matmul_tn(an->value.data(), g, bn->grad.data(), k, m, n,
                               /*accumulate=*/true);
        }
    });
}

Var reshape(const Var& a, int rows, int cols) {
    if (static_cast<std::int64_t>(rows) * cols != a.value().size())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out = a.value().reshaped({rows, cols});
    auto an = a.node();
    return make(std::move(out), {an}, [an](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = nd.grad.data();
        for (std::int64_t i = 0; i < nd.grad.size(); ++i) dst[i] += g[i];
    });
}

Var transpose(const Var& a) {
    check_2d(a, "transpose");
    const int m = a.rows(), n = a.cols();
    Tensor out(n, m);
    const double* pa = a.value().data();
    double* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            po[static_cast<std::int64_t>(j) * m + i] =
                pa[static_cast<std::int64_t>(i) * n + j];
    auto an = a.node();
    return make(std::move(out), {an}, [an, m, n](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = nd.grad.data();
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                dst[static_cast<std::int64_t>(i) * n + j] +=
                    g[static_cast<std::int64_t>(j) * m + i];
    });
}

Var slice_rows(const Var& a, int r0, int r1) {
    check_2d(a, "slice_rows");
    const int m = a.rows(), n = a.cols();
    if (r0 < 0 || r1 > m || r0 >= r1)
        throw std::invalid_argument("slice_rows: bad range");
    Tensor out(r1 - r0, n);
    const double* pa = a.value().data() + static_cast<std::int64_t>(r0) * n;
    double* po = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i];
    auto an = a.node();
    return make(std::move(out), {an}, [an, r0, n](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data() + static_cast<std::int64_t>(r0) * n;
        const double* g = nd.grad.data();
        for (std::int64_t i = 0; i < nd.grad.size(); ++i) dst[i] += g[i];
    });
}

Var slice_cols(const Var& a, int c0, int c1) {
    check_2d(a, "slice_cols");
    const int m = a.rows(), n = a.cols();
    if (c0 < 0 || c1 > n || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    const int w = c1 - c0;
    Tensor out(m, w);
    const double* pa = a.value().data();
    double* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            po[static_cast<std::int64_t>(i) * w + j] =
                pa[static_cast<std::int64_t>(i) * n + c0 + j];
    auto an = a.node();
    return make(std::move(out), {an}, [an, c0, w, n, m](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        double* dst = an->grad.data();
        const double* g = nd.grad.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                dst[static_cast<std::int64_t>(i) * n + c0 + j] +=
                    g[static_cast<std::int64_t>(i) * w + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int n = parts[0].cols();
    int m = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_rows");
        if (p.cols() != n)
            throw std::invalid_argument("concat_rows: column mismatch");
        m += p.rows();
    }
    Tensor out(m, n);
    double* po = out.data();
    std::vector<NodePtr> parents;
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        const double* src = p.value().data();
        const std::int64_t cnt = p.value().size();
        for (std::int64_t i = 0; i < cnt; ++i)
            po[static_cast<std::int64_t>(off) * n + i] = src[i];
        parents.push_back(p.node());
        offsets.push_back(off);
        off += p.rows();
    }
    auto ps = parents;
    return make(std::move(out), std::move(parents), [ps, offsets, n](Node& nd) {
        const double* g = nd.grad.data();
        for (std::size_t k = 0; k < ps.size(); ++k) {
            if (!ps[k]->requires_grad) continue;
            ps[k]->ensure_grad();
            double* dst = ps[k]->grad.data();
            const std::int64_t cnt = ps[k]->grad.size();
            const double* src = g + static_cast<std::int64_t>(offsets[k]) * n;
            for (std::int64_t i = 0; i < cnt; ++i) dst[i] += src[i];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int m = parts[0].rows();
    int n = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_cols");
        if (p.rows() != m)
            throw std::invalid_argument("concat_cols: row mismatch");
        n += p.cols();
    }
    Tensor out(m, n);
    double* po = out.data();
    std::vector<NodePtr> parents;
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.cols();
        const double* src = p.value().data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                po[static_cast<std::int64_t>(i) * n + off + j] =
                    src[static_cast<std::int64_t>(i) * w + j];
        parents.push_back(p.node());
        offsets.push_back(off);
        off += w;
    }
    auto ps = parents;
    return make(std::move(out), std::move(parents), [ps, offsets, m, n](Node& nd) {
        const double* g = nd.grad.data();
        for (std::size_t k = 0; k < ps.size(); ++k) {
            if (!ps[k]->requires_grad) continue;
            ps[k]->ensure_grad();
            const int w = ps[k]->grad.cols();
            double* dst = ps[k]->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    dst[static_cast<std::int64_t>(i) * w + j] +=
                        g[static_cast<std::int64_t>(i) * n + offsets[k] + j];
        }
    });
}

// ---------------------------------------------------------------------------
// normalization / softmax / losses

Var layernorm_rows(const Var& a, double eps) {
    check_2d(a, "layernorm_rows");
    const int m = a.rows(), n = a.cols();
    Tensor out(m, n);
    Tensor invstd({m});
    const double* x = a.value().data();
    double* y = out.data();
    for (int i = 0; i < m; ++i) {
        const double* xi = x + static_cast<std::int64_t>(i) * n;
        double* yi = y + static_cast<std::int64_t>(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += xi[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[i] = is;
        for (int j = 0; j < n; ++j) yi[j] = (xi[j] - mu) * is;
    }
    auto an = a.node();
    return make(std::move(out), {an}, [an, invstd, m, n](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        double* dst = an->grad.data();
        for (int i = 0; i < m; ++i) {
            const double* gi = g + static_cast<std::int64_t>(i) * n;
            const double* yi = y + static_cast<std::int64_t>(i) * n;
            double* di = dst + static_cast<std::int64_t>(i) * n;
            double gmean = 0.0, gymean = 0.0;
            for (int j = 0; j < n; ++j) {
                gmean += gi[j];
                gymean += gi[j] * yi[j];
            }
            gmean /= n;
            gymean /= n;
            const double is = invstd[i];
            for (int j = 0; j < n; ++j)
                di[j] += (gi[j] - gmean - yi[j] * gymean) * is;
        }
    });
}

Var softmax_rows(const Var& a) {
    check_2d(a, "softmax_rows");
    const int m = a.rows(), n = a.cols();
    Tensor out(m, n);
    kernels::softmax_rows(a.value().data(), out.data(), m, n);
    auto an = a.node();
    return make(std::move(out), {an}, [an, m, n](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        double* dst = an->grad.data();
        for (int i = 0; i < m; ++i) {
            const double* gi = g + static_cast<std::int64_t>(i) * n;
            const double* yi = y + static_cast<std::int64_t>(i) * n;
            double* di = dst + static_cast<std::int64_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += gi[j] * yi[j];
            for (int j = 0; j < n; ++j) di[j] += yi[j] * (gi[j] - dot);
        }
    });
}

Var log_softmax_rows(const Var& a) {
    check_2d(a, "log_softmax_rows");
    const int m = a.rows(), n = a.cols();
    Tensor out(m, n);
    const double* x = a.value().data();
    double* y = out.data();
    for (int i = 0; i < m; ++i) {
        const double* xi = x + static_cast<std::int64_t>(i) * n;
        double* yi = y + static_cast<std::int64_t>(i) * n;
        double mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
        const double lse = mx + std::log(sum);
        for (int j = 0; j < n; ++j) yi[j] = xi[j] - lse;
    }
    auto an = a.node();
    return make(std::move(out), {an}, [an, m, n](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        double* dst = an->grad.data();
        for (int i = 0; i < m; ++i) {
            const double* gi = g + static_cast<std::int64_t>(i) * n;
            const double* yi = y + static_cast<std::int64_t>(i) * n;
            double* di = dst + static_cast<std::int64_t>(i) * n;
            double gsum = 0.0;
            for (int j = 0; j < n; ++j) gsum += gi[j];
            for (int j = 0; j < n; ++j) di[j] += gi[j] - std::exp(yi[j]) * gsum;
        }
    });
}

Var ce_rows(const Var& logits, const std::vector<int>& targets) {
    check_2d(logits, "ce_rows");
    const int m = logits.rows(), n = logits.cols();
    if (static_cast<int>(targets.size()) != m)
        throw std::invalid_argument("ce_rows: target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= n)
            throw std::invalid_argument("ce_rows: target out of range");
    Tensor soft(m, n);
    kernels::softmax_rows(logits.value().data(), soft.data(), m, n);
    Tensor out(m, 1);
    const double* x = logits.value().data();
    for (int i = 0; i < m; ++i) {
        const double* xi = x + static_cast<std::int64_t>(i) * n;
        double mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
        out[i] = mx + std::log(sum) - xi[targets[i]];
    }
    auto ln = logits.node();
    return make(std::move(out), {ln}, [ln, soft, targets, m, n](Node& nd) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const double* g = nd.grad.data();
        const double* s = soft.data();
        double* dst = ln->grad.data();
        for (int i = 0; i < m; ++i) {
            const double gi = g[i];
            const double* si = s + static_cast<std::int64_t>(i) * n;
            double* di = dst + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) di[j] += gi * si[j];
            di[targets[i]] -= gi;
        }
    });
}

Var ce_rows_dist(const Var& logits, const Tensor& target_probs) {
    check_2d(logits, "ce_rows_dist");
    const int m = logits.rows(), n = logits.cols();
    if (!logits.value().same_shape(target_probs))
        throw std::invalid_argument("ce_rows_dist: shape mismatch");
    Tensor soft(m, n);
    kernels::softmax_rows(logits.value().data(), soft.data(), m, n);
    Tensor out(m, 1);
    const double* x = logits.value().data();
    const double* tp = target_probs.data();
    for (int i = 0; i < m; ++i) {
        const double* xi = x + static_cast<std::int64_t>(i) * n;
        const double* ti = tp + static_cast<std::int64_t>(i) * n;
        double mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
        const double lse = mx + std::log(sum);
        double loss = 0.0;
        for (int j = 0; j < n; ++j) loss -= ti[j] * (xi[j] - lse);
        out[i] = loss;
    }
    auto ln = logits.node();
    return make(std::move(out), {ln},
                [ln, soft, target_probs, m, n](Node& nd) {
                    if (!ln->requires_grad) return;
                    ln->ensure_grad();
                    const double* g = nd.grad.data();
                    const double* s = soft.data();
                    const double* tp = target_probs.data();
                    double* dst = ln->grad.data();
                    for (int i = 0; i < m; ++i) {
                        const double gi = g[i];
                        for (int j = 0; j < n; ++j) {
                            const std::int64_t o =
                                static_cast<std::int64_t>(i) * n + j;
                            dst[o] += gi * (s[o] - tp[o]);
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// reductions / indexing

Var sum(const Var& a) {
    Tensor out(1, 1);
    const double* x = a.value().data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.value().size(); ++i) acc += x[i];
    out[0] = acc;
    auto an = a.node();
    return make(std::move(out), {an}, [an](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = nd.grad[0];
        double* dst = an->grad.data();
        for (std::int64_t i = 0; i < an->grad.size(); ++i) dst[i] += g;
    });
}

Var mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a.value().size());
    return scale(sum(a), inv);
}

Var sum_rows(const Var& a) {
    check_2d(a, "sum_rows");
    const int m = a.rows(), n = a.cols();
    Tensor out(m, 1);
    const double* x = a.value().data();
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* xi = x + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) acc += xi[j];
        out[i] = acc;
    }
    auto an = a.node();
    return make(std::move(out), {an}, [an, m, n](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = nd.grad.data();
        double* dst = an->grad.data();
        for (int i = 0; i < m; ++i) {
            const double gi = g[i];
            double* di = dst + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) di[j] += gi;
        }
    });
}

Var select_cols(const Var& a, const std::vector<int>& idx) {
    check_2d(a, "select_cols");
    const int m = a.rows(), n = a.cols();
    if (static_cast<int>(idx.size()) != m)
        throw std::invalid_argument("select_cols: index count mismatch");
    Tensor out(m, 1);
    const double* x = a.value().data();
    for (int i = 0; i < m; ++i) {
        if (idx[i] < 0 || idx[i] >= n)
            throw std::invalid_argument("select_cols: index out of range");
        out[i] = x[static_cast<std::int64_t>(i) * n + idx[i]];
    }
    auto an = a.node();
    return make(std::move(out), {an}, [an, idx, n](Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double* g = nd.grad.data();
        double* dst = an->grad.data();
        for (std::size_t i = 0; i < idx.size(); ++i)
            dst[static_cast<std::int64_t>(i) * n + idx[i]] += g[i];
    });
}

Var gather_rows(const Var& table, const std::vector<int>& indices) {
    check_2d(table, "gather_rows");
    const int rows = table.rows(), n = table.cols();
    Tensor out(static_cast<int>(indices.size()), n);
    const double* x = table.value().data();
    double* po = out.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int r = indices[i];
        if (r < 0 || r >= rows)
            throw std::invalid_argument("gather_rows: index out of range");
        const double* xi = x + static_cast<std::int64_t>(r) * n;
        double* oi = po + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) oi[j] = xi[j];
    }
    auto tn = table.node();
    return make(std::move(out), {tn}, [tn, indices, n](Node& nd) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        const double* g = nd.grad.data();
        double* dst = tn->grad.data();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            double* di = dst + static_cast<std::int64_t>(indices[i]) * n;
            const double* gi = g + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) di[j] += gi[j];
        }
    });
}

Var stopgrad(const Var& a) {
    auto n = std::make_shared<Node>();
    n->value = a.value();  // shares storage, drops the graph
    return Var(n);
}

}  // namespace tbwm::ad
