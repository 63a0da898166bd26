#include <cmath>
#include <stdexcept>

#include "tbwm/autodiff.hpp"
#include "tbwm/kernels.hpp"

// Image ops operate on flattened NCHW batches: x is (N, C*H*W) row-major.

namespace tbwm::ad {

namespace {

Var make_node(Tensor value, std::vector<NodePtr> parents,
              std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool need = grad_enabled();
    if (need) {
        bool any = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) any = true;
        need = any;
    }
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(fn);
    }
    return Var(n);
}

struct ConvGeom {
    int C, H, W, Cout, kh, kw, stride;
    int pt, pl, pb, pr;
    int Hout, Wout;
};

// col: (C*kh*kw, Hout*Wout) for one sample.
void im2col(const double* x, const ConvGeom& g, double* col) {
    const int P = g.Hout * g.Wout;
    for (int c = 0; c < g.C; ++c) {
        for (int i = 0; i < g.kh; ++i) {
            for (int j = 0; j < g.kw; ++j) {
                double* row = col + (static_cast<std::int64_t>(c) * g.kh * g.kw +
                                     i * g.kw + j) *
                                        P;
                for (int oh = 0; oh < g.Hout; ++oh) {
                    const int ih = oh * g.stride + i - g.pt;
                    for (int ow = 0; ow < g.Wout; ++ow) {
                        const int iw = ow * g.stride + j - g.pl;
                        double v = 0.0;
                        if (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W)
                            v = x[(static_cast<std::int64_t>(c) * g.H + ih) *
                                      g.W +
                                  iw];
                        row[oh * g.Wout + ow] = v;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvGeom& g, double* dx) {
    const int P = g.Hout * g.Wout;
    for (int c = 0; c < g.C; ++c) {
        for (int i = 0; i < g.kh; ++i) {
            for (int j = 0; j < g.kw; ++j) {
                const double* row =
                    col + (static_cast<std::int64_t>(c) * g.kh * g.kw +
                           i * g.kw + j) *
                              P;
                for (int oh = 0; oh < g.Hout; ++oh) {
                    const int ih = oh * g.stride + i - g.pt;
                    if (ih < 0 || ih >= g.H) continue;
                    for (int ow = 0; ow < g.Wout; ++ow) {
                        const int iw = ow * g.stride + j - g.pl;
                        if (iw < 0 || iw >= g.W) continue;
                        dx[(static_cast<std::int64_t>(c) * g.H + ih) * g.W +
                           iw] += row[oh * g.Wout + ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Var nchw_to_rows(const Var& x, int C, int H, int W) {
    const int N = x.rows();
    if (x.cols() != C * H * W)
        throw std::invalid_argument("nchw_to_rows: shape mismatch");
    const int HW = H * W;
    Tensor out(N * HW, C);
    const double* px = x.value().data();
    double* po = out.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p)
                po[(static_cast<std::int64_t>(n) * HW + p) * C + c] =
                    px[(static_cast<std::int64_t>(n) * C + c) * HW + p];
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [xn, N, C, HW](Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* g = nd.grad.data();
        double* dst = xn->grad.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < HW; ++p)
                    dst[(static_cast<std::int64_t>(n) * C + c) * HW + p] +=
                        g[(static_cast<std::int64_t>(n) * HW + p) * C + c];
    });
}

Var rows_to_nchw(const Var& x, int C, int H, int W) {
    const int HW = H * W;
    if (x.cols() != C || x.rows() % HW != 0)
        throw std::invalid_argument("rows_to_nchw: shape mismatch");
    const int N = x.rows() / HW;
    Tensor out(N, C * HW);
    const double* px = x.value().data();
    double* po = out.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p)
                po[(static_cast<std::int64_t>(n) * C + c) * HW + p] =
                    px[(static_cast<std::int64_t>(n) * HW + p) * C + c];
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [xn, N, C, HW](Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* g = nd.grad.data();
        double* dst = xn->grad.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < HW; ++p)
                    dst[(static_cast<std::int64_t>(n) * HW + p) * C + c] +=
                        g[(static_cast<std::int64_t>(n) * C + c) * HW + p];
    });
}

Var conv2d(const Var& x, int C, int H, int W, const Var& w, const Var& b,
           int kh, int kw, int stride, int pad_top, int pad_left,
           int pad_bottom, int pad_right) {
    const int N = x.rows();
    if (x.cols() != C * H * W)
        throw std::invalid_argument("conv2d: input shape mismatch");
    const int Cout = w.rows();
    if (w.cols() != C * kh * kw)
        throw std::invalid_argument("conv2d: weight shape mismatch");
    if (b.defined() && (b.value().rows() != 1 || b.value().cols() != Cout))
        throw std::invalid_argument("conv2d: bias shape mismatch");

    ConvGeom g{C,        H,        W,          Cout,
               kh,       kw,       stride,     pad_top,
               pad_left, pad_bottom, pad_right, 0,
               0};
    g.Hout = (H + pad_top + pad_bottom - kh) / stride + 1;
    g.Wout = (W + pad_left + pad_right - kw) / stride + 1;
    if (g.Hout <= 0 || g.Wout <= 0)
        throw std::invalid_argument("conv2d: empty output");

    const int P = g.Hout * g.Wout;
    const int CKK = C * kh * kw;
    Tensor out(N, Cout * P);
    std::vector<double> col(static_cast<std::size_t>(CKK) * P);
    const double* bp = b.defined() ? b.value().data() : nullptr;
    for (int n = 0; n < N; ++n) {
        im2col(x.value().data() + static_cast<std::int64_t>(n) * C * H * W, g,
               col.data());
        double* on = out.data() + static_cast<std::int64_t>(n) * Cout * P;
        kernels::matmul(w.value().data(), col.data(), on, Cout, CKK, P);
        if (bp) {
            for (int co = 0; co < Cout; ++co)
                for (int p = 0; p < P; ++p)
                    on[static_cast<std::int64_t>(co) * P + p] += bp[co];
        }
    }

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return make_node(
        std::move(out), {xn, wn, bn}, [xn, wn, bn, g, N](Node& nd) {
            const int P = g.Hout * g.Wout;
            const int CKK = g.C * g.kh * g.kw;
            const double* gr = nd.grad.data();
            std::vector<double> col(static_cast<std::size_t>(CKK) * P);
            std::vector<double> dcol(static_cast<std::size_t>(CKK) * P);
            for (int n = 0; n < N; ++n) {
                const double* gn =
                    gr + static_cast<std::int64_t>(n) * g.Cout * P;
                if (bn && bn->requires_grad) {
                    bn->ensure_grad();
                    double* db = bn->grad.data();
                    for (int co = 0; co < g.Cout; ++co) {
                        double acc = 0.0;
                        for (int p = 0; p < P; ++p)
                            acc += gn[static_cast<std::int64_t>(co) * P + p];
                        db[co] += acc;
                    }
                }
                if (wn->requires_grad || xn->requires_grad) {
                    if (wn->requires_grad) {
                        im2col(xn->value.data() +
                                   static_cast<std::int64_t>(n) * g.C * g.H *
                                       g.W,
                               g, col.data());
                        wn->ensure_grad();
                        // dW += G_n * col^T
                        kernels::matmul_nt(gn, col.data(), wn->grad.data(),
                                           g.Cout, P, CKK, true);
                    }
                    if (xn->requires_grad) {
                        xn->ensure_grad();
                        // dcol = W^T * G_n
                        kernels::matmul_tn(wn->value.data(), gn, dcol.data(),
                                           CKK, g.Cout, P);
                        col2im_add(dcol.data(), g,
                                   xn->grad.data() +
                                       static_cast<std::int64_t>(n) * g.C *
                                           g.H * g.W);
                    }
                }
            }
        });
}

Var group_norm(const Var& x, int C, int H, int W, int groups, const Var& gain,
               const Var& bias, double eps) {
    const int N = x.rows();
    if (x.cols() != C * H * W)
        throw std::invalid_argument("group_norm: input shape mismatch");
    if (C % groups != 0)
        throw std::invalid_argument("group_norm: groups must divide channels");
    if (gain.value().cols() != C || bias.value().cols() != C)
        throw std::invalid_argument("group_norm: affine shape mismatch");
    const int cpg = C / groups;
    const std::int64_t M = static_cast<std::int64_t>(cpg) * H * W;

    Tensor xhat(N, C * H * W);
    Tensor invstd({N * groups});
    const double* px = x.value().data();
    double* ph = xhat.data();
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const double* xs =
                px + (static_cast<std::int64_t>(n) * C + g * cpg) * H * W;
            double* hs =
                ph + (static_cast<std::int64_t>(n) * C + g * cpg) * H * W;
            double mu = 0.0;
            for (std::int64_t i = 0; i < M; ++i) mu += xs[i];
            mu /= static_cast<double>(M);
            double var = 0.0;
            for (std::int64_t i = 0; i < M; ++i)
                var += (xs[i] - mu) * (xs[i] - mu);
            var /= static_cast<double>(M);
            const double is = 1.0 / std::sqrt(var + eps);
            invstd[n * groups + g] = is;
            for (std::int64_t i = 0; i < M; ++i) hs[i] = (xs[i] - mu) * is;
        }
    }

    Tensor out(N, C * H * W);
    const double* pg = gain.value().data();
    const double* pb = bias.value().data();
    double* po = out.data();
    const int HW = H * W;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* hs =
                ph + (static_cast<std::int64_t>(n) * C + c) * HW;
            double* os = po + (static_cast<std::int64_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) os[i] = pg[c] * hs[i] + pb[c];
        }

    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return make_node(
        std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat, invstd, N, C, H, W, groups, cpg](Node& nd) {
            const int HW = H * W;
            const std::int64_t M = static_cast<std::int64_t>(cpg) * HW;
            const double* g = nd.grad.data();
            const double* ph = xhat.data();
            if (gn->requires_grad || bn->requires_grad) {
                if (gn->requires_grad) gn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double* gs =
                            g + (static_cast<std::int64_t>(n) * C + c) * HW;
                        const double* hs =
                            ph + (static_cast<std::int64_t>(n) * C + c) * HW;
                        double dg = 0.0, db = 0.0;
                        for (int i = 0; i < HW; ++i) {
                            dg += gs[i] * hs[i];
                            db += gs[i];
                        }
                        if (gn->requires_grad) gn->grad.data()[c] += dg;
                        if (bn->requires_grad) bn->grad.data()[c] += db;
                    }
            }
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double* pg = gn->value.data();
            double* dst = xn->grad.data();
            for (int n = 0; n < N; ++n) {
                for (int grp = 0; grp < groups; ++grp) {
                    const std::int64_t base =
                        (static_cast<std::int64_t>(n) * C + grp * cpg) * HW;
                    // dxhat = g * gain(channel)
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int c = 0; c < cpg; ++c) {
                        const double gc = pg[grp * cpg + c];
                        const double* gs = g + base + static_cast<std::int64_t>(c) * HW;
                        const double* hs = ph + base + static_cast<std::int64_t>(c) * HW;
                        for (int i = 0; i < HW; ++i) {
                            const double dh = gs[i] * gc;
                            sum_dh += dh;
                            sum_dh_h += dh * hs[i];
                        }
                    }
                    const double mean_dh = sum_dh / static_cast<double>(M);
                    const double mean_dh_h = sum_dh_h / static_cast<double>(M);
                    const double is = invstd[n * groups + grp];
                    for (int c = 0; c < cpg; ++c) {
                        const double gc = pg[grp * cpg + c];
                        const double* gs = g + base + static_cast<std::int64_t>(c) * HW;
                        const double* hs = ph + base + static_cast<std::int64_t>(c) * HW;
                        double* ds = dst + base + static_cast<std::int64_t>(c) * HW;
                        for (int i = 0; i < HW; ++i) {
                            const double dh = gs[i] * gc;
                            ds[i] += (dh - mean_dh - hs[i] * mean_dh_h) * is;
                        }
                    }
                }
            }
        });
}

Var batch_norm(const Var& x, int C, int H, int W, const Var& gain,
               const Var& bias, Tensor& running_mean, Tensor& running_var,
               bool training, double momentum, double eps) {
    const int N = x.rows();
    if (x.cols() != C * H * W)
        throw std::invalid_argument("batch_norm: input shape mismatch");
    const int HW = H * W;
    const std::int64_t M = static_cast<std::int64_t>(N) * HW;

    Tensor mean_c({C}), invstd_c({C});
    const double* px = x.value().data();
    if (training) {
        for (int c = 0; c < C; ++c) {
            double mu = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* xs =
                    px + (static_cast<std::int64_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) mu += xs[i];
            }
            mu /= static_cast<double>(M);
            double var = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* xs =
                    px + (static_cast<std::int64_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) var += (xs[i] - mu) * (xs[i] - mu);
            }
            var /= static_cast<double>(M);
            mean_c[c] = mu;
            invstd_c[c] = 1.0 / std::sqrt(var + eps);
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean_c[c] = running_mean[c];
            invstd_c[c] = 1.0 / std::sqrt(running_var[c] + eps);
        }
    }

    Tensor xhat(N, C * HW);
    Tensor out(N, C * HW);
    const double* pg = gain.value().data();
    const double* pb = bias.value().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xs = px + (static_cast<std::int64_t>(n) * C + c) * HW;
            double* hs =
                xhat.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            double* os =
                out.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
                hs[i] = (xs[i] - mean_c[c]) * invstd_c[c];
                os[i] = pg[c] * hs[i] + pb[c];
            }
        }

    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return make_node(
        std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat, invstd_c, N, C, HW, M, training](Node& nd) {
            const double* g = nd.grad.data();
            const double* ph = xhat.data();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int c = 0; c < C; ++c) {
                double dg = 0.0, db = 0.0;
                for (int n = 0; n < N; ++n) {
                    const double* gs =
                        g + (static_cast<std::int64_t>(n) * C + c) * HW;
                    const double* hs =
                        ph + (static_cast<std::int64_t>(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) {
                        dg += gs[i] * hs[i];
                        db += gs[i];
                    }
                }
                if (gn->requires_grad) gn->grad.data()[c] += dg;
                if (bn->requires_grad) bn->grad.data()[c] += db;
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    const double gc = gn->value.data()[c];
                    const double is = invstd_c[c];
                    if (training) {
                        const double mean_dh = db * gc / static_cast<double>(M);
                        const double mean_dh_h =
                            dg * gc / static_cast<double>(M);
                        for (int n = 0; n < N; ++n) {
                            const double* gs =
                                g + (static_cast<std::int64_t>(n) * C + c) * HW;
                            const double* hs =
                                ph +
                                (static_cast<std::int64_t>(n) * C + c) * HW;
                            double* ds =
                                xn->grad.data() +
                                (static_cast<std::int64_t>(n) * C + c) * HW;
                            for (int i = 0; i < HW; ++i)
                                ds[i] += (gs[i] * gc - mean_dh -
                                          hs[i] * mean_dh_h) *
                                         is;
                        }
                    } else {
                        for (int n = 0; n < N; ++n) {
                            const double* gs =
                                g + (static_cast<std::int64_t>(n) * C + c) * HW;
                            double* ds =
                                xn->grad.data() +
                                (static_cast<std::int64_t>(n) * C + c) * HW;
                            for (int i = 0; i < HW; ++i)
                                ds[i] += gs[i] * gc * is;
                        }
                    }
                }
            }
        });
}

Var upsample2x_nearest(const Var& x, int C, int H, int W) {
    const int N = x.rows();
    if (x.cols() != C * H * W)
        throw std::invalid_argument("upsample2x_nearest: shape mismatch");
    const int H2 = H * 2, W2 = W * 2;
    Tensor out(N, C * H2 * W2);
    const double* px = x.value().data();
    double* po = out.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xs =
                px + (static_cast<std::int64_t>(n) * C + c) * H * W;
            double* os =
                po + (static_cast<std::int64_t>(n) * C + c) * H2 * W2;
            for (int i = 0; i < H2; ++i)
                for (int j = 0; j < W2; ++j)
                    os[static_cast<std::int64_t>(i) * W2 + j] =
                        xs[static_cast<std::int64_t>(i / 2) * W + j / 2];
        }
    auto xn = x.node();
    return make_node(std::move(out), {xn}, [xn, N, C, H, W](Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const int H2 = H * 2, W2 = W * 2;
        const double* g = nd.grad.data();
        double* dst = xn->grad.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double* gs =
                    g + (static_cast<std::int64_t>(n) * C + c) * H2 * W2;
                double* ds =
                    dst + (static_cast<std::int64_t>(n) * C + c) * H * W;
                for (int i = 0; i < H2; ++i)
                    for (int j = 0; j < W2; ++j)
                        ds[static_cast<std::int64_t>(i / 2) * W + j / 2] +=
                            gs[static_cast<std::int64_t>(i) * W2 + j];
            }
    });
}

}  // namespace tbwm::ad
