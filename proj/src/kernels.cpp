#include "scop/kernels.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "scop/common.hpp"

namespace scop {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConvDims conv_dims(const Tensor& input, const Tensor& weight, int64_t stride, int64_t pad) {
    require(input.rank() == 4, "conv2d: input must be rank 4, got ", shape_str(input.shape));
    require(weight.rank() == 4, "conv2d: weight must be rank 4, got ", shape_str(weight.shape));
    require(weight.dim(2) == weight.dim(3), "conv2d: kernel must be square");
    require(input.dim(1) == weight.dim(1), "conv2d: channel mismatch, input C=", input.dim(1),
            " weight Cin=", weight.dim(1));
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(pad >= 0, "conv2d: pad must be >= 0");
    ConvDims d;
    d.n = input.dim(0);
    d.cin = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.cout = weight.dim(0);
    d.k = weight.dim(2);
    d.stride = stride;
    d.pad = pad;
    d.oh = (d.h + 2 * pad - d.k) / stride + 1;
    d.ow = (d.w + 2 * pad - d.k) / stride + 1;
    require(d.oh >= 1 && d.ow >= 1, "conv2d: output extent would be empty for input ",
            shape_str(input.shape), " kernel ", d.k, " stride ", stride, " pad ", pad);
    return d;
}

Tensor im2col(const Tensor& input, const ConvDims& d) {
    const int64_t ckk = d.cin * d.k * d.k;
    Tensor cols({d.n * d.oh * d.ow, ckk});
    const double* in = input.ptr();
    double* out = cols.ptr();
    const int64_t in_cstride = d.h * d.w;
    const int64_t in_nstride = d.cin * in_cstride;
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t oy = 0; oy < d.oh; ++oy) {
            const int64_t iy0 = oy * d.stride - d.pad;
            for (int64_t ox = 0; ox < d.ow; ++ox) {
                const int64_t ix0 = ox * d.stride - d.pad;
                double* row = out + ((n * d.oh + oy) * d.ow + ox) * ckk;
                for (int64_t c = 0; c < d.cin; ++c) {
                    const double* src = in + n * in_nstride + c * in_cstride;
                    for (int64_t ky = 0; ky < d.k; ++ky) {
                        const int64_t iy = iy0 + ky;
                        double* dst = row + (c * d.k + ky) * d.k;
                        if (iy < 0 || iy >= d.h) {
                            std::fill(dst, dst + d.k, 0.0);
                            continue;
                        }
                        for (int64_t kx = 0; kx < d.k; ++kx) {
                            const int64_t ix = ix0 + kx;
                            dst[kx] = (ix >= 0 && ix < d.w) ? src[iy * d.w + ix] : 0.0;
                        }
                    }
                }
            }
        }
    }
    return cols;
}

Tensor col2im(const Tensor& cols, const ConvDims& d) {
    const int64_t ckk = d.cin * d.k * d.k;
    require(cols.dim(0) == d.n * d.oh * d.ow && cols.dim(1) == ckk,
            "col2im: shape mismatch ", shape_str(cols.shape));
    Tensor out({d.n, d.cin, d.h, d.w});
    const double* in = cols.ptr();
    double* dst0 = out.ptr();
    const int64_t in_cstride = d.h * d.w;
    const int64_t in_nstride = d.cin * in_cstride;
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t oy = 0; oy < d.oh; ++oy) {
            const int64_t iy0 = oy * d.stride - d.pad;
            for (int64_t ox = 0; ox < d.ow; ++ox) {
                const int64_t ix0 = ox * d.stride - d.pad;
                const double* row = in + ((n * d.oh + oy) * d.ow + ox) * ckk;
                for (int64_t c = 0; c < d.cin; ++c) {
                    double* dst = dst0 + n * in_nstride + c * in_cstride;
                    for (int64_t ky = 0; ky < d.k; ++ky) {
                        const int64_t iy = iy0 + ky;
                        if (iy < 0 || iy >= d.h) continue;
                        const double* src = row + (c * d.k + ky) * d.k;
                        for (int64_t kx = 0; kx < d.k; ++kx) {
                            const int64_t ix = ix0 + kx;
                            if (ix >= 0 && ix < d.w) dst[iy * d.w + ix] += src[kx];
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Tensor& bias,
                      int64_t stride, int64_t pad, Tensor* col_out) {
    ConvDims d = conv_dims(input, weight, stride, pad);
    require(bias.numel() == d.cout, "conv2d: bias must have ", d.cout, " entries, got ",
            bias.numel());
    Tensor cols = im2col(input, d);
    const int64_t rows = d.n * d.oh * d.ow;
    const int64_t ckk = d.cin * d.k * d.k;
    // y[r, o] = sum_j cols[r, j] * W[o, j] + b[o]
    ConstMapMat cm(cols.ptr(), rows, ckk);
    ConstMapMat wm(weight.ptr(), d.cout, ckk);
    RowMat ym = cm * wm.transpose();
    Tensor out({d.n, d.cout, d.oh, d.ow});
    double* op = out.ptr();
    const double* yp = ym.data();
    const int64_t plane = d.oh * d.ow;
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t p = 0; p < plane; ++p)
            for (int64_t o = 0; o < d.cout; ++o)
                op[(n * d.cout + o) * plane + p] = yp[(n * plane + p) * d.cout + o] + bias.data[o];
    if (col_out) *col_out = std::move(cols);
    return out;
}

void conv2d_backward(const Tensor& grad_out, const Tensor& cols, const Tensor& weight,
                     const ConvDims& d, Tensor* grad_input, Tensor* grad_weight,
                     Tensor* grad_bias) {
    const int64_t rows = d.n * d.oh * d.ow;
    const int64_t ckk = d.cin * d.k * d.k;
    const int64_t plane = d.oh * d.ow;
    require(grad_out.numel() == d.n * d.cout * plane, "conv2d backward: grad shape mismatch");
    // Repack dY from NCHW to (rows, cout) to match the im2col layout.
    RowMat gy(rows, d.cout);
    const double* gp = grad_out.ptr();
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t p = 0; p < plane; ++p)
            for (int64_t o = 0; o < d.cout; ++o)
                gy(n * plane + p, o) = gp[(n * d.cout + o) * plane + p];
    ConstMapMat cm(cols.ptr(), rows, ckk);
    ConstMapMat wm(weight.ptr(), d.cout, ckk);
    if (grad_weight) {
        *grad_weight = Tensor(weight.shape);
        MapMat gw(grad_weight->ptr(), d.cout, ckk);
        gw.noalias() = gy.transpose() * cm;
    }
    if (grad_bias) {
        *grad_bias = Tensor({d.cout});
        Eigen::Map<Eigen::VectorXd>(grad_bias->ptr(), d.cout) = gy.colwise().sum().transpose();
    }
    if (grad_input) {
        Tensor gcols({rows, ckk});
        MapMat gc(gcols.ptr(), rows, ckk);
        gc.noalias() = gy * wm;
        *grad_input = col2im(gcols, d);
    }
}

static void check_bn_args(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                          const Tensor& rm, const Tensor& rv) {
    require(input.rank() == 4, "batchnorm: input must be rank 4, got ", shape_str(input.shape));
    const int64_t c = input.dim(1);
    require(gamma.numel() == c && beta.numel() == c && rm.numel() == c && rv.numel() == c,
            "batchnorm: parameter length mismatch for C=", c);
}

Tensor batchnorm_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var, bool train,
                         double eps, double momentum, BatchNormAux* aux) {
    check_bn_args(input, gamma, beta, running_mean, running_var);
    const int64_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
    const int64_t m = n * plane;
    Tensor out(input.shape);
    Tensor mean({c}), inv_std({c});
    if (train) {
        require(m > 1, "batchnorm: train mode needs more than one value per channel");
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t b = 0; b < n; ++b) {
                const double* p = input.ptr() + (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) s += p[i];
            }
            const double mu = s / static_cast<double>(m);
            double ss = 0.0;
            for (int64_t b = 0; b < n; ++b) {
                const double* p = input.ptr() + (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double dv = p[i] - mu;
                    ss += dv * dv;
                }
            }
            const double var = ss / static_cast<double>(m);
            mean.data[ch] = mu;
            inv_std.data[ch] = 1.0 / std::sqrt(var + eps);
            const double unbiased = ss / static_cast<double>(m - 1);
            running_mean.data[ch] = (1.0 - momentum) * running_mean.data[ch] + momentum * mu;
            running_var.data[ch] = (1.0 - momentum) * running_var.data[ch] + momentum * unbiased;
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean.data[ch] = running_mean.data[ch];
            inv_std.data[ch] = 1.0 / std::sqrt(running_var.data[ch] + eps);
        }
    }
    Tensor x_hat(input.shape);
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const double mu = mean.data[ch], is = inv_std.data[ch];
            const double g = gamma.data[ch], bt = beta.data[ch];
            const double* p = input.ptr() + (b * c + ch) * plane;
            double* xh = x_hat.ptr() + (b * c + ch) * plane;
            double* o = out.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - mu) * is;
                o[i] = g * xh[i] + bt;
            }
        }
    }
    if (aux) {
        aux->mean = std::move(mean);
        aux->inv_std = std::move(inv_std);
        aux->x_hat = std::move(x_hat);
    }
    return out;
}

void batchnorm_backward(const Tensor& grad_out, const Tensor& input, const Tensor& gamma,
                        const BatchNormAux& aux, bool train, const Tensor& running_var,
                        double eps, Tensor* grad_input, Tensor* grad_gamma,
                        Tensor* grad_beta) {
    const int64_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
    const int64_t m = n * plane;
    if (grad_gamma) *grad_gamma = Tensor({c});
    if (grad_beta) *grad_beta = Tensor({c});
    if (grad_input) *grad_input = Tensor(input.shape);
    for (int64_t ch = 0; ch < c; ++ch) {
        double sum_gy = 0.0, sum_gy_xh = 0.0;
        for (int64_t b = 0; b < n; ++b) {
            const double* gy = grad_out.ptr() + (b * c + ch) * plane;
            const double* xh = aux.x_hat.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                sum_gy += gy[i];
                sum_gy_xh += gy[i] * xh[i];
            }
        }
        if (grad_gamma) grad_gamma->data[ch] = sum_gy_xh;
        if (grad_beta) grad_beta->data[ch] = sum_gy;
        if (!grad_input) continue;
        if (train) {
            const double is = aux.inv_std.data[ch];
            const double g = gamma.data[ch];
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int64_t b = 0; b < n; ++b) {
                const double* gy = grad_out.ptr() + (b * c + ch) * plane;
                const double* xh = aux.x_hat.ptr() + (b * c + ch) * plane;
                double* gi = grad_input->ptr() + (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i)
                    gi[i] = g * is * (gy[i] - inv_m * sum_gy - xh[i] * inv_m * sum_gy_xh);
            }
        } else {
            const double scale = gamma.data[ch] / std::sqrt(running_var.data[ch] + eps);
            for (int64_t b = 0; b < n; ++b) {
                const double* gy = grad_out.ptr() + (b * c + ch) * plane;
                double* gi = grad_input->ptr() + (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) gi[i] = scale * gy[i];
            }
        }
    }
}

Tensor relu_forward(const Tensor& x) {
    Tensor y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return y;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
    check_same_shape(grad_out, x, "relu backward");
    Tensor g(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) g.data[i] = x.data[i] > 0.0 ? grad_out.data[i] : 0.0;
    return g;
}

Tensor sigmoid_forward(const Tensor& x) {
    Tensor y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double v = x.data[i];
        y.data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                             : std::exp(v) / (1.0 + std::exp(v));
    }
    return y;
}

Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y) {
    check_same_shape(grad_out, y, "sigmoid backward");
    Tensor g(y.shape);
    for (int64_t i = 0; i < y.numel(); ++i)
        g.data[i] = grad_out.data[i] * y.data[i] * (1.0 - y.data[i]);
    return g;
}

Tensor maxpool_forward(const Tensor& x, int64_t k, int64_t stride,
                       std::vector<int64_t>* argmax) {
    require(x.rank() == 4, "maxpool: input must be rank 4");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(h >= k && w >= k, "maxpool: window ", k, " exceeds input ", shape_str(x.shape));
    const int64_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    Tensor y({n, c, oh, ow});
    if (argmax) argmax->assign(static_cast<size_t>(y.numel()), -1);
    int64_t oi = 0;
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* p = x.ptr() + (b * c + ch) * h * w;
            const int64_t base = (b * c + ch) * h * w;
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t best_idx = -1;
                    for (int64_t ky = 0; ky < k; ++ky)
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const int64_t idx = (oy * stride + ky) * w + ox * stride + kx;
                            if (p[idx] > best) {
                                best = p[idx];
                                best_idx = idx;
                            }
                        }
                    y.data[oi] = best;
                    if (argmax) (*argmax)[oi] = base + best_idx;
                }
            }
        }
    }
    return y;
}

Tensor maxpool_backward(const Tensor& grad_out, const Tensor& x,
                        const std::vector<int64_t>& argmax) {
    require(static_cast<int64_t>(argmax.size()) == grad_out.numel(),
            "maxpool backward: argmax size mismatch");
    Tensor g(x.shape);
    for (int64_t i = 0; i < grad_out.numel(); ++i) g.data[argmax[i]] += grad_out.data[i];
    return g;
}

Tensor global_avgpool_forward(const Tensor& x) {
    require(x.rank() == 4, "global_avgpool: input must be rank 4");
    const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor y({n, c, 1, 1});
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* p = x.ptr() + (b * c + ch) * plane;
            double s = 0.0;
            for (int64_t i = 0; i < plane; ++i) s += p[i];
            y.data[b * c + ch] = s / static_cast<double>(plane);
        }
    return y;
}

Tensor global_avgpool_backward(const Tensor& grad_out, const Tensor& x) {
    const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor g(x.shape);
    const double inv = 1.0 / static_cast<double>(plane);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double gv = grad_out.data[b * c + ch] * inv;
            double* p = g.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) p[i] = gv;
        }
    return g;
}

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(weight.rank() == 2, "linear: weight must be rank 2");
    const int64_t out_f = weight.dim(0), in_f = weight.dim(1);
    const int64_t n = x.dim(0);
    require(x.numel() == n * in_f, "linear: input ", shape_str(x.shape),
            " does not flatten to ", in_f, " features");
    require(bias.numel() == out_f, "linear: bias length mismatch");
    Tensor y({n, out_f});
    ConstMapMat xm(x.ptr(), n, in_f);
    ConstMapMat wm(weight.ptr(), out_f, in_f);
    MapMat ym(y.ptr(), n, out_f);
    ym.noalias() = xm * wm.transpose();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t o = 0; o < out_f; ++o) y.data[b * out_f + o] += bias.data[o];
    return y;
}

void linear_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight,
                     Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) {
    const int64_t out_f = weight.dim(0), in_f = weight.dim(1);
    const int64_t n = x.dim(0);
    ConstMapMat gy(grad_out.ptr(), n, out_f);
    ConstMapMat xm(x.ptr(), n, in_f);
    ConstMapMat wm(weight.ptr(), out_f, in_f);
    if (grad_weight) {
        *grad_weight = Tensor(weight.shape);
        MapMat gw(grad_weight->ptr(), out_f, in_f);
        gw.noalias() = gy.transpose() * xm;
    }
    if (grad_bias) {
        *grad_bias = Tensor({out_f});
        Eigen::Map<Eigen::VectorXd>(grad_bias->ptr(), out_f) = gy.colwise().sum().transpose();
    }
    if (grad_input) {
        *grad_input = Tensor(x.shape);
        MapMat gx(grad_input->ptr(), n, in_f);
        gx.noalias() = gy * wm;
    }
}

Tensor channel_scale_forward(const Tensor& x, const Tensor& scale) {
    require(x.rank() == 4, "channel_scale: input must be rank 4");
    const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    require(scale.numel() == c, "channel_scale: scale length ", scale.numel(),
            " does not match C=", c);
    Tensor y(x.shape);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double s = scale.data[ch];
            const double* p = x.ptr() + (b * c + ch) * plane;
            double* o = y.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) o[i] = s * p[i];
        }
    return y;
}

void channel_scale_backward(const Tensor& grad_out, const Tensor& x, const Tensor& scale,
                            Tensor* grad_input, Tensor* grad_scale) {
    const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (grad_input) *grad_input = Tensor(x.shape);
    if (grad_scale) *grad_scale = Tensor({c});
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double s = scale.data[ch];
            const double* gy = grad_out.ptr() + (b * c + ch) * plane;
            const double* p = x.ptr() + (b * c + ch) * plane;
            double acc = 0.0;
            if (grad_input) {
                double* gi = grad_input->ptr() + (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    gi[i] = s * gy[i];
                    acc += gy[i] * p[i];
                }
            } else {
                for (int64_t i = 0; i < plane; ++i) acc += gy[i] * p[i];
            }
            if (grad_scale) grad_scale->data[ch] += acc;
        }
}

double softmax_xent_forward(const Tensor& logits, const std::vector<int64_t>& labels,
                            Tensor* probs) {
    require(logits.rank() == 2, "softmax_xent: logits must be rank 2");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    require(static_cast<int64_t>(labels.size()) == n, "softmax_xent: ", labels.size(),
            " labels for ", n, " rows");
    Tensor p({n, k});
    double loss = 0.0;
    for (int64_t b = 0; b < n; ++b) {
        require(labels[b] >= 0 && labels[b] < k, "softmax_xent: label ", labels[b],
                " out of range [0,", k, ")");
        const double* row = logits.ptr() + b * k;
        double mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double logz = mx + std::log(z);
        for (int64_t j = 0; j < k; ++j) p.data[b * k + j] = std::exp(row[j] - logz);
        loss -= row[labels[b]] - logz;
    }
    if (probs) *probs = std::move(p);
    return loss / static_cast<double>(n);
}

Tensor softmax_xent_backward(const Tensor& probs, const std::vector<int64_t>& labels) {
    const int64_t n = probs.dim(0), k = probs.dim(1);
    Tensor g(probs.shape);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t j = 0; j < k; ++j) g.data[b * k + j] = probs.data[b * k + j] * inv_n;
        g.data[b * k + labels[b]] -= inv_n;
    }
    return g;
}

std::vector<int64_t> argmax_rows(const Tensor& logits) {
    require(logits.rank() == 2, "argmax_rows: logits must be rank 2");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int64_t> out(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b) {
        const double* row = logits.ptr() + b * k;
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (row[j] > row[best]) best = j;
        out[static_cast<size_t>(b)] = best;
    }
    return out;
}

}  // namespace scop
