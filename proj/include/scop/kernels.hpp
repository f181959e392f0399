#pragma once

#include <optional>

#include "scop/tensor.hpp"

namespace scop {

// Pure tensor math shared by the eval path and the autodiff ops.
// All reductions accumulate in double.

struct ConvDims {
    int64_t n, cin, h, w;      // input
    int64_t cout, k;           // filters
    int64_t stride, pad;
    int64_t oh, ow;            // output spatial extents
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, int64_t stride, int64_t pad);

// Batched im2col: rows indexed by (n, oy, ox), columns by (c, ky, kx).
// Shape (N*OH*OW, C*k*k).
Tensor im2col(const Tensor& input, const ConvDims& d);
// Adjoint of im2col: scatter-adds column gradients back to input layout.
Tensor col2im(const Tensor& cols, const ConvDims& d);

// Cross-correlation, NCHW x OIkk -> NOHW. When `col_out` is non-null the
// im2col matrix is stored there for reuse in the backward pass.
Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Tensor& bias,
                      int64_t stride, int64_t pad, Tensor* col_out = nullptr);

void conv2d_backward(const Tensor& grad_out, const Tensor& cols, const Tensor& weight,
                     const ConvDims& d, Tensor* grad_input, Tensor* grad_weight,
                     Tensor* grad_bias);

struct BatchNormAux {
    Tensor mean, inv_std;  // per channel, batch statistics used in the forward
    Tensor x_hat;          // normalized input, saved for backward
};

// Per-channel batch normalization over NCHW. In train mode uses batch
// statistics (biased variance) and updates running stats in place with
// running = (1 - momentum) * running + momentum * batch (unbiased variance
// for the running update). In eval mode uses the running stats.
Tensor batchnorm_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var, bool train,
                         double eps, double momentum, BatchNormAux* aux = nullptr);

void batchnorm_backward(const Tensor& grad_out, const Tensor& input, const Tensor& gamma,
                        const BatchNormAux& aux, bool train, const Tensor& running_var,
                        double eps, Tensor* grad_input, Tensor* grad_gamma,
                        Tensor* grad_beta);

Tensor relu_forward(const Tensor& x);
// Subgradient at 0 is defined as 0.
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);
Tensor sigmoid_forward(const Tensor& x);
Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y);

// Max pooling; saves flat argmax per output cell for the backward scatter.
Tensor maxpool_forward(const Tensor& x, int64_t k, int64_t stride,
                       std::vector<int64_t>* argmax = nullptr);
Tensor maxpool_backward(const Tensor& grad_out, const Tensor& x,
                        const std::vector<int64_t>& argmax);

// Global average pooling NCHW -> NC11.
Tensor global_avgpool_forward(const Tensor& x);
Tensor global_avgpool_backward(const Tensor& grad_out, const Tensor& x);

// y = x W^T + b with W shaped (out, in).
Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);
void linear_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight,
                     Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias);

// Per-channel scaling of NCHW by a length-C vector.
Tensor channel_scale_forward(const Tensor& x, const Tensor& scale);
void channel_scale_backward(const Tensor& grad_out, const Tensor& x, const Tensor& scale,
                            Tensor* grad_input, Tensor* grad_scale);

// Mean cross-entropy over the batch from raw logits (N, K). Numerically
// stable log-sum-exp; probs saved for the backward pass.
double softmax_xent_forward(const Tensor& logits, const std::vector<int64_t>& labels,
                            Tensor* probs);
Tensor softmax_xent_backward(const Tensor& probs, const std::vector<int64_t>& labels);

std::vector<int64_t> argmax_rows(const Tensor& logits);

}  // namespace scop
