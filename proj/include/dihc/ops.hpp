#pragma once

#include "dihc/tensor.hpp"

namespace dihc {

// ---- elementwise / reductions -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// mean over all elements of (a - b)^2
Tensor mse(const Tensor& a, const Tensor& b);

// Metadata-only view with identical element order.
Tensor reshape(const Tensor& a, const Shape& shape);
// Concatenation along the channel axis of [N,C,D,H,W] tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b);
// [start, start+len) along the leading (batch) axis.
Tensor slice_batch(const Tensor& a, int start, int len);

// ---- convolution ----------------------------------------------------------

// input [N,C,D,H,W], weight [F,C,k,k,k], bias [F] (optional, pass undefined
// Tensor to skip). k must be odd.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

// Exact adjoint of a stride-2 kernel-2 conv3d. weight [C,F,2,2,2].
Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, int stride);

// ---- resampling -----------------------------------------------------------

enum class UpsampleMode { kNearest, kTrilinear };

// factor >= 2; trilinear follows the align-corners=false convention
// (src = (dst + 0.5)/factor - 0.5, clamped to the valid range).
Tensor upsample(const Tensor& input, int factor, UpsampleMode mode);

// ---- normalization ----------------------------------------------------------

enum class NormMode { kBatch, kGroup, kInstance };

struct NormState {
  NormMode mode = NormMode::kBatch;
  int groups = 4;        // group mode only
  float eps = 1e-5f;
  float momentum = 0.9f;  // retained fraction of the running statistic
  bool training = true;
  std::vector<float> running_mean;  // batch mode only, per channel
  std::vector<float> running_var;
};

// input [N,C,D,H,W]; gamma/beta [C]. Batch mode normalizes per channel over
// (N,D,H,W) and maintains running statistics; group/instance modes use
// per-sample statistics in both training and inference.
Tensor normalize(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 NormState& state);

// ---- soft pseudo labels -----------------------------------------------------

// p^(1/T) / (p^(1/T) + (1-p)^(1/T)), computed in double with p clamped to
// [1e-7, 1-1e-7]. detach=true (the default) returns a constant tensor with
// no graph edge; detach=false records the exact derivative.
Tensor sharpen_op(const Tensor& p, float temperature, bool detach = true);
double sharpen_value(double p, double temperature);

}  // namespace dihc
