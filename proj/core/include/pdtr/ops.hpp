#pragma once

#include <vector>

#include "pdtr/tape.hpp"
#include "pdtr/tensor.hpp"

namespace pdtr {

// Whole-tensor ops with reverse-mode backward closures. All reductions use a
// fixed sequential order (ascending index) so runs are bitwise reproducible.
// Shapes must match exactly; there is no implicit broadcasting.

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_const(const Tensor& a, double c);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
// Logit transform; clamps the input to [1e-4, 1 - 1e-4] first.
Tensor inverse_sigmoid(const Tensor& p);
double sigmoid_scalar(double x);
double inverse_sigmoid_scalar(double p);

// Shape ops.
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor transpose(const Tensor& a);  // 2-D
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor slice_last(const Tensor& a, int start, int len);
// Row gather; index -1 yields a zero row (used for masked/padded gathers).
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
// Flat-index gather from any tensor into a 1-D result.
Tensor gather_flat(const Tensor& table, const std::vector<int64_t>& idx);
Tensor detach(const Tensor& a);

// Linear algebra and reductions.
Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k] x [k,n]
Tensor add_rowvec(const Tensor& a, const Tensor& v);    // a[n,d] + v[d] per row
Tensor scale_rows(const Tensor& a, const Tensor& s);    // a[n,d] * s[n] per row
Tensor sum_all(const Tensor& a);                        // -> [1]
Tensor mean_all(const Tensor& a);                       // -> [1]
// Sums consecutive groups of `group` rows: [n*group, d] -> [n, d].
Tensor sum_row_groups(const Tensor& a, int group);

// Model primitives.
// Numerically stabilized softmax over the last axis. -inf entries (the mask
// sentinel) map to exactly 0; a fully masked slice raises
// DegenerateSliceError.
Tensor softmax_last(const Tensor& x);
// Adds a 0/-inf mask to attention scores; the only op allowed to publish
// non-finite values.
Tensor add_mask(const Tensor& scores, const Tensor& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// Sinusoidal embedding of each entry of x into half_dim values laid out as
// [sin(w0 x), cos(w0 x), sin(w1 x), cos(w1 x), ...] with
// w_i = temperature^(-2i / (half_dim / 2)). half_dim must be even.
Tensor positional_encode(const Tensor& x, int half_dim, double temperature);
// map [H,W,C], pts [P,2] as (x, y) in pixel coordinates -> [P,C].
// Out-of-bounds neighbours contribute zero features. Differentiable in both
// the map and the points.
Tensor bilinear_sample(const Tensor& map, const Tensor& pts);

// Convenience.
Tensor linear(const Tensor& x, const Parameter& w, const Parameter* b);
Tensor xavier_uniform(std::vector<int> shape, SeededRng& rng);
Tensor uniform_tensor(std::vector<int> shape, double lo, double hi, SeededRng& rng);

}  // namespace pdtr
