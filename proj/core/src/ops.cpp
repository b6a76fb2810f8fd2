#include "pdtr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pdtr {

namespace {

bool should_record(std::initializer_list<const Tensor*> ins) {
  if (!active_tape()) return false;
  for (const Tensor* t : ins)
    if (t->node >= 0) return true;
  return false;
}

void axpy(std::vector<double>& dst, const std::vector<double>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Rows/row-size view: collapses every axis but the last.
std::pair<int64_t, int64_t> last_axis_view(const Tensor& t) {
  const int64_t d = t.dim(t.rank() - 1);
  return {t.size() / d, d};
}

std::pair<int64_t, int64_t> row_view(const Tensor& t) {
  const int64_t rows = t.dim(0);
  return {rows, t.size() / rows};
}

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& a, const char* name, Fwd fwd, Bwd dfn) {
  Tensor out(a.shape());
  const double* x = a.data();
  double* y = out.mutable_data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  finalize_values(out, name);
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, an = a.node;
    tp->set_backward(on, [tp, on, an, a, dfn]() {
      const auto& go = tp->adj(on);
      auto& ga = tp->adj(an);
      const double* x = a.data();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * dfn(x[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  finalize_values(out, "add");
  if (should_record({&a, &b})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, an = a.node, bn = b.node;
    tp->set_backward(on, [tp, on, an, bn]() {
      const auto& go = tp->adj(on);
      if (an >= 0) axpy(tp->adj(an), go);
      if (bn >= 0) axpy(tp->adj(bn), go);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  finalize_values(out, "sub");
  if (should_record({&a, &b})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, an = a.node, bn = b.node;
    tp->set_backward(on, [tp, on, an, bn]() {
      const auto& go = tp->adj(on);
      if (an >= 0) axpy(tp->adj(an), go);
      if (bn >= 0) {
        auto& gb = tp->adj(bn);
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  finalize_values(out, "mul");
  if (should_record({&a, &b})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, an = a.node, bn = b.node;
    tp->set_backward(on, [tp, on, an, bn, a, b]() {
      const auto& go = tp->adj(on);
      if (an >= 0) {
        auto& ga = tp->adj(an);
        const double* pb = b.data();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb[i];
      }
      if (bn >= 0) {
        auto& gb = tp->adj(bn);
        const double* pa = a.data();
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("div: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  finalize_values(out, "div");
  if (should_record({&a, &b})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, an = a.node, bn = b.node;
    tp->set_backward(on, [tp, on, an, bn, a, b, out]() {
      const auto& go = tp->adj(on);
      const double* pb = b.data();
      if (an >= 0) {
        auto& ga = tp->adj(an);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / pb[i];
      }
      if (bn >= 0) {
        auto& gb = tp->adj(bn);
        const double* po = out.data();
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i] * po[i] / pb[i];
      }
    });
  }
  return out;
}

Tensor neg(const Tensor& a) {
  return unary_elementwise(a, "neg", [](double x) { return -x; },
                           [](double) { return -1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary_elementwise(a, "scale", [s](double x) { return x * s; },
                           [s](double) { return s; });
}

Tensor add_const(const Tensor& a, double c) {
  return unary_elementwise(a, "add_const", [c](double x) { return x + c; },
                           [](double) { return 1.0; });
}

Tensor abs(const Tensor& a) {
  return unary_elementwise(a, "abs", [](double x) { return std::fabs(x); },
                           [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_elementwise(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(a, "sigmoid", [](double x) { return stable_sigmoid(x); },
                           [](double x) {
                             const double s = stable_sigmoid(x);
                             return s * (1.0 - s);
                           });
}

Tensor softplus(const Tensor& a) {
  return unary_elementwise(
      a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](double x) { return stable_sigmoid(x); });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_elementwise(a, "clamp_min",
                           [lo](double x) { return x < lo ? lo : x; },
                           [lo](double x) { return x >= lo ? 1.0 : 0.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw DimensionError("minimum: shape mismatch");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = std::min(pa[i], pb[i]);
  finalize_values(out, "minimum");
  if (should_record({&a, &b})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, an = a.node, bn = b.node;
    tp->set_backward(on, [tp, on, an, bn, a, b]() {
      const auto& go = tp->adj(on);
      const double* pa = a.data();
      const double* pb = b.data();
      // ties route to a
      if (an >= 0) {
        auto& ga = tp->adj(an);
        for (size_t i = 0; i < go.size(); ++i)
          if (pa[i] <= pb[i]) ga[i] += go[i];
      }
      if (bn >= 0) {
        auto& gb = tp->adj(bn);
        for (size_t i = 0; i < go.size(); ++i)
          if (pa[i] > pb[i]) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw DimensionError("maximum: shape mismatch");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = std::max(pa[i], pb[i]);
  finalize_values(out, "maximum");
  if (should_record({&a, &b})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, an = a.node, bn = b.node;
    tp->set_backward(on, [tp, on, an, bn, a, b]() {
      const auto& go = tp->adj(on);
      const double* pa = a.data();
      const double* pb = b.data();
      if (an >= 0) {
        auto& ga = tp->adj(an);
        for (size_t i = 0; i < go.size(); ++i)
          if (pa[i] >= pb[i]) ga[i] += go[i];
      }
      if (bn >= 0) {
        auto& gb = tp->adj(bn);
        for (size_t i = 0; i < go.size(); ++i)
          if (pa[i] < pb[i]) gb[i] += go[i];
      }
    });
  }
  return out;
}

double sigmoid_scalar(double x) { return stable_sigmoid(x); }

double inverse_sigmoid_scalar(double p) {
  const double pc = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(pc / (1.0 - pc));
}

Tensor inverse_sigmoid(const Tensor& p) {
  return unary_elementwise(p, "inverse_sigmoid",
                           [](double x) { return inverse_sigmoid_scalar(x); },
                           [](double x) {
                             if (x < 1e-4 || x > 1.0 - 1e-4) return 0.0;
                             return 1.0 / (x * (1.0 - x));
                           });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: size mismatch " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(a.size());
    const int on = out.node, an = a.node;
    tp->set_backward(on, [tp, on, an]() { axpy(tp->adj(an), tp->adj(on)); });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expects rank 2");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[static_cast<int64_t>(j) * m + i] = pa[static_cast<int64_t>(i) * n + j];
  finalize_values(out, "transpose");
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node;
    tp->set_backward(on, [tp, on, an, m, n]() {
      const auto& go = tp->adj(on);
      auto& ga = tp->adj(an);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<size_t>(i) * n + j] += go[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  std::vector<int> shape = parts[0].shape();
  const int64_t rowsize = parts[0].size() / parts[0].dim(0);
  int rows = 0;
  for (const Tensor& p : parts) {
    if (p.size() / p.dim(0) != rowsize)
      throw DimensionError("concat_rows: row size mismatch");
    rows += p.dim(0);
  }
  shape[0] = rows;
  Tensor out(shape);
  double* po = out.mutable_data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data(), p.data() + p.size(), po + off);
    off += p.size();
  }
  finalize_values(out, "concat_rows", /*allow_nonfinite=*/true);
  Tape* tp = active_tape();
  bool track = tp != nullptr && std::any_of(parts.begin(), parts.end(),
                                            [](const Tensor& t) { return t.node >= 0; });
  if (track) {
    out.node = tp->new_node(out.size());
    const int on = out.node;
    std::vector<std::pair<int, int64_t>> spans;  // (node, size)
    for (const Tensor& p : parts) spans.emplace_back(p.node, p.size());
    tp->set_backward(on, [tp, on, spans]() {
      const auto& go = tp->adj(on);
      int64_t off = 0;
      for (auto [node, sz] : spans) {
        if (node >= 0) {
          auto& g = tp->adj(node);
          for (int64_t i = 0; i < sz; ++i) g[static_cast<size_t>(i)] += go[static_cast<size_t>(off + i)];
        }
        off += sz;
      }
    });
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no parts");
  auto [rows0, d0] = last_axis_view(parts[0]);
  int dsum = 0;
  for (const Tensor& p : parts) {
    auto [r, d] = last_axis_view(p);
    if (r != rows0) throw DimensionError("concat_last: leading-shape mismatch");
    dsum += static_cast<int>(d);
  }
  std::vector<int> shape = parts[0].shape();
  shape.back() = dsum;
  Tensor out(shape);
  double* po = out.mutable_data();
  int64_t col = 0;
  for (const Tensor& p : parts) {
    auto [r, d] = last_axis_view(p);
    const double* pp = p.data();
    for (int64_t i = 0; i < r; ++i)
      std::copy(pp + i * d, pp + (i + 1) * d, po + i * dsum + col);
    col += d;
  }
  finalize_values(out, "concat_last", /*allow_nonfinite=*/true);
  Tape* tp = active_tape();
  bool track = tp != nullptr && std::any_of(parts.begin(), parts.end(),
                                            [](const Tensor& t) { return t.node >= 0; });
  if (track) {
    out.node = tp->new_node(out.size());
    const int on = out.node;
    std::vector<std::pair<int, int64_t>> spans;
    for (const Tensor& p : parts) spans.emplace_back(p.node, last_axis_view(p).second);
    const int64_t rows = rows0;
    const int64_t dtot = dsum;
    tp->set_backward(on, [tp, on, spans, rows, dtot]() {
      const auto& go = tp->adj(on);
      int64_t col = 0;
      for (auto [node, d] : spans) {
        if (node >= 0) {
          auto& g = tp->adj(node);
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < d; ++j)
              g[static_cast<size_t>(i * d + j)] += go[static_cast<size_t>(i * dtot + col + j)];
        }
        col += d;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  const auto [rows, rowsize] = row_view(a);
  if (start < 0 || len < 0 || start + len > rows)
    throw DimensionError("slice_rows: range out of bounds");
  std::vector<int> shape = a.shape();
  shape[0] = len;
  Tensor out(shape);
  std::copy(a.data() + static_cast<int64_t>(start) * rowsize,
            a.data() + static_cast<int64_t>(start + len) * rowsize, out.mutable_data());
  finalize_values(out, "slice_rows", /*allow_nonfinite=*/true);
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node;
    const int64_t off = static_cast<int64_t>(start) * rowsize;
    tp->set_backward(on, [tp, on, an, off]() {
      const auto& go = tp->adj(on);
      auto& ga = tp->adj(an);
      for (size_t i = 0; i < go.size(); ++i) ga[static_cast<size_t>(off) + i] += go[i];
    });
  }
  return out;
}

Tensor slice_last(const Tensor& a, int start, int len) {
  const auto [rows, d] = last_axis_view(a);
  if (start < 0 || len < 0 || start + len > d)
    throw DimensionError("slice_last: range out of bounds");
  std::vector<int> shape = a.shape();
  shape.back() = len;
  Tensor out(shape);
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (int64_t i = 0; i < rows; ++i)
    std::copy(pa + i * d + start, pa + i * d + start + len, po + i * len);
  finalize_values(out, "slice_last", /*allow_nonfinite=*/true);
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node;
    const int64_t rows_c = rows, d_c = d, start_c = start, len_c = len;
    tp->set_backward(on, [tp, on, an, rows_c, d_c, start_c, len_c]() {
      const auto& go = tp->adj(on);
      auto& ga = tp->adj(an);
      for (int64_t i = 0; i < rows_c; ++i)
        for (int64_t j = 0; j < len_c; ++j)
          ga[static_cast<size_t>(i * d_c + start_c + j)] += go[static_cast<size_t>(i * len_c + j)];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  const auto [rows, rowsize] = row_view(a);
  std::vector<int> shape = a.shape();
  shape[0] = static_cast<int>(idx.size());
  Tensor out(shape);
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (size_t r = 0; r < idx.size(); ++r) {
    const int s = idx[r];
    if (s >= rows) throw DimensionError("gather_rows: index out of range");
    if (s < 0) continue;  // zero row
    std::copy(pa + static_cast<int64_t>(s) * rowsize, pa + static_cast<int64_t>(s + 1) * rowsize,
              po + static_cast<int64_t>(r) * rowsize);
  }
  finalize_values(out, "gather_rows", /*allow_nonfinite=*/true);
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node;
    const int64_t rs = rowsize;
    tp->set_backward(on, [tp, on, an, idx, rs]() {
      const auto& go = tp->adj(on);
      auto& ga = tp->adj(an);
      for (size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0) continue;
        const int64_t src = static_cast<int64_t>(r) * rs;
        const int64_t dst = static_cast<int64_t>(idx[r]) * rs;
        for (int64_t j = 0; j < rs; ++j) ga[static_cast<size_t>(dst + j)] += go[static_cast<size_t>(src + j)];
      }
    });
  }
  return out;
}

Tensor gather_flat(const Tensor& table, const std::vector<int64_t>& idx) {
  Tensor out({static_cast<int>(idx.size())});
  const double* pt = table.data();
  double* po = out.mutable_data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.size())
      throw DimensionError("gather_flat: index out of range");
    po[i] = pt[idx[i]];
  }
  finalize_values(out, "gather_flat");
  if (should_record({&table})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, tn = table.node;
    tp->set_backward(on, [tp, on, tn, idx]() {
      const auto& go = tp->adj(on);
      auto& gt = tp->adj(tn);
      for (size_t i = 0; i < idx.size(); ++i) gt[static_cast<size_t>(idx[i])] += go[i];
    });
  }
  return out;
}

Tensor detach(const Tensor& a) {
  Tensor out = a;
  out.node = -1;
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  // ikj order: each output cell accumulates over ascending k.
  for (int i = 0; i < m; ++i) {
    double* orow = po + static_cast<int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[static_cast<int64_t>(i) * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  finalize_values(out, "matmul");
  if (should_record({&a, &b})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node, bn = b.node;
    tp->set_backward(on, [tp, on, an, bn, a, b, m, k, n]() {
      const auto& go = tp->adj(on);
      const double corrupt = debug_corrupt_backward() ? 1.01 : 1.0;
      if (an >= 0) {
        // gA = gY * B^T
        auto& ga = tp->adj(an);
        const double* pb = b.data();
        for (int i = 0; i < m; ++i) {
          const double* grow = go.data() + static_cast<int64_t>(i) * n;
          for (int kk = 0; kk < k; ++kk) {
            const double* brow = pb + static_cast<int64_t>(kk) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<size_t>(i) * k + kk] += corrupt * acc;
          }
        }
      }
      if (bn >= 0) {
        // gB = A^T * gY
        auto& gb = tp->adj(bn);
        const double* pa = a.data();
        for (int i = 0; i < m; ++i) {
          const double* grow = go.data() + static_cast<int64_t>(i) * n;
          for (int kk = 0; kk < k; ++kk) {
            const double av = corrupt * pa[static_cast<int64_t>(i) * k + kk];
            if (av == 0.0) continue;
            double* gbrow = gb.data() + static_cast<int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const auto [rows, d] = last_axis_view(a);
  if (v.rank() != 1 || v.dim(0) != d)
    throw DimensionError("add_rowvec: vector length mismatch");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pv = v.data();
  double* po = out.mutable_data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < d; ++j) po[i * d + j] = pa[i * d + j] + pv[j];
  finalize_values(out, "add_rowvec");
  if (should_record({&a, &v})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node, vn = v.node;
    const int64_t rows_c = rows, d_c = d;
    tp->set_backward(on, [tp, on, an, vn, rows_c, d_c]() {
      const auto& go = tp->adj(on);
      if (an >= 0) axpy(tp->adj(an), go);
      if (vn >= 0) {
        auto& gv = tp->adj(vn);
        for (int64_t i = 0; i < rows_c; ++i)
          for (int64_t j = 0; j < d_c; ++j) gv[static_cast<size_t>(j)] += go[static_cast<size_t>(i * d_c + j)];
      }
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  const auto [rows, d] = row_view(a);
  if (s.size() != rows) throw DimensionError("scale_rows: scale length mismatch");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* ps = s.data();
  double* po = out.mutable_data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < d; ++j) po[i * d + j] = pa[i * d + j] * ps[i];
  finalize_values(out, "scale_rows");
  if (should_record({&a, &s})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node, sn = s.node;
    const int64_t rows_c = rows, d_c = d;
    tp->set_backward(on, [tp, on, an, sn, a, s, rows_c, d_c]() {
      const auto& go = tp->adj(on);
      if (an >= 0) {
        auto& ga = tp->adj(an);
        const double* ps = s.data();
        for (int64_t i = 0; i < rows_c; ++i)
          for (int64_t j = 0; j < d_c; ++j)
            ga[static_cast<size_t>(i * d_c + j)] += go[static_cast<size_t>(i * d_c + j)] * ps[i];
      }
      if (sn >= 0) {
        auto& gs = tp->adj(sn);
        const double* pa = a.data();
        for (int64_t i = 0; i < rows_c; ++i) {
          double acc = 0.0;
          for (int64_t j = 0; j < d_c; ++j)
            acc += go[static_cast<size_t>(i * d_c + j)] * pa[i * d_c + j];
          gs[static_cast<size_t>(i)] += acc;
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  const double* pa = a.data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  Tensor out = Tensor::scalar(acc);
  finalize_values(out, "sum_all");
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(1);
    const int on = out.node, an = a.node;
    tp->set_backward(on, [tp, on, an]() {
      const double g = tp->adj(on)[0];
      auto& ga = tp->adj(an);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor sum_row_groups(const Tensor& a, int group) {
  const auto [rows, d] = row_view(a);
  if (group <= 0 || rows % group != 0)
    throw DimensionError("sum_row_groups: rows not divisible by group");
  std::vector<int> shape = a.shape();
  shape[0] = static_cast<int>(rows / group);
  Tensor out(shape);
  const double* pa = a.data();
  double* po = out.mutable_data();
  const int64_t orows = rows / group;
  for (int64_t i = 0; i < orows; ++i)
    for (int64_t g = 0; g < group; ++g)
      for (int64_t j = 0; j < d; ++j) po[i * d + j] += pa[(i * group + g) * d + j];
  finalize_values(out, "sum_row_groups");
  if (should_record({&a})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, an = a.node;
    const int64_t orows_c = orows, d_c = d, group_c = group;
    tp->set_backward(on, [tp, on, an, orows_c, d_c, group_c]() {
      const auto& go = tp->adj(on);
      auto& ga = tp->adj(an);
      for (int64_t i = 0; i < orows_c; ++i)
        for (int64_t g = 0; g < group_c; ++g)
          for (int64_t j = 0; j < d_c; ++j)
            ga[static_cast<size_t>((i * group_c + g) * d_c + j)] += go[static_cast<size_t>(i * d_c + j)];
    });
  }
  return out;
}

Tensor softmax_last(const Tensor& x) {
  const auto [rows, d] = last_axis_view(x);
  if (d < 1) throw DimensionError("softmax_last: empty last axis");
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = px + i * d;
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < d; ++j) m = std::max(m, row[j]);
    if (!std::isfinite(m))
      throw DegenerateSliceError("softmax_last: fully masked slice");
    double s = 0.0;
    double* orow = po + i * d;
    for (int64_t j = 0; j < d; ++j) {
      orow[j] = std::exp(row[j] - m);  // exp(-inf) == 0 exactly
      s += orow[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  finalize_values(out, "softmax_last");
  if (should_record({&x})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, xn = x.node;
    const int64_t rows_c = rows, d_c = d;
    tp->set_backward(on, [tp, on, xn, out, rows_c, d_c]() {
      const auto& go = tp->adj(on);
      auto& gx = tp->adj(xn);
      const double* py = out.data();
      for (int64_t i = 0; i < rows_c; ++i) {
        const double* y = py + i * d_c;
        const double* g = go.data() + i * d_c;
        double dot = 0.0;
        for (int64_t j = 0; j < d_c; ++j) dot += g[j] * y[j];
        for (int64_t j = 0; j < d_c; ++j)
          gx[static_cast<size_t>(i * d_c + j)] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor add_mask(const Tensor& scores, const Tensor& mask) {
  if (!same_shape(scores, mask)) throw DimensionError("add_mask: shape mismatch");
  Tensor out(scores.shape());
  const double* ps = scores.data();
  const double* pm = mask.data();
  double* po = out.mutable_data();
  const int64_t n = scores.size();
  for (int64_t i = 0; i < n; ++i) po[i] = ps[i] + pm[i];
  finalize_values(out, "add_mask", /*allow_nonfinite=*/true);
  if (should_record({&scores})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(n);
    const int on = out.node, sn = scores.node;
    tp->set_backward(on, [tp, on, sn, mask]() {
      const auto& go = tp->adj(on);
      auto& gs = tp->adj(sn);
      const double* pm = mask.data();
      for (size_t i = 0; i < go.size(); ++i)
        if (pm[i] == 0.0) gs[i] += go[i];
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto [rows, d] = last_axis_view(x);
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: affine parameter length mismatch");
  Tensor out(x.shape());
  Tensor xhat(x.shape());  // kept for backward
  Tensor inv_std({static_cast<int>(rows)});
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.mutable_data();
  double* ph = xhat.mutable_data();
  double* pi = inv_std.mutable_data();
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = px + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    pi[i] = inv;
    for (int64_t j = 0; j < d; ++j) {
      ph[i * d + j] = (row[j] - mean) * inv;
      po[i * d + j] = pg[j] * ph[i * d + j] + pb[j];
    }
  }
  finalize_values(out, "layer_norm");
  if (should_record({&x, &gamma, &beta})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, xn = x.node, gn = gamma.node, bn = beta.node;
    const int64_t rows_c = rows, d_c = d;
    tp->set_backward(on, [tp, on, xn, gn, bn, gamma, xhat, inv_std, rows_c, d_c]() {
      const auto& go = tp->adj(on);
      const double* pg = gamma.data();
      const double* ph = xhat.data();
      const double* pi = inv_std.data();
      for (int64_t i = 0; i < rows_c; ++i) {
        const double* g = go.data() + i * d_c;
        const double* h = ph + i * d_c;
        if (gn >= 0) {
          auto& gg = tp->adj(gn);
          for (int64_t j = 0; j < d_c; ++j) gg[static_cast<size_t>(j)] += g[j] * h[j];
        }
        if (bn >= 0) {
          auto& gb = tp->adj(bn);
          for (int64_t j = 0; j < d_c; ++j) gb[static_cast<size_t>(j)] += g[j];
        }
        if (xn >= 0) {
          auto& gx = tp->adj(xn);
          double m1 = 0.0, m2 = 0.0;
          for (int64_t j = 0; j < d_c; ++j) {
            const double a = g[j] * pg[j];
            m1 += a;
            m2 += a * h[j];
          }
          m1 /= static_cast<double>(d_c);
          m2 /= static_cast<double>(d_c);
          for (int64_t j = 0; j < d_c; ++j) {
            const double a = g[j] * pg[j];
            gx[static_cast<size_t>(i * d_c + j)] += pi[i] * (a - m1 - h[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor positional_encode(const Tensor& x, int half_dim, double temperature) {
  if (half_dim < 2 || half_dim % 2 != 0)
    throw DimensionError("positional_encode: half_dim must be even and >= 2");
  const int64_t n = x.size();
  const int pairs = half_dim / 2;
  std::vector<double> freqs(static_cast<size_t>(pairs));
  for (int i = 0; i < pairs; ++i)
    freqs[static_cast<size_t>(i)] = std::pow(temperature, -2.0 * i / static_cast<double>(half_dim));
  Tensor out({static_cast<int>(n), half_dim});
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t r = 0; r < n; ++r) {
    for (int i = 0; i < pairs; ++i) {
      const double a = px[r] * freqs[static_cast<size_t>(i)];
      po[r * half_dim + 2 * i] = std::sin(a);
      po[r * half_dim + 2 * i + 1] = std::cos(a);
    }
  }
  finalize_values(out, "positional_encode");
  if (should_record({&x})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, xn = x.node;
    tp->set_backward(on, [tp, on, xn, out, freqs, n, half_dim, pairs]() {
      const auto& go = tp->adj(on);
      auto& gx = tp->adj(xn);
      const double* py = out.data();
      for (int64_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (int i = 0; i < pairs; ++i) {
          const double s = py[r * half_dim + 2 * i];
          const double c = py[r * half_dim + 2 * i + 1];
          const double w = freqs[static_cast<size_t>(i)];
          acc += go[static_cast<size_t>(r * half_dim + 2 * i)] * c * w;
          acc -= go[static_cast<size_t>(r * half_dim + 2 * i + 1)] * s * w;
        }
        gx[static_cast<size_t>(r)] += acc;
      }
    });
  }
  return out;
}

Tensor bilinear_sample(const Tensor& map, const Tensor& pts) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample: map must be [H,W,C]");
  if (pts.rank() != 2 || pts.dim(1) != 2)
    throw DimensionError("bilinear_sample: pts must be [P,2]");
  const int h = map.dim(0), w = map.dim(1), c = map.dim(2);
  const int np = pts.dim(0);
  Tensor out({np, c});
  const double* pm = map.data();
  const double* pp = pts.data();
  double* po = out.mutable_data();
  auto cell = [&](int y, int x) -> const double* {
    if (y < 0 || y >= h || x < 0 || x >= w) return nullptr;
    return pm + (static_cast<int64_t>(y) * w + x) * c;
  };
  for (int p = 0; p < np; ++p) {
    const double xf = pp[2 * p], yf = pp[2 * p + 1];
    const int x0 = static_cast<int>(std::floor(xf));
    const int y0 = static_cast<int>(std::floor(yf));
    const double fx = xf - x0, fy = yf - y0;
    const double w00 = (1.0 - fy) * (1.0 - fx), w01 = (1.0 - fy) * fx;
    const double w10 = fy * (1.0 - fx), w11 = fy * fx;
    const double* c00 = cell(y0, x0);
    const double* c01 = cell(y0, x0 + 1);
    const double* c10 = cell(y0 + 1, x0);
    const double* c11 = cell(y0 + 1, x0 + 1);
    double* orow = po + static_cast<int64_t>(p) * c;
    for (int k = 0; k < c; ++k) {
      double v = 0.0;
      if (c00) v += w00 * c00[k];
      if (c01) v += w01 * c01[k];
      if (c10) v += w10 * c10[k];
      if (c11) v += w11 * c11[k];
      orow[k] = v;
    }
  }
  finalize_values(out, "bilinear_sample");
  if (should_record({&map, &pts})) {
    Tape* tp = active_tape();
    out.node = tp->new_node(out.size());
    const int on = out.node, mn = map.node, pn = pts.node;
    tp->set_backward(on, [tp, on, mn, pn, map, pts, h, w, c, np]() {
      const auto& go = tp->adj(on);
      const double* pm = map.data();
      const double* pp = pts.data();
      auto in_bounds = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w; };
      auto feat = [&](int y, int x, int k) -> double {
        return in_bounds(y, x) ? pm[(static_cast<int64_t>(y) * w + x) * c + k] : 0.0;
      };
      for (int p = 0; p < np; ++p) {
        const double xf = pp[2 * p], yf = pp[2 * p + 1];
        const int x0 = static_cast<int>(std::floor(xf));
        const int y0 = static_cast<int>(std::floor(yf));
        const double fx = xf - x0, fy = yf - y0;
        const double* g = go.data() + static_cast<int64_t>(p) * c;
        if (mn >= 0) {
          auto& gm = tp->adj(mn);
          const double w00 = (1.0 - fy) * (1.0 - fx), w01 = (1.0 - fy) * fx;
          const double w10 = fy * (1.0 - fx), w11 = fy * fx;
          auto scatter = [&](int y, int x, double wt) {
            if (!in_bounds(y, x) || wt == 0.0) return;
            double* dst = gm.data() + (static_cast<int64_t>(y) * w + x) * c;
            for (int k = 0; k < c; ++k) dst[k] += wt * g[k];
          };
          scatter(y0, x0, w00);
          scatter(y0, x0 + 1, w01);
          scatter(y0 + 1, x0, w10);
          scatter(y0 + 1, x0 + 1, w11);
        }
        if (pn >= 0) {
          auto& gp = tp->adj(pn);
          double dx = 0.0, dy = 0.0;
          for (int k = 0; k < c; ++k) {
            const double f00 = feat(y0, x0, k), f01 = feat(y0, x0 + 1, k);
            const double f10 = feat(y0 + 1, x0, k), f11 = feat(y0 + 1, x0 + 1, k);
            dx += g[k] * ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10));
            dy += g[k] * ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01));
          }
          gp[static_cast<size_t>(2 * p)] += dx;
          gp[static_cast<size_t>(2 * p + 1)] += dy;
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Parameter& w, const Parameter* b) {
  Tensor y = matmul(x, w.value);
  if (b != nullptr) y = add_rowvec(y, b->value);
  return y;
}

Tensor xavier_uniform(std::vector<int> shape, SeededRng& rng) {
  if (shape.size() != 2) throw DimensionError("xavier_uniform: expects 2-D shape");
  const double limit = std::sqrt(6.0 / (shape[0] + shape[1]));
  return uniform_tensor(std::move(shape), -limit, limit, rng);
}

Tensor uniform_tensor(std::vector<int> shape, double lo, double hi, SeededRng& rng) {
  Tensor t(std::move(shape));
  double* p = t.mutable_data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) p[i] = rng.uniform(lo, hi);
  finalize_values(t, "uniform_tensor");
  return t;
}

}  // namespace pdtr
