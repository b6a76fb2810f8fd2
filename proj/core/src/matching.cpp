#include "pdtr/matching.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace pdtr {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Potentials method (Kuhn-Munkres) over rows 1..n, cols 1..m with n <= m.
// Returns the minimal total; fills row -> col when `match` is given.
double solve_rows(int n, int m, const std::function<double(int, int)>& a,
                  std::vector<int>* match) {
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<size_t>(j)] != 0) {
      total += a(p[static_cast<size_t>(j)] - 1, j - 1);
      if (match) (*match)[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
    }
  }
  return total;
}

// Optimal total over the sub-problem restricted to the given prediction and
// gt index lists. Rows are the smaller side.
double solve_subset(const std::vector<std::vector<double>>& cost,
                    const std::vector<int>& preds, const std::vector<int>& gts) {
  if (preds.empty() || gts.empty()) return 0.0;
  const int np = static_cast<int>(preds.size());
  const int ng = static_cast<int>(gts.size());
  if (ng <= np) {
    return solve_rows(ng, np,
                      [&](int i, int j) { return cost[static_cast<size_t>(preds[static_cast<size_t>(j)])]
                                                     [static_cast<size_t>(gts[static_cast<size_t>(i)])]; },
                      nullptr);
  }
  return solve_rows(np, ng,
                    [&](int i, int j) { return cost[static_cast<size_t>(preds[static_cast<size_t>(i)])]
                                                   [static_cast<size_t>(gts[static_cast<size_t>(j)])]; },
                    nullptr);
}

}  // namespace

Assignment hungarian_match(const std::vector<std::vector<double>>& cost) {
  const int K = static_cast<int>(cost.size());
  const int G = K > 0 ? static_cast<int>(cost[0].size()) : 0;
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != G)
      throw DimensionError("hungarian_match: ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c)) throw NumericError("hungarian_match: non-finite cost");
  }
  Assignment out;
  if (K == 0 || G == 0) {
    out.unmatched_predictions.resize(static_cast<size_t>(K));
    std::iota(out.unmatched_predictions.begin(), out.unmatched_predictions.end(), 0);
    return out;
  }

  std::vector<int> all_preds(static_cast<size_t>(K)), all_gts(static_cast<size_t>(G));
  std::iota(all_preds.begin(), all_preds.end(), 0);
  std::iota(all_gts.begin(), all_gts.end(), 0);
  const double best = solve_subset(cost, all_preds, all_gts);
  const double eps = 1e-9 * (1.0 + std::fabs(best));

  // Greedy lexicographic fixing: matching the smallest feasible prediction
  // (then the smallest feasible gt) always yields the lexicographically
  // smallest co-optimal pair list.
  std::vector<char> gt_used(static_cast<size_t>(G), 0);
  double fixed_cost = 0.0;
  int remaining = std::min(K, G);
  for (int p = 0; p < K && remaining > 0; ++p) {
    std::vector<int> rest_preds;
    for (int i = p + 1; i < K; ++i) rest_preds.push_back(i);
    bool placed = false;
    for (int g = 0; g < G && !placed; ++g) {
      if (gt_used[static_cast<size_t>(g)]) continue;
      std::vector<int> rest_gts;
      for (int j = 0; j < G; ++j)
        if (!gt_used[static_cast<size_t>(j)] && j != g) rest_gts.push_back(j);
      const double total = fixed_cost + cost[static_cast<size_t>(p)][static_cast<size_t>(g)] +
                           solve_subset(cost, rest_preds, rest_gts);
      if (total <= best + eps) {
        out.pairs.emplace_back(p, g);
        gt_used[static_cast<size_t>(g)] = 1;
        fixed_cost += cost[static_cast<size_t>(p)][static_cast<size_t>(g)];
        --remaining;
        placed = true;
      }
    }
    if (!placed) out.unmatched_predictions.push_back(p);
  }
  for (int p = out.pairs.empty() ? 0 : out.pairs.back().first + 1; p < K; ++p) {
    if (out.unmatched_predictions.empty() || out.unmatched_predictions.back() < p)
      out.unmatched_predictions.push_back(p);
  }
  return out;
}

std::vector<std::vector<double>> match_cost(const Tensor& logits, const Tensor& boxes,
                                            const GroundTruth& gt, const MatchWeights& w) {
  const int K = logits.dim(0);
  const int G = static_cast<int>(gt.count());
  constexpr double kAlpha = 0.25;
  std::vector<std::vector<double>> cost(static_cast<size_t>(K),
                                        std::vector<double>(static_cast<size_t>(G), 0.0));
  for (int k = 0; k < K; ++k) {
    const AnchorBox pb{boxes.at(k, 0), boxes.at(k, 1), boxes.at(k, 2), boxes.at(k, 3)};
    for (int g = 0; g < G; ++g) {
      const double p = sigmoid_scalar(logits.at(k, gt.labels[static_cast<size_t>(g)]));
      const double pos = kAlpha * (1.0 - p) * (1.0 - p) * (-std::log(p + 1e-8));
      const double negc = (1.0 - kAlpha) * p * p * (-std::log(1.0 - p + 1e-8));
      const AnchorBox& gb = gt.boxes[static_cast<size_t>(g)];
      const double l1 = std::fabs(pb.cx - gb.cx) + std::fabs(pb.cy - gb.cy) +
                        std::fabs(pb.w - gb.w) + std::fabs(pb.h - gb.h);
      cost[static_cast<size_t>(k)][static_cast<size_t>(g)] =
          w.cls * (pos - negc) + w.l1 * l1 + w.giou * (1.0 - giou(pb, gb));
    }
  }
  return cost;
}

Tensor giou_pairs(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(1) != 4 || !same_shape(a, b))
    throw DimensionError("giou_pairs: expects matching [n,4] tensors");
  auto corners = [](const Tensor& t) {
    Tensor cx = slice_last(t, 0, 1);
    Tensor cy = slice_last(t, 1, 1);
    Tensor w = clamp_min(slice_last(t, 2, 1), 1e-4);
    Tensor h = clamp_min(slice_last(t, 3, 1), 1e-4);
    Tensor hw = scale(w, 0.5);
    Tensor hh = scale(h, 0.5);
    struct C { Tensor x1, y1, x2, y2, area; } c;
    c.x1 = sub(cx, hw);
    c.x2 = add(cx, hw);
    c.y1 = sub(cy, hh);
    c.y2 = add(cy, hh);
    c.area = mul(w, h);
    return c;
  };
  auto ca = corners(a);
  auto cb = corners(b);
  Tensor iw = relu(sub(minimum(ca.x2, cb.x2), maximum(ca.x1, cb.x1)));
  Tensor ih = relu(sub(minimum(ca.y2, cb.y2), maximum(ca.y1, cb.y1)));
  Tensor inter = mul(iw, ih);
  Tensor uni = sub(add(ca.area, cb.area), inter);
  Tensor iou_t = div(inter, uni);
  Tensor hull_w = sub(maximum(ca.x2, cb.x2), minimum(ca.x1, cb.x1));
  Tensor hull_h = sub(maximum(ca.y2, cb.y2), minimum(ca.y1, cb.y1));
  Tensor hull = mul(hull_w, hull_h);
  return sub(iou_t, div(sub(hull, uni), hull));
}

namespace {

// alpha * t * (1-p)^2 * -log(p) + (1-alpha) * (1-t) * p^2 * -log(1-p),
// summed over every entry. -log sigmoid terms use the softplus form.
Tensor focal_loss_sum(const Tensor& logits, const Tensor& targets, double alpha) {
  Tensor p = sigmoid(logits);
  Tensor one = Tensor::full(p.shape(), 1.0);
  Tensor q = sub(one, p);
  Tensor pos = mul(targets, mul(mul(q, q), softplus(neg(logits))));
  Tensor negt = sub(one, targets);
  Tensor negl = mul(negt, mul(mul(p, p), softplus(logits)));
  return add(scale(sum_all(pos), alpha), scale(sum_all(negl), 1.0 - alpha));
}

LossParts loss_core(const std::vector<Tensor>& layer_boxes, const Tensor& final_logits,
                    const GroundTruth& gt, const std::vector<std::pair<int, int>>& pairs,
                    int num_classes, double norm, const LossWeights& w) {
  if (layer_boxes.empty()) throw DimensionError("loss: no box predictions");
  const int K = final_logits.dim(0);

  Tensor targets({K, num_classes});
  for (const auto& [pred, g] : pairs)
    targets.mutable_data()[static_cast<size_t>(pred) * num_classes +
                           gt.labels[static_cast<size_t>(g)]] = 1.0;

  LossParts parts;
  Tensor cls = scale(focal_loss_sum(final_logits, targets, w.focal_alpha), 1.0 / norm);
  parts.cls = cls.value();
  Tensor total = scale(cls, w.cls);

  if (!pairs.empty()) {
    std::vector<int> pred_idx;
    Tensor gt_boxes({static_cast<int>(pairs.size()), 4});
    double* gb = gt_boxes.mutable_data();
    for (size_t i = 0; i < pairs.size(); ++i) {
      pred_idx.push_back(pairs[i].first);
      const AnchorBox& b = gt.boxes[static_cast<size_t>(pairs[i].second)];
      gb[i * 4 + 0] = b.cx;
      gb[i * 4 + 1] = b.cy;
      gb[i * 4 + 2] = b.w;
      gb[i * 4 + 3] = b.h;
    }
    Tensor ones({static_cast<int>(pairs.size()), 1});
    std::fill(ones.mutable_data(), ones.mutable_data() + ones.size(), 1.0);
    for (const Tensor& boxes : layer_boxes) {
      Tensor pb = gather_rows(boxes, pred_idx);
      Tensor l1 = scale(sum_all(pdtr::abs(sub(pb, gt_boxes))), 1.0 / norm);
      Tensor gl = scale(sum_all(sub(ones, giou_pairs(pb, gt_boxes))), 1.0 / norm);
      parts.l1 += l1.value();
      parts.giou += gl.value();
      total = add(total, add(scale(l1, w.l1), scale(gl, w.giou)));
    }
  }
  parts.total = total;
  return parts;
}

}  // namespace

LossParts set_loss(const std::vector<Tensor>& layer_boxes, const Tensor& final_logits,
                   const GroundTruth& gt, const Assignment& assignment, int num_classes,
                   const LossWeights& w) {
  const double norm = std::max<size_t>(1, gt.count());
  return loss_core(layer_boxes, final_logits, gt, assignment.pairs, num_classes, norm, w);
}

LossParts denoising_loss(const std::vector<Tensor>& layer_boxes, const Tensor& final_logits,
                         const GroundTruth& gt, const std::vector<int>& gt_of_query,
                         int num_classes, const LossWeights& w) {
  std::vector<std::pair<int, int>> pairs;
  for (size_t q = 0; q < gt_of_query.size(); ++q)
    pairs.emplace_back(static_cast<int>(q), gt_of_query[q]);
  const double norm = std::max<size_t>(1, pairs.size());
  return loss_core(layer_boxes, final_logits, gt, pairs, num_classes, norm, w);
}

}  // namespace pdtr
