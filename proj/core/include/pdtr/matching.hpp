#pragma once

#include <utility>
#include <vector>

#include "pdtr/box.hpp"
#include "pdtr/ops.hpp"
#include "pdtr/tensor.hpp"

namespace pdtr {

struct GroundTruth {
  std::vector<AnchorBox> boxes;   // normalized
  std::vector<int> labels;        // class ids 0..num_classes-1
  size_t count() const { return boxes.size(); }
};

// Injective prediction<->gt pairing; pairs are sorted by prediction index.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction, gt)
  std::vector<int> unmatched_predictions;
};

// Minimum-cost rectangular assignment of cost[pred][gt], K >= G. Among
// co-optimal solutions returns the lexicographically smallest pair list.
// Costs must be finite.
Assignment hungarian_match(const std::vector<std::vector<double>>& cost);

struct MatchWeights {
  double cls = 2.0, l1 = 5.0, giou = 2.0;
};

// Focal-shaped classification cost + L1 + (1 - GIoU), per prediction x gt.
// logits [K,num_classes], boxes [K,4] as (cx,cy,w,h).
std::vector<std::vector<double>> match_cost(const Tensor& logits, const Tensor& boxes,
                                            const GroundTruth& gt,
                                            const MatchWeights& w = {});

// Focal exponent is fixed at 2 (implemented by squaring).
struct LossWeights {
  double cls = 1.0, l1 = 5.0, giou = 2.0;
  double focal_alpha = 0.25;
};

struct LossParts {
  Tensor total;          // scalar, on the tape
  double cls = 0.0, l1 = 0.0, giou = 0.0;  // detached components
};

// Differentiable GIoU of row-aligned box pairs: [n,4] x [n,4] -> [n,1].
// Widths/heights are clamped to >= 1e-4 so the union stays positive.
Tensor giou_pairs(const Tensor& a, const Tensor& b);

// Focal classification over all queries (unmatched = background) + L1 +
// (1 - GIoU) on matched boxes, averaged over the gt count; intermediate
// layer boxes receive the same box losses under the same assignment.
// layer_boxes holds each refine layer's boxes [K,4]; the last entry is the
// final prediction.
LossParts set_loss(const std::vector<Tensor>& layer_boxes, const Tensor& final_logits,
                   const GroundTruth& gt, const Assignment& assignment,
                   int num_classes, const LossWeights& w = {});

// Same component losses with a fixed query->gt correspondence (no matching);
// label-flipped queries are supervised with the true label. gt_of_query[i]
// gives the gt index of denoise query i.
LossParts denoising_loss(const std::vector<Tensor>& layer_boxes, const Tensor& final_logits,
                         const GroundTruth& gt, const std::vector<int>& gt_of_query,
                         int num_classes, const LossWeights& w = {});

}  // namespace pdtr
