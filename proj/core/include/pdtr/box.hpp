#pragma once

#include <algorithm>

namespace pdtr {

// Normalized box: center, width, height, all in (0,1), w/h > 1e-4.
struct AnchorBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

struct Corners {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
};

inline Corners to_corners(const AnchorBox& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

inline AnchorBox from_corners(const Corners& c) {
  return {(c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0, c.x2 - c.x1, c.y2 - c.y1};
}

inline bool valid_anchor(const AnchorBox& b) {
  return b.cx > 0.0 && b.cx < 1.0 && b.cy > 0.0 && b.cy < 1.0 && b.w > 1e-4 &&
         b.h > 1e-4 && b.w < 1.0 && b.h < 1.0;
}

inline AnchorBox clamp_anchor(const AnchorBox& b) {
  auto clamp01 = [](double v) { return std::clamp(v, 1e-4, 1.0 - 1e-4); };
  return {clamp01(b.cx), clamp01(b.cy), std::clamp(b.w, 2e-4, 1.0 - 1e-4),
          std::clamp(b.h, 2e-4, 1.0 - 1e-4)};
}

inline double iou_corners(const Corners& a, const Corners& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double ua = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double ub = (b.x2 - b.x1) * (b.y2 - b.y1);
  const double uni = ua + ub - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double giou_corners(const Corners& a, const Corners& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double ua = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double ub = (b.x2 - b.x1) * (b.y2 - b.y1);
  const double uni = ua + ub - inter;
  const double hw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double hh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double hull = hw * hh;
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return hull > 0.0 ? iou - (hull - uni) / hull : iou;
}

inline double iou(const AnchorBox& a, const AnchorBox& b) {
  return iou_corners(to_corners(a), to_corners(b));
}

inline double giou(const AnchorBox& a, const AnchorBox& b) {
  return giou_corners(to_corners(a), to_corners(b));
}

}  // namespace pdtr
