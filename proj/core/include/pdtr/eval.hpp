#pragma once

#include <string>
#include <vector>

#include "pdtr/box.hpp"
#include "pdtr/tensor.hpp"

namespace pdtr {

// Detection-side structures use pixel corner boxes.
struct Detection {
  int image_id = 0;
  int class_id = 0;
  Corners box;
  double confidence = 0.0;
};

struct GtBox {
  int image_id = 0;
  int class_id = 0;
  Corners box;
};

struct EvalConfig {
  std::vector<double> iou_thresholds;  // ascending, in (0, 1]
  int max_detections = 100;            // per-image cap for AR
  double small_area = 32.0 * 32.0;     // GT area < small  -> small bucket
  double medium_area = 96.0 * 96.0;    // small <= area < medium -> medium
  bool interp_101 = false;             // 101-point compatibility mode
  int num_classes = 4;
  static EvalConfig defaults();
  void validate() const;
};

struct PrPoint {
  double recall = 0.0, precision = 0.0;
};

struct PrCurveKey {
  int class_id = 0;
  double threshold = 0.0;
  std::vector<PrPoint> points;  // one per detection rank
};

struct EvalReport {
  std::vector<std::vector<double>> ap;  // [class][threshold]; -1 marks excluded
  std::vector<double> ar;               // [class]; -1 marks excluded
  double map = 0.0, map50 = 0.0, map75 = 0.0;
  double map_s = 0.0, map_m = 0.0, mar100 = 0.0;
  std::vector<PrCurveKey> curves;
};

// TP/FP flags for one image+class at IoU threshold t. Detections must be
// pre-sorted by descending confidence (ties by lower original index); each
// detection takes the unmatched gt of highest IoU >= t (ties by lower gt
// index), each gt at most once.
struct MatchFlags {
  std::vector<char> tp;        // per detection, in the given order
  std::vector<int> gt_of_det;  // matched gt index or -1
};
MatchFlags greedy_match(const std::vector<Corners>& dets_sorted,
                        const std::vector<Corners>& gts, double iou_threshold);

// Cumulative (recall, precision) at each detection rank.
std::vector<PrPoint> pr_curve(const std::vector<char>& tp_flags, int num_gt);

// All-point interpolated AP: sum over ascending unique recall levels of
// (r_{i+1} - r_i) * max precision at recall >= r_{i+1}, with r_0 = 0.
double ap_interpolated(const std::vector<PrPoint>& curve);
// 101-point compatibility variant (non-default).
double ap_101point(const std::vector<PrPoint>& curve);

// Recall with the per-image detection cap applied, averaged over the IoU
// thresholds, for a single class.
double ar_at(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
             const std::vector<double>& thresholds, int cap);

// Full per-class AP/AR table and the class-averaged headline metrics.
// Classes with neither gts nor detections are excluded from the averages; a
// class with detections but no gts scores AP 0. Size-bucket metrics restrict
// the gt side by gt area: detections matched to an out-of-bucket gt are
// dropped, unmatched detections stay FP, and a class enters a bucket average
// only when it has at least one in-bucket gt.
EvalReport report(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                  const EvalConfig& cfg);

void write_report(const EvalReport& rep, const std::string& path);
void write_pr_csv(const EvalReport& rep, const std::string& path);

}  // namespace pdtr
