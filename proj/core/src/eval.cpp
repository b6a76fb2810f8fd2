#include "pdtr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace pdtr {

EvalConfig EvalConfig::defaults() {
  EvalConfig cfg;
  for (int i = 0; i < 10; ++i) cfg.iou_thresholds.push_back(0.50 + 0.05 * i);
  return cfg;
}

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw ConfigError("eval: empty IoU threshold list");
  double prev = 0.0;
  for (double t : iou_thresholds) {
    if (t <= prev || t > 1.0) throw ConfigError("eval: thresholds must ascend in (0,1]");
    prev = t;
  }
  if (max_detections <= 0) throw ConfigError("eval: max_detections must be positive");
  if (num_classes <= 0) throw ConfigError("eval: num_classes must be positive");
}

MatchFlags greedy_match(const std::vector<Corners>& dets_sorted,
                        const std::vector<Corners>& gts, double iou_threshold) {
  MatchFlags out;
  out.tp.assign(dets_sorted.size(), 0);
  out.gt_of_det.assign(dets_sorted.size(), -1);
  std::vector<char> gt_used(gts.size(), 0);
  for (size_t d = 0; d < dets_sorted.size(); ++d) {
    double best = 0.0;
    int best_g = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g]) continue;
      const double v = iou_corners(dets_sorted[d], gts[g]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      gt_used[static_cast<size_t>(best_g)] = 1;
      out.tp[d] = 1;
      out.gt_of_det[d] = best_g;
    }
  }
  return out;
}

std::vector<PrPoint> pr_curve(const std::vector<char>& tp_flags, int num_gt) {
  std::vector<PrPoint> curve;
  int tp = 0, fp = 0;
  for (char f : tp_flags) {
    if (f) ++tp; else ++fp;
    PrPoint p;
    p.recall = num_gt > 0 ? static_cast<double>(tp) / num_gt : 0.0;
    p.precision = static_cast<double>(tp) / (tp + fp);
    curve.push_back(p);
  }
  return curve;
}

double ap_interpolated(const std::vector<PrPoint>& curve) {
  if (curve.empty()) return 0.0;
  // unique ascending recall levels
  std::vector<double> recalls;
  for (const PrPoint& p : curve) recalls.push_back(p.recall);
  std::sort(recalls.begin(), recalls.end());
  recalls.erase(std::unique(recalls.begin(), recalls.end()), recalls.end());
  auto p_interp = [&](double r) {
    double best = 0.0;
    for (const PrPoint& p : curve)
      if (p.recall >= r) best = std::max(best, p.precision);
    return best;
  };
  double ap = 0.0, prev = 0.0;
  for (double r : recalls) {
    if (r > prev) ap += (r - prev) * p_interp(r);
    prev = r;
  }
  return ap;
}

double ap_101point(const std::vector<PrPoint>& curve) {
  if (curve.empty()) return 0.0;
  auto p_interp = [&](double r) {
    double best = 0.0;
    for (const PrPoint& p : curve)
      if (p.recall >= r - 1e-12) best = std::max(best, p.precision);
    return best;
  };
  double acc = 0.0;
  for (int i = 0; i <= 100; ++i) acc += p_interp(i / 100.0);
  return acc / 101.0;
}

namespace {

// Stable detection ordering: confidence descending, then image id, then the
// original index. This is the deterministic merge order for multi-image
// curves.
struct DetRef {
  int image_id;
  int index;  // original position within its input order
  const Detection* det;
};

bool det_order(const DetRef& a, const DetRef& b) {
  if (a.det->confidence != b.det->confidence) return a.det->confidence > b.det->confidence;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  return a.index < b.index;
}

double area(const Corners& c) { return std::max(0.0, c.x2 - c.x1) * std::max(0.0, c.y2 - c.y1); }

// Per-image, per-class evaluation state.
struct ClassData {
  std::map<int, std::vector<DetRef>> dets;   // image -> sorted refs
  std::map<int, std::vector<const GtBox*>> gts;
  int num_gt = 0;
  int num_det = 0;
};

std::vector<ClassData> split_by_class(const std::vector<Detection>& dets,
                                      const std::vector<GtBox>& gts, int num_classes) {
  std::vector<ClassData> per_class(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < dets.size(); ++i) {
    const Detection& d = dets[i];
    if (d.class_id < 0 || d.class_id >= num_classes)
      throw DataError("eval: unknown detection class id " + std::to_string(d.class_id));
    if (!std::isfinite(d.confidence)) throw DataError("eval: non-finite confidence");
    per_class[static_cast<size_t>(d.class_id)].dets[d.image_id].push_back(
        DetRef{d.image_id, static_cast<int>(i), &d});
    per_class[static_cast<size_t>(d.class_id)].num_det++;
  }
  for (const GtBox& g : gts) {
    if (g.class_id < 0 || g.class_id >= num_classes)
      throw DataError("eval: unknown gt class id " + std::to_string(g.class_id));
    per_class[static_cast<size_t>(g.class_id)].gts[g.image_id].push_back(&g);
    per_class[static_cast<size_t>(g.class_id)].num_gt++;
  }
  for (auto& cd : per_class)
    for (auto& [img, refs] : cd.dets) std::sort(refs.begin(), refs.end(), det_order);
  return per_class;
}

// One global TP/FP flag list for a class at a threshold. A gt-area predicate
// restricts the gt side: detections matched to an out-of-bucket gt are
// dropped (neither TP nor FP), unmatched detections stay FP, and num_gt
// counts only in-bucket gts.
struct FlagList {
  std::vector<std::pair<DetRef, char>> flags;  // globally ordered
  int num_gt = 0;
};

template <typename AreaPred>
FlagList class_flags(const ClassData& cd, double threshold, AreaPred in_bucket) {
  FlagList out;
  for (const auto& [img, refs] : cd.dets) {
    std::vector<Corners> boxes;
    for (const DetRef& r : refs) boxes.push_back(r.det->box);
    std::vector<Corners> gt_boxes;
    std::vector<char> gt_in;
    auto it = cd.gts.find(img);
    if (it != cd.gts.end())
      for (const GtBox* g : it->second) {
        gt_boxes.push_back(g->box);
        gt_in.push_back(in_bucket(area(g->box)) ? 1 : 0);
      }
    MatchFlags mf = greedy_match(boxes, gt_boxes, threshold);
    for (size_t d = 0; d < refs.size(); ++d) {
      if (mf.tp[d]) {
        if (gt_in[static_cast<size_t>(mf.gt_of_det[d])])
          out.flags.emplace_back(refs[d], 1);
        // matched to an out-of-bucket gt: dropped
      } else {
        out.flags.emplace_back(refs[d], 0);
      }
    }
  }
  for (const auto& [img, gl] : cd.gts)
    for (const GtBox* g : gl)
      if (in_bucket(area(g->box))) out.num_gt++;
  std::sort(out.flags.begin(), out.flags.end(),
            [](const auto& a, const auto& b) { return det_order(a.first, b.first); });
  return out;
}

}  // namespace

double ar_at(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
             const std::vector<double>& thresholds, int cap) {
  if (gts.empty()) return 0.0;
  // per-image cap by confidence (ties: lower index)
  std::map<int, std::vector<DetRef>> per_image;
  for (size_t i = 0; i < dets.size(); ++i)
    per_image[dets[i].image_id].push_back(DetRef{dets[i].image_id, static_cast<int>(i), &dets[i]});
  for (auto& [img, refs] : per_image) {
    std::sort(refs.begin(), refs.end(), det_order);
    if (static_cast<int>(refs.size()) > cap) refs.resize(static_cast<size_t>(cap));
  }
  std::map<int, std::vector<Corners>> gt_map;
  for (const GtBox& g : gts) gt_map[g.image_id].push_back(g.box);

  double acc = 0.0;
  for (double t : thresholds) {
    int matched = 0;
    for (const auto& [img, gt_boxes] : gt_map) {
      std::vector<Corners> boxes;
      auto it = per_image.find(img);
      if (it != per_image.end())
        for (const DetRef& r : it->second) boxes.push_back(r.det->box);
      MatchFlags mf = greedy_match(boxes, gt_boxes, t);
      for (char f : mf.tp) matched += f ? 1 : 0;
    }
    acc += static_cast<double>(matched) / static_cast<double>(gts.size());
  }
  return acc / static_cast<double>(thresholds.size());
}

EvalReport report(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                  const EvalConfig& cfg) {
  cfg.validate();
  EvalReport rep;
  const int C = cfg.num_classes;
  const int T = static_cast<int>(cfg.iou_thresholds.size());
  rep.ap.assign(static_cast<size_t>(C), std::vector<double>(static_cast<size_t>(T), -1.0));
  rep.ar.assign(static_cast<size_t>(C), -1.0);

  // AR's per-image cap applies across classes.
  std::map<int, std::vector<DetRef>> capped;
  for (size_t i = 0; i < dets.size(); ++i)
    capped[dets[i].image_id].push_back(DetRef{dets[i].image_id, static_cast<int>(i), &dets[i]});
  std::vector<Detection> capped_dets;
  for (auto& [img, refs] : capped) {
    std::sort(refs.begin(), refs.end(), det_order);
    const size_t keep = std::min(refs.size(), static_cast<size_t>(cfg.max_detections));
    for (size_t i = 0; i < keep; ++i) capped_dets.push_back(*refs[i].det);
  }

  auto per_class = split_by_class(dets, gts, C);
  auto any_area = [](double) { return true; };
  auto small_area = [&](double a) { return a < cfg.small_area; };
  auto medium_area = [&](double a) { return a >= cfg.small_area && a < cfg.medium_area; };

  // A class enters a size bucket's average only when it has at least one
  // in-bucket gt; detections matched to out-of-bucket gts are dropped.
  auto bucket_map = [&](auto pred) -> double {
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < C; ++c) {
      const ClassData& cd = per_class[static_cast<size_t>(c)];
      int bucket_gt = 0;
      for (const auto& [img, gl] : cd.gts)
        for (const GtBox* g : gl)
          if (pred(area(g->box))) ++bucket_gt;
      if (bucket_gt == 0) continue;
      double class_sum = 0.0;
      for (int ti = 0; ti < T; ++ti) {
        FlagList fl = class_flags(cd, cfg.iou_thresholds[static_cast<size_t>(ti)], pred);
        std::vector<char> f;
        for (auto& [r, v] : fl.flags) f.push_back(v);
        auto curve = pr_curve(f, fl.num_gt);
        class_sum += cfg.interp_101 ? ap_101point(curve) : ap_interpolated(curve);
      }
      sum += class_sum / T;
      ++counted;
    }
    return counted > 0 ? sum / counted : 0.0;
  };

  // Full AP table at the "all sizes" bucket.
  double map_sum = 0.0, map50_sum = 0.0, map75_sum = 0.0;
  int included = 0;
  for (int c = 0; c < C; ++c) {
    const ClassData& cd = per_class[static_cast<size_t>(c)];
    if (cd.num_gt == 0 && cd.num_det == 0) continue;  // excluded from averages
    double class_sum = 0.0;
    for (int ti = 0; ti < T; ++ti) {
      const double t = cfg.iou_thresholds[static_cast<size_t>(ti)];
      FlagList fl = class_flags(cd, t, any_area);
      double ap = 0.0;
      if (fl.num_gt > 0) {
        std::vector<char> f;
        for (auto& [r, v] : fl.flags) f.push_back(v);
        std::vector<PrPoint> curve = pr_curve(f, fl.num_gt);
        ap = cfg.interp_101 ? ap_101point(curve) : ap_interpolated(curve);
        PrCurveKey key;
        key.class_id = c;
        key.threshold = t;
        key.points = curve;
        rep.curves.push_back(std::move(key));
      }
      rep.ap[static_cast<size_t>(c)][static_cast<size_t>(ti)] = ap;
      class_sum += ap;
      if (std::fabs(t - 0.50) < 1e-9) map50_sum += ap;
      if (std::fabs(t - 0.75) < 1e-9) map75_sum += ap;
    }
    map_sum += class_sum / T;
    ++included;

    std::vector<Detection> class_dets;
    for (const Detection& d : capped_dets)
      if (d.class_id == c) class_dets.push_back(d);
    std::vector<GtBox> class_gts;
    for (const GtBox& g : gts)
      if (g.class_id == c) class_gts.push_back(g);
    if (!class_gts.empty())
      rep.ar[static_cast<size_t>(c)] =
          ar_at(class_dets, class_gts, cfg.iou_thresholds, cfg.max_detections);
  }
  if (included > 0) {
    rep.map = map_sum / included;
    rep.map50 = map50_sum / included;
    rep.map75 = map75_sum / included;
  }
  double ar_sum = 0.0;
  int ar_count = 0;
  for (int c = 0; c < C; ++c) {
    if (rep.ar[static_cast<size_t>(c)] >= 0.0) {
      ar_sum += rep.ar[static_cast<size_t>(c)];
      ++ar_count;
    }
  }
  rep.mar100 = ar_count > 0 ? ar_sum / ar_count : 0.0;
  rep.map_s = bucket_map(small_area);
  rep.map_m = bucket_map(medium_area);
  return rep;
}

void write_report(const EvalReport& rep, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write report: " + path);
  char buf[128];
  auto line = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    os << key << " " << buf << "\n";
  };
  line("mAP", rep.map);
  line("mAP50", rep.map50);
  line("mAP75", rep.map75);
  line("mAP_S", rep.map_s);
  line("mAP_M", rep.map_m);
  line("mAR100", rep.mar100);
  for (size_t c = 0; c < rep.ap.size(); ++c) {
    for (size_t t = 0; t < rep.ap[c].size(); ++t) {
      if (rep.ap[c][t] < 0.0) continue;
      std::snprintf(buf, sizeof buf, "AP_c%zu_t%zu", c, t);
      line(buf, rep.ap[c][t]);
    }
    if (rep.ar[c] >= 0.0) {
      std::snprintf(buf, sizeof buf, "AR_c%zu", c);
      line(buf, rep.ar[c]);
    }
  }
}

void write_pr_csv(const EvalReport& rep, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write PR csv: " + path);
  os << "class,threshold,rank,recall,precision\n";
  char buf[160];
  for (const PrCurveKey& k : rep.curves) {
    for (size_t r = 0; r < k.points.size(); ++r) {
      std::snprintf(buf, sizeof buf, "%d,%.2f,%zu,%.9f,%.9f\n", k.class_id, k.threshold,
                    r + 1, k.points[r].recall, k.points[r].precision);
      os << buf;
    }
  }
}

}  // namespace pdtr
