#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "doctest.h"
#include "pdtr/eval.hpp"
#include "pdtr/tensor.hpp"

using namespace pdtr;

namespace {

// ---------------------------------------------------------------------------
// Independent naive evaluator, written from scratch against the documented
// contract. Used as the oracle for the report() implementation.
namespace naive {

double boxes_iou(const Corners& a, const Corners& b) {
  const double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  if (ix2 <= ix1 || iy2 <= iy1) return 0.0;
  const double inter = (ix2 - ix1) * (iy2 - iy1);
  const double ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return inter / ua;
}

double box_area(const Corners& c) { return (c.x2 - c.x1) * (c.y2 - c.y1); }

struct Entry {
  double conf;
  int img;
  int orig;
  char tp;
};

// flags for one class at one threshold, with a gt-area window [lo, hi)
std::pair<std::vector<Entry>, int> flags_for(const std::vector<Detection>& dets,
                                             const std::vector<GtBox>& gts, int cls, double t,
                                             double lo, double hi) {
  std::vector<Entry> entries;
  int num_gt = 0;
  std::map<int, std::vector<int>> det_idx, gt_idx;
  for (size_t i = 0; i < dets.size(); ++i)
    if (dets[i].class_id == cls) det_idx[dets[i].image_id].push_back(static_cast<int>(i));
  for (size_t i = 0; i < gts.size(); ++i)
    if (gts[i].class_id == cls) {
      gt_idx[gts[i].image_id].push_back(static_cast<int>(i));
      const double a = box_area(gts[i].box);
      if (a >= lo && a < hi) ++num_gt;
    }
  for (auto& [img, dl] : det_idx) {
    std::sort(dl.begin(), dl.end(), [&](int x, int y) {
      if (dets[static_cast<size_t>(x)].confidence != dets[static_cast<size_t>(y)].confidence)
        return dets[static_cast<size_t>(x)].confidence > dets[static_cast<size_t>(y)].confidence;
      return x < y;
    });
    std::vector<char> used(gt_idx[img].size(), 0);
    for (int di : dl) {
      double best = 0.0;
      int best_g = -1;
      const auto& gl = gt_idx[img];
      for (size_t gi = 0; gi < gl.size(); ++gi) {
        if (used[gi]) continue;
        const double v = boxes_iou(dets[static_cast<size_t>(di)].box, gts[static_cast<size_t>(gl[gi])].box);
        if (v >= t && v > best) {
          best = v;
          best_g = static_cast<int>(gi);
        }
      }
      if (best_g >= 0) {
        used[static_cast<size_t>(best_g)] = 1;
        const double a = box_area(gts[static_cast<size_t>(gt_idx[img][static_cast<size_t>(best_g)])].box);
        if (a >= lo && a < hi)
          entries.push_back({dets[static_cast<size_t>(di)].confidence, img, di, 1});
        // matched to out-of-window gt: dropped entirely
      } else {
        entries.push_back({dets[static_cast<size_t>(di)].confidence, img, di, 0});
      }
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.img != b.img) return a.img < b.img;
    return a.orig < b.orig;
  });
  return {entries, num_gt};
}

// AP by midpoint evaluation of the interpolated-precision step function.
double ap_from_entries(const std::vector<Entry>& entries, int num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> rec, prec;
  int tp = 0, fp = 0;
  for (const Entry& e : entries) {
    e.tp ? ++tp : ++fp;
    rec.push_back(static_cast<double>(tp) / num_gt);
    prec.push_back(static_cast<double>(tp) / (tp + fp));
  }
  std::vector<double> levels = rec;
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  auto pmax_at = [&](double r) {
    double best = 0.0;
    for (size_t i = 0; i < rec.size(); ++i)
      if (rec[i] >= r) best = std::max(best, prec[i]);
    return best;
  };
  double area = 0.0, prev = 0.0;
  for (double r : levels) {
    if (r > prev) area += (r - prev) * pmax_at((prev + r) / 2.0 + (r - prev) / 4.0);
    prev = r;
  }
  return area;
}

struct Summary {
  std::vector<std::vector<double>> ap;
  double map, map50, map75, map_s, map_m, mar100;
};

Summary evaluate(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                 const EvalConfig& cfg) {
  const int C = cfg.num_classes;
  const auto& ts = cfg.iou_thresholds;
  Summary s;
  s.ap.assign(static_cast<size_t>(C), std::vector<double>(ts.size(), -1.0));
  const double huge = 1e30;

  double map_sum = 0, m50 = 0, m75 = 0;
  int inc = 0;
  for (int c = 0; c < C; ++c) {
    int ngt = 0, ndet = 0;
    for (const GtBox& g : gts) ngt += g.class_id == c;
    for (const Detection& d : dets) ndet += d.class_id == c;
    if (ngt == 0 && ndet == 0) continue;
    double csum = 0;
    for (size_t ti = 0; ti < ts.size(); ++ti) {
      auto [entries, num_gt] = flags_for(dets, gts, c, ts[ti], 0.0, huge);
      const double ap = ap_from_entries(entries, num_gt);
      s.ap[static_cast<size_t>(c)][ti] = ap;
      csum += ap;
      if (std::fabs(ts[ti] - 0.5) < 1e-9) m50 += ap;
      if (std::fabs(ts[ti] - 0.75) < 1e-9) m75 += ap;
    }
    map_sum += csum / static_cast<double>(ts.size());
    ++inc;
  }
  s.map = inc ? map_sum / inc : 0;
  s.map50 = inc ? m50 / inc : 0;
  s.map75 = inc ? m75 / inc : 0;

  // buckets: class counted when it has an in-window gt
  auto bucket = [&](double lo, double hi) {
    double sum = 0;
    int cnt = 0;
    for (int c = 0; c < C; ++c) {
      int bg = 0;
      for (const GtBox& g : gts)
        if (g.class_id == c && box_area(g.box) >= lo && box_area(g.box) < hi) ++bg;
      if (bg == 0) continue;
      double csum = 0;
      for (double t : ts) {
        auto [entries, num_gt] = flags_for(dets, gts, c, t, lo, hi);
        csum += ap_from_entries(entries, num_gt);
      }
      sum += csum / static_cast<double>(ts.size());
      ++cnt;
    }
    return cnt ? sum / cnt : 0.0;
  };
  s.map_s = bucket(0.0, cfg.small_area);
  s.map_m = bucket(cfg.small_area, cfg.medium_area);

  // AR with the per-image cap across classes
  std::map<int, std::vector<int>> by_img;
  for (size_t i = 0; i < dets.size(); ++i) by_img[dets[i].image_id].push_back(static_cast<int>(i));
  std::vector<char> kept(dets.size(), 0);
  for (auto& [img, dl] : by_img) {
    std::sort(dl.begin(), dl.end(), [&](int x, int y) {
      if (dets[static_cast<size_t>(x)].confidence != dets[static_cast<size_t>(y)].confidence)
        return dets[static_cast<size_t>(x)].confidence > dets[static_cast<size_t>(y)].confidence;
      return x < y;
    });
    for (size_t i = 0; i < dl.size() && i < static_cast<size_t>(cfg.max_detections); ++i)
      kept[static_cast<size_t>(dl[i])] = 1;
  }
  std::vector<Detection> capped;
  for (size_t i = 0; i < dets.size(); ++i)
    if (kept[i]) capped.push_back(dets[i]);

  double ar_sum = 0;
  int ar_cnt = 0;
  for (int c = 0; c < C; ++c) {
    int ngt = 0;
    for (const GtBox& g : gts) ngt += g.class_id == c;
    if (ngt == 0) continue;
    double acc = 0;
    for (double t : ts) {
      auto [entries, num_gt] = flags_for(capped, gts, c, t, 0.0, huge);
      int tp = 0;
      for (const auto& e : entries) tp += e.tp;
      acc += static_cast<double>(tp) / num_gt;
    }
    ar_sum += acc / static_cast<double>(ts.size());
    ++ar_cnt;
  }
  s.mar100 = ar_cnt ? ar_sum / ar_cnt : 0;
  return s;
}

}  // namespace naive

Corners box_at(double x, double y, double w, double h) { return {x, y, x + w, y + h}; }

// Random multi-image scenario with mixed-size objects and noise detections.
void random_scenario(uint64_t seed, std::vector<Detection>* dets, std::vector<GtBox>* gts) {
  SeededRng rng(seed);
  const int images = 3 + static_cast<int>(rng.uniform_int(3));
  for (int img = 0; img < images; ++img) {
    for (int c = 0; c < 4; ++c) {
      const int n = static_cast<int>(rng.uniform_int(3));
      for (int i = 0; i < n; ++i) {
        double w, h;
        const int size_kind = static_cast<int>(rng.uniform_int(3));
        if (size_kind == 0) {
          w = rng.uniform(6, 24);
          h = rng.uniform(6, 24);
        } else if (size_kind == 1) {
          w = rng.uniform(40, 90);
          h = rng.uniform(40, 90);
        } else {
          w = rng.uniform(100, 120);
          h = rng.uniform(100, 120);
        }
        const double x = rng.uniform(0, 128 - w);
        const double y = rng.uniform(0, 128 - h);
        gts->push_back({img, c, box_at(x, y, w, h)});
        if (rng.uniform() < 0.85) {
          const double jx = rng.uniform(-w * 0.3, w * 0.3);
          const double jy = rng.uniform(-h * 0.3, h * 0.3);
          const double jw = w * rng.uniform(0.7, 1.3);
          const double jh = h * rng.uniform(0.7, 1.3);
          dets->push_back({img, c, box_at(x + jx, y + jy, jw, jh), rng.uniform(0.05, 1.0)});
        }
      }
      // spurious detections
      const int spurious = static_cast<int>(rng.uniform_int(2));
      for (int i = 0; i < spurious; ++i) {
        const double w = rng.uniform(8, 60), h = rng.uniform(8, 60);
        dets->push_back({img, c, box_at(rng.uniform(0, 128 - w), rng.uniform(0, 128 - h), w, h),
                         rng.uniform(0.05, 1.0)});
      }
    }
  }
}

}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("greedy match examples") {
  std::vector<Corners> gt = {box_at(10, 10, 20, 20)};
  MatchFlags m1 = greedy_match({box_at(10, 10, 20, 20)}, gt, 0.5);
  CHECK(m1.tp == std::vector<char>{1});

  // two detections on the same gt: only the first (higher confidence) is TP
  MatchFlags m2 = greedy_match({box_at(10, 10, 20, 20), box_at(11, 11, 20, 20)}, gt, 0.5);
  CHECK(m2.tp == std::vector<char>{1, 0});

  // IoU 0.6 at threshold 0.75 is a FP
  // boxes: [0,0,10,10] vs [0,0,10,6]: inter 60, union 100 -> IoU 0.6
  MatchFlags m3 = greedy_match({box_at(0, 0, 10, 6)}, {box_at(0, 0, 10, 10)}, 0.75);
  CHECK(m3.tp == std::vector<char>{0});
  MatchFlags m4 = greedy_match({box_at(0, 0, 10, 6)}, {box_at(0, 0, 10, 10)}, 0.5);
  CHECK(m4.tp == std::vector<char>{1});
}

TEST_CASE("pr curve examples") {
  auto c1 = pr_curve({1}, 1);
  REQUIRE(c1.size() == 1);
  CHECK(c1[0].recall == 1.0);
  CHECK(c1[0].precision == 1.0);

  auto c2 = pr_curve({1, 0}, 2);
  REQUIRE(c2.size() == 2);
  CHECK(c2[0].recall == 0.5);
  CHECK(c2[0].precision == 1.0);
  CHECK(c2[1].recall == 0.5);
  CHECK(c2[1].precision == 0.5);

  auto c3 = pr_curve({}, 3);
  CHECK(c3.empty());
  CHECK(ap_interpolated(c3) == 0.0);
}

TEST_CASE("interpolated AP examples") {
  CHECK(ap_interpolated({{1.0, 1.0}}) == 1.0);
  CHECK(ap_interpolated({{0.5, 1.0}, {1.0, 0.5}}) == doctest::Approx(0.75).epsilon(1e-15));
  // a later high-precision point lifts earlier recall levels
  CHECK(ap_interpolated({{0.5, 0.2}, {1.0, 0.9}}) == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("AP equals the step-function area oracle on random curves") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    SeededRng rng(seed);
    const int num_gt = 1 + static_cast<int>(rng.uniform_int(6));
    const int n = 1 + static_cast<int>(rng.uniform_int(12));
    std::vector<char> flags;
    int tps = 0;
    for (int i = 0; i < n; ++i) {
      const bool tp = rng.uniform() < 0.5 && tps < num_gt;
      flags.push_back(tp ? 1 : 0);
      tps += tp;
    }
    auto curve = pr_curve(flags, num_gt);
    // oracle: integrate p_interp by evaluating inside each recall interval
    std::vector<double> levels;
    for (auto& p : curve) levels.push_back(p.recall);
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    auto pmax = [&](double r) {
      double best = 0.0;
      for (auto& p : curve)
        if (p.recall >= r) best = std::max(best, p.precision);
      return best;
    };
    double area = 0.0, prev = 0.0;
    for (double r : levels) {
      if (r > prev) area += (r - prev) * pmax((prev + 3 * r) / 4.0);
      prev = r;
    }
    CHECK(ap_interpolated(curve) == doctest::Approx(area).epsilon(1e-12));
  }
}

TEST_CASE("ar_at examples") {
  std::vector<GtBox> gts = {{0, 1, box_at(10, 10, 20, 20)}};
  std::vector<Detection> perfect = {{0, 1, box_at(10, 10, 20, 20), 0.9}};
  EvalConfig cfg = EvalConfig::defaults();
  CHECK(ar_at(perfect, gts, cfg.iou_thresholds, 100) == 1.0);

  // IoU 0.6 detection vs thresholds {0.5, 0.75}
  std::vector<Detection> partial = {{0, 1, box_at(0, 0, 10, 6), 0.9}};
  std::vector<GtBox> g2 = {{0, 1, box_at(0, 0, 10, 10)}};
  CHECK(ar_at(partial, g2, {0.5, 0.75}, 100) == 0.5);

  CHECK(ar_at({}, gts, cfg.iou_thresholds, 100) == 0.0);
}

TEST_CASE("report: class averaging follows the mean of class APs") {
  // class 0: one gt, one perfect detection -> AP 1.0 at all thresholds
  // class 1: two gts, one perfect detection -> AP 0.5 at all thresholds
  std::vector<GtBox> gts = {
      {0, 0, box_at(10, 10, 20, 20)},
      {0, 1, box_at(50, 50, 30, 30)},
      {1, 1, box_at(20, 20, 30, 30)},
  };
  std::vector<Detection> dets = {
      {0, 0, box_at(10, 10, 20, 20), 0.9},
      {0, 1, box_at(50, 50, 30, 30), 0.8},
  };
  EvalConfig cfg = EvalConfig::defaults();
  EvalReport rep = report(dets, gts, cfg);
  CHECK(rep.map == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(rep.map50 == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(rep.map75 == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("report: perfect detections give all-ones metrics") {
  std::vector<GtBox> gts = {
      {0, 0, box_at(10, 10, 20, 20)},   // small (400 < 1024)
      {0, 1, box_at(40, 40, 60, 60)},   // medium
      {1, 0, box_at(5, 5, 25, 25)},     // small? 625 < 1024 yes
      {1, 1, box_at(30, 30, 50, 70)},   // medium
  };
  std::vector<Detection> dets;
  double conf = 0.95;
  for (const GtBox& g : gts) {
    dets.push_back({g.image_id, g.class_id, g.box, conf});
    conf -= 0.05;
  }
  EvalReport rep = report(dets, gts, EvalConfig::defaults());
  CHECK(rep.map == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.map50 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.map75 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.map_s == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.map_m == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.mar100 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("report matches the independent naive evaluator on random scenarios") {
  EvalConfig cfg = EvalConfig::defaults();
  for (uint64_t seed = 0; seed < 55; ++seed) {
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
    random_scenario(seed, &dets, &gts);
    EvalReport rep = report(dets, gts, cfg);
    naive::Summary want = naive::evaluate(dets, gts, cfg);
    INFO("scenario seed " << seed);
    CHECK(rep.map == doctest::Approx(want.map).epsilon(1e-9));
    CHECK(rep.map50 == doctest::Approx(want.map50).epsilon(1e-9));
    CHECK(rep.map75 == doctest::Approx(want.map75).epsilon(1e-9));
    CHECK(rep.map_s == doctest::Approx(want.map_s).epsilon(1e-9));
    CHECK(rep.map_m == doctest::Approx(want.map_m).epsilon(1e-9));
    CHECK(rep.mar100 == doctest::Approx(want.mar100).epsilon(1e-9));
    for (size_t c = 0; c < rep.ap.size(); ++c)
      for (size_t t = 0; t < rep.ap[c].size(); ++t) {
        if (rep.ap[c][t] < 0.0) {
          CHECK(want.ap[c][t] < 0.0);
        } else {
          CHECK(rep.ap[c][t] == doctest::Approx(want.ap[c][t]).epsilon(1e-9));
        }
      }
  }
}

TEST_CASE("adding a fresh true positive never decreases AP") {
  EvalConfig cfg = EvalConfig::defaults();
  for (uint64_t seed = 100; seed < 120; ++seed) {
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
    random_scenario(seed, &dets, &gts);
    // plant an extra gt that no detection touches, then a perfect detection
    // for it at top confidence
    gts.push_back({0, 0, box_at(1, 1, 10, 10)});
    EvalReport before = report(dets, gts, cfg);
    dets.push_back({0, 0, box_at(1, 1, 10, 10), 2.0});
    EvalReport after = report(dets, gts, cfg);
    CHECK(after.map >= before.map - 1e-12);
  }
}

TEST_CASE("metrics depend only on confidence ranks") {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
  random_scenario(7, &dets, &gts);
  EvalConfig cfg = EvalConfig::defaults();
  EvalReport r1 = report(dets, gts, cfg);
  for (Detection& d : dets) d.confidence = 0.05 + 0.9 * d.confidence * d.confidence * d.confidence;
  EvalReport r2 = report(dets, gts, cfg);
  CHECK(r1.map == r2.map);
  CHECK(r1.map50 == r2.map50);
  CHECK(r1.mar100 == r2.mar100);
  CHECK(r1.map_s == r2.map_s);
  CHECK(r1.map_m == r2.map_m);
}

TEST_CASE("zero-gt classes follow the documented rules") {
  EvalConfig cfg = EvalConfig::defaults();
  // class 0 has a gt+det; class 1 has only a detection; classes 2,3 empty
  std::vector<GtBox> gts = {{0, 0, box_at(10, 10, 20, 20)}};
  std::vector<Detection> dets = {
      {0, 0, box_at(10, 10, 20, 20), 0.9},
      {0, 1, box_at(40, 40, 20, 20), 0.8},
  };
  EvalReport rep = report(dets, gts, cfg);
  CHECK(rep.ap[0][0] == 1.0);
  CHECK(rep.ap[1][0] == 0.0);   // detections but no gt -> AP 0
  CHECK(rep.ap[2][0] == -1.0);  // excluded
  CHECK(rep.map == doctest::Approx(0.5).epsilon(1e-12));  // mean over classes 0,1

  CHECK_THROWS_AS(report({{0, 9, box_at(0, 0, 5, 5), 0.5}}, gts, cfg), DataError);
}

TEST_SUITE_END();
