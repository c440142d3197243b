#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "wtal/evaluation.hpp"

using namespace wtal;

namespace {

// Independent AP oracle: identical ranking and greedy matching semantics, but
// AP evaluated from the full PR curve as the mean over recall levels j/|gt| of
// the best precision at recall >= that level.
double ap_oracle(std::vector<Detection> preds, const std::vector<GroundTruthSegment>& gts,
                 double thr) {
  if (gts.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (preds.empty()) return 0.0;
  std::sort(preds.begin(), preds.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.start_s != b.start_s) return a.start_s < b.start_s;
    return a.video_id < b.video_id;
  });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> precision, recall;
  int tp = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double best = 0.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].video_id != preds[i].video_id) continue;
      const double iou =
          temporal_iou(preds[i].start_s, preds[i].end_s, gts[g].start_s, gts[g].end_s);
      if (iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best >= thr) {
      used[best_g] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  double ap = 0.0;
  for (std::size_t j = 1; j <= gts.size(); ++j) {
    const double level = static_cast<double>(j) / static_cast<double>(gts.size());
    double best = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      if (recall[i] >= level - 1e-12) best = std::max(best, precision[i]);
    }
    ap += best / static_cast<double>(gts.size());
  }
  return ap;
}

Detection det(const std::string& vid, double start, double end, double q,
              const std::string& cls = "c") {
  return {vid, cls, start, end, q};
}

GroundTruthSegment gt(const std::string& vid, double start, double end,
                      const std::string& cls = "c") {
  return {vid, cls, start, end};
}

}  // namespace

TEST_SUITE_BEGIN("evaluation");

TEST_CASE("temporal IoU examples") {
  CHECK(temporal_iou(0, 10, 5, 15) == doctest::Approx(5.0 / 15.0).epsilon(1e-12));
  CHECK(temporal_iou(2, 7, 2, 7) == 1.0);
  CHECK(temporal_iou(0, 1, 2, 3) == 0.0);
  CHECK(temporal_iou(0, 1, 1, 2) == 0.0);  // touching intervals share no area
  CHECK_THROWS_AS(temporal_iou(3, 1, 0, 2), ConfigError);
}

TEST_CASE("AP base cases") {
  SUBCASE("single exact hit") {
    CHECK(match_and_ap({det("v", 1, 2, 0.9)}, {gt("v", 1, 2)}, 0.5) == 1.0);
  }
  SUBCASE("higher-ranked false positive halves the AP") {
    const std::vector<Detection> preds = {det("v", 10, 11, 0.9), det("v", 1, 2, 0.5)};
    CHECK(match_and_ap(preds, {gt("v", 1, 2)}, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("empty predictions give zero") {
    CHECK(match_and_ap({}, {gt("v", 1, 2)}, 0.5) == 0.0);
  }
  SUBCASE("empty ground truth is undefined") {
    CHECK(std::isnan(match_and_ap({det("v", 1, 2, 0.9)}, {}, 0.5)));
  }
  SUBCASE("matches are per-video") {
    CHECK(match_and_ap({det("other", 1, 2, 0.9)}, {gt("v", 1, 2)}, 0.5) == 0.0);
  }
  SUBCASE("threshold bounds") {
    CHECK_THROWS_AS(match_and_ap({}, {gt("v", 1, 2)}, 0.0), ConfigError);
    CHECK_THROWS_AS(match_and_ap({}, {gt("v", 1, 2)}, 1.5), ConfigError);
  }
}

TEST_CASE("AP equals the brute-force PR oracle on random small instances") {
  Rng rng(61);
  for (int trial = 0; trial < 3000; ++trial) {
    const int n_gt = 1 + static_cast<int>(rng.uniform_int(3));
    const int n_pred = static_cast<int>(rng.uniform_int(6));
    std::vector<GroundTruthSegment> gts;
    for (int g = 0; g < n_gt; ++g) {
      const double start = rng.uniform_int(6);
      const double len = 1 + rng.uniform_int(3);
      gts.push_back(gt(rng.uniform() < 0.7 ? "v1" : "v2", start, start + len));
    }
    std::vector<Detection> preds;
    for (int p = 0; p < n_pred; ++p) {
      const double start = rng.uniform_int(8);
      const double len = 1 + rng.uniform_int(3);
      // quantized confidences force ties through the deterministic tie-break
      const double q = rng.uniform_int(4) * 0.25;
      preds.push_back(det(rng.uniform() < 0.7 ? "v1" : "v2", start, start + len, q));
    }
    for (double thr : {0.1, 0.3, 0.5, 0.7}) {
      const double got = match_and_ap(preds, gts, thr);
      const double want = ap_oracle(preds, gts, thr);
      CHECK(std::abs(got - want) < 1e-12);
    }
  }
}

TEST_CASE("AP is monotone non-increasing in the IoU threshold") {
  Rng rng(62);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<GroundTruthSegment> gts;
    std::vector<Detection> preds;
    for (int g = 0; g < 3; ++g) {
      const double start = rng.uniform(0, 20);
      gts.push_back(gt("v", start, start + rng.uniform(1, 5)));
    }
    for (int p = 0; p < 5; ++p) {
      const double start = rng.uniform(0, 20);
      preds.push_back(det("v", start, start + rng.uniform(1, 5), rng.uniform()));
    }
    double prev = 1.0;
    for (double thr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      const double ap = match_and_ap(preds, gts, thr);
      CHECK(ap <= prev + 1e-12);
      prev = ap;
    }
  }
}

TEST_CASE("duplicating a matched prediction never increases AP") {
  Rng rng(63);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<GroundTruthSegment> gts;
    std::vector<Detection> preds;
    for (int g = 0; g < 2; ++g) {
      const double start = 6.0 * g;
      gts.push_back(gt("v", start, start + 3));
      preds.push_back(det("v", start + rng.uniform(-1, 1), start + 3 + rng.uniform(-1, 1),
                          rng.uniform()));
    }
    const double base = match_and_ap(preds, gts, 0.3);
    auto more = preds;
    more.push_back(preds[0]);
    more.back().confidence = rng.uniform();
    CHECK(match_and_ap(more, gts, 0.3) <= base + 1e-12);
  }
}

TEST_CASE("AP is invariant under strictly monotone confidence transforms") {
  Rng rng(64);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<GroundTruthSegment> gts;
    std::vector<Detection> preds;
    for (int g = 0; g < 3; ++g) {
      const double start = rng.uniform(0, 20);
      gts.push_back(gt("v", start, start + rng.uniform(1, 4)));
    }
    for (int p = 0; p < 6; ++p) {
      const double start = rng.uniform(0, 20);
      preds.push_back(det("v", start, start + rng.uniform(1, 4), rng.uniform(-3, 3)));
    }
    const double base = match_and_ap(preds, gts, 0.3);
    auto scaled = preds, expd = preds, atand = preds;
    const double a = rng.uniform(0.1, 5.0), b = rng.uniform(-10, 10);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      scaled[i].confidence = a * preds[i].confidence + b;
      expd[i].confidence = std::exp(preds[i].confidence);
      atand[i].confidence = std::atan(preds[i].confidence);
    }
    CHECK(match_and_ap(scaled, gts, 0.3) == doctest::Approx(base).epsilon(1e-12));
    CHECK(match_and_ap(expd, gts, 0.3) == doctest::Approx(base).epsilon(1e-12));
    CHECK(match_and_ap(atand, gts, 0.3) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("evaluate end to end") {
  const std::vector<GroundTruthSegment> gts = {gt("v1", 0, 2, "a"), gt("v1", 5, 8, "a"),
                                               gt("v2", 1, 3, "b")};
  SUBCASE("verbatim ground truth scores a perfect map") {
    std::vector<Detection> preds;
    for (const auto& g : gts) preds.push_back({g.video_id, g.class_name, g.start_s, g.end_s, 1.0});
    const auto report = evaluate(preds, gts, {0.1, 0.3, 0.5, 0.7});
    CHECK(report.average_map == doctest::Approx(1.0).epsilon(1e-12));
    for (Eigen::Index t = 0; t < report.map_per_threshold.size(); ++t) {
      CHECK(report.map_per_threshold[t] == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("no detections scores zero") {
    const auto report = evaluate({}, gts, {0.5});
    CHECK(report.average_map == 0.0);
  }
  SUBCASE("mAP is the unweighted mean of the per-class column") {
    const std::vector<Detection> preds = {det("v1", 0, 2, 0.9, "a"),
                                          det("v2", 10, 12, 0.8, "b")};
    const auto report = evaluate(preds, gts, {0.5});
    REQUIRE(report.classes.size() == 2);
    CHECK(report.map_per_threshold[0] ==
          doctest::Approx(report.ap.col(0).mean()).epsilon(1e-12));
    // class a has 2 gts, one matched at rank 1 -> AP 0.5; class b missed
    CHECK(report.ap(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(report.ap(1, 0) == 0.0);
  }
  SUBCASE("classes without ground truth are excluded, not counted as zero") {
    const std::vector<Detection> preds = {det("v1", 0, 2, 0.9, "a"),
                                          det("v9", 0, 2, 0.8, "ghost")};
    const auto report = evaluate(preds, gts, {0.5});
    CHECK(std::find(report.classes.begin(), report.classes.end(), "ghost") ==
          report.classes.end());
  }
  SUBCASE("vocabulary violations list the offenders") {
    const std::vector<std::string> vocab = {"a", "b"};
    const std::vector<Detection> preds = {det("v1", 0, 2, 0.9, "zebra")};
    try {
      evaluate(preds, gts, {0.5}, &vocab);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("zebra") != std::string::npos);
    }
  }
  SUBCASE("empty threshold list is rejected") {
    CHECK_THROWS_AS(evaluate({}, gts, {}), ConfigError);
  }
}

TEST_SUITE_END();
