#pragma once

#include <string>
#include <vector>

#include "wtal/data_io.hpp"
#include "wtal/localization.hpp"

namespace wtal {

// Intersection over union of two time intervals; 0 when disjoint.
double temporal_iou(double a_start, double a_end, double b_start, double b_end);

// All-point interpolated average precision for one class: detections are
// ranked by confidence (ties: earlier start, then video id) and greedily
// matched to the highest-IoU unmatched ground truth in the same video.
double match_and_ap(std::vector<Detection> preds, const std::vector<GroundTruthSegment>& gts,
                    double iou_threshold);

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<std::string> classes;  // classes with at least one ground truth
  Matrix ap;                         // classes x thresholds
  Vector map_per_threshold;
  double average_map = 0.0;

  std::string table() const;    // human-readable
  std::string machine() const;  // tab-separated key/value rows
};

// Per-class AP at each threshold; mAP excludes classes without ground truth.
// When `vocabulary` is non-null, every class name in detections and ground
// truth must appear in it.
EvalReport evaluate(const std::vector<Detection>& detections,
                    const std::vector<GroundTruthSegment>& ground_truth,
                    const std::vector<double>& thresholds,
                    const std::vector<std::string>* vocabulary = nullptr);

}  // namespace wtal
