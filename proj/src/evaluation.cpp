#include "wtal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace wtal {

double temporal_iou(double a_start, double a_end, double b_start, double b_end) {
  if (a_end < a_start || b_end < b_start) {
    throw ConfigError("temporal_iou: invalid interval");
  }
  const double inter =
      std::max(0.0, std::min(a_end, b_end) - std::max(a_start, b_start));
  const double uni = (a_end - a_start) + (b_end - b_start) - inter;
  if (uni <= 0.0) {
    // Two identical zero-length intervals at the same point still match.
    return (a_start == b_start && a_end == b_end) ? 1.0 : 0.0;
  }
  return inter / uni;
}

double match_and_ap(std::vector<Detection> preds, const std::vector<GroundTruthSegment>& gts,
                    double iou_threshold) {
  if (!(iou_threshold > 0.0) || iou_threshold > 1.0) {
    throw ConfigError("match_and_ap: IoU threshold must lie in (0, 1]");
  }
  const std::size_t num_gt = gts.size();
  if (num_gt == 0) return std::numeric_limits<double>::quiet_NaN();
  if (preds.empty()) return 0.0;

  std::sort(preds.begin(), preds.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.start_s != b.start_s) return a.start_s < b.start_s;
    return a.video_id < b.video_id;
  });

  std::map<std::string, std::vector<std::size_t>> gt_by_video;
  for (std::size_t g = 0; g < num_gt; ++g) gt_by_video[gts[g].video_id].push_back(g);
  std::vector<char> gt_matched(num_gt, 0);

  std::vector<char> is_tp(preds.size(), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto it = gt_by_video.find(preds[i].video_id);
    if (it == gt_by_video.end()) continue;
    double best_iou = 0.0;
    std::size_t best_gt = num_gt;
    for (std::size_t g : it->second) {
      if (gt_matched[g]) continue;
      const double iou = temporal_iou(preds[i].start_s, preds[i].end_s, gts[g].start_s,
                                      gts[g].end_s);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = g;
      }
    }
    if (best_gt < num_gt && best_iou >= iou_threshold) {
      gt_matched[best_gt] = 1;
      is_tp[i] = 1;
    }
  }

  // All-point interpolated AP: sum precision-envelope heights over the recall
  // steps at true positives.
  std::vector<double> precision(preds.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    tp += is_tp[i];
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  double envelope = 0.0;
  double ap = 0.0;
  for (std::size_t i = preds.size(); i-- > 0;) {
    envelope = std::max(envelope, precision[i]);
    if (is_tp[i]) ap += envelope / static_cast<double>(num_gt);
  }
  return ap;
}

namespace {

void check_vocabulary(const std::vector<Detection>& detections,
                      const std::vector<GroundTruthSegment>& ground_truth,
                      const std::vector<std::string>& vocabulary) {
  const std::set<std::string> vocab(vocabulary.begin(), vocabulary.end());
  std::set<std::string> offenders;
  for (const auto& d : detections) {
    if (!vocab.count(d.class_name)) offenders.insert(d.class_name);
  }
  for (const auto& g : ground_truth) {
    if (!vocab.count(g.class_name)) offenders.insert(g.class_name);
  }
  if (!offenders.empty()) {
    std::string msg = "unknown class names:";
    for (const auto& name : offenders) msg += " " + name;
    throw ConfigError(msg);
  }
}

}  // namespace

EvalReport evaluate(const std::vector<Detection>& detections,
                    const std::vector<GroundTruthSegment>& ground_truth,
                    const std::vector<double>& thresholds,
                    const std::vector<std::string>* vocabulary) {
  if (thresholds.empty()) throw ConfigError("evaluate: no IoU thresholds");
  if (vocabulary != nullptr) check_vocabulary(detections, ground_truth, *vocabulary);

  EvalReport report;
  report.thresholds = thresholds;

  std::map<std::string, std::vector<GroundTruthSegment>> gt_by_class;
  for (const auto& g : ground_truth) gt_by_class[g.class_name].push_back(g);
  std::map<std::string, std::vector<Detection>> det_by_class;
  for (const auto& d : detections) det_by_class[d.class_name].push_back(d);

  for (const auto& [name, _] : gt_by_class) report.classes.push_back(name);
  const int num_classes = static_cast<int>(report.classes.size());
  const int num_thresholds = static_cast<int>(thresholds.size());
  report.ap = Matrix::Zero(num_classes, num_thresholds);
  report.map_per_threshold = Vector::Zero(num_thresholds);

  static const std::vector<Detection> kNoDetections;
  for (int c = 0; c < num_classes; ++c) {
    const auto& name = report.classes[static_cast<std::size_t>(c)];
    const auto det_it = det_by_class.find(name);
    const auto& preds = det_it == det_by_class.end() ? kNoDetections : det_it->second;
    for (int t = 0; t < num_thresholds; ++t) {
      report.ap(c, t) =
          match_and_ap(preds, gt_by_class.at(name), thresholds[static_cast<std::size_t>(t)]);
    }
  }
  if (num_classes > 0) {
    report.map_per_threshold = report.ap.colwise().mean().transpose();
    report.average_map = report.map_per_threshold.mean();
  }
  return report;
}

std::string EvalReport::table() const {
  std::ostringstream out;
  std::size_t width = 8;
  for (const auto& name : classes) width = std::max(width, name.size() + 2);
  char buf[64];

  out << std::string(width, ' ');
  for (double t : thresholds) {
    std::snprintf(buf, sizeof(buf), "IoU=%.2f", t);
    out << ' ' << buf;
  }
  out << '\n';
  for (std::size_t c = 0; c < classes.size(); ++c) {
    out << classes[c] << std::string(width - classes[c].size(), ' ');
    for (Eigen::Index t = 0; t < ap.cols(); ++t) {
      std::snprintf(buf, sizeof(buf), "%8.4f", ap(static_cast<Eigen::Index>(c), t));
      out << ' ' << buf;
    }
    out << '\n';
  }
  out << "mAP" << std::string(width - 3, ' ');
  for (Eigen::Index t = 0; t < map_per_threshold.size(); ++t) {
    std::snprintf(buf, sizeof(buf), "%8.4f", map_per_threshold(t));
    out << ' ' << buf;
  }
  out << '\n';
  std::snprintf(buf, sizeof(buf), "average mAP %.4f\n", average_map);
  out << buf;
  return out.str();
}

std::string EvalReport::machine() const {
  std::ostringstream out;
  char buf[128];
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      std::snprintf(buf, sizeof(buf), "ap\t%s\t%.2f\t%.9g\n", classes[c].c_str(),
                    thresholds[t], ap(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)));
      out << buf;
    }
  }
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    std::snprintf(buf, sizeof(buf), "map\t%.2f\t%.9g\n", thresholds[t],
                  map_per_threshold(static_cast<Eigen::Index>(t)));
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "average_map\t%.9g\n", average_map);
  out << buf;
  return out.str();
}

}  // namespace wtal
