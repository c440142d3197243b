#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wtal/model.hpp"

namespace wtal {

struct Detection {
  std::string video_id;
  std::string class_name;
  double start_s = 0.0;
  double end_s = 0.0;
  double confidence = 0.0;
};

// Elementwise sigmoid of the clipped activations: per-segment class scores.
Matrix segment_probs(const ForwardCache& cache);

// Maximal runs of true entries, as inclusive (start, end) index pairs.
std::vector<std::pair<int, int>> connected_components(const std::vector<std::uint8_t>& mask);

struct LocalizeOptions {
  double seg_threshold = 0.5;
  double gamma = 0.7;       // weight of the video-level score in the confidence
  double class_gate = -1.0; // suppress classes with video prob below this; < 0 disables
};

// Thresholds each class's segment scores, extracts connected components, and
// emits one detection per component with confidence
// max(component scores) + gamma * video_prob.
std::vector<Detection> localize(const std::string& video_id, const Matrix& seg_probs,
                                const Vector& video_probs,
                                const std::vector<std::string>& class_names, double fps,
                                int frames_per_segment, const LocalizeOptions& opts);

// Detection file: video_id, class_name, start_s, end_s, confidence per line,
// tab-separated, seconds with 3 decimals.
void write_detections(const std::vector<Detection>& detections, const std::string& path);
std::vector<Detection> read_detections(const std::string& path);

}  // namespace wtal
