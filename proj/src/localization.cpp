#include "wtal/localization.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace wtal {

Matrix segment_probs(const ForwardCache& cache) {
  return cache.activations.unaryExpr([](double s) { return sigmoid(s); });
}

std::vector<std::pair<int, int>> connected_components(const std::vector<std::uint8_t>& mask) {
  std::vector<std::pair<int, int>> runs;
  const int n = static_cast<int>(mask.size());
  int start = -1;
  for (int i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      if (start < 0) start = i;
    } else if (start >= 0) {
      runs.emplace_back(start, i - 1);
      start = -1;
    }
  }
  if (start >= 0) runs.emplace_back(start, n - 1);
  return runs;
}

std::vector<Detection> localize(const std::string& video_id, const Matrix& seg_probs,
                                const Vector& video_probs,
                                const std::vector<std::string>& class_names, double fps,
                                int frames_per_segment, const LocalizeOptions& opts) {
  if (!(fps > 0) || frames_per_segment < 1) {
    throw ConfigError("localize: timing metadata must be positive");
  }
  const int n = static_cast<int>(seg_probs.rows());
  const int num_classes = static_cast<int>(seg_probs.cols());
  if (video_probs.size() != num_classes ||
      static_cast<int>(class_names.size()) != num_classes) {
    throw ShapeError("localize: class count mismatch");
  }

  const double seg_seconds = frames_per_segment / fps;
  std::vector<Detection> detections;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
  for (int c = 0; c < num_classes; ++c) {
    if (opts.class_gate >= 0 && video_probs[c] < opts.class_gate) continue;
    for (int i = 0; i < n; ++i) {
      mask[static_cast<std::size_t>(i)] = seg_probs(i, c) >= opts.seg_threshold ? 1 : 0;
    }
    for (const auto& [start, end] : connected_components(mask)) {
      double peak = seg_probs(start, c);
      for (int i = start + 1; i <= end; ++i) peak = std::max(peak, seg_probs(i, c));
      Detection det;
      det.video_id = video_id;
      det.class_name = class_names[static_cast<std::size_t>(c)];
      det.start_s = start * seg_seconds;
      det.end_s = (end + 1) * seg_seconds;
      det.confidence = peak + opts.gamma * video_probs[c];
      detections.push_back(std::move(det));
    }
  }
  return detections;
}

void write_detections(const std::vector<Detection>& detections, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  char buf[96];
  for (const auto& d : detections) {
    std::snprintf(buf, sizeof(buf), "%.3f\t%.3f\t%.6f", d.start_s, d.end_s, d.confidence);
    out << d.video_id << '\t' << d.class_name << '\t' << buf << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

std::vector<Detection> read_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Detection> detections;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    Detection d;
    std::string start_s, end_s, conf;
    if (!std::getline(ss, d.video_id, '\t') || !std::getline(ss, d.class_name, '\t') ||
        !std::getline(ss, start_s, '\t') || !std::getline(ss, end_s, '\t') ||
        !std::getline(ss, conf)) {
      throw IoError(path + ":" + std::to_string(lineno) +
                    ": expected 5 tab-separated fields");
    }
    try {
      d.start_s = std::stod(start_s);
      d.end_s = std::stod(end_s);
      d.confidence = std::stod(conf);
    } catch (const std::exception&) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed numeric field");
    }
    if (d.start_s < 0 || d.end_s < d.start_s) {
      throw IoError(path + ":" + std::to_string(lineno) + ": invalid interval");
    }
    detections.push_back(std::move(d));
  }
  return detections;
}

}  // namespace wtal
