#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wtal/numeric.hpp"

namespace wtal {

// One video's precomputed per-segment features plus timing metadata.
// Row i of `features` is the descriptor of segment i.
struct FeatureSequence {
  std::string video_id;
  double fps = 25.0;
  int frames_per_segment = 16;
  Matrix features;  // n x d

  int num_segments() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
  double segment_seconds() const { return frames_per_segment / fps; }
};

struct ManifestEntry {
  std::string video_id;
  std::string path;  // relative to the manifest file
  std::vector<std::string> labels;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> vocabulary;  // sorted union of entry labels
  std::string split;
};

struct GroundTruthSegment {
  std::string video_id;
  std::string class_name;
  double start_s = 0.0;
  double end_s = 0.0;
};

// Fully loaded dataset: features plus per-video label ids into the vocabulary.
struct Dataset {
  DatasetManifest manifest;
  std::vector<FeatureSequence> videos;
  std::vector<std::vector<int>> labels;

  int dim() const { return videos.empty() ? 0 : videos.front().dim(); }
  int num_classes() const { return static_cast<int>(manifest.vocabulary.size()); }
};

// Binary feature file: "WTALFEAT" magic, u32 version, u32 n, u32 d, f64 fps,
// u32 frames_per_segment, then n*d little-endian f32 values, row-major.
void write_features(const FeatureSequence& seq, const std::string& path);
FeatureSequence read_features(const std::string& path);

// Plain-text import: one whitespace-separated row of d values per segment.
FeatureSequence read_features_text(const std::string& path, const std::string& video_id,
                                   double fps, int frames_per_segment);

// Manifest: one video per line, tab-separated:
//   video_id <TAB> relative/path <TAB> comma,separated,classes
void write_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

// Ground truth: video_id <TAB> class_name <TAB> start_s <TAB> end_s per line.
void write_ground_truth(const std::vector<GroundTruthSegment>& gts, const std::string& path);
std::vector<GroundTruthSegment> read_ground_truth(const std::string& path);

Dataset load_dataset(const std::string& manifest_path);

// Synthetic dataset with planted activity intervals. Background segments are
// N(0, noise_std^2 I); segments inside an instance of class c are
// N(mu_c, noise_std^2 I) with ||mu_c|| = separation and the mu_c mutually
// orthogonal (requires num_classes <= dim).
struct SynthConfig {
  int num_classes = 5;
  int dim = 32;
  int videos_per_class = 5;
  int segments_per_video = 120;
  int mean_activity_len = 12;  // segments
  int min_instances = 1;
  int max_instances = 3;
  double second_class_prob = 0.25;  // chance a video carries a second class
  double separation = 3.0;
  double noise_std = 0.5;
  // Per-video constant offset (scene/context bias) added to every segment.
  // Nonzero values give video-level classification a shortcut that does not
  // generalize, the failure mode the metric loss counteracts.
  double scene_std = 0.0;
  double fps = 25.0;
  int frames_per_segment = 16;
  std::string id_prefix = "synth";
  std::uint64_t seed = 1;
};

struct SynthDataset {
  std::vector<FeatureSequence> videos;
  std::vector<std::vector<int>> labels;  // class ids, per video
  std::vector<GroundTruthSegment> ground_truth;
  std::vector<std::string> vocabulary;
};

SynthDataset generate_synthetic(const SynthConfig& cfg);

// Disjoint train/test pair: video ids are prefixed by split, the test split
// draws from an independent stream derived from cfg.seed.
struct SynthSplits {
  SynthDataset train;
  SynthDataset test;
};
SynthSplits generate_synthetic_splits(const SynthConfig& cfg, int test_videos_per_class = 0);

// Writes features under dir/features/, plus <split>_manifest.tsv and
// <split>_gt.tsv in dir. Returns the manifest path.
std::string write_synth_dataset(const SynthDataset& data, const std::string& dir,
                                const std::string& split);

Dataset to_dataset(const SynthDataset& data, const std::string& split);

}  // namespace wtal
