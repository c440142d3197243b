#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wtal/data_io.hpp"
#include "wtal/losses.hpp"

namespace wtal {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  double lambda = 1.0;
  double alpha = 3.0;
  double kappa = 4.0;  // <= 0 on the CLI maps to no clipping (infinity)
  int block_size = 60;
  int k_max = 10;
  double dropout = 0.5;

  int batch_classes = 4;
  int batch_per_class = 5;
  int max_segments = 300;
  int epochs = 200;
  int steps_per_epoch = 0;  // 0: ceil(num videos / batch size)
  std::uint64_t seed = 1;

  LossKind loss = LossKind::bbce;
  MetricKind metric = MetricKind::triplet;
  DistanceKind distance = DistanceKind::ours;
  TailRule tail = TailRule::merge;
  ClassifierInput classifier_input = ClassifierInput::embedded;
  int metric_rank = 4;  // rank of the factored custom metric

  LossOptions loss_options() const;
  ForwardOptions forward_options(bool training) const;
  void validate() const;
};

struct AdamState {
  Gradients first_moment;
  Gradients second_moment;
  long step = 0;
};

AdamState make_adam_state(const ModelParams& params);

// Bias-corrected Adam update; throws NumericError on non-finite gradients.
void adam_step(ModelParams& params, const Gradients& grads, AdamState& state,
               const TrainConfig& cfg);

// Uniform random subsample of at most max_segments rows, kept in temporal
// order; identity when the video is short enough.
FeatureSequence sample_segments(const FeatureSequence& seq, int max_segments, Rng& rng);

// A sampled batch: video indices into the dataset plus class groups keyed by
// the drawn classes (member indices refer to positions in `videos`).
struct BatchPlan {
  std::vector<int> videos;
  std::vector<ClassGroup> groups;
};

// Tracks which videos have not yet appeared this epoch so sampling prefers
// unseen ones while the dataset size allows.
class EpochPool {
 public:
  explicit EpochPool(int num_videos);
  void reset();
  bool unused(int video) const { return !used_[static_cast<std::size_t>(video)]; }
  void mark(int video) { used_[static_cast<std::size_t>(video)] = true; }

 private:
  std::vector<bool> used_;
};

BatchPlan sample_batch(const Dataset& dataset, const TrainConfig& cfg, Rng& rng,
                       EpochPool& pool);

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double classification = 0.0;
  double metric = 0.0;
  double total = 0.0;
};

struct TrainResult {
  ModelParams params;
  double kappa = 4.0;
  std::vector<StepRecord> trace;
};

using StepCallback = std::function<void(const StepRecord&)>;

TrainResult train(const Dataset& dataset, const TrainConfig& cfg,
                  const StepCallback& on_step = nullptr);

// One line per step: step, epoch, bbce, metric, total (tab-separated).
void write_loss_log(const std::vector<StepRecord>& trace, const std::string& path);

}  // namespace wtal
