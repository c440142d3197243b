#pragma once

#include <utility>
#include <vector>

#include "wtal/model.hpp"

namespace wtal {

enum class LossKind { bce, bbce, softmax_mil };
enum class MetricKind { none, contrastive, triplet };
enum class DistanceKind { ours, cosine, euclidean, custom };
enum class TailRule { merge, drop };

struct LossOptions {
  LossKind loss = LossKind::bbce;
  MetricKind metric = MetricKind::triplet;
  DistanceKind distance = DistanceKind::ours;
  double lambda = 1.0;
  double alpha = 3.0;
  int block_size = 60;  // <= 0 disables block processing (one whole-video block)
  int k_max = 10;
  TailRule tail = TailRule::merge;
};

// Consecutive, disjoint segment ranges covering the video (tail segments are
// merged into the last block by default, or dropped).
struct BlockPartition {
  std::vector<std::pair<int, int>> ranges;  // inclusive [start, end]
  int block_size = 0;
  int k = 0;  // effective k, never larger than the shortest block
};

BlockPartition partition_blocks(int n, int block_size, int k_max,
                                TailRule tail = TailRule::merge);

// Indices of the k largest scores, ties broken by lower index first.
std::vector<int> top_k_indices(const Vector& scores, int k);

// sigmoid(mean of the k largest scores).
double block_class_prob(const Vector& block_scores, int k);

// Noisy-OR over blocks, log-domain: 1 - exp(sum log(1 - p)).
double video_class_prob(const Vector& block_probs);

// Balanced binary cross-entropy: positive and negative log terms each
// normalized by their class counts; a term with zero count is dropped.
double bbce_loss(const Vector& video_probs, const std::vector<int>& positive_classes);

// Plain binary cross-entropy, mean over classes.
double bce_loss(const Vector& video_probs, const std::vector<int>& positive_classes);

// Softmax attention over one class's segment scores.
Vector attention_weights(const Vector& class_scores);

struct AggregatedFeatures {
  Vector fg;       // attention-weighted sum
  Vector bg;       // complement-weighted sum, weights (1-pi)/(n-1)
  Vector fg_unit;  // L2-normalized
  Vector bg_unit;
  double fg_norm = 0.0;
  double bg_norm = 0.0;
};

AggregatedFeatures aggregate_features(const Matrix& embedded, const Vector& attention);

// |<metric_row, u - v>|: the L2 norm of the row-projected difference, equal to
// sqrt((u-v)^T M (u-v)) with M = metric_row metric_row^T.
double class_distance(const Vector& u, const Vector& v, const Vector& metric_row);

// Squared distance under the configured variant for class `class_id`.
double squared_class_distance(const Vector& a, const Vector& b, int class_id,
                              const ModelParams& params, DistanceKind kind);

// Mean squared distances over ordered pairs j != j': positives pair fg
// aggregates with each other, negatives pair fg against bg.
std::pair<double, double> metric_pair_distances(const std::vector<Vector>& fg_units,
                                                const std::vector<Vector>& bg_units,
                                                int class_id, const ModelParams& params,
                                                DistanceKind kind);

// triplet: [d_pos - d_neg + alpha]_+; contrastive: d_pos + [alpha - d_neg]_+.
double metric_loss(double d_pos, double d_neg, double alpha, MetricKind kind);

// One video inside a training batch.
struct VideoBatchItem {
  ForwardCache cache;
  std::vector<int> labels;  // class ids present in the video
};

// Videos of the batch sharing a common class (indices into the batch).
struct ClassGroup {
  int class_id = -1;
  std::vector<int> members;
};

struct LossReport {
  double classification = 0.0;  // mean over batch videos
  double metric = 0.0;          // mean over contributing groups
  double total = 0.0;           // classification + lambda * metric
  Gradients grads;
};

// Full training objective with analytic gradients for every parameter block.
// fopts must match the options the caches were produced with. With
// compute_grads = false only the loss values are produced (grads left zero);
// the loss computation itself is shared between both modes.
LossReport total_loss_and_grads(const std::vector<VideoBatchItem>& batch,
                                const std::vector<ClassGroup>& groups,
                                const ModelParams& params, const ForwardOptions& fopts,
                                const LossOptions& lopts, bool compute_grads = true);

// Per-class video probabilities (block k-max pooling + noisy-OR) from clipped
// activations; used at detection time for the video-level score.
Vector video_class_probs(const Matrix& activations, const LossOptions& lopts);

}  // namespace wtal
