#pragma once

#include <string>
#include <vector>

#include "wtal/numeric.hpp"

namespace wtal {

// Whether the linear classifier consumes embedded or raw segment features.
enum class ClassifierInput { embedded, raw };

struct ModelParams {
  Matrix embed_w;  // d x d
  Vector embed_b;  // d
  Matrix class_w;  // C x d; row c doubles as the class-c metric direction
  Vector class_b;  // C
  // Factored learnable metrics (rank x d per class), used only by the
  // "custom" distance variant. Empty otherwise; never checkpointed.
  std::vector<Matrix> metric_factor;

  int dim() const { return static_cast<int>(embed_w.rows()); }
  int num_classes() const { return static_cast<int>(class_w.rows()); }
};

// Gradients share the parameter layout exactly.
using Gradients = ModelParams;

Gradients zeros_like(const ModelParams& params);

// Named view over the parameter blocks, in a fixed order. Eigen matrices are
// contiguous, so each block is addressable as a flat array.
struct BlockRef {
  std::string name;
  double* data;
  Eigen::Index size;
};
std::vector<BlockRef> param_blocks(ModelParams& params);

Vector flatten(const ModelParams& params);
void unflatten(const Vector& theta, ModelParams& params);

// Uniform(-a, a) weights with a = 1/sqrt(fan_in), zero biases. metric_rank > 0
// additionally allocates per-class metric factors of that rank.
ModelParams init_params(int dim, int num_classes, Rng& rng, int metric_rank = 0);

struct ForwardOptions {
  double kappa = 4.0;  // clip bound; infinity disables clipping
  double dropout = 0.5;
  bool training = false;
  ClassifierInput classifier_input = ClassifierInput::embedded;
};

// Intermediates retained for backprop.
struct ForwardCache {
  Matrix input;        // n x d raw features
  Matrix pre_embed;    // n x d before ReLU
  Matrix embedded;     // n x d after ReLU (and dropout when training)
  Matrix drop_mask;    // n x d scaled keep mask; empty when dropout inactive
  Matrix pre_clip;     // n x C
  Matrix activations;  // n x C clipped class scores

  int num_segments() const { return static_cast<int>(activations.rows()); }
  int num_classes() const { return static_cast<int>(activations.cols()); }
};

// Embedding (FC + ReLU + inverted dropout) followed by clipped linear class
// activations. rng is consumed only when training with dropout > 0.
ForwardCache forward(const Matrix& features, const ModelParams& params,
                     const ForwardOptions& opts, Rng* rng = nullptr);

// Accumulates parameter gradients for one video given upstream gradients on
// the clipped activations (d_activations, n x C) and, optionally, a direct
// gradient on the embedded features (d_embedded, n x d or empty).
void backward(const ForwardCache& cache, const ModelParams& params,
              const ForwardOptions& opts, const Matrix& d_activations,
              const Matrix& d_embedded, Gradients& grads);

// Checkpoint: "WTALCKPT" magic, u32 version, u32 d, u32 C, f64 kappa, then
// little-endian f64 blocks in order embed_w, embed_b, class_w, class_b
// (matrices row-major).
void save_checkpoint(const ModelParams& params, double kappa, const std::string& path);

struct Checkpoint {
  ModelParams params;
  double kappa = 4.0;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace wtal
