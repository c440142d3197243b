#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wtal/losses.hpp"

namespace wtal {

// One randomized tiny-model gradient check: build a batch, compute analytic
// gradients of the total loss, and compare per parameter block against
// central finite differences over the same loss path.
struct GradCheckCase {
  int dim = 8;
  int num_classes = 3;
  int num_videos = 4;
  std::vector<int> segment_choices = {8, 32};
  double feature_scale = 1.0;  // > 1 pushes activations into the clip range

  LossKind loss = LossKind::bbce;
  MetricKind metric = MetricKind::triplet;
  DistanceKind distance = DistanceKind::ours;
  double lambda = 1.0;
  double alpha = 3.0;
  double kappa = 4.0;
  int block_size = 5;
  int k_max = 3;
  TailRule tail = TailRule::merge;
  ClassifierInput classifier_input = ClassifierInput::embedded;
  int metric_rank = 2;

  double h = 1e-6;
  // Instances with any pre-activation, top-k boundary, clamp boundary, or
  // hinge argument closer than this to a non-differentiable point are
  // resampled; central differences are only valid away from kinks.
  double kink_margin = 1e-4;
  std::uint64_t seed = 1;
};

struct BlockCheck {
  std::string name;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  double fd_norm = 0.0;
};

struct GradCheckResult {
  std::vector<BlockCheck> blocks;
  double max_rel_error = 0.0;
  int resamples = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

GradCheckResult run_gradcheck(const GradCheckCase& gc);

// ||a - b||_2 / (||a||_2 + ||b||_2); 0 when both vanish.
double gradient_relative_error(const Vector& analytic, const Vector& fd);

}  // namespace wtal
