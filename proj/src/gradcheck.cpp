#include "wtal/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace wtal {

namespace {

struct Instance {
  ModelParams params;
  std::vector<Matrix> features;
  std::vector<std::vector<int>> labels;
  std::vector<ClassGroup> groups;
  std::vector<VideoBatchItem> batch;  // caches built from params
};

Instance build_instance(const GradCheckCase& gc, Rng& rng) {
  Instance inst;
  const int rank = gc.distance == DistanceKind::custom ? gc.metric_rank : 0;
  inst.params = init_params(gc.dim, gc.num_classes, rng, rank);

  for (int v = 0; v < gc.num_videos; ++v) {
    const int n = gc.segment_choices[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(gc.segment_choices.size())))];
    Matrix x(n, gc.dim);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < gc.dim; ++j) x(i, j) = gc.feature_scale * rng.normal();
    inst.features.push_back(std::move(x));

    const int num_labels = 1 + static_cast<int>(rng.uniform_int(2));
    std::vector<int> pool(static_cast<std::size_t>(gc.num_classes));
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    std::vector<int> labels(pool.begin(), pool.begin() + num_labels);
    std::sort(labels.begin(), labels.end());
    inst.labels.push_back(std::move(labels));
  }

  for (int c = 0; c < gc.num_classes; ++c) {
    ClassGroup group;
    group.class_id = c;
    for (int v = 0; v < gc.num_videos; ++v) {
      const auto& labels = inst.labels[static_cast<std::size_t>(v)];
      if (std::find(labels.begin(), labels.end(), c) != labels.end()) {
        group.members.push_back(v);
      }
    }
    if (group.members.size() >= 2) inst.groups.push_back(std::move(group));
  }
  return inst;
}

ForwardOptions forward_options(const GradCheckCase& gc) {
  ForwardOptions fopts;
  fopts.kappa = gc.kappa;
  fopts.dropout = 0.0;  // finite differences need a deterministic forward pass
  fopts.training = false;
  fopts.classifier_input = gc.classifier_input;
  return fopts;
}

LossOptions loss_options(const GradCheckCase& gc) {
  LossOptions lopts;
  lopts.loss = gc.loss;
  lopts.metric = gc.metric;
  lopts.distance = gc.distance;
  lopts.lambda = gc.lambda;
  lopts.alpha = gc.alpha;
  lopts.block_size = gc.block_size;
  lopts.k_max = gc.k_max;
  lopts.tail = gc.tail;
  return lopts;
}

// True when the instance sits too close to a non-differentiable point.
bool near_kink(const GradCheckCase& gc, const Instance& inst) {
  const double margin = gc.kink_margin;

  for (std::size_t v = 0; v < inst.batch.size(); ++v) {
    const auto& cache = inst.batch[v].cache;
    if ((cache.pre_embed.array().abs() < margin).any()) return true;
    if (std::isfinite(gc.kappa) &&
        ((cache.pre_clip.array().abs() - gc.kappa).abs() < margin).any()) {
      return true;
    }

    const int n = cache.num_segments();
    const int block_size = gc.loss == LossKind::softmax_mil
                               ? n
                               : (gc.block_size > 0 ? gc.block_size : n);
    const auto part = partition_blocks(n, block_size, gc.k_max, gc.tail);
    for (int c = 0; c < gc.num_classes; ++c) {
      for (const auto& [start, end] : part.ranges) {
        const int len = end - start + 1;
        if (part.k >= len) continue;  // every segment selected, no boundary
        std::vector<double> block(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) block[static_cast<std::size_t>(i)] =
            cache.activations(start + i, c);
        std::nth_element(block.begin(), block.begin() + (part.k - 1), block.end(),
                         std::greater<double>());
        const double kth = block[static_cast<std::size_t>(part.k - 1)];
        const double next =
            *std::max_element(block.begin() + part.k, block.end());
        if (kth - next < margin) return true;
      }
    }

    if (gc.loss != LossKind::softmax_mil) {
      const Vector probs = video_class_probs(cache.activations, loss_options(gc));
      for (int c = 0; c < gc.num_classes; ++c) {
        if (std::abs(probs[c] - kProbEps) < margin * kProbEps) return true;
        if (std::abs(probs[c] - (1.0 - kProbEps)) < margin * kProbEps) return true;
      }
    }
  }

  if (gc.metric != MetricKind::none) {
    for (const auto& group : inst.groups) {
      std::vector<Vector> fg_units, bg_units;
      for (int member : group.members) {
        const auto& cache = inst.batch[static_cast<std::size_t>(member)].cache;
        if (cache.num_segments() < 2) continue;
        const Vector pi = attention_weights(cache.activations.col(group.class_id));
        const auto agg = aggregate_features(cache.embedded, pi);
        fg_units.push_back(agg.fg_unit);
        bg_units.push_back(agg.bg_unit);
      }
      if (fg_units.size() < 2) continue;
      const auto [d_pos, d_neg] = metric_pair_distances(fg_units, bg_units, group.class_id,
                                                        inst.params, gc.distance);
      if (gc.metric == MetricKind::triplet &&
          std::abs(d_pos - d_neg + gc.alpha) < margin) {
        return true;
      }
      if (gc.metric == MetricKind::contrastive && std::abs(gc.alpha - d_neg) < margin) {
        return true;
      }
    }
  }
  return false;
}

}  // namespace

double gradient_relative_error(const Vector& analytic, const Vector& fd) {
  const double denom = analytic.norm() + fd.norm();
  if (denom < 1e-10) return 0.0;
  return (analytic - fd).norm() / denom;
}

GradCheckResult run_gradcheck(const GradCheckCase& gc) {
  if (gc.dim < 1 || gc.num_classes < 1 || gc.num_videos < 1) {
    throw ConfigError("gradcheck: dimensions must be >= 1");
  }
  if (gc.segment_choices.empty()) throw ConfigError("gradcheck: no segment choices");

  const ForwardOptions fopts = forward_options(gc);
  const LossOptions lopts = loss_options(gc);

  GradCheckResult result;
  Instance inst;
  bool found = false;
  for (int attempt = 0; attempt < 100 && !found; ++attempt) {
    Rng rng = Rng(gc.seed).split(static_cast<std::uint64_t>(attempt));
    inst = build_instance(gc, rng);
    if (gc.metric != MetricKind::none && inst.groups.empty()) {
      ++result.resamples;
      continue;
    }
    inst.batch.clear();
    for (std::size_t v = 0; v < inst.features.size(); ++v) {
      VideoBatchItem item;
      item.cache = forward(inst.features[v], inst.params, fopts);
      item.labels = inst.labels[v];
      inst.batch.push_back(std::move(item));
    }
    if (near_kink(gc, inst)) {
      ++result.resamples;
      continue;
    }
    found = true;
  }
  if (!found) {
    throw NumericError("gradcheck: could not sample a kink-free instance for seed " +
                       std::to_string(gc.seed));
  }

  const LossReport report =
      total_loss_and_grads(inst.batch, inst.groups, inst.params, fopts, lopts);
  const Vector analytic = flatten(report.grads);

  const Vector theta = flatten(inst.params);
  auto loss_at = [&](const Vector& probe_theta) {
    ModelParams probe = inst.params;
    unflatten(probe_theta, probe);
    std::vector<VideoBatchItem> batch;
    batch.reserve(inst.features.size());
    for (std::size_t v = 0; v < inst.features.size(); ++v) {
      VideoBatchItem item;
      item.cache = forward(inst.features[v], probe, fopts);
      item.labels = inst.labels[v];
      batch.push_back(std::move(item));
    }
    return total_loss_and_grads(batch, inst.groups, probe, fopts, lopts, false).total;
  };
  const Vector fd = finite_diff_grad(loss_at, theta, gc.h);

  const auto blocks = param_blocks(inst.params);
  Eigen::Index at = 0;
  for (const auto& block : blocks) {
    BlockCheck check;
    check.name = block.name;
    const Vector a = analytic.segment(at, block.size);
    const Vector f = fd.segment(at, block.size);
    check.analytic_norm = a.norm();
    check.fd_norm = f.norm();
    check.rel_error = gradient_relative_error(a, f);
    result.max_rel_error = std::max(result.max_rel_error, check.rel_error);
    result.blocks.push_back(std::move(check));
    at += block.size;
  }
  return result;
}

}  // namespace wtal
