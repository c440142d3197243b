#include "wtal/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wtal {

namespace {

constexpr double kNormEps = 1e-12;
constexpr double kBlockProbCap = 1.0 - 1e-12;  // keeps log1p(-p) finite

}  // namespace

BlockPartition partition_blocks(int n, int block_size, int k_max, TailRule tail) {
  if (n < 1) throw ConfigError("partition_blocks: empty video");
  if (block_size < 1) throw ConfigError("partition_blocks: block size must be >= 1");
  if (k_max < 1) throw ConfigError("partition_blocks: k must be >= 1");

  BlockPartition part;
  if (n < block_size) {
    // Short-video rule: one block spanning the whole video.
    part.block_size = n;
    part.ranges.emplace_back(0, n - 1);
    part.k = std::min(k_max, n);
    return part;
  }
  part.block_size = block_size;
  const int num_blocks = n / block_size;
  for (int b = 0; b < num_blocks; ++b) {
    part.ranges.emplace_back(b * block_size, (b + 1) * block_size - 1);
  }
  if (tail == TailRule::merge && num_blocks * block_size < n) {
    part.ranges.back().second = n - 1;
  }
  part.k = std::min(k_max, block_size);
  return part;
}

std::vector<int> top_k_indices(const Vector& scores, int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 1 || k > n) {
    throw ConfigError("top_k_indices: k=" + std::to_string(k) + " out of range for " +
                      std::to_string(n) + " scores");
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

double block_class_prob(const Vector& block_scores, int k) {
  const auto sel = top_k_indices(block_scores, k);
  double sum = 0.0;
  for (int idx : sel) sum += block_scores[idx];
  return sigmoid(sum / k);
}

double video_class_prob(const Vector& block_probs) {
  double log_none = 0.0;  // log prod (1 - p)
  for (Eigen::Index i = 0; i < block_probs.size(); ++i) {
    const double p = std::min(std::max(block_probs[i], 0.0), kBlockProbCap);
    log_none += std::log1p(-p);
  }
  const double prob = 1.0 - std::exp(log_none);
  return std::min(std::max(prob, 0.0), 1.0);
}

namespace {

std::vector<char> label_mask(Eigen::Index num_classes, const std::vector<int>& positives) {
  std::vector<char> mask(static_cast<std::size_t>(num_classes), 0);
  for (int c : positives) {
    if (c < 0 || c >= num_classes) {
      throw ConfigError("label id " + std::to_string(c) + " out of range");
    }
    mask[static_cast<std::size_t>(c)] = 1;
  }
  return mask;
}

}  // namespace

double bbce_loss(const Vector& video_probs, const std::vector<int>& positive_classes) {
  const Eigen::Index num_classes = video_probs.size();
  if (num_classes == 0) throw ConfigError("bbce_loss: no classes");
  const auto mask = label_mask(num_classes, positive_classes);
  const double num_pos = std::accumulate(mask.begin(), mask.end(), 0.0);
  const double num_neg = static_cast<double>(num_classes) - num_pos;

  double pos_term = 0.0, neg_term = 0.0;
  for (Eigen::Index c = 0; c < num_classes; ++c) {
    const double p = clamp_probability(video_probs[c]);
    if (mask[static_cast<std::size_t>(c)]) {
      pos_term += std::log(p);
    } else {
      neg_term += std::log1p(-p);
    }
  }
  double loss = 0.0;
  if (num_pos > 0) loss -= pos_term / num_pos;
  if (num_neg > 0) loss -= neg_term / num_neg;
  return loss;
}

double bce_loss(const Vector& video_probs, const std::vector<int>& positive_classes) {
  const Eigen::Index num_classes = video_probs.size();
  if (num_classes == 0) throw ConfigError("bce_loss: no classes");
  const auto mask = label_mask(num_classes, positive_classes);
  double loss = 0.0;
  for (Eigen::Index c = 0; c < num_classes; ++c) {
    const double p = clamp_probability(video_probs[c]);
    loss -= mask[static_cast<std::size_t>(c)] ? std::log(p) : std::log1p(-p);
  }
  return loss / static_cast<double>(num_classes);
}

Vector attention_weights(const Vector& class_scores) { return softmax(class_scores); }

AggregatedFeatures aggregate_features(const Matrix& embedded, const Vector& attention) {
  const Eigen::Index n = embedded.rows();
  if (n < 2) throw ConfigError("aggregate_features: needs at least 2 segments");
  if (attention.size() != n) throw ShapeError("aggregate_features: attention length mismatch");

  AggregatedFeatures agg;
  agg.fg.noalias() = embedded.transpose() * attention;
  const Vector complement =
      (Vector::Ones(n) - attention) / static_cast<double>(n - 1);
  agg.bg.noalias() = embedded.transpose() * complement;
  agg.fg_norm = agg.fg.norm();
  agg.bg_norm = agg.bg.norm();
  const double fg_denom = agg.fg_norm < kNormEps ? agg.fg_norm + kNormEps : agg.fg_norm;
  const double bg_denom = agg.bg_norm < kNormEps ? agg.bg_norm + kNormEps : agg.bg_norm;
  agg.fg_unit = agg.fg / fg_denom;
  agg.bg_unit = agg.bg / bg_denom;
  return agg;
}

double class_distance(const Vector& u, const Vector& v, const Vector& metric_row) {
  if (u.size() != v.size() || u.size() != metric_row.size()) {
    throw ShapeError("class_distance: dimension mismatch");
  }
  return std::abs(metric_row.dot(u - v));
}

double squared_class_distance(const Vector& a, const Vector& b, int class_id,
                              const ModelParams& params, DistanceKind kind) {
  switch (kind) {
    case DistanceKind::ours: {
      const double e = params.class_w.row(class_id).dot(a - b);
      return e * e;
    }
    case DistanceKind::euclidean:
      return (a - b).squaredNorm();
    case DistanceKind::cosine: {
      const double dist = 1.0 - a.dot(b);
      return dist * dist;
    }
    case DistanceKind::custom: {
      if (params.metric_factor.empty()) {
        throw ConfigError("custom distance requires metric factors (metric_rank > 0)");
      }
      return (params.metric_factor.at(static_cast<std::size_t>(class_id)) * (a - b))
          .squaredNorm();
    }
  }
  throw ConfigError("unknown distance kind");
}

std::pair<double, double> metric_pair_distances(const std::vector<Vector>& fg_units,
                                                const std::vector<Vector>& bg_units,
                                                int class_id, const ModelParams& params,
                                                DistanceKind kind) {
  const std::size_t n = fg_units.size();
  if (n < 2 || bg_units.size() != n) {
    throw ConfigError("metric_pair_distances: need >= 2 member videos");
  }
  double d_pos = 0.0, d_neg = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t jp = 0; jp < n; ++jp) {
      if (j == jp) continue;
      d_pos += squared_class_distance(fg_units[j], fg_units[jp], class_id, params, kind);
      d_neg += squared_class_distance(fg_units[j], bg_units[jp], class_id, params, kind);
    }
  }
  const double denom = static_cast<double>(n) * static_cast<double>(n - 1);
  return {d_pos / denom, d_neg / denom};
}

double metric_loss(double d_pos, double d_neg, double alpha, MetricKind kind) {
  switch (kind) {
    case MetricKind::triplet:
      return std::max(0.0, d_pos - d_neg + alpha);
    case MetricKind::contrastive:
      return d_pos + std::max(0.0, alpha - d_neg);
    case MetricKind::none:
      return 0.0;
  }
  throw ConfigError("unknown metric kind");
}

namespace {

// Gradient of unit = raw / max(norm, eps-guarded denom) w.r.t. raw.
Vector normalize_backprop(const Vector& raw, double norm, const Vector& unit,
                          const Vector& d_unit) {
  if (norm < kNormEps) {
    const double denom = norm + kNormEps;
    Vector g = d_unit / denom;
    if (norm > 0) g -= raw * (raw.dot(d_unit) / (norm * denom * denom));
    return g;
  }
  return (d_unit - unit * unit.dot(d_unit)) / norm;
}

// D^2 between a and b for the class, accumulating coeff * dD^2/d{a,b,params}.
double sq_dist_backprop(const Vector& a, const Vector& b, int class_id,
                        const ModelParams& params, DistanceKind kind, double coeff,
                        Vector& ga, Vector& gb, Gradients& grads) {
  switch (kind) {
    case DistanceKind::ours: {
      const Vector w = params.class_w.row(class_id).transpose();
      const Vector diff = a - b;
      const double e = w.dot(diff);
      ga += (2.0 * coeff * e) * w;
      gb -= (2.0 * coeff * e) * w;
      grads.class_w.row(class_id) += (2.0 * coeff * e) * diff.transpose();
      return e * e;
    }
    case DistanceKind::euclidean: {
      const Vector diff = a - b;
      ga += (2.0 * coeff) * diff;
      gb -= (2.0 * coeff) * diff;
      return diff.squaredNorm();
    }
    case DistanceKind::cosine: {
      const double dist = 1.0 - a.dot(b);
      ga -= (2.0 * coeff * dist) * b;
      gb -= (2.0 * coeff * dist) * a;
      return dist * dist;
    }
    case DistanceKind::custom: {
      if (params.metric_factor.empty()) {
        throw ConfigError("custom distance requires metric factors (metric_rank > 0)");
      }
      const Matrix& factor = params.metric_factor.at(static_cast<std::size_t>(class_id));
      const Vector diff = a - b;
      const Vector e = factor * diff;
      const Vector back = factor.transpose() * e;
      ga += (2.0 * coeff) * back;
      gb -= (2.0 * coeff) * back;
      grads.metric_factor[static_cast<std::size_t>(class_id)] +=
          (2.0 * coeff) * e * diff.transpose();
      return e.squaredNorm();
    }
  }
  throw ConfigError("unknown distance kind");
}

// Per-class pooling state for one video: block selections and probabilities.
struct ClassPools {
  std::vector<std::vector<int>> selected;  // global segment indices per block
  Vector pooled;                           // mean of selected scores per block
  Vector block_prob;                       // sigmoid(pooled)
};

ClassPools pool_class(const Vector& scores, const BlockPartition& part) {
  const int num_blocks = static_cast<int>(part.ranges.size());
  ClassPools pools;
  pools.selected.resize(num_blocks);
  pools.pooled.resize(num_blocks);
  pools.block_prob.resize(num_blocks);
  for (int b = 0; b < num_blocks; ++b) {
    const auto [start, end] = part.ranges[b];
    const Vector block = scores.segment(start, end - start + 1);
    auto sel = top_k_indices(block, part.k);
    double sum = 0.0;
    for (int& idx : sel) {
      sum += block[idx];
      idx += start;  // back to global segment index
    }
    pools.pooled[b] = sum / part.k;
    pools.block_prob[b] = sigmoid(pools.pooled[b]);
    pools.selected[b] = std::move(sel);
  }
  return pools;
}

// Routes dL/d(video prob) through noisy-OR, sigmoid, and k-max selection into
// the per-segment score gradient column.
void backprop_video_prob(const ClassPools& pools, const BlockPartition& part,
                         double d_prob, Eigen::Ref<Eigen::VectorXd> d_scores) {
  if (d_prob == 0.0) return;
  const int num_blocks = static_cast<int>(part.ranges.size());
  double log_none = 0.0;
  for (int b = 0; b < num_blocks; ++b) {
    log_none += std::log1p(-std::min(pools.block_prob[b], kBlockProbCap));
  }
  for (int b = 0; b < num_blocks; ++b) {
    const double p = pools.block_prob[b];
    if (p > kBlockProbCap) continue;  // saturated block; clamped, no gradient
    // dP/dp_b = prod_{b' != b} (1 - p_b')
    const double d_block = d_prob * std::exp(log_none - std::log1p(-p));
    const double d_pool = d_block * p * (1.0 - p);
    const double d_each = d_pool / part.k;
    for (int idx : pools.selected[b]) d_scores[idx] += d_each;
  }
}

}  // namespace

Vector video_class_probs(const Matrix& activations, const LossOptions& lopts) {
  const int n = static_cast<int>(activations.rows());
  const int num_classes = static_cast<int>(activations.cols());
  const int block_size = lopts.block_size > 0 ? lopts.block_size : n;
  const auto part = partition_blocks(n, block_size, lopts.k_max, lopts.tail);
  Vector probs(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    const auto pools = pool_class(activations.col(c), part);
    probs[c] = video_class_prob(pools.block_prob);
  }
  return probs;
}

LossReport total_loss_and_grads(const std::vector<VideoBatchItem>& batch,
                                const std::vector<ClassGroup>& groups,
                                const ModelParams& params, const ForwardOptions& fopts,
                                const LossOptions& lopts, bool compute_grads) {
  if (batch.empty()) throw ConfigError("total_loss_and_grads: empty batch");
  const int num_classes = params.num_classes();
  for (const auto& item : batch) {
    if (item.cache.num_classes() != num_classes) {
      throw ShapeError("total_loss_and_grads: cache class count mismatch");
    }
  }

  LossReport report;
  report.grads = zeros_like(params);
  const double batch_scale = 1.0 / static_cast<double>(batch.size());

  // Per-video upstream gradients, accumulated across both loss branches.
  std::vector<Matrix> d_activations;
  std::vector<Matrix> d_embedded;
  d_activations.reserve(batch.size());
  d_embedded.reserve(batch.size());
  for (const auto& item : batch) {
    d_activations.push_back(compute_grads
                                ? Matrix::Zero(item.cache.num_segments(), num_classes)
                                : Matrix());
    d_embedded.push_back(Matrix());
  }

  // --- classification branch ---
  double classification_sum = 0.0;
  for (std::size_t v = 0; v < batch.size(); ++v) {
    const auto& cache = batch[v].cache;
    const auto& labels = batch[v].labels;
    const int n = cache.num_segments();

    if (lopts.loss == LossKind::softmax_mil) {
      // Simplified multiple-instance softmax baseline: whole-video k-max
      // logits, cross-entropy against the normalized label distribution.
      const auto part = partition_blocks(n, n, lopts.k_max, lopts.tail);
      const auto mask = label_mask(num_classes, labels);
      const double num_pos = std::accumulate(mask.begin(), mask.end(), 0.0);
      if (num_pos == 0) continue;  // unlabeled video carries no signal here
      Vector logits(num_classes);
      std::vector<ClassPools> pools(num_classes);
      for (int c = 0; c < num_classes; ++c) {
        pools[c] = pool_class(cache.activations.col(c), part);
        logits[c] = pools[c].pooled[0];
      }
      const double max_logit = logits.maxCoeff();
      const double log_z = max_logit + std::log((logits.array() - max_logit).exp().sum());
      const Vector soft = (logits.array() - log_z).exp();
      double loss = 0.0;
      for (int c = 0; c < num_classes; ++c) {
        const double target = mask[static_cast<std::size_t>(c)] / num_pos;
        if (target > 0) loss -= target * (logits[c] - log_z);
        if (compute_grads) {
          const double d_logit = batch_scale * (soft[c] - target);
          const double d_each = d_logit / part.k;
          for (int idx : pools[c].selected[0]) d_activations[v](idx, c) += d_each;
        }
      }
      classification_sum += loss;
      continue;
    }

    const int block_size = lopts.block_size > 0 ? lopts.block_size : n;
    const auto part = partition_blocks(n, block_size, lopts.k_max, lopts.tail);
    const auto mask = label_mask(num_classes, labels);
    const double num_pos = std::accumulate(mask.begin(), mask.end(), 0.0);
    const double num_neg = static_cast<double>(num_classes) - num_pos;

    std::vector<ClassPools> pools(num_classes);
    Vector video_probs(num_classes);
    for (int c = 0; c < num_classes; ++c) {
      pools[c] = pool_class(cache.activations.col(c), part);
      video_probs[c] = video_class_prob(pools[c].block_prob);
    }

    classification_sum += lopts.loss == LossKind::bbce ? bbce_loss(video_probs, labels)
                                                       : bce_loss(video_probs, labels);

    if (!compute_grads) continue;
    for (int c = 0; c < num_classes; ++c) {
      const double p = clamp_probability(video_probs[c]);
      const double gate = clamp_probability_grad(video_probs[c]);
      if (gate == 0.0) continue;
      double d_prob = 0.0;
      const bool positive = mask[static_cast<std::size_t>(c)] != 0;
      if (lopts.loss == LossKind::bbce) {
        if (positive && num_pos > 0) d_prob = -1.0 / (p * num_pos);
        if (!positive && num_neg > 0) d_prob = 1.0 / ((1.0 - p) * num_neg);
      } else {
        d_prob = positive ? -1.0 / (p * num_classes) : 1.0 / ((1.0 - p) * num_classes);
      }
      backprop_video_prob(pools[c], part, batch_scale * d_prob, d_activations[v].col(c));
    }
  }
  report.classification = classification_sum * batch_scale;

  // --- metric branch ---
  double metric_sum = 0.0;
  if (lopts.metric != MetricKind::none && !groups.empty()) {
    struct MemberState {
      int video = -1;
      Vector attention;
      AggregatedFeatures agg;
    };

    // First pass: which groups can contribute (>= 2 members with >= 2 segments).
    std::vector<std::vector<MemberState>> group_states(groups.size());
    int valid_groups = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& group = groups[g];
      if (group.class_id < 0 || group.class_id >= num_classes) {
        throw ConfigError("group class id out of range");
      }
      for (int member : group.members) {
        if (member < 0 || member >= static_cast<int>(batch.size())) {
          throw ConfigError("group member index out of range");
        }
        const auto& cache = batch[static_cast<std::size_t>(member)].cache;
        if (cache.num_segments() < 2) continue;  // degenerate video, excluded
        MemberState state;
        state.video = member;
        state.attention = attention_weights(cache.activations.col(group.class_id));
        state.agg = aggregate_features(cache.embedded, state.attention);
        group_states[g].push_back(std::move(state));
      }
      if (group_states[g].size() >= 2) ++valid_groups;
    }

    if (valid_groups > 0) {
      const double group_scale = 1.0 / static_cast<double>(valid_groups);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        auto& members = group_states[g];
        const std::size_t n_members = members.size();
        if (n_members < 2) continue;
        const int c = groups[g].class_id;

        std::vector<Vector> fg_units(n_members), bg_units(n_members);
        for (std::size_t j = 0; j < n_members; ++j) {
          fg_units[j] = members[j].agg.fg_unit;
          bg_units[j] = members[j].agg.bg_unit;
        }
        const auto [d_pos, d_neg] =
            metric_pair_distances(fg_units, bg_units, c, params, lopts.distance);
        metric_sum += metric_loss(d_pos, d_neg, lopts.alpha, lopts.metric);

        // Hinge seeds, scaled into the total objective.
        double d_dpos = 0.0, d_dneg = 0.0;
        if (lopts.metric == MetricKind::triplet) {
          if (d_pos - d_neg + lopts.alpha > 0) {
            d_dpos = 1.0;
            d_dneg = -1.0;
          }
        } else {  // contrastive
          d_dpos = 1.0;
          if (lopts.alpha - d_neg > 0) d_dneg = -1.0;
        }
        const double seed_scale = lopts.lambda * group_scale;
        d_dpos *= seed_scale;
        d_dneg *= seed_scale;
        if (!compute_grads || (d_dpos == 0.0 && d_dneg == 0.0)) continue;

        const double pair_denom =
            static_cast<double>(n_members) * static_cast<double>(n_members - 1);
        std::vector<Vector> d_fg_unit(n_members, Vector::Zero(params.dim()));
        std::vector<Vector> d_bg_unit(n_members, Vector::Zero(params.dim()));
        for (std::size_t j = 0; j < n_members; ++j) {
          for (std::size_t jp = 0; jp < n_members; ++jp) {
            if (j == jp) continue;
            if (d_dpos != 0.0) {
              sq_dist_backprop(fg_units[j], fg_units[jp], c, params, lopts.distance,
                               d_dpos / pair_denom, d_fg_unit[j], d_fg_unit[jp],
                               report.grads);
            }
            if (d_dneg != 0.0) {
              sq_dist_backprop(fg_units[j], bg_units[jp], c, params, lopts.distance,
                               d_dneg / pair_denom, d_fg_unit[j], d_bg_unit[jp],
                               report.grads);
            }
          }
        }

        for (std::size_t j = 0; j < n_members; ++j) {
          const auto& state = members[j];
          const auto& cache = batch[static_cast<std::size_t>(state.video)].cache;
          const int n = cache.num_segments();
          const Vector d_fg = normalize_backprop(state.agg.fg, state.agg.fg_norm,
                                                 state.agg.fg_unit, d_fg_unit[j]);
          const Vector d_bg = normalize_backprop(state.agg.bg, state.agg.bg_norm,
                                                 state.agg.bg_unit, d_bg_unit[j]);

          Matrix& d_emb = d_embedded[static_cast<std::size_t>(state.video)];
          if (d_emb.size() == 0) d_emb = Matrix::Zero(n, params.dim());
          const Vector& pi = state.attention;
          const Vector complement =
              (Vector::Ones(n) - pi) / static_cast<double>(n - 1);
          d_emb.noalias() += pi * d_fg.transpose();
          d_emb.noalias() += complement * d_bg.transpose();

          // d(attention): fg uses pi directly, bg uses (1-pi)/(n-1).
          Vector d_pi = cache.embedded * d_fg;
          d_pi.noalias() -= (cache.embedded * d_bg) / static_cast<double>(n - 1);
          // softmax backprop
          const double inner = pi.dot(d_pi);
          d_activations[static_cast<std::size_t>(state.video)].col(c) +=
              pi.cwiseProduct((d_pi.array() - inner).matrix());
        }
      }
      report.metric = metric_sum * group_scale;
    }
  }

  report.total = report.classification + lopts.lambda * report.metric;
  if (!compute_grads) return report;

  // --- model backprop per video ---
  for (std::size_t v = 0; v < batch.size(); ++v) {
    backward(batch[v].cache, params, fopts, d_activations[v], d_embedded[v], report.grads);
  }

  for (const auto& block : param_blocks(report.grads)) {
    for (Eigen::Index i = 0; i < block.size; ++i) {
      if (!std::isfinite(block.data[i])) {
        throw NumericError("non-finite gradient in block " + block.name);
      }
    }
  }
  return report;
}

}  // namespace wtal
