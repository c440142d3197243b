#include "wtal/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace wtal {

LossOptions TrainConfig::loss_options() const {
  LossOptions opts;
  opts.loss = loss;
  opts.metric = metric;
  opts.distance = distance;
  opts.lambda = lambda;
  opts.alpha = alpha;
  opts.block_size = block_size;
  opts.k_max = k_max;
  opts.tail = tail;
  return opts;
}

ForwardOptions TrainConfig::forward_options(bool training) const {
  ForwardOptions opts;
  opts.kappa = kappa > 0 ? kappa : std::numeric_limits<double>::infinity();
  opts.dropout = dropout;
  opts.training = training;
  opts.classifier_input = classifier_input;
  return opts;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("adam eps must be positive");
  if (lambda < 0) throw ConfigError("lambda must be >= 0");
  if (!(alpha > 0)) throw ConfigError("alpha must be positive");
  if (k_max < 1) throw ConfigError("k must be >= 1");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
  if (batch_classes < 1 || batch_per_class < 1) {
    throw ConfigError("batch composition values must be >= 1");
  }
  if (max_segments < 1) throw ConfigError("max_segments must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
  if (metric_rank < 1 && distance == DistanceKind::custom) {
    throw ConfigError("custom distance requires metric_rank >= 1");
  }
}

AdamState make_adam_state(const ModelParams& params) {
  AdamState state;
  state.first_moment = zeros_like(params);
  state.second_moment = zeros_like(params);
  return state;
}

void adam_step(ModelParams& params, const Gradients& grads, AdamState& state,
               const TrainConfig& cfg) {
  auto p_blocks = param_blocks(params);
  auto g_blocks = param_blocks(const_cast<Gradients&>(grads));
  auto m_blocks = param_blocks(state.first_moment);
  auto v_blocks = param_blocks(state.second_moment);
  if (p_blocks.size() != g_blocks.size()) {
    throw ShapeError("adam_step: gradient layout does not match parameters");
  }

  for (std::size_t b = 0; b < g_blocks.size(); ++b) {
    if (g_blocks[b].size != p_blocks[b].size) {
      throw ShapeError("adam_step: size mismatch in block " + p_blocks[b].name);
    }
    for (Eigen::Index i = 0; i < g_blocks[b].size; ++i) {
      if (!std::isfinite(g_blocks[b].data[i])) {
        throw NumericError("adam_step aborted: non-finite gradient in block " +
                           p_blocks[b].name + " at index " + std::to_string(i));
      }
    }
  }

  state.step += 1;
  const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    double* p = p_blocks[b].data;
    const double* g = g_blocks[b].data;
    double* m = m_blocks[b].data;
    double* v = v_blocks[b].data;
    for (Eigen::Index i = 0; i < p_blocks[b].size; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
}

FeatureSequence sample_segments(const FeatureSequence& seq, int max_segments, Rng& rng) {
  if (max_segments < 1) throw ConfigError("sample_segments: max_segments must be >= 1");
  const int n = seq.num_segments();
  if (n <= max_segments) return seq;

  // Partial Fisher-Yates: first max_segments entries are a uniform subset.
  std::vector<int> indices(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) indices[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < max_segments; ++i) {
    const auto j = i + static_cast<int>(rng.uniform_int(n - i));
    std::swap(indices[static_cast<std::size_t>(i)], indices[static_cast<std::size_t>(j)]);
  }
  indices.resize(static_cast<std::size_t>(max_segments));
  std::sort(indices.begin(), indices.end());

  FeatureSequence out;
  out.video_id = seq.video_id;
  out.fps = seq.fps;
  out.frames_per_segment = seq.frames_per_segment;
  out.features.resize(max_segments, seq.dim());
  for (int i = 0; i < max_segments; ++i) {
    out.features.row(i) = seq.features.row(indices[static_cast<std::size_t>(i)]);
  }
  return out;
}

EpochPool::EpochPool(int num_videos) : used_(static_cast<std::size_t>(num_videos), false) {}

void EpochPool::reset() { std::fill(used_.begin(), used_.end(), false); }

BatchPlan sample_batch(const Dataset& dataset, const TrainConfig& cfg, Rng& rng,
                       EpochPool& pool) {
  const int num_classes = dataset.num_classes();
  if (num_classes < 1) throw ConfigError("sample_batch: dataset has no classes");
  const int num_videos = static_cast<int>(dataset.videos.size());
  if (num_videos < 1) throw ConfigError("sample_batch: dataset has no videos");

  // Videos per class.
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(num_classes));
  for (int v = 0; v < num_videos; ++v) {
    for (int c : dataset.labels[static_cast<std::size_t>(v)]) {
      by_class[static_cast<std::size_t>(c)].push_back(v);
    }
  }
  std::vector<int> candidate_classes;
  for (int c = 0; c < num_classes; ++c) {
    if (!by_class[static_cast<std::size_t>(c)].empty()) candidate_classes.push_back(c);
  }
  if (candidate_classes.empty()) throw ConfigError("sample_batch: no class has any video");

  // Draw distinct classes uniformly.
  rng.shuffle(candidate_classes);
  const int take_classes = std::min<int>(cfg.batch_classes,
                                         static_cast<int>(candidate_classes.size()));
  candidate_classes.resize(static_cast<std::size_t>(take_classes));

  BatchPlan plan;
  std::vector<int> position(static_cast<std::size_t>(num_videos), -1);
  for (int c : candidate_classes) {
    auto candidates = by_class[static_cast<std::size_t>(c)];
    // Prefer videos not yet in the batch; among those, prefer ones unused
    // this epoch. Shuffle first so ties break randomly but reproducibly.
    rng.shuffle(candidates);
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
      const int rank_a = (position[static_cast<std::size_t>(a)] >= 0 ? 2 : 0) +
                         (pool.unused(a) ? 0 : 1);
      const int rank_b = (position[static_cast<std::size_t>(b)] >= 0 ? 2 : 0) +
                         (pool.unused(b) ? 0 : 1);
      return rank_a < rank_b;
    });
    const int want = std::min<int>(cfg.batch_per_class, static_cast<int>(candidates.size()));
    ClassGroup group;
    group.class_id = c;
    for (int i = 0; i < want; ++i) {
      const int video = candidates[static_cast<std::size_t>(i)];
      int& pos = position[static_cast<std::size_t>(video)];
      if (pos < 0) {
        pos = static_cast<int>(plan.videos.size());
        plan.videos.push_back(video);
        pool.mark(video);
      }
      group.members.push_back(pos);
    }
    if (group.members.size() >= 2) plan.groups.push_back(std::move(group));
  }
  return plan;
}

TrainResult train(const Dataset& dataset, const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (dataset.videos.empty()) throw ConfigError("train: empty dataset");
  if (dataset.num_classes() < 1) throw ConfigError("train: dataset has no classes");

  Rng root(cfg.seed);
  Rng init_rng = root.split(0);
  Rng data_rng = root.split(1);
  Rng dropout_rng = root.split(2);

  const int metric_rank = cfg.distance == DistanceKind::custom ? cfg.metric_rank : 0;
  TrainResult result;
  result.params = init_params(dataset.dim(), dataset.num_classes(), init_rng, metric_rank);
  result.kappa = cfg.forward_options(false).kappa;

  AdamState state = make_adam_state(result.params);
  const LossOptions lopts = cfg.loss_options();
  const ForwardOptions fopts = cfg.forward_options(true);

  const int batch_size = cfg.batch_classes * cfg.batch_per_class;
  const int steps =
      cfg.steps_per_epoch > 0
          ? cfg.steps_per_epoch
          : (static_cast<int>(dataset.videos.size()) + batch_size - 1) / batch_size;

  EpochPool pool(static_cast<int>(dataset.videos.size()));
  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    pool.reset();
    for (int s = 0; s < steps; ++s) {
      const BatchPlan plan = sample_batch(dataset, cfg, data_rng, pool);
      std::vector<VideoBatchItem> batch;
      batch.reserve(plan.videos.size());
      for (int video : plan.videos) {
        const FeatureSequence sampled =
            sample_segments(dataset.videos[static_cast<std::size_t>(video)],
                            cfg.max_segments, data_rng);
        VideoBatchItem item;
        item.cache = forward(sampled.features, result.params, fopts, &dropout_rng);
        item.labels = dataset.labels[static_cast<std::size_t>(video)];
        batch.push_back(std::move(item));
      }
      const LossReport report =
          total_loss_and_grads(batch, plan.groups, result.params, fopts, lopts);
      adam_step(result.params, report.grads, state, cfg);

      StepRecord record;
      record.step = ++global_step;
      record.epoch = epoch;
      record.classification = report.classification;
      record.metric = report.metric;
      record.total = report.total;
      if (on_step) on_step(record);
      result.trace.push_back(record);
    }
  }
  return result;
}

void write_loss_log(const std::vector<StepRecord>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write loss log " + path);
  out << "# step\tepoch\tbbce\tmetric\ttotal\n";
  char buf[128];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%d\t%d\t%.9g\t%.9g\t%.9g\n", r.step, r.epoch,
                  r.classification, r.metric, r.total);
    out << buf;
  }
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace wtal
