// Acceptance suite: one pass/fail line per criterion. Exits nonzero if any
// criterion fails. Oracles used here are implemented locally, independent of
// the library code paths they certify.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "wtal/data_io.hpp"
#include "wtal/evaluation.hpp"
#include "wtal/gradcheck.hpp"
#include "wtal/localization.hpp"
#include "wtal/trainer.hpp"

using namespace wtal;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct CriterionResult {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// criterion 1: gradient certification
// ---------------------------------------------------------------------------

CriterionResult criterion1() {
  const auto start = Clock::now();
  const std::vector<LossKind> losses = {LossKind::bbce, LossKind::bce};
  const std::vector<MetricKind> metrics = {MetricKind::none, MetricKind::contrastive,
                                           MetricKind::triplet};
  const std::vector<DistanceKind> distances = {DistanceKind::ours, DistanceKind::cosine,
                                               DistanceKind::euclidean, DistanceKind::custom};
  const int instances = 20;
  double worst = 0.0;
  int runs = 0, failures = 0;
  for (int i = 0; i < instances; ++i) {
    for (auto loss : losses) {
      for (auto metric : metrics) {
        for (auto distance : distances) {
          GradCheckCase gc;
          gc.dim = i % 2 == 0 ? 4 : 16;
          gc.num_classes = (i / 2) % 2 == 0 ? 3 : 5;
          gc.segment_choices = {8, 32};
          gc.feature_scale = i % 5 == 4 ? 3.0 : 1.0;
          if (i % 3 == 0) {
            gc.block_size = 60;  // exercises the short-video single-block rule
            gc.k_max = 10;
          }
          gc.loss = loss;
          gc.metric = metric;
          gc.distance = distance;
          gc.h = 1e-6;
          gc.seed = 10000 + static_cast<std::uint64_t>(i);
          const auto result = run_gradcheck(gc);
          worst = std::max(worst, result.max_rel_error);
          ++runs;
          if (!result.passed(1e-5)) ++failures;
        }
      }
    }
  }
  const double elapsed = seconds_since(start);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%d checks (%d instances x 24 configs), max rel err %.3e, %.1fs", runs,
                instances, worst, elapsed);
  return {failures == 0 && elapsed < 120.0, buf};
}

// ---------------------------------------------------------------------------
// criterion 2: oracle equivalences
// ---------------------------------------------------------------------------

double kmax_oracle(const Vector& scores, int k) {
  std::vector<double> sorted(scores.data(), scores.data() + scores.size());
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  double sum = 0.0;
  for (int i = 0; i < k; ++i) sum += sorted[static_cast<std::size_t>(i)];
  return sigmoid(sum / k);
}

std::vector<std::pair<int, int>> components_oracle(const std::vector<std::uint8_t>& mask) {
  std::vector<std::pair<int, int>> runs;
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    if (!runs.empty() && runs.back().second == i - 1) {
      runs.back().second = i;
    } else {
      runs.emplace_back(i, i);
    }
  }
  return runs;
}

// Full-PR-curve AP oracle: mean over recall levels of the best precision at
// recall >= level, after the same ranked greedy matching.
double ap_oracle(std::vector<Detection> preds, const std::vector<GroundTruthSegment>& gts,
                 double thr) {
  if (gts.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (preds.empty()) return 0.0;
  std::sort(preds.begin(), preds.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.start_s != b.start_s) return a.start_s < b.start_s;
    return a.video_id < b.video_id;
  });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> precision, recall;
  int tp = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double best = 0.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].video_id != preds[i].video_id) continue;
      const double inter = std::max(
          0.0, std::min(preds[i].end_s, gts[g].end_s) - std::max(preds[i].start_s, gts[g].start_s));
      const double uni = (preds[i].end_s - preds[i].start_s) + (gts[g].end_s - gts[g].start_s) -
                         inter;
      const double iou = uni > 0 ? inter / uni : 0.0;
      if (iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best >= thr) {
      used[best_g] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  double ap = 0.0;
  for (std::size_t j = 1; j <= gts.size(); ++j) {
    const double level = static_cast<double>(j) / static_cast<double>(gts.size());
    double best = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      if (recall[i] >= level - 1e-12) best = std::max(best, precision[i]);
    }
    ap += best / static_cast<double>(gts.size());
  }
  return ap;
}

CriterionResult criterion2() {
  std::string failure;

  // k-max pooling: exhaustive ternary vectors up to length 6, plus random.
  {
    for (int len = 1; len <= 6 && failure.empty(); ++len) {
      const int total = static_cast<int>(std::pow(3, len));
      for (int code = 0; code < total && failure.empty(); ++code) {
        Vector scores(len);
        int c = code;
        for (int i = 0; i < len; ++i) {
          scores[i] = static_cast<double>(c % 3) - 1.0;
          c /= 3;
        }
        for (int k = 1; k <= len; ++k) {
          if (block_class_prob(scores, k) != kmax_oracle(scores, k)) {
            failure = "k-max mismatch on exhaustive ternary case";
            break;
          }
        }
      }
    }
    Rng rng(201);
    for (int t = 0; t < 5000 && failure.empty(); ++t) {
      const int len = 1 + static_cast<int>(rng.uniform_int(20));
      Vector scores(len);
      for (int i = 0; i < len; ++i) scores[i] = rng.uniform(-6, 6);
      const int k = 1 + static_cast<int>(rng.uniform_int(len));
      if (block_class_prob(scores, k) != kmax_oracle(scores, k)) {
        failure = "k-max mismatch on random case";
      }
    }
  }

  // noisy-OR: exhaustive decimal grid up to length 3, plus random.
  if (failure.empty()) {
    std::function<void(std::vector<double>&, int)> recurse = [&](std::vector<double>& probs,
                                                                 int remaining) {
      if (!failure.empty()) return;
      if (remaining == 0) {
        Vector v(static_cast<Eigen::Index>(probs.size()));
        double direct = 1.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
          v[static_cast<Eigen::Index>(i)] = probs[i];
          direct *= 1.0 - probs[i];
        }
        if (std::abs(video_class_prob(v) - (1.0 - direct)) >= 1e-12) {
          failure = "noisy-OR mismatch on grid case";
        }
        return;
      }
      for (int dec = 0; dec <= 10; ++dec) {
        probs.push_back(dec / 10.0);
        recurse(probs, remaining - 1);
        probs.pop_back();
      }
    };
    for (int len = 1; len <= 3 && failure.empty(); ++len) {
      std::vector<double> probs;
      recurse(probs, len);
    }
    Rng rng(202);
    for (int t = 0; t < 5000 && failure.empty(); ++t) {
      const int len = 1 + static_cast<int>(rng.uniform_int(8));
      Vector v(len);
      double direct = 1.0;
      for (int i = 0; i < len; ++i) {
        v[i] = rng.uniform();
        direct *= 1.0 - v[i];
      }
      if (std::abs(video_class_prob(v) - (1.0 - direct)) >= 1e-12) {
        failure = "noisy-OR mismatch on random case";
      }
    }
  }

  // connected components: every boolean mask of length <= 16.
  if (failure.empty()) {
    for (int len = 0; len <= 16 && failure.empty(); ++len) {
      const std::uint32_t total = 1u << len;
      for (std::uint32_t code = 0; code < total; ++code) {
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) mask[static_cast<std::size_t>(i)] = (code >> i) & 1u;
        if (connected_components(mask) != components_oracle(mask)) {
          failure = "connected components mismatch";
          break;
        }
      }
    }
  }

  // AP: discrete-grid instances covering every (num preds <= 5, num gts <= 3).
  if (failure.empty()) {
    Rng rng(203);
    for (int n_gt = 1; n_gt <= 3 && failure.empty(); ++n_gt) {
      for (int n_pred = 0; n_pred <= 5 && failure.empty(); ++n_pred) {
        for (int rep = 0; rep < 600 && failure.empty(); ++rep) {
          std::vector<GroundTruthSegment> gts;
          for (int g = 0; g < n_gt; ++g) {
            const double s = static_cast<double>(rng.uniform_int(6));
            gts.push_back({rng.uniform() < 0.7 ? "v1" : "v2", "c", s,
                           s + 1.0 + static_cast<double>(rng.uniform_int(3))});
          }
          std::vector<Detection> preds;
          for (int p = 0; p < n_pred; ++p) {
            const double s = static_cast<double>(rng.uniform_int(8));
            preds.push_back({rng.uniform() < 0.7 ? "v1" : "v2", "c", s,
                             s + 1.0 + static_cast<double>(rng.uniform_int(3)),
                             0.25 * static_cast<double>(rng.uniform_int(5))});
          }
          for (double thr : {0.1, 0.3, 0.5, 0.7}) {
            const double got = match_and_ap(preds, gts, thr);
            const double want = ap_oracle(preds, gts, thr);
            if (std::abs(got - want) >= 1e-12) {
              failure = "AP mismatch vs brute-force PR oracle";
              break;
            }
          }
        }
      }
    }
  }

  // class distance: projection form vs explicit rank-1 quadratic form.
  if (failure.empty()) {
    Rng rng(204);
    for (int t = 0; t < 10000 && failure.empty(); ++t) {
      Vector w(16), u(16), v(16);
      for (int i = 0; i < 16; ++i) {
        w[i] = rng.uniform(-2, 2);
        u[i] = rng.uniform(-3, 3);
        v[i] = rng.uniform(-3, 3);
      }
      const Vector diff = u - v;
      const Matrix metric = w * w.transpose();
      const double via_form = std::sqrt(diff.dot(metric * diff));
      const double direct = class_distance(u, v, w);
      if (std::abs(direct - via_form) > 1e-9 * std::max(1.0, via_form)) {
        failure = "class distance mismatch vs quadratic form";
      }
    }
  }

  if (!failure.empty()) return {false, failure};
  return {true, "k-max, noisy-OR, components, AP, and distance all match their oracles"};
}

// ---------------------------------------------------------------------------
// criteria 3 and 5: synthetic end-to-end, determinism
// ---------------------------------------------------------------------------

SynthConfig end_to_end_synth_config() {
  SynthConfig cfg;
  cfg.num_classes = 5;
  cfg.dim = 32;
  cfg.videos_per_class = 5;  // 25 train + 25 test videos
  cfg.segments_per_video = 120;
  cfg.mean_activity_len = 12;
  cfg.separation = 3.5;
  cfg.noise_std = 0.4;
  cfg.seed = 11;
  return cfg;
}

TrainConfig end_to_end_train_config(std::uint64_t seed) {
  TrainConfig cfg;  // paper defaults: lambda 1, alpha 3, kappa 4, l_w 60, k 10, lr 1e-4
  cfg.epochs = 200;
  cfg.steps_per_epoch = 50;
  cfg.seed = seed;
  return cfg;
}

struct PipelineRun {
  std::string checkpoint_bytes;
  std::string report_text;
  double map_at_05 = 0.0;
  double average_map = 0.0;
  double seconds = 0.0;
};

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Full pipeline through the on-disk formats: train on the train split, detect
// on the test split, evaluate against the test ground truth.
PipelineRun run_pipeline(const fs::path& dir, const TrainConfig& cfg, const std::string& tag) {
  const auto start = Clock::now();
  PipelineRun run;
  const Dataset train_set = load_dataset((dir / "train_manifest.tsv").string());
  const TrainResult result = train(train_set, cfg);
  const std::string ckpt_path = (dir / (tag + ".ckpt")).string();
  save_checkpoint(result.params, result.kappa, ckpt_path);
  run.checkpoint_bytes = file_bytes(ckpt_path);

  const Dataset test_set = load_dataset((dir / "test_manifest.tsv").string());
  const ForwardOptions fopts = cfg.forward_options(false);
  const LossOptions lopts = cfg.loss_options();
  std::vector<Detection> detections;
  for (const auto& seq : test_set.videos) {
    const ForwardCache cache = forward(seq.features, result.params, fopts);
    const auto dets = localize(seq.video_id, segment_probs(cache),
                               video_class_probs(cache.activations, lopts),
                               test_set.manifest.vocabulary, seq.fps, seq.frames_per_segment,
                               LocalizeOptions{});
    detections.insert(detections.end(), dets.begin(), dets.end());
  }
  const std::string det_path = (dir / (tag + "_dets.tsv")).string();
  write_detections(detections, det_path);

  const auto gts = read_ground_truth((dir / "test_gt.tsv").string());
  const auto report = evaluate(read_detections(det_path), gts, {0.1, 0.3, 0.5, 0.7},
                               &test_set.manifest.vocabulary);
  run.report_text = report.machine();
  run.map_at_05 = report.map_per_threshold[2];
  run.average_map = report.average_map;
  run.seconds = seconds_since(start);
  return run;
}

fs::path prepare_dataset_dir(const SynthConfig& cfg, const std::string& name) {
  const fs::path dir = fs::path(WTAL_TEST_TMPDIR) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  const SynthSplits splits = generate_synthetic_splits(cfg);
  write_synth_dataset(splits.train, dir.string(), "train");
  write_synth_dataset(splits.test, dir.string(), "test");
  return dir;
}

CriterionResult criterion3(PipelineRun& first_run, fs::path& dataset_dir) {
  dataset_dir = prepare_dataset_dir(end_to_end_synth_config(), "acceptance_e2e");
  first_run = run_pipeline(dataset_dir, end_to_end_train_config(1), "run1");
  char buf[128];
  std::snprintf(buf, sizeof(buf), "mAP@0.5 = %.4f (threshold 0.80), %.0fs (limit 300s)",
                first_run.map_at_05, first_run.seconds);
  return {first_run.map_at_05 >= 0.80 && first_run.seconds < 300.0, buf};
}

CriterionResult criterion5(const PipelineRun& first_run, const fs::path& dataset_dir) {
  const PipelineRun second = run_pipeline(dataset_dir, end_to_end_train_config(1), "run2");
  const bool same_ckpt = second.checkpoint_bytes == first_run.checkpoint_bytes;
  const bool same_report = second.report_text == first_run.report_text;
  std::string detail = same_ckpt ? "checkpoints bitwise identical" : "checkpoint bytes differ";
  detail += same_report ? ", eval reports identical" : ", eval reports differ";
  return {same_ckpt && same_report, detail};
}

// ---------------------------------------------------------------------------
// criterion 4: ablation directions
// ---------------------------------------------------------------------------

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

CriterionResult criterion4(const fs::path& e2e_dir) {
  auto ablation_run = [&](std::uint64_t seed, MetricKind metric, DistanceKind distance,
                          int block_size, int steps) {
    TrainConfig cfg = end_to_end_train_config(seed);
    cfg.metric = metric;
    cfg.distance = distance;
    cfg.block_size = block_size;
    cfg.steps_per_epoch = steps;
    const std::string tag = "abl_" + std::to_string(seed) + "_" +
                            std::to_string(static_cast<int>(metric)) + "_" +
                            std::to_string(static_cast<int>(distance)) + "_" +
                            std::to_string(block_size) + "_" + std::to_string(steps);
    return run_pipeline(e2e_dir, cfg, tag);
  };

  // (a) metric-loss effect at a mid-training budget (10 steps/epoch), where
  // the classification loss alone has not yet saturated the task.
  std::vector<double> bbce_only, with_triplet_mid;
  for (std::uint64_t seed : {1, 2, 3}) {
    bbce_only.push_back(
        ablation_run(seed, MetricKind::none, DistanceKind::ours, 60, 10).average_map);
    with_triplet_mid.push_back(
        ablation_run(seed, MetricKind::triplet, DistanceKind::ours, 60, 10).average_map);
  }

  // (b) distance comparison and (c) block processing at the full budget.
  std::vector<double> with_ours, with_euclid, with_cosine;
  std::vector<double> block_on, block_off;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto ours = ablation_run(seed, MetricKind::triplet, DistanceKind::ours, 60, 50);
    with_ours.push_back(ours.average_map);
    block_on.push_back(ours.map_at_05);
    with_euclid.push_back(
        ablation_run(seed, MetricKind::triplet, DistanceKind::euclidean, 60, 50).average_map);
    with_cosine.push_back(
        ablation_run(seed, MetricKind::triplet, DistanceKind::cosine, 60, 50).average_map);
    block_off.push_back(
        ablation_run(seed, MetricKind::triplet, DistanceKind::ours, 0, 50).map_at_05);
  }

  const bool a = mean(with_triplet_mid) > mean(bbce_only);
  const bool b = mean(with_ours) >= mean(with_euclid) && mean(with_ours) >= mean(with_cosine);
  const bool c = mean(block_on) >= 0.80 && mean(block_off) >= 0.80 &&
                 mean(block_on) >= mean(block_off);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "(a) triplet %.3f %s bbce-only %.3f; (b) ours %.3f vs euclid %.3f, cosine "
                "%.3f; (c) block on %.3f / off %.3f mAP@0.5",
                mean(with_triplet_mid), a ? ">" : "NOT >", mean(bbce_only), mean(with_ours),
                mean(with_euclid), mean(with_cosine), mean(block_on), mean(block_off));
  return {a && b && c, buf};
}

// ---------------------------------------------------------------------------
// criterion 6: metric-space and scoring properties, 1e4 samples each
// ---------------------------------------------------------------------------

CriterionResult criterion6() {
  std::string failure;
  Rng rng(601);

  // class-distance symmetry, zero self-distance, triangle inequality
  for (int t = 0; t < 10000 && failure.empty(); ++t) {
    Vector w(8), a(8), b(8), c(8);
    for (int i = 0; i < 8; ++i) {
      w[i] = rng.uniform(-2, 2);
      a[i] = rng.uniform(-3, 3);
      b[i] = rng.uniform(-3, 3);
      c[i] = rng.uniform(-3, 3);
    }
    if (class_distance(a, a, w) != 0.0) failure = "nonzero self-distance";
    if (std::abs(class_distance(a, b, w) - class_distance(b, a, w)) > 1e-12) {
      failure = "asymmetric distance";
    }
    if (class_distance(a, c, w) >
        class_distance(a, b, w) + class_distance(b, c, w) + 1e-9) {
      failure = "triangle inequality violated";
    }
  }

  // softmax shift invariance
  for (int t = 0; t < 10000 && failure.empty(); ++t) {
    const int n = 1 + static_cast<int>(rng.uniform_int(10));
    Vector v(n);
    for (int i = 0; i < n; ++i) v[i] = rng.uniform(-30, 30);
    const double shift = rng.uniform(-100, 100);
    const Vector p = softmax(v);
    const Vector q = softmax((v.array() + shift).matrix());
    if ((p - q).cwiseAbs().maxCoeff() > 1e-12) failure = "softmax not shift invariant";
  }

  // noisy-OR monotonicity and dominance
  for (int t = 0; t < 10000 && failure.empty(); ++t) {
    const int n = 1 + static_cast<int>(rng.uniform_int(6));
    Vector probs(n);
    for (int i = 0; i < n; ++i) probs[i] = rng.uniform();
    const double base = video_class_prob(probs);
    if (base < probs.maxCoeff() - 1e-15) failure = "noisy-OR below max block";
    Vector bumped = probs;
    const int j = static_cast<int>(rng.uniform_int(n));
    bumped[j] = std::min(1.0, probs[j] + rng.uniform());
    if (video_class_prob(bumped) < base - 1e-15) failure = "noisy-OR not monotone";
  }

  // AP invariance under strictly monotone confidence transforms
  for (int t = 0; t < 10000 && failure.empty(); ++t) {
    std::vector<GroundTruthSegment> gts;
    std::vector<Detection> preds;
    const int n_gt = 1 + static_cast<int>(rng.uniform_int(3));
    const int n_pred = 1 + static_cast<int>(rng.uniform_int(5));
    for (int g = 0; g < n_gt; ++g) {
      const double s = rng.uniform(0, 20);
      gts.push_back({"v", "c", s, s + rng.uniform(1, 4)});
    }
    for (int p = 0; p < n_pred; ++p) {
      const double s = rng.uniform(0, 20);
      preds.push_back({"v", "c", s, s + rng.uniform(1, 4), rng.uniform(-3, 3)});
    }
    const double base = match_and_ap(preds, gts, 0.3);
    auto mapped = preds;
    const double scale = rng.uniform(0.1, 5.0);
    const double offset = rng.uniform(-10, 10);
    for (auto& d : mapped) d.confidence = scale * std::atan(d.confidence) + offset;
    if (std::abs(match_and_ap(mapped, gts, 0.3) - base) > 1e-12) {
      failure = "AP changed under a monotone confidence transform";
    }
  }

  if (!failure.empty()) return {false, failure};
  return {true, "all property families hold on 10^4 samples each"};
}

}  // namespace

int main() {
  fs::create_directories(WTAL_TEST_TMPDIR);
  std::vector<std::pair<std::string, CriterionResult>> results;

  auto run_criterion = [&](int number, const std::string& name,
                           const std::function<CriterionResult()>& fn) {
    CriterionResult result;
    try {
      result = fn();
    } catch (const std::exception& e) {
      result = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] criterion %d (%s): %s\n", result.pass ? "PASS" : "FAIL", number,
                name.c_str(), result.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(name, result);
  };

  PipelineRun first_run;
  fs::path e2e_dir;

  run_criterion(1, "gradient certification", criterion1);
  run_criterion(2, "oracle equivalences", criterion2);
  run_criterion(3, "synthetic end-to-end",
                [&] { return criterion3(first_run, e2e_dir); });
  run_criterion(4, "ablation directions", [&] { return criterion4(e2e_dir); });
  run_criterion(5, "determinism", [&] { return criterion5(first_run, e2e_dir); });
  run_criterion(6, "metric-space properties", criterion6);

  int failed = 0;
  for (const auto& [name, result] : results) failed += result.pass ? 0 : 1;
  if (failed > 0) {
    std::printf("%d of %zu criteria FAILED\n", failed, results.size());
    return 1;
  }
  std::printf("all %zu criteria passed\n", results.size());
  return 0;
}
