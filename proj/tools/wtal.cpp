// Command-line front end: synthetic data generation, training, detection,
// evaluation, and gradient certification.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wtal/data_io.hpp"
#include "wtal/evaluation.hpp"
#include "wtal/gradcheck.hpp"
#include "wtal/localization.hpp"
#include "wtal/trainer.hpp"

namespace fs = std::filesystem;
using namespace wtal;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

const std::map<std::string, LossKind> kLossNames{
    {"bce", LossKind::bce}, {"bbce", LossKind::bbce}, {"softmax-mil", LossKind::softmax_mil}};
const std::map<std::string, MetricKind> kMetricNames{{"none", MetricKind::none},
                                                     {"contrastive", MetricKind::contrastive},
                                                     {"triplet", MetricKind::triplet}};
const std::map<std::string, DistanceKind> kDistanceNames{{"ours", DistanceKind::ours},
                                                         {"cosine", DistanceKind::cosine},
                                                         {"euclidean", DistanceKind::euclidean},
                                                         {"custom", DistanceKind::custom}};
const std::map<std::string, TailRule> kTailNames{{"merge", TailRule::merge},
                                                 {"drop", TailRule::drop}};
const std::map<std::string, ClassifierInput> kClassifierNames{
    {"embedded", ClassifierInput::embedded}, {"raw", ClassifierInput::raw}};

void add_config_file(CLI::App* cmd, std::string& path) {
  cmd->add_option("--config", path, "Config file with key = value lines; flags override");
}

// Expands `--config file` into the equivalent command-line options, inserted
// only for keys the user did not pass explicitly. Unknown keys become unknown
// options and are rejected by the parser.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    }
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw IoError("cannot open config file " + config_path);
  std::string line;
  int lineno = 0;
  std::vector<std::string> extra;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(config_path + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError(config_path + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    const std::string flag = "--" + key;
    bool overridden = false;
    for (const auto& arg : args) {
      if (arg == flag || arg.rfind(flag + "=", 0) == 0) {
        overridden = true;
        break;
      }
    }
    if (!overridden) {
      extra.push_back(flag);
      extra.push_back(value);
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

void add_train_options(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--seed", cfg.seed, "RNG seed");
  cmd->add_option("--epochs", cfg.epochs, "Training epochs");
  cmd->add_option("--steps-per-epoch", cfg.steps_per_epoch,
                  "Batches per epoch (0: cover the dataset once)");
  cmd->add_option("--lr", cfg.lr, "Adam learning rate");
  cmd->add_option("--lambda", cfg.lambda, "Metric loss weight");
  cmd->add_option("--alpha", cfg.alpha, "Metric loss margin");
  cmd->add_option("--kappa", cfg.kappa, "Score clip bound (0 disables clipping)");
  cmd->add_option("--block-size", cfg.block_size,
                  "Segments per block (0 disables block processing)");
  cmd->add_option("--k", cfg.k_max, "Top-k pool size per block");
  cmd->add_option("--dropout", cfg.dropout, "Embedding dropout rate");
  cmd->add_option("--batch-classes", cfg.batch_classes, "Distinct classes per batch");
  cmd->add_option("--batch-per-class", cfg.batch_per_class, "Videos drawn per class");
  cmd->add_option("--max-segments", cfg.max_segments, "Segment subsample cap per video");
  cmd->add_option("--metric-rank", cfg.metric_rank, "Rank of the factored custom metric");
  cmd->add_option("--loss", cfg.loss, "Classification loss")
      ->transform(CLI::CheckedTransformer(kLossNames));
  cmd->add_option("--metric", cfg.metric, "Metric loss variant")
      ->transform(CLI::CheckedTransformer(kMetricNames));
  cmd->add_option("--distance", cfg.distance, "Distance function")
      ->transform(CLI::CheckedTransformer(kDistanceNames));
  cmd->add_option("--tail", cfg.tail, "Remainder segments: merge into last block or drop")
      ->transform(CLI::CheckedTransformer(kTailNames));
  cmd->add_option("--classifier-input", cfg.classifier_input,
                  "Classifier consumes embedded or raw features")
      ->transform(CLI::CheckedTransformer(kClassifierNames));
}

std::vector<double> parse_thresholds(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("bad IoU threshold '" + item + "'");
    }
    if (!(out.back() > 0.0) || out.back() > 1.0) {
      throw ConfigError("IoU threshold " + item + " outside (0, 1]");
    }
  }
  if (out.empty()) throw ConfigError("no IoU thresholds given");
  return out;
}

int cmd_synth(const SynthConfig& base, int test_videos_per_class, const std::string& out_dir) {
  const SynthSplits splits = generate_synthetic_splits(base, test_videos_per_class);
  write_synth_dataset(splits.train, out_dir, "train");
  write_synth_dataset(splits.test, out_dir, "test");
  std::cout << "wrote " << splits.train.videos.size() << " train and "
            << splits.test.videos.size() << " test videos under " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const TrainConfig& cfg, const std::string& manifest_path,
              const std::string& out_path, std::string loss_log_path) {
  const Dataset dataset = load_dataset(manifest_path);
  const TrainResult result = train(dataset, cfg);
  save_checkpoint(result.params, result.kappa, out_path);
  if (loss_log_path.empty()) loss_log_path = out_path + ".losses.tsv";
  write_loss_log(result.trace, loss_log_path);
  if (!result.trace.empty()) {
    const auto& last = result.trace.back();
    std::printf("final step %d: bbce %.6f metric %.6f total %.6f\n", last.step,
                last.classification, last.metric, last.total);
  } else {
    std::cout << "no training steps run; checkpoint holds the initialization\n";
  }
  std::cout << "checkpoint: " << out_path << "\nloss log: " << loss_log_path << "\n";
  return kExitOk;
}

int cmd_detect(const TrainConfig& cfg, bool kappa_given, const std::string& manifest_path,
               const std::string& checkpoint_path, const std::string& out_path,
               const std::string& traces_dir, const LocalizeOptions& lopts_loc) {
  const Dataset dataset = load_dataset(manifest_path);
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  if (dataset.videos.empty()) {
    write_detections({}, out_path);
    std::cout << "wrote 0 detections for 0 videos to " << out_path << "\n";
    return kExitOk;
  }
  if (dataset.dim() != ckpt.params.dim()) {
    throw ConfigError("feature dim " + std::to_string(dataset.dim()) +
                      " does not match checkpoint dim " + std::to_string(ckpt.params.dim()));
  }
  if (dataset.num_classes() != ckpt.params.num_classes()) {
    throw ConfigError("manifest has " + std::to_string(dataset.num_classes()) +
                      " classes but checkpoint expects " +
                      std::to_string(ckpt.params.num_classes()));
  }

  ForwardOptions fopts = cfg.forward_options(false);
  if (kappa_given && fopts.kappa != ckpt.kappa) {
    std::cerr << "warning: --kappa " << fopts.kappa << " differs from checkpoint kappa "
              << ckpt.kappa << "; using the flag value\n";
  } else {
    fopts.kappa = ckpt.kappa;
  }
  const LossOptions lopts = cfg.loss_options();

  if (!traces_dir.empty()) {
    std::error_code ec;
    fs::create_directories(traces_dir, ec);
    if (ec) throw IoError("cannot create trace directory " + traces_dir);
  }

  std::vector<Detection> detections;
  for (std::size_t v = 0; v < dataset.videos.size(); ++v) {
    const auto& seq = dataset.videos[v];
    const ForwardCache cache = forward(seq.features, ckpt.params, fopts);
    const Matrix probs = segment_probs(cache);
    const Vector vprobs = video_class_probs(cache.activations, lopts);
    const auto dets = localize(seq.video_id, probs, vprobs, dataset.manifest.vocabulary,
                               seq.fps, seq.frames_per_segment, lopts_loc);
    detections.insert(detections.end(), dets.begin(), dets.end());

    if (!traces_dir.empty()) {
      const auto path = fs::path(traces_dir) / (seq.video_id + "_trace.tsv");
      std::ofstream trace(path);
      if (!trace) throw IoError("cannot write trace " + path.string());
      trace << "# segment";
      for (const auto& name : dataset.manifest.vocabulary) trace << '\t' << name;
      trace << '\n';
      char buf[32];
      for (int i = 0; i < probs.rows(); ++i) {
        trace << i;
        for (int c = 0; c < probs.cols(); ++c) {
          std::snprintf(buf, sizeof(buf), "\t%.6f", probs(i, c));
          trace << buf;
        }
        trace << '\n';
      }
    }
  }
  write_detections(detections, out_path);
  std::cout << "wrote " << detections.size() << " detections for " << dataset.videos.size()
            << " videos to " << out_path << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& detections_path, const std::string& ground_truth_path,
             const std::string& thresholds_csv, const std::string& manifest_path,
             const std::string& out_path) {
  const auto detections = read_detections(detections_path);
  const auto ground_truth = read_ground_truth(ground_truth_path);
  const auto thresholds = parse_thresholds(thresholds_csv);

  std::vector<std::string> vocabulary;
  const std::vector<std::string>* vocab_ptr = nullptr;
  if (!manifest_path.empty()) {
    vocabulary = read_manifest(manifest_path).vocabulary;
    vocab_ptr = &vocabulary;
  }
  const EvalReport report = evaluate(detections, ground_truth, thresholds, vocab_ptr);
  std::cout << report.table();
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw IoError("cannot write report " + out_path);
    out << report.machine();
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, int instances, double h, double tolerance,
                  double dropout, const std::vector<std::string>& losses,
                  const std::vector<std::string>& metrics,
                  const std::vector<std::string>& distances) {
  if (dropout > 0) {
    throw ConfigError("gradient check requires dropout off; a random mask breaks the "
                      "finite-difference comparison");
  }
  bool all_ok = true;
  int case_index = 0;
  for (const auto& loss_name : losses) {
    for (const auto& metric_name : metrics) {
      for (const auto& distance_name : distances) {
        double worst = 0.0;
        std::map<std::string, double> per_block;
        for (int i = 0; i < instances; ++i) {
          GradCheckCase gc;
          gc.loss = kLossNames.at(loss_name);
          gc.metric = kMetricNames.at(metric_name);
          gc.distance = kDistanceNames.at(distance_name);
          gc.dim = (case_index + i) % 2 == 0 ? 4 : 16;
          gc.num_classes = (case_index + i) % 4 < 2 ? 3 : 5;
          gc.feature_scale = i % 3 == 2 ? 3.0 : 1.0;
          gc.h = h;
          gc.seed = detail::mix64(seed + 977u * static_cast<std::uint64_t>(case_index) + i);
          const auto result = run_gradcheck(gc);
          worst = std::max(worst, result.max_rel_error);
          for (const auto& block : result.blocks) {
            auto [it, _] = per_block.emplace(block.name, 0.0);
            it->second = std::max(it->second, block.rel_error);
          }
        }
        const bool ok = worst < tolerance;
        all_ok = all_ok && ok;
        std::printf("%-4s %-12s %-11s %-9s max rel err %.3e\n", ok ? "ok" : "FAIL",
                    loss_name.c_str(), metric_name.c_str(), distance_name.c_str(), worst);
        for (const auto& [name, err] : per_block) {
          std::printf("       %-18s %.3e\n", name.c_str(), err);
        }
        ++case_index;
      }
    }
  }
  if (!all_ok) throw NumericError("gradient check failed");
  std::cout << "all gradient checks passed (tolerance " << tolerance << ")\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly-supervised temporal action localization on precomputed features"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic train/test dataset");
  SynthConfig synth_cfg;
  std::string synth_out;
  int test_videos_per_class = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_cfg.seed, "RNG seed");
  synth->add_option("--classes", synth_cfg.num_classes, "Number of classes");
  synth->add_option("--dim", synth_cfg.dim, "Feature dimension");
  synth->add_option("--videos-per-class", synth_cfg.videos_per_class,
                    "Training videos per class");
  synth->add_option("--test-videos-per-class", test_videos_per_class,
                    "Test videos per class (default: same as train)");
  synth->add_option("--segments", synth_cfg.segments_per_video, "Segments per video");
  synth->add_option("--activity-len", synth_cfg.mean_activity_len,
                    "Mean activity length in segments");
  synth->add_option("--min-instances", synth_cfg.min_instances, "Min instances per class");
  synth->add_option("--max-instances", synth_cfg.max_instances, "Max instances per class");
  synth->add_option("--second-class-prob", synth_cfg.second_class_prob,
                    "Chance of a second class per video");
  synth->add_option("--separation", synth_cfg.separation, "Class mean separation");
  synth->add_option("--noise", synth_cfg.noise_std, "Feature noise std");
  synth->add_option("--scene-std", synth_cfg.scene_std,
                    "Per-video scene offset std (0: none)");
  synth->add_option("--fps", synth_cfg.fps, "Frames per second");
  synth->add_option("--frames-per-segment", synth_cfg.frames_per_segment,
                    "Frames per segment");
  std::string synth_config;
  add_config_file(synth, synth_config);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model from a manifest");
  TrainConfig train_cfg;
  std::string train_manifest, train_out, train_loss_log;
  train_cmd->add_option("--manifest", train_manifest, "Training manifest")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint output path")->required();
  train_cmd->add_option("--loss-log", train_loss_log,
                        "Loss log path (default: <out>.losses.tsv)");
  add_train_options(train_cmd, train_cfg);
  std::string train_config;
  add_config_file(train_cmd, train_config);

  // detect
  auto* detect = app.add_subcommand("detect", "Localize actions with a trained checkpoint");
  TrainConfig detect_cfg;
  LocalizeOptions detect_loc;
  std::string detect_manifest, detect_ckpt, detect_out, detect_traces;
  detect->add_option("--manifest", detect_manifest, "Manifest to run detection on")
      ->required();
  detect->add_option("--checkpoint", detect_ckpt, "Trained checkpoint")->required();
  detect->add_option("--out", detect_out, "Detection file output path")->required();
  detect->add_option("--traces", detect_traces,
                     "Directory for per-video segment score traces (optional)");
  detect->add_option("--seg-threshold", detect_loc.seg_threshold,
                     "Segment score threshold");
  detect->add_option("--gamma", detect_loc.gamma, "Video-score weight in the confidence");
  detect->add_option("--class-gate", detect_loc.class_gate,
                     "Suppress classes with video prob below this (negative: off)");
  auto* detect_kappa = detect->add_option("--kappa", detect_cfg.kappa,
                                          "Clip bound override (default: checkpoint value)");
  detect->add_option("--block-size", detect_cfg.block_size,
                     "Segments per block for the video-level score");
  detect->add_option("--k", detect_cfg.k_max, "Top-k pool size per block");
  detect->add_option("--tail", detect_cfg.tail, "Remainder rule: merge or drop")
      ->transform(CLI::CheckedTransformer(kTailNames));
  detect->add_option("--classifier-input", detect_cfg.classifier_input,
                     "Classifier consumes embedded or raw features")
      ->transform(CLI::CheckedTransformer(kClassifierNames));
  std::string detect_config;
  add_config_file(detect, detect_config);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score detections against ground truth");
  std::string eval_dets, eval_gt, eval_manifest, eval_out;
  std::string eval_thresholds = "0.1,0.3,0.5,0.7";
  eval_cmd->add_option("--detections", eval_dets, "Detection file")->required();
  eval_cmd->add_option("--ground-truth", eval_gt, "Ground truth file")->required();
  eval_cmd->add_option("--iou-thresholds", eval_thresholds, "Comma-separated IoU thresholds");
  eval_cmd->add_option("--manifest", eval_manifest,
                       "Manifest supplying the class vocabulary (optional)");
  eval_cmd->add_option("--out", eval_out, "Machine-readable report output path");
  std::string eval_config;
  add_config_file(eval_cmd, eval_config);

  // gradcheck
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "Certify analytic gradients against finite differences");
  std::uint64_t gc_seed = 1;
  int gc_instances = 5;
  double gc_h = 1e-6, gc_tolerance = 1e-5, gc_dropout = 0.0;
  std::vector<std::string> gc_losses{"bbce", "bce"};
  std::vector<std::string> gc_metrics{"none", "contrastive", "triplet"};
  std::vector<std::string> gc_distances{"ours", "cosine", "euclidean", "custom"};
  gradcheck->add_option("--seed", gc_seed, "RNG seed");
  gradcheck->add_option("--instances", gc_instances, "Instances per configuration");
  gradcheck->add_option("--fd-step", gc_h, "Finite-difference step");
  gradcheck->add_option("--tolerance", gc_tolerance, "Max allowed relative error");
  gradcheck->add_option("--dropout", gc_dropout, "Must stay 0; present for symmetry");
  gradcheck->add_option("--loss", gc_losses, "Losses to check")
      ->transform(CLI::IsMember(std::vector<std::string>{"bce", "bbce", "softmax-mil"}));
  gradcheck->add_option("--metric", gc_metrics, "Metric variants to check")
      ->transform(CLI::IsMember(std::vector<std::string>{"none", "contrastive", "triplet"}));
  gradcheck->add_option("--distance", gc_distances, "Distance variants to check")
      ->transform(
          CLI::IsMember(std::vector<std::string>{"ours", "cosine", "euclidean", "custom"}));
  std::string gradcheck_config;
  add_config_file(gradcheck, gradcheck_config);

  try {
    std::vector<std::string> args = expand_config_args(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_cfg, test_videos_per_class, synth_out);
    if (train_cmd->parsed()) {
      train_cfg.validate();
      return cmd_train(train_cfg, train_manifest, train_out, train_loss_log);
    }
    if (detect->parsed()) {
      return cmd_detect(detect_cfg, detect_kappa->count() > 0, detect_manifest, detect_ckpt,
                        detect_out, detect_traces, detect_loc);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(eval_dets, eval_gt, eval_thresholds, eval_manifest, eval_out);
    }
    if (gradcheck->parsed()) {
      return cmd_gradcheck(gc_seed, gc_instances, gc_h, gc_tolerance, gc_dropout, gc_losses,
                           gc_metrics, gc_distances);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}
