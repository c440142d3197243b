#include "wtal/data_io.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace wtal {

namespace {

constexpr char kFeatureMagic[8] = {'W', 'T', 'A', 'L', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kFeatureVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(std::string data, std::string path)
      : data_(std::move(data)), path_(std::move(path)) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > data_.size()) {
      throw IoError(path_ + ": truncated " + what + " at byte offset " +
                    std::to_string(pos_) + " (expected " + std::to_string(pos_ + n) +
                    " bytes, file has " + std::to_string(data_.size()) + ")");
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  void expect_magic(const char* magic, std::size_t len) {
    need(len, "magic");
    if (std::memcmp(data_.data() + pos_, magic, len) != 0) {
      throw IoError(path_ + ": bad magic at byte offset 0");
    }
    pos_ += len;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  return parts;
}

}  // namespace

void write_features(const FeatureSequence& seq, const std::string& path) {
  const int n = seq.num_segments();
  const int d = seq.dim();
  if (n < 1 || d < 1) throw ConfigError("write_features: empty feature matrix");
  std::string out;
  out.reserve(32 + static_cast<std::size_t>(n) * d * 4);
  out.append(kFeatureMagic, sizeof(kFeatureMagic));
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(d));
  put_f64(out, seq.fps);
  put_u32(out, static_cast<std::uint32_t>(seq.frames_per_segment));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) put_f32(out, static_cast<float>(seq.features(i, j)));
  dump(path, out);
}

FeatureSequence read_features(const std::string& path) {
  ByteReader r(slurp(path), path);
  r.expect_magic(kFeatureMagic, sizeof(kFeatureMagic));
  const std::uint32_t version = r.u32("version");
  if (version != kFeatureVersion) {
    throw IoError(path + ": unsupported feature file version " + std::to_string(version));
  }
  FeatureSequence seq;
  const std::uint32_t n = r.u32("segment count");
  const std::uint32_t d = r.u32("feature dim");
  seq.fps = r.f64("fps");
  seq.frames_per_segment = static_cast<int>(r.u32("frames_per_segment"));
  if (n == 0 || d == 0) throw IoError(path + ": zero segment count or dimension");
  if (!(seq.fps > 0) || seq.frames_per_segment <= 0) {
    throw IoError(path + ": non-positive timing metadata");
  }
  const std::size_t expected = static_cast<std::size_t>(n) * d * 4;
  if (r.remaining() != expected) {
    throw IoError(path + ": payload size mismatch (expected " + std::to_string(expected) +
                  " bytes, found " + std::to_string(r.remaining()) + " at byte offset " +
                  std::to_string(r.offset()) + ")");
  }
  seq.features.resize(n, d);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j) seq.features(i, j) = r.f32("payload");
  if (!all_finite(seq.features)) throw IoError(path + ": non-finite feature values");
  seq.video_id = std::filesystem::path(path).stem().string();
  return seq;
}

FeatureSequence read_features_text(const std::string& path, const std::string& video_id,
                                   double fps, int frames_per_segment) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw IoError(path + ":" + std::to_string(lineno) + ": inconsistent row width");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError(path + ": no feature rows");
  FeatureSequence seq;
  seq.video_id = video_id;
  seq.fps = fps;
  seq.frames_per_segment = frames_per_segment;
  seq.features.resize(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      seq.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  if (!all_finite(seq.features)) throw IoError(path + ": non-finite feature values");
  return seq;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& e : manifest.entries) {
    out << e.video_id << '\t' << e.path << '\t';
    for (std::size_t i = 0; i < e.labels.size(); ++i) {
      if (i) out << ',';
      out << e.labels[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  DatasetManifest manifest;
  std::set<std::string> vocab;
  std::set<std::string> seen_ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto parts = split_on(line, '\t');
    if (parts.size() != 3) {
      throw IoError(path + ":" + std::to_string(lineno) +
                    ": expected 3 tab-separated fields, found " + std::to_string(parts.size()));
    }
    ManifestEntry entry;
    entry.video_id = parts[0];
    entry.path = parts[1];
    if (entry.video_id.empty() || entry.path.empty()) {
      throw IoError(path + ":" + std::to_string(lineno) + ": empty video id or path");
    }
    if (!seen_ids.insert(entry.video_id).second) {
      throw IoError(path + ":" + std::to_string(lineno) + ": duplicate video id " +
                    entry.video_id);
    }
    for (const auto& label : split_on(parts[2], ',')) {
      if (label.empty()) continue;
      entry.labels.push_back(label);
      vocab.insert(label);
    }
    manifest.entries.push_back(std::move(entry));
  }
  manifest.vocabulary.assign(vocab.begin(), vocab.end());
  manifest.split = std::filesystem::path(path).stem().string();
  return manifest;
}

void write_ground_truth(const std::vector<GroundTruthSegment>& gts, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  char buf[64];
  for (const auto& g : gts) {
    std::snprintf(buf, sizeof(buf), "%.3f\t%.3f", g.start_s, g.end_s);
    out << g.video_id << '\t' << g.class_name << '\t' << buf << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

std::vector<GroundTruthSegment> read_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<GroundTruthSegment> gts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto parts = split_on(line, '\t');
    if (parts.size() != 4) {
      throw IoError(path + ":" + std::to_string(lineno) +
                    ": expected 4 tab-separated fields, found " + std::to_string(parts.size()));
    }
    GroundTruthSegment g;
    g.video_id = parts[0];
    g.class_name = parts[1];
    try {
      g.start_s = std::stod(parts[2]);
      g.end_s = std::stod(parts[3]);
    } catch (const std::exception&) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed time value");
    }
    if (g.start_s < 0 || g.end_s < g.start_s) {
      throw IoError(path + ":" + std::to_string(lineno) + ": invalid interval");
    }
    gts.push_back(std::move(g));
  }
  return gts;
}

Dataset load_dataset(const std::string& manifest_path) {
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  const auto base = std::filesystem::path(manifest_path).parent_path();
  std::map<std::string, int> class_id;
  for (std::size_t i = 0; i < ds.manifest.vocabulary.size(); ++i) {
    class_id[ds.manifest.vocabulary[i]] = static_cast<int>(i);
  }
  int dim = -1;
  for (const auto& entry : ds.manifest.entries) {
    FeatureSequence seq = read_features((base / entry.path).string());
    seq.video_id = entry.video_id;
    if (dim < 0) {
      dim = seq.dim();
    } else if (seq.dim() != dim) {
      throw IoError(manifest_path + ": feature dimension mismatch for " + entry.video_id +
                    " (expected " + std::to_string(dim) + ", found " +
                    std::to_string(seq.dim()) + ")");
    }
    std::vector<int> ids;
    ids.reserve(entry.labels.size());
    for (const auto& label : entry.labels) ids.push_back(class_id.at(label));
    std::sort(ids.begin(), ids.end());
    ds.videos.push_back(std::move(seq));
    ds.labels.push_back(std::move(ids));
  }
  return ds;
}

namespace {

// Round to f32 and back, so written feature files reload bit-identically.
double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

struct PlantedInterval {
  int start, end;  // inclusive segment indices
  int class_id;
};

bool overlaps(const std::vector<PlantedInterval>& existing, int start, int end) {
  for (const auto& iv : existing) {
    if (start <= iv.end && iv.start <= end) return true;
  }
  return false;
}

}  // namespace

SynthDataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.dim < 1) throw ConfigError("synth: classes and dim must be >= 1");
  if (cfg.num_classes > cfg.dim) {
    throw ConfigError("synth: num_classes (" + std::to_string(cfg.num_classes) +
                      ") must not exceed dim (" + std::to_string(cfg.dim) +
                      ") under the orthogonal-direction scheme");
  }
  if (cfg.videos_per_class < 1 || cfg.segments_per_video < 1) {
    throw ConfigError("synth: videos_per_class and segments_per_video must be >= 1");
  }
  if (cfg.mean_activity_len < 1 || cfg.mean_activity_len > cfg.segments_per_video) {
    throw ConfigError("synth: mean_activity_len must be in [1, segments_per_video]");
  }
  if (cfg.min_instances < 1 || cfg.max_instances < cfg.min_instances) {
    throw ConfigError("synth: instance counts must satisfy 1 <= min <= max");
  }
  if (!(cfg.separation > 0) || cfg.noise_std < 0) {
    throw ConfigError("synth: separation must be > 0 and noise_std >= 0");
  }

  Rng rng(cfg.seed);
  Rng layout_rng = rng.split(0);
  Rng noise_rng = rng.split(1);

  SynthDataset data;
  for (int c = 0; c < cfg.num_classes; ++c) {
    data.vocabulary.push_back("class" + std::string(c < 10 ? "0" : "") + std::to_string(c));
  }

  // Orthogonal class means: mu_c = separation * e_c.
  const double seg_seconds = cfg.frames_per_segment / cfg.fps;
  const int num_videos = cfg.num_classes * cfg.videos_per_class;

  for (int v = 0; v < num_videos; ++v) {
    const int primary = v % cfg.num_classes;
    std::vector<int> classes = {primary};
    if (cfg.num_classes > 1 && layout_rng.uniform() < cfg.second_class_prob) {
      int other = static_cast<int>(layout_rng.uniform_int(cfg.num_classes - 1));
      if (other >= primary) ++other;
      classes.push_back(other);
    }

    const int n = cfg.segments_per_video;
    std::vector<PlantedInterval> planted;
    for (int class_id : classes) {
      const int instances =
          cfg.min_instances +
          static_cast<int>(layout_rng.uniform_int(cfg.max_instances - cfg.min_instances + 1));
      for (int inst = 0; inst < instances; ++inst) {
        const int lo = std::max(1, cfg.mean_activity_len / 2);
        const int hi = std::min(n, cfg.mean_activity_len + cfg.mean_activity_len / 2);
        const int len = lo + static_cast<int>(layout_rng.uniform_int(hi - lo + 1));
        bool placed = false;
        for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
          const int start = static_cast<int>(layout_rng.uniform_int(n - len + 1));
          if (!overlaps(planted, start, start + len - 1)) {
            planted.push_back({start, start + len - 1, class_id});
            placed = true;
          }
        }
      }
    }
    // A video must carry at least one interval of each listed class; drop
    // classes whose placement failed entirely (rare, crowded videos).
    std::vector<int> effective;
    for (int class_id : classes) {
      if (std::any_of(planted.begin(), planted.end(),
                      [&](const PlantedInterval& iv) { return iv.class_id == class_id; })) {
        effective.push_back(class_id);
      }
    }
    std::sort(effective.begin(), effective.end());

    char id_buf[16];
    std::snprintf(id_buf, sizeof(id_buf), "%03d", v);
    FeatureSequence seq;
    seq.video_id = cfg.id_prefix + id_buf;
    seq.fps = cfg.fps;
    seq.frames_per_segment = cfg.frames_per_segment;
    seq.features = Matrix::Zero(n, cfg.dim);
    Vector scene = Vector::Zero(cfg.dim);
    if (cfg.scene_std > 0) {
      for (int j = 0; j < cfg.dim; ++j) scene[j] = cfg.scene_std * noise_rng.normal();
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg.dim; ++j)
        seq.features(i, j) = quantize(scene[j] + cfg.noise_std * noise_rng.normal());
    for (const auto& iv : planted) {
      for (int i = iv.start; i <= iv.end; ++i) {
        seq.features(i, iv.class_id) = quantize(seq.features(i, iv.class_id) + cfg.separation);
      }
      data.ground_truth.push_back({seq.video_id, data.vocabulary[iv.class_id],
                                   iv.start * seg_seconds, (iv.end + 1) * seg_seconds});
    }
    data.videos.push_back(std::move(seq));
    data.labels.push_back(std::move(effective));
  }
  return data;
}

SynthSplits generate_synthetic_splits(const SynthConfig& cfg, int test_videos_per_class) {
  SynthSplits splits;
  SynthConfig train_cfg = cfg;
  train_cfg.id_prefix = "train";
  splits.train = generate_synthetic(train_cfg);

  SynthConfig test_cfg = cfg;
  test_cfg.id_prefix = "test";
  if (test_videos_per_class > 0) test_cfg.videos_per_class = test_videos_per_class;
  test_cfg.seed = detail::mix64(cfg.seed ^ 0x7e57da7aULL);
  splits.test = generate_synthetic(test_cfg);
  return splits;
}

std::string write_synth_dataset(const SynthDataset& data, const std::string& dir,
                                const std::string& split) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "features", ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

  DatasetManifest manifest;
  manifest.split = split;
  manifest.vocabulary = data.vocabulary;
  for (std::size_t v = 0; v < data.videos.size(); ++v) {
    const auto& seq = data.videos[v];
    const std::string rel = "features/" + seq.video_id + ".feat";
    write_features(seq, (fs::path(dir) / rel).string());
    ManifestEntry entry;
    entry.video_id = seq.video_id;
    entry.path = rel;
    for (int class_id : data.labels[v]) entry.labels.push_back(data.vocabulary[class_id]);
    manifest.entries.push_back(std::move(entry));
  }
  const std::string manifest_path = (fs::path(dir) / (split + "_manifest.tsv")).string();
  write_manifest(manifest, manifest_path);
  write_ground_truth(data.ground_truth, (fs::path(dir) / (split + "_gt.tsv")).string());
  return manifest_path;
}

Dataset to_dataset(const SynthDataset& data, const std::string& split) {
  Dataset ds;
  ds.manifest.split = split;
  ds.manifest.vocabulary = data.vocabulary;
  for (std::size_t v = 0; v < data.videos.size(); ++v) {
    ManifestEntry entry;
    entry.video_id = data.videos[v].video_id;
    entry.path = entry.video_id + ".feat";
    for (int class_id : data.labels[v]) entry.labels.push_back(data.vocabulary[class_id]);
    ds.manifest.entries.push_back(std::move(entry));
  }
  ds.videos = data.videos;
  ds.labels = data.labels;
  return ds;
}

}  // namespace wtal
