#include "wtal/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace wtal {

Gradients zeros_like(const ModelParams& params) {
  Gradients g;
  g.embed_w = Matrix::Zero(params.embed_w.rows(), params.embed_w.cols());
  g.embed_b = Vector::Zero(params.embed_b.size());
  g.class_w = Matrix::Zero(params.class_w.rows(), params.class_w.cols());
  g.class_b = Vector::Zero(params.class_b.size());
  for (const auto& l : params.metric_factor) {
    g.metric_factor.push_back(Matrix::Zero(l.rows(), l.cols()));
  }
  return g;
}

std::vector<BlockRef> param_blocks(ModelParams& params) {
  std::vector<BlockRef> blocks;
  blocks.push_back({"embed_w", params.embed_w.data(), params.embed_w.size()});
  blocks.push_back({"embed_b", params.embed_b.data(), params.embed_b.size()});
  blocks.push_back({"class_w", params.class_w.data(), params.class_w.size()});
  blocks.push_back({"class_b", params.class_b.data(), params.class_b.size()});
  for (std::size_t c = 0; c < params.metric_factor.size(); ++c) {
    blocks.push_back({"metric_factor[" + std::to_string(c) + "]",
                      params.metric_factor[c].data(), params.metric_factor[c].size()});
  }
  return blocks;
}

Vector flatten(const ModelParams& params) {
  auto blocks = param_blocks(const_cast<ModelParams&>(params));
  Eigen::Index total = 0;
  for (const auto& b : blocks) total += b.size;
  Vector theta(total);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    std::memcpy(theta.data() + at, b.data, static_cast<std::size_t>(b.size) * sizeof(double));
    at += b.size;
  }
  return theta;
}

void unflatten(const Vector& theta, ModelParams& params) {
  auto blocks = param_blocks(params);
  Eigen::Index total = 0;
  for (const auto& b : blocks) total += b.size;
  if (theta.size() != total) {
    throw ShapeError("unflatten: expected " + std::to_string(total) + " values, got " +
                     std::to_string(theta.size()));
  }
  Eigen::Index at = 0;
  for (auto& b : blocks) {
    std::memcpy(b.data, theta.data() + at, static_cast<std::size_t>(b.size) * sizeof(double));
    at += b.size;
  }
}

ModelParams init_params(int dim, int num_classes, Rng& rng, int metric_rank) {
  if (dim < 1 || num_classes < 1) {
    throw ConfigError("init_params: dim and num_classes must be >= 1");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  ModelParams p;
  p.embed_w.resize(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) p.embed_w(i, j) = rng.uniform(-bound, bound);
  p.embed_b = Vector::Zero(dim);
  p.class_w.resize(num_classes, dim);
  for (int c = 0; c < num_classes; ++c)
    for (int j = 0; j < dim; ++j) p.class_w(c, j) = rng.uniform(-bound, bound);
  p.class_b = Vector::Zero(num_classes);
  if (metric_rank > 0) {
    for (int c = 0; c < num_classes; ++c) {
      Matrix l(metric_rank, dim);
      for (int r = 0; r < metric_rank; ++r)
        for (int j = 0; j < dim; ++j) l(r, j) = rng.uniform(-bound, bound);
      p.metric_factor.push_back(std::move(l));
    }
  }
  return p;
}

ForwardCache forward(const Matrix& features, const ModelParams& params,
                     const ForwardOptions& opts, Rng* rng) {
  const int n = static_cast<int>(features.rows());
  const int d = params.dim();
  if (n < 1) throw ConfigError("forward: empty feature matrix");
  if (features.cols() != d) {
    throw ShapeError("forward: feature dim " + std::to_string(features.cols()) +
                     " does not match model dim " + std::to_string(d));
  }
  if (!(opts.kappa > 0)) throw ConfigError("forward: kappa must be positive");
  if (opts.dropout < 0 || opts.dropout >= 1) {
    throw ConfigError("forward: dropout must lie in [0, 1)");
  }

  ForwardCache cache;
  cache.input = features;
  cache.pre_embed.noalias() = features * params.embed_w.transpose();
  cache.pre_embed.rowwise() += params.embed_b.transpose();
  cache.embedded = cache.pre_embed.cwiseMax(0.0);

  const bool use_dropout = opts.training && opts.dropout > 0;
  if (use_dropout) {
    if (rng == nullptr) throw ConfigError("forward: dropout requires an rng");
    const double keep_scale = 1.0 / (1.0 - opts.dropout);
    cache.drop_mask.resize(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j)
        cache.drop_mask(i, j) = rng->uniform() < opts.dropout ? 0.0 : keep_scale;
    cache.embedded = cache.embedded.cwiseProduct(cache.drop_mask);
  }

  const Matrix& classifier_in =
      opts.classifier_input == ClassifierInput::embedded ? cache.embedded : cache.input;
  cache.pre_clip.noalias() = classifier_in * params.class_w.transpose();
  cache.pre_clip.rowwise() += params.class_b.transpose();
  cache.activations = cache.pre_clip.unaryExpr(
      [kappa = opts.kappa](double x) { return x > kappa ? kappa : (x < -kappa ? -kappa : x); });

  if (!all_finite(cache.activations) || !all_finite(cache.embedded)) {
    throw NumericError("forward: non-finite activations");
  }
  return cache;
}

void backward(const ForwardCache& cache, const ModelParams& params,
              const ForwardOptions& opts, const Matrix& d_activations,
              const Matrix& d_embedded, Gradients& grads) {
  const int n = cache.num_segments();
  if (d_activations.rows() != n || d_activations.cols() != cache.num_classes()) {
    throw ShapeError("backward: d_activations shape mismatch");
  }

  // Clip subgradient: alive on the closed interval [-kappa, kappa].
  Matrix d_pre_clip =
      d_activations.cwiseProduct(cache.pre_clip.unaryExpr([kappa = opts.kappa](double x) {
        return (x >= -kappa && x <= kappa) ? 1.0 : 0.0;
      }));

  const bool embedded_in = opts.classifier_input == ClassifierInput::embedded;
  const Matrix& classifier_in = embedded_in ? cache.embedded : cache.input;
  grads.class_w.noalias() += d_pre_clip.transpose() * classifier_in;
  grads.class_b += d_pre_clip.colwise().sum().transpose();

  Matrix d_emb(n, params.dim());
  if (embedded_in) {
    d_emb.noalias() = d_pre_clip * params.class_w;
    if (d_embedded.size() > 0) d_emb += d_embedded;
  } else {
    if (d_embedded.size() > 0) {
      d_emb = d_embedded;
    } else {
      return;  // raw classifier input and no embedded-path gradient
    }
  }

  if (cache.drop_mask.size() > 0) d_emb = d_emb.cwiseProduct(cache.drop_mask);
  const Matrix d_pre_embed = d_emb.cwiseProduct(
      cache.pre_embed.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; }));
  grads.embed_w.noalias() += d_pre_embed.transpose() * cache.input;
  grads.embed_b += d_pre_embed.colwise().sum().transpose();
}

namespace {

constexpr char kCheckpointMagic[8] = {'W', 'T', 'A', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
      throw IoError(path_ + ": truncated checkpoint at byte offset " + std::to_string(pos_));
    }
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  void expect_magic() {
    need(sizeof(kCheckpointMagic));
    if (std::memcmp(data_.data() + pos_, kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
      throw IoError(path_ + ": bad checkpoint magic");
    }
    pos_ += sizeof(kCheckpointMagic);
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ModelParams& params, double kappa, const std::string& path) {
  const int d = params.dim();
  const int c = params.num_classes();
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(d));
  put_u32(out, static_cast<std::uint32_t>(c));
  put_f64(out, kappa);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) put_f64(out, params.embed_w(i, j));
  for (int j = 0; j < d; ++j) put_f64(out, params.embed_b(j));
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < d; ++j) put_f64(out, params.class_w(i, j));
  for (int i = 0; i < c; ++i) put_f64(out, params.class_b(i));

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot write checkpoint " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("checkpoint write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << file.rdbuf();
  Reader r(ss.str(), path);

  r.expect_magic();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const int d = static_cast<int>(r.u32());
  const int c = static_cast<int>(r.u32());
  Checkpoint ckpt;
  ckpt.kappa = r.f64();
  if (d < 1 || c < 1) throw IoError(path + ": invalid dimensions in header");

  const std::size_t expected =
      (static_cast<std::size_t>(d) * d + d + static_cast<std::size_t>(c) * d + c) * 8;
  if (r.remaining() != expected) {
    throw IoError(path + ": parameter payload size mismatch (expected " +
                  std::to_string(expected) + " bytes, found " + std::to_string(r.remaining()) +
                  ")");
  }

  auto& p = ckpt.params;
  p.embed_w.resize(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) p.embed_w(i, j) = r.f64();
  p.embed_b.resize(d);
  for (int j = 0; j < d; ++j) p.embed_b(j) = r.f64();
  p.class_w.resize(c, d);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < d; ++j) p.class_w(i, j) = r.f64();
  p.class_b.resize(c);
  for (int i = 0; i < c; ++i) p.class_b(i) = r.f64();
  return ckpt;
}

}  // namespace wtal
