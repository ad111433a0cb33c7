#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "steadv/autograd.hpp"
#include "steadv/dataset.hpp"
#include "steadv/optim.hpp"
#include "steadv/rng.hpp"
#include "steadv/tensor_io.hpp"

namespace steadv {

// Small convolutional classifier: [conv3x3 -> relu -> maxpool2] per channel
// spec, then one linear head. Input is NHWC in [0,1].
template <typename T>
class Cnn {
 public:
  Cnn() = default;

  Cnn(int in_h, int in_w, int in_c, std::vector<int> channels, int num_classes,
      std::uint64_t seed)
      : in_h_(in_h), in_w_(in_w), in_c_(in_c), channels_(std::move(channels)),
        num_classes_(num_classes) {
    if (channels_.empty()) throw ConfigError("cnn: need at least one conv block");
    int div = 1 << channels_.size();
    if (in_h_ % div != 0 || in_w_ % div != 0)
      throw ShapeError("cnn: input " + std::to_string(in_h_) + "x" + std::to_string(in_w_) +
                       " not divisible by pooling factor " + std::to_string(div));
    Rng rng(seed);
    int cin = in_c_;
    for (int cout : channels_) {
      double bound = std::sqrt(6.0 / (cin * 9));
      Array<T> w(Shape{cout, cin, 3, 3});
      for (std::int64_t i = 0; i < w.size(); ++i)
        w[i] = static_cast<T>(rng.uniform(-bound, bound));
      conv_w_.push_back(std::move(w));
      conv_b_.push_back(Array<T>(Shape{cout}));
      cin = cout;
    }
    int d = feature_dim();
    double bound = std::sqrt(6.0 / (d + num_classes_));
    fc_w_ = Array<T>(Shape{d, num_classes_});
    for (std::int64_t i = 0; i < fc_w_.size(); ++i)
      fc_w_[i] = static_cast<T>(rng.uniform(-bound, bound));
    fc_b_ = Array<T>(Shape{num_classes_});
  }

  int num_classes() const { return num_classes_; }
  int input_h() const { return in_h_; }
  int input_w() const { return in_w_; }
  int input_c() const { return in_c_; }

  int feature_dim() const {
    int div = 1 << channels_.size();
    return channels_.back() * (in_h_ / div) * (in_w_ / div);
  }

  std::string spec_string() const {
    std::ostringstream os;
    os << "cnn1 in=" << in_h_ << "x" << in_w_ << "x" << in_c_ << " k=3 pool=2 channels=";
    for (std::size_t i = 0; i < channels_.size(); ++i) {
      if (i) os << ",";
      os << channels_[i];
    }
    os << " classes=" << num_classes_;
    return os.str();
  }

  std::vector<Array<T>*> parameters() {
    std::vector<Array<T>*> out;
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      out.push_back(&conv_w_[i]);
      out.push_back(&conv_b_[i]);
    }
    out.push_back(&fc_w_);
    out.push_back(&fc_b_);
    return out;
  }

  std::vector<const Array<T>*> parameters() const {
    std::vector<const Array<T>*> out;
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      out.push_back(&conv_w_[i]);
      out.push_back(&conv_b_[i]);
    }
    out.push_back(&fc_w_);
    out.push_back(&fc_b_);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const Array<T>* p : parameters()) n += p->size();
    return n;
  }

  // Recorded forward. When param_leaves is given, parameters are registered
  // as gradient-tracked leaves (training); otherwise they are constants.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& batch_nhwc,
                    std::vector<Tensor<T>>* param_leaves = nullptr) const {
    check_input(batch_nhwc.value());
    bool track = param_leaves != nullptr;
    Tensor<T> x = nhwc_to_nchw(batch_nhwc);
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      Tensor<T> w = tape.leaf(conv_w_[i], track);
      Tensor<T> b = tape.leaf(conv_b_[i], track);
      if (track) {
        param_leaves->push_back(w);
        param_leaves->push_back(b);
      }
      x = max_pool2(relu(conv2d(x, w, b, 1, 1)));
    }
    Tensor<T> w = tape.leaf(fc_w_, track);
    Tensor<T> b = tape.leaf(fc_b_, track);
    if (track) {
      param_leaves->push_back(w);
      param_leaves->push_back(b);
    }
    Tensor<T> flat = reshape(x, Shape{batch_nhwc.value().dim(0), feature_dim()});
    return bias_add(matmul(flat, w), b);
  }

  Tensor<T> forward(Tape<T>& tape, const Array<T>& batch_nhwc) const {
    return forward(tape, tape.leaf(batch_nhwc), nullptr);
  }

  // Same kernels in the same order as the recorded forward, so logits are
  // bit-identical; nothing is recorded anywhere.
  Array<T> forward_no_tape(const Array<T>& batch_nhwc) const {
    check_input(batch_nhwc);
    Array<T> x = kernels::nhwc_to_nchw(batch_nhwc);
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      x = kernels::conv2d(x, conv_w_[i], &conv_b_[i], 1, 1);
      x = kernels::relu(x);
      x = kernels::max_pool2(x, nullptr);
    }
    Array<T> flat(Shape{batch_nhwc.dim(0), feature_dim()});
    for (std::int64_t i = 0; i < flat.size(); ++i) flat[i] = x[i];
    return kernels::bias_add(kernels::matmul(flat, fc_w_), fc_b_);
  }

  // Weight file: "STW1" header (spec string, K, input shape, FNV-1a
  // fingerprint of the spec string) followed by the tensors in parameter
  // order, each in the STT1 container.
  void save_weights(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("weights: cannot open for write: " + path);
    std::string spec = spec_string();
    os.write("STW1", 4);
    detail::write_u32le(os, static_cast<std::uint32_t>(spec.size()));
    os.write(spec.data(), static_cast<std::streamsize>(spec.size()));
    detail::write_u32le(os, static_cast<std::uint32_t>(num_classes_));
    detail::write_u32le(os, 3);
    detail::write_u32le(os, static_cast<std::uint32_t>(in_h_));
    detail::write_u32le(os, static_cast<std::uint32_t>(in_w_));
    detail::write_u32le(os, static_cast<std::uint32_t>(in_c_));
    detail::write_u64le(os, fnv1a64(spec));
    auto params = parameters();
    detail::write_u32le(os, static_cast<std::uint32_t>(params.size()));
    for (const Array<T>* p : params) write_tensor(os, *p);
    if (!os) throw IoError("weights: write failed: " + path);
  }

  static Cnn load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("weights: cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "STW1", 4) != 0)
      throw IoError("weights: bad magic bytes in " + path);
    std::uint32_t spec_len = detail::read_u32le(is, "spec length");
    if (spec_len > 4096) throw IoError("weights: implausible spec length");
    std::string spec(spec_len, '\0');
    if (!is.read(spec.data(), spec_len)) throw IoError("weights: truncated spec string");
    std::uint32_t k = detail::read_u32le(is, "classes");
    std::uint32_t rank = detail::read_u32le(is, "input rank");
    if (rank != 3) throw IoError("weights: expected rank-3 input shape");
    std::uint32_t h = detail::read_u32le(is, "input h");
    std::uint32_t w = detail::read_u32le(is, "input w");
    std::uint32_t c = detail::read_u32le(is, "input c");
    std::uint64_t fingerprint = detail::read_u64le(is, "fingerprint");
    if (fingerprint != fnv1a64(spec))
      throw IoError("weights: fingerprint mismatch, file header is corrupt or altered");
    Cnn model = from_spec_string(spec);
    if (model.num_classes_ != static_cast<int>(k) || model.in_h_ != static_cast<int>(h) ||
        model.in_w_ != static_cast<int>(w) || model.in_c_ != static_cast<int>(c))
      throw IoError("weights: header fields disagree with spec string");
    std::uint32_t count = detail::read_u32le(is, "tensor count");
    auto params = model.parameters();
    if (count != params.size())
      throw IoError("weights: tensor count " + std::to_string(count) + " does not match model");
    for (Array<T>* p : params) {
      Array<T> loaded = read_tensor<T>(is);
      if (!loaded.same_shape(*p))
        throw IoError("weights: tensor shape " + shape_str(loaded.shape()) +
                      " does not match model expectation " + shape_str(p->shape()));
      *p = std::move(loaded);
    }
    return model;
  }

  // Loading into an already-constructed model requires an exact spec match.
  void load_weights(const std::string& path) {
    Cnn loaded = load(path);
    if (loaded.spec_string() != spec_string())
      throw IoError("weights: model spec mismatch: file has \"" + loaded.spec_string() +
                    "\", expected \"" + spec_string() + "\"");
    *this = std::move(loaded);
  }

 private:
  static Cnn from_spec_string(const std::string& spec) {
    std::istringstream is(spec);
    std::string arch, tok;
    is >> arch;
    if (arch != "cnn1") throw IoError("weights: unknown architecture \"" + arch + "\"");
    int h = 0, w = 0, c = 0, k = 0;
    std::vector<int> channels;
    while (is >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "in") {
        if (std::sscanf(val.c_str(), "%dx%dx%d", &h, &w, &c) != 3)
          throw IoError("weights: bad input spec " + val);
      } else if (key == "channels") {
        std::istringstream cs(val);
        std::string item;
        while (std::getline(cs, item, ',')) channels.push_back(std::stoi(item));
      } else if (key == "classes") {
        k = std::stoi(val);
      }
    }
    if (h <= 0 || w <= 0 || c <= 0 || k <= 0 || channels.empty())
      throw IoError("weights: incomplete spec string \"" + spec + "\"");
    return Cnn(h, w, c, channels, k, 0);
  }

  void check_input(const Array<T>& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != in_h_ || batch.dim(2) != in_w_ ||
        batch.dim(3) != in_c_)
      throw ShapeError("cnn: input " + shape_str(batch.shape()) + " does not match model input " +
                       std::to_string(in_h_) + "x" + std::to_string(in_w_) + "x" +
                       std::to_string(in_c_));
  }

  int in_h_ = 0, in_w_ = 0, in_c_ = 0;
  std::vector<int> channels_;
  int num_classes_ = 0;
  std::vector<Array<T>> conv_w_, conv_b_;
  Array<T> fc_w_, fc_b_;
};

struct TrainConfig {
  int epochs = 5;
  int batch_size = 32;
  std::string optimizer = "adam";  // "adam" | "sgd"
  double learning_rate = 1e-3;
  double val_fraction = 0.1;
  double label_smoothing = 0.0;  // caps trained logit gaps; evaluation is unaffected
  std::uint64_t seed = 1;
};

struct EpochStats {
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double final_val_acc = 0;
};

template <typename T>
Array<T> stack_batch(const std::vector<LabeledImage>& corpus, const std::vector<int>& indices,
                     std::size_t begin, std::size_t end) {
  const Image& first = corpus[static_cast<std::size_t>(indices[begin])].image;
  Array<T> batch(Shape{static_cast<int>(end - begin), first.dim(0), first.dim(1), first.dim(2)});
  std::int64_t per = first.size();
  for (std::size_t b = begin; b < end; ++b) {
    const Image& img = corpus[static_cast<std::size_t>(indices[b])].image;
    for (std::int64_t i = 0; i < per; ++i)
      batch[static_cast<std::int64_t>(b - begin) * per + i] = static_cast<T>(img[i]);
  }
  return batch;
}

template <typename T>
double evaluate_accuracy(const Cnn<T>& model, const std::vector<LabeledImage>& corpus,
                         int batch_size = 64) {
  if (corpus.empty()) return 0.0;
  std::vector<int> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  int correct = 0;
  for (std::size_t at = 0; at < corpus.size(); at += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(corpus.size(), at + static_cast<std::size_t>(batch_size));
    Array<T> batch = stack_batch<T>(corpus, order, at, end);
    Array<T> logits = model.forward_no_tape(batch);
    for (std::size_t b = at; b < end; ++b)
      if (kernels::argmax_row(logits, static_cast<int>(b - at)) == corpus[b].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

// Deterministic minibatch training; the last val_fraction of the corpus is
// held out. Throws TrainError with the epoch index if the loss goes NaN.
template <typename T>
TrainReport train(Cnn<T>& model, const std::vector<LabeledImage>& corpus,
                  const TrainConfig& config) {
  if (corpus.empty()) throw TrainError("train: empty corpus");
  if (config.epochs < 1 || config.batch_size < 1)
    throw ConfigError("train: epochs and batch_size must be positive");
  if (config.learning_rate < 0) throw ConfigError("train: learning rate must be >= 0");
  if (config.label_smoothing < 0 || config.label_smoothing >= 1)
    throw ConfigError("train: label_smoothing must be in [0,1)");
  if (config.optimizer != "adam" && config.optimizer != "sgd")
    throw ConfigError("train: unknown optimizer \"" + config.optimizer + "\"");

  std::size_t n_val = static_cast<std::size_t>(config.val_fraction * corpus.size());
  std::size_t n_train = corpus.size() - n_val;
  std::vector<LabeledImage> val_set(corpus.begin() + static_cast<std::ptrdiff_t>(n_train),
                                    corpus.end());

  std::vector<AdamState<T>> adam(model.parameters().size());
  TrainReport report;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = static_cast<int>(i);
    Rng rng(mix_seed(config.seed, 0x7e, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n_train; i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0;
    std::int64_t seen = 0;
    int correct = 0;
    for (std::size_t at = 0; at < n_train; at += static_cast<std::size_t>(config.batch_size)) {
      std::size_t end = std::min(n_train, at + static_cast<std::size_t>(config.batch_size));
      Array<T> batch = stack_batch<T>(corpus, order, at, end);
      std::vector<int> labels;
      for (std::size_t b = at; b < end; ++b)
        labels.push_back(corpus[static_cast<std::size_t>(order[b])].label);

      Tape<T> tape;
      std::vector<Tensor<T>> leaves;
      Tensor<T> logits = model.forward(tape, tape.leaf(batch), &leaves);
      Tensor<T> loss = softmax_cross_entropy(logits, labels, config.label_smoothing);
      double loss_v = static_cast<double>(loss.value()[0]);
      if (std::isnan(loss_v))
        throw TrainError("train: loss diverged (nan) at epoch " + std::to_string(epoch));
      tape.backward(loss);

      auto params = model.parameters();
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (config.optimizer == "adam")
          adam[p].step(*params[p], leaves[p].grad(), config.learning_rate);
        else
          sgd_step(*params[p], leaves[p].grad(), config.learning_rate);
      }

      for (std::size_t b = at; b < end; ++b)
        if (kernels::argmax_row(logits.value(), static_cast<int>(b - at)) ==
            labels[b - at]) ++correct;
      loss_sum += loss_v * static_cast<double>(end - at);
      seen += static_cast<std::int64_t>(end - at);
    }

    EpochStats stats;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    stats.val_acc = val_set.empty() ? 0.0 : evaluate_accuracy(model, val_set);
    report.epochs.push_back(stats);
  }
  report.final_val_acc = report.epochs.empty() ? 0.0 : report.epochs.back().val_acc;
  return report;
}

}  // namespace steadv
