// Segmentor (U-Net encoder/decoder with skip connections) and discriminator.
//
// Widths follow the 64..1024 ladder scaled by ModelConfig::width_scale.
// Every block is conv -> instance norm -> activation; the norm is skipped on
// the first block of each network and on the output heads. Encoder and
// discriminator blocks use LeakyReLU, decoder blocks plain ReLU. Decoder
// levels upsample 2x (nearest neighbor), concatenate the matching encoder
// feature map and apply a 3x3 block; a 1x1 projection plus channel softmax
// produces per-pixel class probabilities. The discriminator stacks stride-2
// blocks (dropping trailing ones until the pre-pool map stays >= 2x2),
// global-average-pools and maps to one sigmoid logit.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advseg/nn_ops.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

struct ModelConfig {
  int image_size = 64;        // square input, must divide by 16
  int in_channels = 3;
  int n_classes = 4;
  double width_scale = 0.125; // multiplies the 64..1024 width ladder
  double leaky_slope = 0.2;
  std::uint64_t seed = 0;

  int scaled(int paper_width) const {
    return static_cast<int>(std::llround(width_scale * paper_width));
  }

  void validate() const {
    ADVSEG_CHECK(image_size >= 16 && image_size % 16 == 0, ConfigError,
                 "ModelConfig: image_size ", image_size, " must be a positive multiple of 16");
    ADVSEG_CHECK(in_channels >= 1, ConfigError, "ModelConfig: in_channels must be >= 1");
    ADVSEG_CHECK(n_classes >= 2, ConfigError, "ModelConfig: n_classes must be >= 2");
    ADVSEG_CHECK(scaled(64) >= 4, ConfigError, "ModelConfig: width_scale ", width_scale,
                 " makes the narrowest block thinner than 4 channels");
    ADVSEG_CHECK(leaky_slope >= 0.0 && leaky_slope < 1.0, ConfigError,
                 "ModelConfig: leaky_slope must be in [0,1)");
  }
};

constexpr double kInstanceNormEps = 1e-5;

template <typename T>
struct ConvBlockT {
  TensorT<T> w, b;           // convolution
  TensorT<T> gamma, beta;    // instance norm affine params (undefined if !has_norm)
  int stride = 1;
  int pad = 1;
  bool has_norm = true;
  bool leaky = true;
};

namespace detail {

// He-normal conv init; the leaky variant uses gain 2/(1+slope^2).
template <typename T>
TensorT<T> he_conv_weight(int cout, int cin, int k, bool leaky, double slope,
                          std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(cin) * k * k;
  const double gain = leaky ? 2.0 / (1.0 + slope * slope) : 2.0;
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
  std::vector<T> v(static_cast<std::size_t>(cout) * cin * k * k);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return TensorT<T>::from({cout, cin, k, k}, std::move(v), true);
}

template <typename T>
ConvBlockT<T> make_block(int cin, int cout, int k, int stride, bool has_norm, bool leaky,
                         double slope, std::mt19937_64& rng) {
  ConvBlockT<T> blk;
  blk.w = he_conv_weight<T>(cout, cin, k, leaky, slope, rng);
  blk.b = TensorT<T>::zeros({cout}, true);
  blk.stride = stride;
  blk.pad = k == 3 ? 1 : 0;
  blk.has_norm = has_norm;
  blk.leaky = leaky;
  if (has_norm) {
    blk.gamma = TensorT<T>::full({cout}, T(1), true);
    blk.beta = TensorT<T>::zeros({cout}, true);
  }
  return blk;
}

template <typename T>
TensorT<T> block_forward(TapeT<T>* tape, const ConvBlockT<T>& blk, const TensorT<T>& x,
                         T slope) {
  auto y = conv2d(tape, x, blk.w, blk.b, blk.stride, blk.pad);
  if (blk.has_norm) y = instance_norm(tape, y, blk.gamma, blk.beta, T(kInstanceNormEps));
  return blk.leaky ? leaky_relu(tape, y, slope) : relu(tape, y);
}

template <typename T>
void visit_block(ConvBlockT<T>& blk, const std::string& prefix,
                 const std::function<void(const std::string&, TensorT<T>&)>& fn) {
  fn(prefix + ".w", blk.w);
  fn(prefix + ".b", blk.b);
  if (blk.has_norm) {
    fn(prefix + ".gamma", blk.gamma);
    fn(prefix + ".beta", blk.beta);
  }
}

}  // namespace detail

template <typename T>
using NamedParams = std::vector<std::pair<std::string, TensorT<T>>>;

// ---------------------------------------------------------------------------
// Segmentor
// ---------------------------------------------------------------------------

template <typename T>
class SegmentorT {
 public:
  static constexpr int kLevels = 4;  // pool/upsample stages

  explicit SegmentorT(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x5347u));  // segmentor stream
    const double slope = cfg.leaky_slope;
    const auto enc_w = encoder_widths();
    int cin = cfg.in_channels;
    int size = cfg.image_size;
    for (std::size_t i = 0; i < enc_w.size(); ++i) {
      const bool first = i == 0;
      // instance norm needs at least two spatial elements; the bottleneck
      // plane degenerates to 1x1 at 16 px inputs
      const bool norm = !first && size >= 2;
      enc_.push_back(detail::make_block<T>(cin, enc_w[i], 3, 1, norm, true, slope, rng));
      cin = enc_w[i];
      if (i + 1 < enc_w.size()) size /= 2;
    }
    const auto dec_w = decoder_widths();
    for (std::size_t i = 0; i < dec_w.size(); ++i) {
      // input: upsampled previous map + skip from the matching encoder level
      const int skip = enc_w[enc_w.size() - 2 - i];
      const int prev = i == 0 ? enc_w.back() : dec_w[i - 1];
      dec_.push_back(detail::make_block<T>(prev + skip, dec_w[i], 3, 1, true, false, slope, rng));
    }
    proj_w_ = detail::he_conv_weight<T>(cfg.n_classes, dec_w.back(), 1, false, slope, rng);
    proj_b_ = TensorT<T>::zeros({cfg.n_classes}, true);
    name_params();
  }

  std::vector<int> encoder_widths() const {
    return {cfg_.scaled(64), cfg_.scaled(128), cfg_.scaled(256), cfg_.scaled(512),
            cfg_.scaled(1024)};
  }
  std::vector<int> decoder_widths() const {
    return {cfg_.scaled(512), cfg_.scaled(256), cfg_.scaled(128), cfg_.scaled(64)};
  }

  // x: [B, in_channels, H, W] with H = W = image_size -> [B, n_classes, H, W]
  TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x) const {
    ADVSEG_CHECK(x.rank() == 4 && x.dim(1) == cfg_.in_channels && x.dim(2) == cfg_.image_size &&
                     x.dim(3) == cfg_.image_size,
                 ShapeError, "segmentor: expected [B,", cfg_.in_channels, ",", cfg_.image_size,
                 ",", cfg_.image_size, "], got ", shape_str(x.shape()));
    const T slope = static_cast<T>(cfg_.leaky_slope);
    std::vector<TensorT<T>> skips;
    TensorT<T> h = x;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      h = detail::block_forward(tape, enc_[i], h, slope);
      if (i + 1 < enc_.size()) {
        skips.push_back(h);
        h = maxpool2(tape, h);
      }
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      h = upsample_nn2(tape, h);
      h = concat_channels(tape, h, skips[skips.size() - 1 - i]);
      h = detail::block_forward(tape, dec_[i], h, slope);
    }
    auto logits = conv2d(tape, h, proj_w_, proj_b_, 1, 0);
    return softmax_channels(tape, logits);
  }

  NamedParams<T> parameters() {
    NamedParams<T> out;
    for_each_param([&](const std::string& n, TensorT<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  void for_each_param(const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    for (std::size_t i = 0; i < enc_.size(); ++i)
      detail::visit_block(enc_[i], "enc" + std::to_string(i + 1), fn);
    for (std::size_t i = 0; i < dec_.size(); ++i)
      detail::visit_block(dec_[i], "dec" + std::to_string(i + 1), fn);
    fn("proj.w", proj_w_);
    fn("proj.b", proj_b_);
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  void name_params() {
    for_each_param([](const std::string& n, TensorT<T>& t) { t.set_name("S." + n); });
  }

  ModelConfig cfg_;
  std::vector<ConvBlockT<T>> enc_;
  std::vector<ConvBlockT<T>> dec_;
  TensorT<T> proj_w_, proj_b_;
};

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

template <typename T>
class DiscriminatorT {
 public:
  explicit DiscriminatorT(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x4453u));  // discriminator stream
    const double slope = cfg.leaky_slope;
    const std::vector<int> ladder = {cfg.scaled(64),  cfg.scaled(128), cfg.scaled(256),
                                     cfg.scaled(512), cfg.scaled(512), cfg.scaled(1024)};
    // Keep stride-2 blocks while the pre-pool map stays at least 2x2.
    int size = cfg.image_size;
    int depth = 0;
    while (depth < static_cast<int>(ladder.size())) {
      const int next = (size - 1) / 2 + 1;  // ceil-halving of a 3x3 stride-2 block
      if (next < 2) break;
      size = next;
      ++depth;
    }
    prepool_size_ = size;
    int cin = cfg.in_channels + cfg.n_classes;
    for (int i = 0; i < depth; ++i) {
      blocks_.push_back(detail::make_block<T>(cin, ladder[static_cast<std::size_t>(i)], 3, 2,
                                              i != 0, true, slope, rng));
      cin = ladder[static_cast<std::size_t>(i)];
    }
    // small head init keeps the untrained score near 0.5
    std::normal_distribution<double> dist(0.0, 0.5 / std::sqrt(static_cast<double>(cin)));
    std::vector<T> dw(static_cast<std::size_t>(cin));
    for (auto& v : dw) v = static_cast<T>(dist(rng));
    dense_w_ = TensorT<T>::from({cin, 1}, std::move(dw), true);
    dense_b_ = TensorT<T>::zeros({1, 1}, true);  // broadcasts over the batch axis
    name_params();
  }

  std::vector<int> block_widths() const {
    std::vector<int> w;
    for (const auto& b : blocks_) w.push_back(b.w.dim(0));
    return w;
  }
  int n_blocks() const { return static_cast<int>(blocks_.size()); }
  int prepool_size() const { return prepool_size_; }

  // label: [B, n_classes, H, W], image: [B, in_channels, H, W] -> [B,1] in (0,1)
  TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& label, const TensorT<T>& image) const {
    ADVSEG_CHECK(label.rank() == 4 && label.dim(1) == cfg_.n_classes, ShapeError,
                 "discriminator: label must be [B,", cfg_.n_classes, ",H,W], got ",
                 shape_str(label.shape()));
    ADVSEG_CHECK(image.rank() == 4 && image.dim(1) == cfg_.in_channels, ShapeError,
                 "discriminator: image must be [B,", cfg_.in_channels, ",H,W], got ",
                 shape_str(image.shape()));
    ADVSEG_CHECK(label.dim(0) == image.dim(0) && label.dim(2) == image.dim(2) &&
                     label.dim(3) == image.dim(3),
                 ShapeError, "discriminator: label/image shape mismatch");
    ADVSEG_CHECK(image.dim(2) == cfg_.image_size && image.dim(3) == cfg_.image_size, ShapeError,
                 "discriminator: expected ", cfg_.image_size, "x", cfg_.image_size, " input");
    const T slope = static_cast<T>(cfg_.leaky_slope);
    TensorT<T> h = concat_channels(tape, image, label);  // modalities first, then classes
    for (const auto& blk : blocks_) h = detail::block_forward(tape, blk, h, slope);
    auto pooled = global_avg_pool(tape, h);                    // [B, C]
    auto logit = matmul(tape, pooled, dense_w_);               // [B, 1]
    logit = add(tape, logit, dense_b_);
    return sigmoid(tape, logit);
  }

  NamedParams<T> parameters() {
    NamedParams<T> out;
    for_each_param([&](const std::string& n, TensorT<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  void for_each_param(const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      detail::visit_block(blocks_[i], "block" + std::to_string(i + 1), fn);
    fn("dense.w", dense_w_);
    fn("dense.b", dense_b_);
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  void name_params() {
    for_each_param([](const std::string& n, TensorT<T>& t) { t.set_name("D." + n); });
  }

  ModelConfig cfg_;
  std::vector<ConvBlockT<T>> blocks_;
  TensorT<T> dense_w_, dense_b_;
  int prepool_size_ = 0;
};

using Segmentor = SegmentorT<float>;
using Discriminator = DiscriminatorT<float>;

// RAII guard that detaches a parameter set from gradient flow.
template <typename T>
class FreezeGuardT {
 public:
  explicit FreezeGuardT(NamedParams<T>& params) : params_(params) {
    for (auto& [name, t] : params_) t.set_requires_grad(false);
  }
  ~FreezeGuardT() {
    for (auto& [name, t] : params_) t.set_requires_grad(true);
  }
  FreezeGuardT(const FreezeGuardT&) = delete;
  FreezeGuardT& operator=(const FreezeGuardT&) = delete;

 private:
  NamedParams<T>& params_;
};

using FreezeGuard = FreezeGuardT<float>;

}  // namespace advseg
