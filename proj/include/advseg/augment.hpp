// Training-time augmentation (rotation, crop shift, mirroring) and the
// importance-sampled batch composition.
//
// Rotation and shift resample through the inverse map about the image
// center: bilinear for image channels, nearest neighbor for labels (copying
// a one-hot vector keeps the map exactly one-hot). Out-of-bounds pixels fill
// with image 0 and the background class. Mirroring is an exact column flip
// applied before the resampling, so a mirror-only draw is an involution.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "advseg/phantom.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

struct AugmentSpec {
  double rot_range = 3.14159265358979323846 / 8.0;  // radians, uniform +-range
  double shift_frac = 50.0 / 416.0;                 // half-range as a fraction of the side
  double mirror_prob = 0.5;

  void validate() const {
    ADVSEG_CHECK(rot_range >= 0.0 && rot_range <= 3.14159265358979323846 / 2.0, ConfigError,
                 "AugmentSpec: rot_range outside [0, pi/2]");
    ADVSEG_CHECK(shift_frac >= 0.0 && shift_frac < 0.5, ConfigError,
                 "AugmentSpec: shift_frac outside [0, 0.5)");
    ADVSEG_CHECK(mirror_prob >= 0.0 && mirror_prob <= 1.0, ConfigError,
                 "AugmentSpec: mirror_prob outside [0, 1]");
  }
};

struct AugmentDraw {
  double phi = 0.0;
  double dx = 0.0;
  double dy = 0.0;
  bool mirror = false;
};

inline AugmentDraw draw_augment(const AugmentSpec& spec, int image_size, std::mt19937_64& rng) {
  spec.validate();
  AugmentDraw d;
  const double s = std::round(spec.shift_frac * image_size);
  d.phi = std::uniform_real_distribution<double>(-spec.rot_range, spec.rot_range)(rng);
  d.dx = std::uniform_real_distribution<double>(-s, s)(rng);
  d.dy = std::uniform_real_distribution<double>(-s, s)(rng);
  d.mirror = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < spec.mirror_prob;
  return d;
}

inline PhantomSample apply_augment(const PhantomSample& in, const AugmentDraw& d) {
  const int hw = in.image.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(hw) * hw;
  PhantomSample out;
  out.subject_id = in.subject_id;
  out.slice_id = in.slice_id;
  out.image = Tensor::zeros({3, hw, hw});
  out.label = Tensor::zeros({4, hw, hw});

  const float* src_img = in.image.data();
  const float* src_lbl = in.label.data();
  float* dst_img = out.image.data();
  float* dst_lbl = out.label.data();

  const double c = (hw - 1) / 2.0;
  const double cos_p = std::cos(-d.phi);
  const double sin_p = std::sin(-d.phi);

  std::int64_t tumor_px = 0;
  for (int y = 0; y < hw; ++y) {
    for (int x = 0; x < hw; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * hw + x;
      // inverse map: undo shift, undo rotation, then the mirror flip
      const double ux = static_cast<double>(x) - c - d.dx;
      const double uy = static_cast<double>(y) - c - d.dy;
      double qx = ux * cos_p - uy * sin_p + c;
      const double qy = ux * sin_p + uy * cos_p + c;
      if (d.mirror) qx = static_cast<double>(hw - 1) - qx;

      // bilinear image sample, zero fill outside
      const int x0 = static_cast<int>(std::floor(qx));
      const int y0 = static_cast<int>(std::floor(qy));
      const double fx = qx - x0, fy = qy - y0;
      for (int ch = 0; ch < 3; ++ch) {
        const float* s = src_img + ch * plane;
        auto tap = [&](int yy, int xx) -> double {
          if (xx < 0 || xx >= hw || yy < 0 || yy >= hw) return 0.0;
          return static_cast<double>(s[static_cast<std::int64_t>(yy) * hw + xx]);
        };
        const double v = (1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1)) +
                         fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1));
        dst_img[ch * plane + p] = static_cast<float>(v);
      }

      // nearest-neighbor label; background outside the frame
      const int xn = static_cast<int>(std::floor(qx + 0.5));
      const int yn = static_cast<int>(std::floor(qy + 0.5));
      int cls = 0;
      if (xn >= 0 && xn < hw && yn >= 0 && yn < hw) {
        const std::int64_t q = static_cast<std::int64_t>(yn) * hw + xn;
        for (int ci = 1; ci < 4; ++ci)
          if (src_lbl[ci * plane + q] == 1.0f) cls = ci;
      }
      dst_lbl[cls * plane + p] = 1.0f;
      if (cls == 3) ++tumor_px;
    }
  }
  out.has_lesion = tumor_px > 0;
  return out;
}

inline PhantomSample augment(const PhantomSample& in, const AugmentSpec& spec,
                             std::mt19937_64& rng) {
  return apply_augment(in, draw_augment(spec, in.image.dim(1), rng));
}

// ---------------------------------------------------------------------------
// Importance-sampled batches: each slot picks the positive pool with
// probability p_pos, then a uniform slice with replacement.
// ---------------------------------------------------------------------------

class BatchSampler {
 public:
  BatchSampler(const std::vector<PhantomSample>* pos, const std::vector<PhantomSample>* neg,
               int batch_size, double p_pos, const AugmentSpec& aug, bool augment_enabled,
               std::uint64_t seed)
      : pos_(pos),
        neg_(neg),
        batch_size_(batch_size),
        p_pos_(p_pos),
        aug_(aug),
        augment_enabled_(augment_enabled),
        rng_(seed) {
    ADVSEG_CHECK(batch_size_ >= 1, ConfigError, "BatchSampler: batch_size must be >= 1");
    ADVSEG_CHECK(p_pos_ >= 0.0 && p_pos_ <= 1.0, ConfigError,
                 "BatchSampler: p_pos outside [0,1]");
  }

  std::vector<PhantomSample> sample_batch() {
    std::vector<PhantomSample> batch;
    batch.reserve(static_cast<std::size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
      const bool take_pos =
          std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p_pos_;
      const auto* pool = take_pos ? pos_ : neg_;
      ADVSEG_CHECK(pool && !pool->empty(), ContractError, "BatchSampler: ",
                   take_pos ? "positive" : "negative", " pool is empty");
      const std::size_t idx =
          std::uniform_int_distribution<std::size_t>(0, pool->size() - 1)(rng_);
      const PhantomSample& s = (*pool)[idx];
      batch.push_back(augment_enabled_ ? augment(s, aug_, rng_) : s);
    }
    return batch;
  }

 private:
  const std::vector<PhantomSample>* pos_;
  const std::vector<PhantomSample>* neg_;
  int batch_size_;
  double p_pos_;
  AugmentSpec aug_;
  bool augment_enabled_;
  std::mt19937_64 rng_;
};

// Stacks a batch into [B,3,H,W] image and [B,4,H,W] one-hot label tensors.
inline std::pair<Tensor, Tensor> make_batch_tensors(const std::vector<PhantomSample>& batch) {
  ADVSEG_CHECK(!batch.empty(), ContractError, "make_batch_tensors: empty batch");
  const int b = static_cast<int>(batch.size());
  const int hw = batch[0].image.dim(1);
  auto x = Tensor::zeros({b, 3, hw, hw});
  auto y = Tensor::zeros({b, 4, hw, hw});
  const std::int64_t ximg = 3 * static_cast<std::int64_t>(hw) * hw;
  const std::int64_t ylbl = 4 * static_cast<std::int64_t>(hw) * hw;
  for (int i = 0; i < b; ++i) {
    std::copy(batch[i].image.data(), batch[i].image.data() + ximg, x.data() + i * ximg);
    std::copy(batch[i].label.data(), batch[i].label.data() + ylbl, y.data() + i * ylbl);
  }
  return {x, y};
}

}  // namespace advseg
