// Synthetic prostate-phantom cohort.
//
// Each slice is a 3-channel image in [0,1] plus a 4-class one-hot label map
// (0 background, 1 peripheral zone, 2 transitional zone, 3 tumor). A subject
// is an ellipse ("gland") with an inner core labeled TZ and the surrounding
// ring labeled PZ. Positive subjects carry 1-2 amorphous tumor blobs inside
// the gland; the blob contrast fades linearly across a band of configurable
// width around the blob boundary while the label stays hard, so the image
// under-determines the exact contour. Channel contrasts imitate the tumor
// appearance on T2w (mildly dark), ADC (strongly dark) and b1500 (bright).
//
// Everything is a pure function of (seed, subject, slice).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

struct PhantomSample {
  Tensor image;  // [3,H,W]
  Tensor label;  // [4,H,W] one-hot
  int subject_id = -1;
  int slice_id = -1;
  bool has_lesion = false;
};

struct CohortSpec {
  int n_subjects_pos = 55;
  int slices_per_pos = 4;
  int n_subjects_neg = 97;
  int slices_per_neg = 5;
  int image_size = 64;
  double ambiguity_width = 3.0;    // px, contrast fade band around the lesion edge
  double lesion_frac_min = 0.008;  // target lesion area as a fraction of all pixels
  double lesion_frac_max = 0.045;
  std::uint64_t seed = 0;

  void validate() const {
    ADVSEG_CHECK(n_subjects_pos >= 1 && n_subjects_neg >= 1, ConfigError,
                 "CohortSpec: subject counts must be >= 1");
    ADVSEG_CHECK(slices_per_pos >= 1 && slices_per_neg >= 1, ConfigError,
                 "CohortSpec: slice counts must be >= 1");
    ADVSEG_CHECK(image_size >= 16, ConfigError, "CohortSpec: image_size must be >= 16");
    ADVSEG_CHECK(ambiguity_width >= 0.0, ConfigError, "CohortSpec: negative ambiguity_width");
    ADVSEG_CHECK(lesion_frac_min > 0.0 && lesion_frac_max >= lesion_frac_min &&
                     lesion_frac_max < 0.2,
                 ConfigError, "CohortSpec: lesion fraction range invalid");
  }
};

struct Cohort {
  std::vector<PhantomSample> pos_slices;  // grouped by subject, slice order
  std::vector<PhantomSample> neg_slices;
  int image_size = 0;
};

namespace detail {

struct GlandShape {
  double cx, cy;        // center, px
  double ax, ay;        // outer semi-axes, px
  double cos_t, sin_t;  // orientation
  double core_scale;    // TZ core as a fraction of the outer ellipse

  // normalized elliptical radius: <= 1 inside the gland
  double radius(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = dx * cos_t + dy * sin_t;
    const double v = -dx * sin_t + dy * cos_t;
    const double ru = u / ax, rv = v / ay;
    return std::sqrt(ru * ru + rv * rv);
  }
};

struct TumorBlob {
  double cx, cy;
  double r0;                       // base radius, px
  std::array<double, 3> amp;      // harmonics 2..4
  std::array<double, 3> phase;

  double boundary(double angle) const {
    double r = 1.0;
    for (int k = 0; k < 3; ++k) r += amp[k] * std::cos((k + 2) * angle + phase[k]);
    return r0 * r;
  }
  double max_radius() const {
    return r0 * (1.0 + std::fabs(amp[0]) + std::fabs(amp[1]) + std::fabs(amp[2]));
  }
  // signed distance to the boundary along the ray from the center (>0 inside)
  double signed_depth(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double rho = std::sqrt(dx * dx + dy * dy);
    return boundary(std::atan2(dy, dx)) - rho;
  }
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline GlandShape draw_gland(std::mt19937_64& rng, int hw) {
  GlandShape g;
  const double h = static_cast<double>(hw);
  g.cx = h * uniform(rng, 0.44, 0.56);
  g.cy = h * uniform(rng, 0.44, 0.56);
  g.ax = h * uniform(rng, 0.26, 0.34);
  g.ay = h * uniform(rng, 0.22, 0.30);
  const double theta = uniform(rng, 0.0, 3.14159265358979323846);
  g.cos_t = std::cos(theta);
  g.sin_t = std::sin(theta);
  g.core_scale = uniform(rng, 0.45, 0.62);
  return g;
}

}  // namespace detail

// Deterministic in (subject_seed, slice_index). Lesion placement retries up
// to 100 centers per size, then shrinks the blob and tries again, so it
// always terminates with a valid sample.
inline PhantomSample generate_phantom(std::uint64_t subject_seed, int slice_index,
                                      const CohortSpec& spec, bool with_lesion) {
  spec.validate();
  const int hw = spec.image_size;
  const double h = static_cast<double>(hw);

  std::mt19937_64 subject_rng(subject_seed);
  detail::GlandShape gland = detail::draw_gland(subject_rng, hw);
  // per-subject tissue intensity jitter, per channel
  double base_bg[3], base_pz[3], base_tz[3];
  const double bg0[3] = {0.25, 0.35, 0.15};
  const double pz0[3] = {0.65, 0.60, 0.30};
  const double tz0[3] = {0.45, 0.55, 0.32};
  for (int c = 0; c < 3; ++c) {
    base_bg[c] = bg0[c] + detail::uniform(subject_rng, -0.03, 0.03);
    base_pz[c] = pz0[c] + detail::uniform(subject_rng, -0.03, 0.03);
    base_tz[c] = tz0[c] + detail::uniform(subject_rng, -0.03, 0.03);
  }

  std::mt19937_64 rng(mix_seed(subject_seed, 0x51ECEull + static_cast<std::uint64_t>(slice_index)));
  // slight per-slice gland variation
  gland.ax *= detail::uniform(rng, 0.95, 1.05);
  gland.ay *= detail::uniform(rng, 0.95, 1.05);

  // low-frequency texture waves, per slice
  double tex_fx[3], tex_fy[3], tex_ph[3], tex_amp[3];
  for (int k = 0; k < 3; ++k) {
    tex_fx[k] = detail::uniform(rng, 0.5, 3.0);
    tex_fy[k] = detail::uniform(rng, 0.5, 3.0);
    tex_ph[k] = detail::uniform(rng, 0.0, 6.2831853);
    tex_amp[k] = detail::uniform(rng, 0.01, 0.035);
  }

  std::vector<detail::TumorBlob> blobs;
  if (with_lesion) {
    const int n_blobs = detail::uniform(rng, 0.0, 1.0) < 0.4 ? 2 : 1;
    const double total_frac =
        detail::uniform(rng, spec.lesion_frac_min, spec.lesion_frac_max);
    const double min_axis = std::min(gland.ax, gland.ay);
    for (int bi = 0; bi < n_blobs; ++bi) {
      detail::TumorBlob blob;
      double norm = 1.0;
      {
        double s2 = 0.0;
        for (int k = 0; k < 3; ++k) {
          blob.amp[k] = detail::uniform(rng, 0.0, 0.25 / (k + 1));
          blob.phase[k] = detail::uniform(rng, 0.0, 6.2831853);
          s2 += blob.amp[k] * blob.amp[k];
        }
        norm = std::sqrt(1.0 + 0.5 * s2);  // keeps the enclosed area near pi*r0^2
      }
      double r_target = std::sqrt(total_frac / n_blobs * h * h / 3.14159265358979323846) / norm;
      bool placed = false;
      while (!placed) {
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
          const double ang = detail::uniform(rng, 0.0, 6.2831853);
          const double rad = std::sqrt(detail::uniform(rng, 0.0, 1.0)) * 0.6;
          // candidate center in gland coordinates
          const double u = rad * std::cos(ang) * gland.ax;
          const double v = rad * std::sin(ang) * gland.ay;
          blob.cx = gland.cx + u * gland.cos_t - v * gland.sin_t;
          blob.cy = gland.cy + u * gland.sin_t + v * gland.cos_t;
          blob.r0 = r_target;
          const double margin = blob.max_radius() + 1.0;
          // blob (plus margin) must stay inside the gland
          if (gland.radius(blob.cx, blob.cy) + margin / min_axis > 0.98) continue;
          bool overlaps = false;
          for (const auto& other : blobs) {
            const double d = std::hypot(blob.cx - other.cx, blob.cy - other.cy);
            if (d < blob.max_radius() + other.max_radius() + 2.0) overlaps = true;
          }
          if (!overlaps) placed = true;
        }
        if (!placed) r_target *= 0.85;  // shrink and retry, never fail silently
      }
      blobs.push_back(blob);
    }
  }

  PhantomSample sample;
  sample.subject_id = -1;
  sample.slice_id = slice_index;
  sample.image = Tensor::zeros({3, hw, hw});
  sample.label = Tensor::zeros({4, hw, hw});
  float* img = sample.image.data();
  float* lbl = sample.label.data();
  const std::int64_t plane = static_cast<std::int64_t>(hw) * hw;

  std::uniform_real_distribution<double> noise(-0.018, 0.018);
  const double w_band = std::max(spec.ambiguity_width, 1e-6);
  std::int64_t tumor_px = 0;
  for (int y = 0; y < hw; ++y) {
    for (int x = 0; x < hw; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * hw + x;
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double r_out = gland.radius(fx, fy);
      const double r_in = r_out / gland.core_scale;

      int cls = 0;
      if (r_out <= 1.0) cls = r_in <= 1.0 ? 2 : 1;
      // lesion label is hard at the nominal boundary
      double alpha = 0.0;
      if (!blobs.empty() && r_out <= 1.0) {
        for (const auto& blob : blobs) {
          const double depth = blob.signed_depth(fx, fy);
          alpha = std::max(alpha, std::clamp(0.5 + depth / w_band, 0.0, 1.0));
          if (depth >= 0.0) cls = 3;
        }
      }
      if (cls == 3) ++tumor_px;
      lbl[cls * plane + p] = 1.0f;

      const double* base = r_out > 1.0 ? base_bg : (r_in <= 1.0 ? base_tz : base_pz);
      double tex = 0.0;
      for (int k = 0; k < 3; ++k)
        tex += tex_amp[k] * std::sin(6.2831853 * (tex_fx[k] * fx + tex_fy[k] * fy) / h + tex_ph[k]);
      const double lesion_delta[3] = {-0.18 * alpha, -0.35 * alpha, 0.45 * alpha};
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + tex + lesion_delta[c] + noise(rng);
        img[c * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  if (with_lesion && tumor_px == 0) {
    // degenerate config rasterized an empty blob: keep the invariant by
    // marking the blob center
    const int bx = std::clamp(static_cast<int>(std::lround(blobs[0].cx)), 0, hw - 1);
    const int by = std::clamp(static_cast<int>(std::lround(blobs[0].cy)), 0, hw - 1);
    const std::int64_t p = static_cast<std::int64_t>(by) * hw + bx;
    for (int c = 0; c < 4; ++c) lbl[c * plane + p] = 0.0f;
    lbl[3 * plane + p] = 1.0f;
    tumor_px = 1;
  }
  sample.has_lesion = tumor_px > 0;
  return sample;
}

inline Cohort generate_cohort(const CohortSpec& spec) {
  spec.validate();
  Cohort cohort;
  cohort.image_size = spec.image_size;
  for (int s = 0; s < spec.n_subjects_pos; ++s) {
    const std::uint64_t subject_seed = mix_seed(spec.seed, static_cast<std::uint64_t>(s));
    for (int t = 0; t < spec.slices_per_pos; ++t) {
      auto sample = generate_phantom(subject_seed, t, spec, true);
      sample.subject_id = s;
      cohort.pos_slices.push_back(std::move(sample));
    }
  }
  for (int s = 0; s < spec.n_subjects_neg; ++s) {
    const int subject_id = spec.n_subjects_pos + s;
    const std::uint64_t subject_seed = mix_seed(spec.seed, static_cast<std::uint64_t>(subject_id));
    for (int t = 0; t < spec.slices_per_neg; ++t) {
      auto sample = generate_phantom(subject_seed, t, spec, false);
      sample.subject_id = subject_id;
      cohort.neg_slices.push_back(std::move(sample));
    }
  }
  return cohort;
}

}  // namespace advseg
