// Training objectives: per-pixel multi-class cross-entropy, the adversarial
// discriminator/segmentor pair, and their weighted hybrid. Each returns a
// scalar tensor attached to the tape plus a detached float for logging.
// Log arguments are clamped at kLogEps to keep early adversarial steps finite.
#pragma once

#include <cmath>

#include "advseg/tensor.hpp"

namespace advseg {

constexpr double kLogEps = 1e-7;

template <typename T>
struct LossValueT {
  TensorT<T> value;    // scalar on the active tape
  double logged = 0.0; // same number, detached
};

using LossValue = LossValueT<float>;

namespace detail {

template <typename T>
LossValueT<T> finish_loss(TensorT<T> value) {
  ADVSEG_CHECK(std::isfinite(static_cast<double>(value.value())), NumericError,
               "loss evaluated to a non-finite value");
  return {value, static_cast<double>(value.value())};
}

template <typename T>
void check_probability_map(const TensorT<T>& probs, const TensorT<T>& onehot) {
  ADVSEG_CHECK(probs.rank() == 4 && onehot.rank() == 4 && probs.shape() == onehot.shape(),
               ShapeError, "loss: probs ", shape_str(probs.shape()), " vs onehot ",
               shape_str(onehot.shape()));
  const int B = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const T* pd = probs.data();
  const T* od = onehot.data();
  for (int b = 0; b < B; ++b)
    for (std::int64_t p = 0; p < plane; ++p) {
      double psum = 0.0, osum = 0.0;
      for (int c = 0; c < C; ++c) {
        const std::int64_t i = (static_cast<std::int64_t>(b) * C + c) * plane + p;
        psum += static_cast<double>(pd[i]);
        const double o = static_cast<double>(od[i]);
        ADVSEG_CHECK(o == 0.0 || o == 1.0, ContractError,
                     "loss: onehot entries must be exactly 0 or 1");
        osum += o;
      }
      ADVSEG_CHECK(std::fabs(psum - 1.0) <= 1e-4, ContractError,
                   "loss: probability map not normalized (pixel sum ", psum, ")");
      ADVSEG_CHECK(osum == 1.0, ContractError, "loss: onehot pixel must have exactly one 1");
    }
}

template <typename T>
void check_unit_interval(const TensorT<T>& d, const char* what) {
  for (std::int64_t i = 0; i < d.numel(); ++i)
    ADVSEG_CHECK(d.data()[i] >= T(0) && d.data()[i] <= T(1), ContractError, "loss: ", what,
                 " value ", d.data()[i], " outside [0,1]");
}

}  // namespace detail

// Mean over instances and pixels of -onehot . log(probs).
template <typename T>
LossValueT<T> mce_loss(TapeT<T>* tape, const TensorT<T>& probs, const TensorT<T>& onehot) {
  detail::check_probability_map(probs, onehot);
  const T n = static_cast<T>(probs.dim(0)) * static_cast<T>(probs.dim(2)) *
              static_cast<T>(probs.dim(3));
  auto logp = log(tape, clamp(tape, probs, static_cast<T>(kLogEps), T(1)));
  auto picked = reduce_sum_all(tape, mul(tape, onehot, logp));
  return detail::finish_loss(scale(tape, picked, -T(1) / n));
}

// -(1/N) sum(log d_real + log(1 - d_fake)); inputs in [0,1].
template <typename T>
LossValueT<T> discriminator_loss(TapeT<T>* tape, const TensorT<T>& d_real,
                                 const TensorT<T>& d_fake) {
  ADVSEG_CHECK(d_real.shape() == d_fake.shape(), ShapeError,
               "discriminator_loss: real/fake shape mismatch");
  detail::check_unit_interval(d_real, "d_real");
  detail::check_unit_interval(d_fake, "d_fake");
  const T lo = static_cast<T>(kLogEps), hi = T(1) - static_cast<T>(kLogEps);
  const T n = static_cast<T>(d_real.dim(0));
  auto real_term = log(tape, clamp(tape, d_real, lo, hi));
  auto ones = TensorT<T>::full(d_fake.shape(), T(1));
  auto fake_term = log(tape, sub(tape, ones, clamp(tape, d_fake, lo, hi)));
  auto total = add(tape, reduce_sum_all(tape, real_term), reduce_sum_all(tape, fake_term));
  return detail::finish_loss(scale(tape, total, -T(1) / n));
}

// Non-saturating segmentor objective -(1/N) sum(log d_fake): steeper than the
// flipped discriminator term when D confidently rejects the fakes.
template <typename T>
LossValueT<T> adversarial_seg_loss(TapeT<T>* tape, const TensorT<T>& d_fake) {
  detail::check_unit_interval(d_fake, "d_fake");
  const T lo = static_cast<T>(kLogEps), hi = T(1) - static_cast<T>(kLogEps);
  const T n = static_cast<T>(d_fake.dim(0));
  auto term = reduce_sum_all(tape, log(tape, clamp(tape, d_fake, lo, hi)));
  return detail::finish_loss(scale(tape, term, -T(1) / n));
}

// mce_weight * mce + adversarial (mce_weight defaults to 1/2).
template <typename T>
LossValueT<T> hybrid_seg_loss(TapeT<T>* tape, const TensorT<T>& probs, const TensorT<T>& onehot,
                              const TensorT<T>& d_fake, T mce_weight = T(0.5)) {
  auto adv = adversarial_seg_loss(tape, d_fake);
  if (mce_weight == T(0)) return adv;
  auto mce = mce_loss(tape, probs, onehot);
  auto total = add(tape, scale(tape, mce.value, mce_weight), adv.value);
  return detail::finish_loss(total);
}

}  // namespace advseg
