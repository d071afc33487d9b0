// The full gradient-verification suite: every primitive op, each loss, and
// both networks end to end (16x16 input, width scale 1/16), all in double.
// `mutate_conv` swaps in a deliberately wrong conv backward so callers can
// verify the checker actually catches a broken gradient.
#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advseg/gradcheck.hpp"
#include "advseg/losses.hpp"
#include "advseg/models.hpp"
#include "advseg/nn_ops.hpp"

namespace advseg {

struct GradCheckItem {
  std::string name;
  double max_rel_err = 0.0;
  int checked_coords = 0;
  int skipped_kinks = 0;
};

namespace detail {

using DT = TensorT<double>;
using DTp = TapeT<double>;

inline DT rnd(const Shape& shape, std::mt19937_64& rng, bool requires_grad, double lo = -1.0,
              double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return DT::from(shape, std::move(v), requires_grad);
}

// conv with a correct forward and a pad-shifted (wrong) backward
inline DT corrupted_conv(DTp* tape, const DT& x, const DT& w, const DT& b) {
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  auto out = DT::zeros({B, Cout, H, W});
  conv2d_forward(x.data(), B, Cin, H, W, w.data(), Cout, kh, kw, b.data(), 1, 1, H, W,
                 out.data());
  if (tape && x.tracked()) {
    out.storage()->tracked = true;
    auto xs = x.storage();
    auto ws = w.storage();
    auto os = out.storage();
    tape->record(os, [xs, ws, os, B, Cin, H, W, Cout, kh, kw]() {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      const int oh = H - 2, ow = W - 2;  // pad 0 instead of 1
      conv2d_backward(xs->data.data(), os->grad.data(), B, Cin, H, W, ws->data.data(), Cout, kh,
                      kw, 1, 0, oh, ow, xs->grad.data(), static_cast<double*>(nullptr),
                      static_cast<double*>(nullptr));
    });
  }
  return out;
}

}  // namespace detail

inline std::vector<GradCheckItem> run_gradcheck_suite(bool mutate_conv = false) {
  using detail::DT;
  using detail::DTp;
  using detail::rnd;

  std::vector<GradCheckItem> report;
  std::mt19937_64 rng(0xC0FFEEull);

  auto check = [&](const std::string& name, const GradCheckFn<double>& f,
                   std::vector<DT> params, GradCheckOptions opt = {}) {
    auto res = grad_check<double>(f, std::move(params), opt);
    report.push_back({name, res.max_rel_err, res.checked_coords, res.skipped_kinks});
  };

  // --- elementwise primitives (inputs kept away from kinks) ---
  auto x_pos = rnd({2, 3}, rng, true, 0.2, 2.0);
  auto x_any = rnd({2, 3}, rng, true, -2.0, 2.0);
  auto proj23 = rnd({2, 3}, rng, false);
  auto weighted_sum = [&](DTp* tape, const DT& t) {
    return reduce_sum_all(tape, mul(tape, t, proj23));
  };

  check("relu", [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, relu(t, p[0])); },
        {rnd({2, 3}, rng, true, 0.2, 2.0)});
  check("leaky_relu",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, leaky_relu(t, p[0], 0.2)); },
        {rnd({2, 3}, rng, true, -2.0, -0.2)});
  check("sigmoid",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, sigmoid(t, p[0])); }, {x_any});
  check("log", [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, log(t, p[0])); },
        {x_pos});
  check("exp", [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, exp(t, p[0])); },
        {x_any});
  check("neg", [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, neg(t, p[0])); },
        {x_any});
  check("clamp",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, clamp(t, p[0], -0.9, 0.9)); },
        {rnd({2, 3}, rng, true, -0.8, 0.8)});
  check("scale",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, scale(t, p[0], 1.7)); },
        {x_any});

  check("add",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, add(t, p[0], p[1])); },
        {rnd({2, 3}, rng, true), rnd({2, 3}, rng, true)});
  check("sub",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, sub(t, p[0], p[1])); },
        {rnd({2, 3}, rng, true), rnd({2, 3}, rng, true)});
  check("mul",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, mul(t, p[0], p[1])); },
        {rnd({2, 3}, rng, true), rnd({2, 3}, rng, true)});
  check("div",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, div(t, p[0], p[1])); },
        {rnd({2, 3}, rng, true), rnd({2, 3}, rng, true, 0.5, 2.0)});
  check("mul_broadcast",
        [&](DTp* t, std::vector<DT>& p) { return weighted_sum(t, mul(t, p[0], p[1])); },
        {rnd({2, 3}, rng, true), rnd({2, 1}, rng, true)});

  {
    auto proj = rnd({2, 4, 2, 2}, rng, false);
    check("softmax_channels",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, softmax_channels(t, p[0]), proj));
          },
          {rnd({2, 4, 2, 2}, rng, true, -2.0, 2.0)});
  }
  {
    auto proj = rnd({3, 2}, rng, false);
    check("matmul",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, matmul(t, p[0], p[1]), proj));
          },
          {rnd({3, 4}, rng, true), rnd({4, 2}, rng, true)});
  }
  check("reduce_sum",
        [&](DTp* t, std::vector<DT>& p) {
          return reduce_sum_all(t, reduce(t, p[0], ReduceKind::Sum, {1}, false));
        },
        {rnd({3, 4}, rng, true)});
  check("reduce_mean",
        [&](DTp* t, std::vector<DT>& p) { return reduce_mean_all(t, p[0]); },
        {rnd({3, 4}, rng, true)});

  // --- structured primitives ---
  {
    auto proj = rnd({1, 3, 5, 5}, rng, false);
    if (mutate_conv) {
      auto b = DT::zeros({3});
      auto w = rnd({3, 2, 3, 3}, rng, false);
      check("conv2d",
            [&](DTp* t, std::vector<DT>& p) {
              return reduce_sum_all(t, mul(t, detail::corrupted_conv(t, p[0], w, b), proj));
            },
            {rnd({1, 2, 5, 5}, rng, true)});
    } else {
      check("conv2d",
            [&](DTp* t, std::vector<DT>& p) {
              return reduce_sum_all(t, mul(t, conv2d(t, p[0], p[1], p[2], 1, 1), proj));
            },
            {rnd({1, 2, 5, 5}, rng, true), rnd({3, 2, 3, 3}, rng, true), rnd({3}, rng, true)});
    }
    auto proj_s2 = rnd({1, 3, 3, 3}, rng, false);
    check("conv2d_stride2",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, conv2d(t, p[0], p[1], p[2], 2, 1), proj_s2));
          },
          {rnd({1, 2, 5, 5}, rng, true), rnd({3, 2, 3, 3}, rng, true), rnd({3}, rng, true)});
    auto proj_1x1 = rnd({1, 3, 5, 5}, rng, false);
    check("conv2d_1x1",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, conv2d(t, p[0], p[1], p[2], 1, 0), proj_1x1));
          },
          {rnd({1, 2, 5, 5}, rng, true), rnd({3, 2, 1, 1}, rng, true), rnd({3}, rng, true)});
  }
  {
    auto proj = rnd({2, 3, 4, 4}, rng, false);
    check("instance_norm",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, instance_norm(t, p[0], p[1], p[2]), proj));
          },
          {rnd({2, 3, 4, 4}, rng, true), rnd({3}, rng, true, 0.5, 1.5), rnd({3}, rng, true)});
  }
  {
    auto proj = rnd({1, 2, 2, 2}, rng, false);
    // distinct window values keep the pool argmax stable under probes
    std::vector<double> v(32);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = 0.13 * static_cast<double>(i % 9) + 0.011 * static_cast<double>(i);
    std::shuffle(v.begin(), v.end(), rng);
    check("maxpool2",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, maxpool2(t, p[0]), proj));
          },
          {DT::from({1, 2, 4, 4}, v, true)});
  }
  {
    auto proj = rnd({1, 2, 6, 6}, rng, false);
    check("upsample_nn2",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, upsample_nn2(t, p[0]), proj));
          },
          {rnd({1, 2, 3, 3}, rng, true)});
  }
  {
    auto proj = rnd({1, 5, 3, 3}, rng, false);
    check("concat_channels",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, concat_channels(t, p[0], p[1]), proj));
          },
          {rnd({1, 2, 3, 3}, rng, true), rnd({1, 3, 3, 3}, rng, true)});
  }
  {
    auto proj = rnd({2, 3}, rng, false);
    check("global_avg_pool",
          [&](DTp* t, std::vector<DT>& p) {
            return reduce_sum_all(t, mul(t, global_avg_pool(t, p[0]), proj));
          },
          {rnd({2, 3, 4, 4}, rng, true)});
  }

  // --- losses ---
  {
    auto logits = rnd({1, 4, 2, 2}, rng, true, -2.0, 2.0);
    auto onehot = DT::zeros({1, 4, 2, 2});
    for (int p = 0; p < 4; ++p) onehot.data()[(p % 4) * 4 + p] = 1.0;
    check("loss_mce",
          [&](DTp* t, std::vector<DT>& p) {
            return mce_loss(t, softmax_channels(t, p[0]), onehot).value;
          },
          {logits});
    auto dr = rnd({3, 1}, rng, true, 0.2, 0.8);
    auto df = rnd({3, 1}, rng, true, 0.2, 0.8);
    check("loss_discriminator",
          [&](DTp* t, std::vector<DT>& p) {
            return discriminator_loss(t, p[0], p[1]).value;
          },
          {dr, df});
    check("loss_adversarial",
          [&](DTp* t, std::vector<DT>& p) { return adversarial_seg_loss(t, p[0]).value; }, {df});
    check("loss_hybrid",
          [&](DTp* t, std::vector<DT>& p) {
            return hybrid_seg_loss(t, softmax_channels(t, p[0]), onehot, p[1]).value;
          },
          {logits, df});
  }

  // --- full networks at 16x16, width scale 1/16 ---
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.width_scale = 1.0 / 16.0;
  cfg.seed = 0xABCDull;
  SegmentorT<double> seg(cfg);
  ModelConfig dcfg = cfg;
  dcfg.seed = 0xBCDEull;
  DiscriminatorT<double> disc(dcfg);

  auto image = rnd({1, 3, 16, 16}, rng, false, 0.0, 1.0);
  auto onehot16 = DT::zeros({1, 4, 16, 16});
  for (int p = 0; p < 256; ++p) onehot16.data()[(p % 4) * 256 + p] = 1.0;

  GradCheckOptions net_opt;
  net_opt.h = 1e-4;
  net_opt.max_coords_per_tensor = 3;

  std::vector<DT> seg_params, disc_params;
  seg.for_each_param([&](const std::string&, DT& t) { seg_params.push_back(t); });
  disc.for_each_param([&](const std::string&, DT& t) { disc_params.push_back(t); });

  {
    auto proj = rnd({1, 4, 16, 16}, rng, false);
    check("segmentor_network",
          [&](DTp* t, std::vector<DT>&) {
            return reduce_sum_all(t, mul(t, seg.forward(t, image), proj));
          },
          seg_params, net_opt);
  }
  {
    auto label = rnd({1, 4, 16, 16}, rng, false, 0.05, 0.95);
    check("discriminator_network",
          [&](DTp* t, std::vector<DT>&) {
            return reduce_sum_all(t, disc.forward(t, label, image));
          },
          disc_params, net_opt);
  }
  // losses through the composed networks
  check("mce_through_segmentor",
        [&](DTp* t, std::vector<DT>&) {
          return mce_loss(t, seg.forward(t, image), onehot16).value;
        },
        seg_params, net_opt);
  {
    std::vector<DT> both = seg_params;
    both.insert(both.end(), disc_params.begin(), disc_params.end());
    check("disc_loss_through_networks",
          [&](DTp* t, std::vector<DT>&) {
            auto fake = seg.forward(t, image);
            auto d_real = disc.forward(t, onehot16, image);
            auto d_fake = disc.forward(t, fake, image);
            return discriminator_loss(t, d_real, d_fake).value;
          },
          both, net_opt);
    check("adv_loss_through_networks",
          [&](DTp* t, std::vector<DT>&) {
            auto fake = seg.forward(t, image);
            return adversarial_seg_loss(t, disc.forward(t, fake, image)).value;
          },
          both, net_opt);
    check("hybrid_loss_through_networks",
          [&](DTp* t, std::vector<DT>&) {
            auto fake = seg.forward(t, image);
            return hybrid_seg_loss(t, fake, onehot16, disc.forward(t, fake, image)).value;
          },
          both, net_opt);
  }
  return report;
}

}  // namespace advseg
