#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "advseg/trainer.hpp"

using namespace advseg;

namespace {

CohortSpec tiny_spec(std::uint64_t seed = 5) {
  CohortSpec spec;
  spec.n_subjects_pos = 4;
  spec.slices_per_pos = 2;
  spec.n_subjects_neg = 2;
  spec.slices_per_neg = 2;
  spec.image_size = 32;
  spec.lesion_frac_min = 0.01;
  spec.lesion_frac_max = 0.04;
  spec.seed = seed;
  return spec;
}

ModelConfig tiny_model(std::uint64_t seed = 5) {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.width_scale = 1.0 / 16.0;
  cfg.seed = seed;
  return cfg;
}

TrainConfig tiny_train(Scheme scheme) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batches_per_epoch = 4;
  cfg.batch_size = 2;
  cfg.lr0_s = 1e-3;
  cfg.lr_d = 1e-3;
  cfg.scheme = scheme;
  cfg.seed = 11;
  return cfg;
}

std::vector<float> seg_bytes(Segmentor& s) {
  std::vector<float> out;
  s.for_each_param([&](const std::string&, Tensor& t) {
    out.insert(out.end(), t.data_vec().begin(), t.data_vec().end());
  });
  return out;
}

std::vector<float> disc_bytes(Discriminator& d) {
  std::vector<float> out;
  d.for_each_param([&](const std::string&, Tensor& t) {
    out.insert(out.end(), t.data_vec().begin(), t.data_vec().end());
  });
  return out;
}

}  // namespace

TEST_CASE("adam first step moves by ~lr in the gradient direction") {
  auto w = Tensor::from({1}, {0.0f}, true);
  NamedParams<float> params{{"w", w}};
  AdamState st;
  st.init(params);
  w.grad()[0] = 7.0f;  // any nonzero gradient
  adam_step(params, st, 0.1);
  CHECK(std::fabs(w.data()[0] + 0.1f) < 1e-6f);  // -lr * sign(g)
  CHECK(st.t == 1);
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  auto w = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
  NamedParams<float> params{{"w", w}};
  AdamState st;
  st.init(params);
  for (int i = 0; i < 25; ++i) {
    w.zero_grad();
    adam_step(params, st, 0.1);
  }
  CHECK(w.data_vec() == std::vector<float>{1.0f, -2.0f, 0.5f});
}

TEST_CASE("adam on (w-3)^2 matches a straight-line recomputation") {
  auto w = Tensor::from({1}, {0.0f}, true);
  NamedParams<float> params{{"w", w}};
  AdamState st;
  st.init(params);
  float prev = 0.0f;
  for (int i = 0; i < 10; ++i) {
    Tape tape;
    auto c = Tensor::from({1}, {3.0f});
    auto d = sub(&tape, w, c);
    auto loss = mul(&tape, d, d);
    w.zero_grad();
    tape.backward(loss);
    adam_step(params, st, 0.1);
    CHECK(w.data()[0] > prev);  // monotone toward 3
    prev = w.data()[0];
  }

  // independent straight-line reimplementation, same arithmetic order
  float wr = 0.0f, m = 0.0f, v = 0.0f;
  for (int t = 1; t <= 10; ++t) {
    const float g = 2.0f * (wr - 3.0f);
    m = 0.9f * m + (1.0f - 0.9f) * g;
    v = 0.999f * v + (1.0f - 0.999f) * g * g;
    const float mhat = m / static_cast<float>(1.0 - std::pow(0.9, t));
    const float vhat = v / static_cast<float>(1.0 - std::pow(0.999, t));
    wr -= 0.1f * mhat / (std::sqrt(vhat) + 1e-8f);
  }
  CHECK(std::fabs(w.data()[0] - wr) < 1e-6f);
}

TEST_CASE("adam rejects non-finite gradients with a diagnostic") {
  auto w = Tensor::from({2}, {0.0f, 0.0f}, true);
  NamedParams<float> params{{"conv7.w", w}};
  AdamState st;
  st.init(params);
  w.grad()[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    adam_step(params, st, 0.1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("conv7.w") != std::string::npos);
  }
  CHECK(w.data()[0] == 0.0f);  // nothing was applied
}

TEST_CASE("learning rate halves on the schedule") {
  CHECK(lr_at(0, 1e-5, 75, 225) == Catch::Approx(1e-5));
  CHECK(lr_at(74, 1e-5, 75, 225) == Catch::Approx(1e-5));
  CHECK(lr_at(75, 1e-5, 75, 225) == Catch::Approx(5e-6));
  CHECK(lr_at(150, 1e-5, 75, 225) == Catch::Approx(2.5e-6));
  CHECK(lr_at(224, 1e-5, 75, 225) == Catch::Approx(2.5e-6));
  CHECK_THROWS_AS(lr_at(225, 1e-5, 75, 225), ContractError);
  CHECK_THROWS_AS(lr_at(-1, 1e-5, 75, 225), ContractError);

  // piecewise-constant and non-increasing
  double prev = 1e9;
  for (int e = 0; e < 225; ++e) {
    const double lr = lr_at(e, 1e-5, 75, 225);
    CHECK(lr <= prev);
    CHECK(lr == Catch::Approx(1e-5 * std::pow(0.5, e / 75)));
    prev = lr;
  }
}

TEST_CASE("minimax round does k discriminator steps then one segmentor step") {
  auto cohort = generate_cohort(tiny_spec());
  Segmentor seg(tiny_model());
  Discriminator disc(tiny_model(99));
  auto cfg = tiny_train(Scheme::Adversarial);
  BatchSampler sampler(&cohort.pos_slices, &cohort.neg_slices, cfg.batch_size, cfg.p_pos, {},
                       true, 7);
  Trainer trainer(seg, &disc, sampler, cfg);

  trainer.minimax_round(0, cfg.lr0_s);
  CHECK(trainer.adam_t_disc() == 3);
  CHECK(trainer.adam_t_seg() == 1);
  trainer.minimax_round(0, cfg.lr0_s);
  CHECK(trainer.adam_t_disc() == 6);
  CHECK(trainer.adam_t_seg() == 2);

  int d_rows = 0, s_rows = 0;
  for (const auto& r : trainer.log().rows) {
    if (r.phase == 'D') ++d_rows;
    if (r.phase == 'S') ++s_rows;
  }
  CHECK(d_rows == 3 * s_rows);
}

TEST_CASE("mce rounds leave the discriminator untouched") {
  auto cohort = generate_cohort(tiny_spec());
  Segmentor seg(tiny_model());
  Discriminator disc(tiny_model(99));
  const auto before = disc_bytes(disc);
  auto cfg = tiny_train(Scheme::Mce);
  BatchSampler sampler(&cohort.pos_slices, &cohort.neg_slices, cfg.batch_size, cfg.p_pos, {},
                       true, 7);
  Trainer trainer(seg, &disc, sampler, cfg);
  for (int i = 0; i < 3; ++i) trainer.minimax_round(0, cfg.lr0_s);
  CHECK(trainer.adam_t_seg() == 3);
  CHECK(trainer.adam_t_disc() == 0);
  CHECK(disc_bytes(disc) == before);
  for (const auto& r : trainer.log().rows) CHECK(r.phase == 'S');
}

TEST_CASE("frozen network isolation is bitwise") {
  auto cohort = generate_cohort(tiny_spec());
  Segmentor seg(tiny_model());
  Discriminator disc(tiny_model(99));
  auto cfg = tiny_train(Scheme::Adversarial);
  BatchSampler sampler(&cohort.pos_slices, &cohort.neg_slices, cfg.batch_size, cfg.p_pos, {},
                       true, 7);
  Trainer trainer(seg, &disc, sampler, cfg);

  // a discriminator update must not move a single segmentor byte
  const auto s_before = seg_bytes(seg);
  trainer.discriminator_update(0);
  CHECK(seg_bytes(seg) == s_before);

  // a segmentor update must not move a single discriminator byte
  const auto d_before = disc_bytes(disc);
  trainer.segmentor_update(0, cfg.lr0_s);
  CHECK(disc_bytes(disc) == d_before);
  CHECK(seg_bytes(seg) != s_before);
}

TEST_CASE("run_training bookkeeping, determinism and selection property") {
  auto spec = tiny_spec();
  auto cohort = generate_cohort(spec);
  // split: subjects 0,1 train; 2 selection
  std::vector<PhantomSample> train_pos, selection;
  for (const auto& s : cohort.pos_slices) {
    if (s.subject_id <= 1) train_pos.push_back(s);
    if (s.subject_id == 2) selection.push_back(s);
  }

  auto cfg = tiny_train(Scheme::Mce);
  auto run_once = [&]() {
    Segmentor seg(tiny_model());
    auto res = run_training(seg, nullptr, train_pos, cohort.neg_slices, selection, {}, cfg);
    return std::make_pair(seg_bytes(seg), res);
  };
  auto [bytes1, res1] = run_once();
  auto [bytes2, res2] = run_once();
  CHECK(bytes1 == bytes2);  // identical parameter bytes under a fixed seed
  REQUIRE(res1.log.rows.size() == res2.log.rows.size());
  for (std::size_t i = 0; i < res1.log.rows.size(); ++i) {
    CHECK(res1.log.rows[i].loss_value == res2.log.rows[i].loss_value);
    CHECK(res1.log.rows[i].phase == res2.log.rows[i].phase);
  }

  // 2 epochs x 4 batches -> 8 rounds; mce: 8 S rows + 2 V rows
  int s_rows = 0, v_rows = 0;
  for (const auto& r : res1.log.rows) {
    if (r.phase == 'S') ++s_rows;
    if (r.phase == 'V') ++v_rows;
  }
  CHECK(s_rows == 8);
  CHECK(v_rows == 2);
  CHECK(res1.selection_dice_per_epoch.size() == 2);

  // retained checkpoint maximizes the selection dice over epochs
  for (double d : res1.selection_dice_per_epoch) CHECK(res1.best_selection_dice >= d);
  CHECK(res1.best.meta.at("epoch").get<int>() == res1.best_epoch);
}

TEST_CASE("selection subjects may not appear in the training pool") {
  auto cohort = generate_cohort(tiny_spec());
  std::vector<PhantomSample> train_pos = cohort.pos_slices;  // includes everyone
  std::vector<PhantomSample> selection = {cohort.pos_slices.front()};
  Segmentor seg(tiny_model());
  CHECK_THROWS_AS(run_training(seg, nullptr, train_pos, cohort.neg_slices, selection, {},
                               tiny_train(Scheme::Mce)),
                  ContractError);
}

TEST_CASE("training loss decreases on a learnable cohort") {
  auto spec = tiny_spec(21);
  auto cohort = generate_cohort(spec);
  std::vector<PhantomSample> train_pos, selection;
  for (const auto& s : cohort.pos_slices) {
    if (s.subject_id <= 2) train_pos.push_back(s);
    if (s.subject_id == 3) selection.push_back(s);
  }
  Segmentor seg(tiny_model(31));
  TrainConfig cfg = tiny_train(Scheme::Mce);
  cfg.epochs = 3;
  cfg.batches_per_epoch = 10;
  auto res = run_training(seg, nullptr, train_pos, cohort.neg_slices, selection, {}, cfg);
  double first = 0, last = 0;
  int count = 0;
  for (const auto& r : res.log.rows)
    if (r.phase == 'S') {
      if (count < 5) first += r.loss_value;
      ++count;
    }
  count = 0;
  for (auto it = res.log.rows.rbegin(); it != res.log.rows.rend() && count < 5; ++it)
    if (it->phase == 'S') {
      last += it->loss_value;
      ++count;
    }
  CHECK(last / 5.0 < first / 5.0);
}
