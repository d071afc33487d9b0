// Training protocol: Adam on both networks, stepped learning-rate schedule
// for the segmentor, fixed rate for the discriminator, and the alternating
// round of k discriminator updates per segmentor update.
//
// Per round (adversarial/hybrid): k fresh batches each drive one D update
// minimizing the discriminator loss with S frozen (fakes are produced off
// tape, so no gradient ever reaches S); then one fresh batch drives one S
// update minimizing the non-saturating (or hybrid) loss with D frozen via
// FreezeGuard. The mce scheme degenerates to a single S update per round.
//
// A non-finite loss or gradient skips that update and is logged; three
// consecutive bad steps abort the run.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "advseg/augment.hpp"
#include "advseg/checkpoint.hpp"
#include "advseg/losses.hpp"
#include "advseg/metrics.hpp"
#include "advseg/models.hpp"
#include "advseg/optim.hpp"

namespace advseg {

enum class Scheme { Mce, Adversarial, Hybrid };

inline const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::Mce: return "mce";
    case Scheme::Adversarial: return "adversarial";
    case Scheme::Hybrid: return "hybrid";
  }
  return "?";
}

inline Scheme scheme_from_name(const std::string& name) {
  if (name == "mce") return Scheme::Mce;
  if (name == "adversarial") return Scheme::Adversarial;
  if (name == "hybrid") return Scheme::Hybrid;
  ADVSEG_THROW(ConfigError, "unknown scheme '", name, "' (mce|adversarial|hybrid)");
}

struct TrainConfig {
  int epochs = 225;
  int batches_per_epoch = 80;
  int batch_size = 5;
  double lr0_s = 1e-5;
  int halve_every = 75;
  double lr_d = 1e-5;
  int k_disc = 3;
  Scheme scheme = Scheme::Mce;
  double hybrid_mce_weight = 0.5;
  double grad_clip = 0.0;         // global-norm clip, 0 disables
  double real_label_smooth = 0.0; // blends real one-hot maps toward uniform
  double p_pos = 0.7;
  std::uint64_t seed = 0;

  void validate() const {
    ADVSEG_CHECK(epochs >= 1 && batches_per_epoch >= 1 && batch_size >= 1, ConfigError,
                 "TrainConfig: epochs/batches/batch_size must be positive");
    ADVSEG_CHECK(lr0_s > 0.0 && lr_d > 0.0, ConfigError, "TrainConfig: learning rates must be > 0");
    ADVSEG_CHECK(halve_every >= 1, ConfigError, "TrainConfig: halve_every must be >= 1");
    ADVSEG_CHECK(k_disc >= 1, ConfigError, "TrainConfig: k_disc must be >= 1");
    ADVSEG_CHECK(hybrid_mce_weight >= 0.0, ConfigError, "TrainConfig: negative hybrid weight");
    ADVSEG_CHECK(real_label_smooth >= 0.0 && real_label_smooth < 1.0, ConfigError,
                 "TrainConfig: real_label_smooth outside [0,1)");
    ADVSEG_CHECK(p_pos >= 0.0 && p_pos <= 1.0, ConfigError, "TrainConfig: p_pos outside [0,1]");
    ADVSEG_CHECK(grad_clip >= 0.0, ConfigError, "TrainConfig: negative grad_clip");
  }
};

struct TrainLogRow {
  int epoch = 0;
  std::int64_t step = 0;
  char phase = 'S';  // 'D', 'S' or 'V' (per-epoch selection metric)
  std::string loss_name;
  double loss_value = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  void add(int epoch, std::int64_t step, char phase, std::string name, double value, double lr) {
    rows.push_back({epoch, step, phase, std::move(name), value, lr});
  }

  void write_csv(const std::filesystem::path& path) const {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::trunc);
      ADVSEG_CHECK(os.good(), FormatError, "trainlog: cannot write ", path.string());
      os << "epoch,step,phase,loss_name,loss_value,lr\n";
      char buf[160];
      for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%lld,%c,%s,%.9g,%.9g\n", r.epoch,
                      static_cast<long long>(r.step), r.phase, r.loss_name.c_str(), r.loss_value,
                      r.lr);
        os << buf;
      }
    }
    std::filesystem::rename(tmp, path);
  }
};

namespace detail {

inline void clip_gradients(NamedParams<float>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& [n, p] : params)
    if (p.has_grad())
      for (float g : p.grad_vec()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const float s = static_cast<float>(max_norm / norm);
  for (auto& [n, p] : params) {
    if (!p.has_grad()) continue;
    float* g = p.grad();
    for (std::int64_t i = 0; i < p.numel(); ++i) g[i] *= s;
  }
}

inline Tensor smooth_labels(const Tensor& onehot, double eps) {
  if (eps <= 0.0) return onehot;
  auto out = Tensor::zeros(onehot.shape());
  const int classes = onehot.dim(1);
  const float low = static_cast<float>(eps / classes);
  const float high = static_cast<float>(1.0 - eps + eps / classes);
  for (std::int64_t i = 0; i < onehot.numel(); ++i)
    out.data()[i] = onehot.data()[i] == 1.0f ? high : low;
  return out;
}

}  // namespace detail

// Copies sample `i` of a [B,C,H,W] tensor into a standalone [C,H,W] tensor.
inline Tensor batch_sample(const Tensor& batch, int i) {
  const int C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  const std::int64_t n = static_cast<std::int64_t>(C) * H * W;
  std::vector<float> v(batch.data() + i * n, batch.data() + (i + 1) * n);
  return Tensor::from({C, H, W}, std::move(v));
}

// Clean-slice evaluation: forward in batches, per-slice tumor metrics.
inline std::vector<SliceMetrics> evaluate_slices(const Segmentor& seg,
                                                 const std::vector<PhantomSample>& slices,
                                                 int batch_size = 5) {
  std::vector<SliceMetrics> out;
  for (std::size_t start = 0; start < slices.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(slices.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<PhantomSample> chunk(slices.begin() + static_cast<std::ptrdiff_t>(start),
                                     slices.begin() + static_cast<std::ptrdiff_t>(end));
    auto [x, y] = make_batch_tensors(chunk);
    auto probs = seg.forward(nullptr, x);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      out.push_back(slice_metrics(batch_sample(probs, static_cast<int>(i)),
                                  batch_sample(y, static_cast<int>(i)), chunk[i].subject_id,
                                  chunk[i].slice_id));
  }
  return out;
}

inline double mean_tumor_dice(const std::vector<SliceMetrics>& ms) {
  ADVSEG_CHECK(!ms.empty(), ContractError, "mean_tumor_dice: no slices");
  double acc = 0.0;
  for (const auto& m : ms) acc += m.dice_score;
  return acc / static_cast<double>(ms.size());
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class Trainer {
 public:
  Trainer(Segmentor& seg, Discriminator* disc, BatchSampler& sampler, const TrainConfig& cfg)
      : seg_(seg), disc_(disc), sampler_(sampler), cfg_(cfg) {
    cfg_.validate();
    if (cfg_.scheme != Scheme::Mce)
      ADVSEG_CHECK(disc_ != nullptr, ConfigError,
                   "Trainer: adversarial/hybrid schemes need a discriminator");
    seg_params_ = seg_.parameters();
    adam_s_.init(seg_params_);
    if (disc_) {
      disc_params_ = disc_->parameters();
      adam_d_.init(disc_params_);
    }
  }

  // One k:1 minimax round (or a single mce step).
  void minimax_round(int epoch, double lr_s) {
    if (cfg_.scheme == Scheme::Mce) {
      segmentor_update(epoch, lr_s);
      return;
    }
    for (int j = 0; j < cfg_.k_disc; ++j) discriminator_update(epoch);
    segmentor_update(epoch, lr_s);
  }

  const TrainLog& log() const { return log_; }
  TrainLog& log() { return log_; }
  std::int64_t updates() const { return update_counter_; }
  std::int64_t adam_t_seg() const { return adam_s_.t; }
  std::int64_t adam_t_disc() const { return adam_d_.t; }

  void discriminator_update(int epoch) {
    auto batch = sampler_.sample_batch();
    auto [x, y] = make_batch_tensors(batch);
    // S frozen: fakes come off tape, so no closure can reach its parameters
    auto fake = seg_.forward(nullptr, x);
    auto real = detail::smooth_labels(y, cfg_.real_label_smooth);
    Tape tape;
    double value = std::numeric_limits<double>::quiet_NaN();
    bool ok = true;
    try {
      auto d_real = disc_->forward(&tape, real, x);
      auto d_fake = disc_->forward(&tape, fake, x);
      auto loss = discriminator_loss(&tape, d_real, d_fake);
      value = loss.logged;
      tape.backward(loss.value);
      detail::clip_gradients(disc_params_, cfg_.grad_clip);
      adam_step(disc_params_, adam_d_, cfg_.lr_d);
    } catch (const NumericError&) {
      ok = false;
    }
    zero_grads(disc_params_);
    ++update_counter_;
    log_.add(epoch, update_counter_, 'D', "disc", value, cfg_.lr_d);
    note_step(ok, epoch, 'D');
  }

  void segmentor_update(int epoch, double lr_s) {
    auto batch = sampler_.sample_batch();
    auto [x, y] = make_batch_tensors(batch);
    Tape tape;
    double value = std::numeric_limits<double>::quiet_NaN();
    bool ok = true;
    const char* name = "mce";
    try {
      auto probs = seg_.forward(&tape, x);
      LossValue loss;
      if (cfg_.scheme == Scheme::Mce) {
        loss = mce_loss(&tape, probs, y);
      } else {
        FreezeGuard freeze(disc_params_);
        auto d_fake = disc_->forward(&tape, probs, x);
        if (cfg_.scheme == Scheme::Adversarial) {
          loss = adversarial_seg_loss(&tape, d_fake);
          name = "adv_seg";
        } else {
          loss = hybrid_seg_loss(&tape, probs, y, d_fake,
                                 static_cast<float>(cfg_.hybrid_mce_weight));
          name = "hybrid_seg";
        }
      }
      value = loss.logged;
      tape.backward(loss.value);
      detail::clip_gradients(seg_params_, cfg_.grad_clip);
      adam_step(seg_params_, adam_s_, lr_s);
    } catch (const NumericError&) {
      ok = false;
    }
    zero_grads(seg_params_);
    if (disc_) zero_grads(disc_params_);
    ++update_counter_;
    log_.add(epoch, update_counter_, 'S', name, value, lr_s);
    note_step(ok, epoch, 'S');
  }

 private:
  void note_step(bool ok, int epoch, char phase) {
    if (ok) {
      consecutive_bad_ = 0;
      return;
    }
    ++consecutive_bad_;
    if (consecutive_bad_ >= 3)
      ADVSEG_THROW(TrainingDiverged, "training diverged: 3 consecutive non-finite ", phase,
                   " steps around epoch ", epoch, ", update ", update_counter_);
  }

  Segmentor& seg_;
  Discriminator* disc_;
  BatchSampler& sampler_;
  TrainConfig cfg_;
  NamedParams<float> seg_params_, disc_params_;
  AdamState adam_s_, adam_d_;
  TrainLog log_;
  std::int64_t update_counter_ = 0;
  int consecutive_bad_ = 0;
};

struct TrainResult {
  Checkpoint best;
  TrainLog log;
  int best_epoch = -1;
  double best_selection_dice = -1.0;
  std::vector<double> selection_dice_per_epoch;
};

// Full run: epochs x batches_per_epoch rounds, once-per-epoch selection on
// clean slices, retains the checkpoint with the best selection tumor dice
// (earlier epoch wins ties).
inline TrainResult run_training(Segmentor& seg, Discriminator* disc,
                                const std::vector<PhantomSample>& train_pos,
                                const std::vector<PhantomSample>& train_neg,
                                const std::vector<PhantomSample>& selection,
                                const AugmentSpec& aug, const TrainConfig& cfg,
                                double target_dice = -1.0) {
  cfg.validate();
  ADVSEG_CHECK(!train_pos.empty(), ContractError, "run_training: empty positive pool");
  ADVSEG_CHECK(!selection.empty(), ContractError, "run_training: empty selection set");
  for (const auto& s : selection)
    for (const auto& t : train_pos)
      ADVSEG_CHECK(s.subject_id != t.subject_id, ContractError,
                   "run_training: selection subject ", s.subject_id, " leaks into training");

  BatchSampler sampler(&train_pos, &train_neg, cfg.batch_size, cfg.p_pos, aug, true,
                       mix_seed(cfg.seed, 0xBA7C4ull));
  Trainer trainer(seg, disc, sampler, cfg);

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_s = lr_at(epoch, cfg.lr0_s, cfg.halve_every, cfg.epochs);
    for (int b = 0; b < cfg.batches_per_epoch; ++b) trainer.minimax_round(epoch, lr_s);

    const double sel_dice = mean_tumor_dice(evaluate_slices(seg, selection, cfg.batch_size));
    result.selection_dice_per_epoch.push_back(sel_dice);
    trainer.log().add(epoch, trainer.updates(), 'V', "sel_tumor_dice", sel_dice, lr_s);
    if (sel_dice > result.best_selection_dice) {
      result.best_selection_dice = sel_dice;
      result.best_epoch = epoch;
      result.best = make_checkpoint(seg, disc, trainer.updates(), "");
      result.best.meta["epoch"] = epoch;
      result.best.meta["selection_dice"] = sel_dice;
    }
    if (target_dice > 0.0 && sel_dice >= target_dice) break;  // early exit hook
  }
  result.log = trainer.log();
  return result;
}

}  // namespace advseg
