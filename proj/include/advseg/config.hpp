// JSON run configuration. Every field has a default; unknown keys anywhere
// are rejected with their full path so typos cannot silently fall back.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "advseg/augment.hpp"
#include "advseg/models.hpp"
#include "advseg/phantom.hpp"
#include "advseg/trainer.hpp"

namespace advseg {

struct RunConfig {
  std::uint64_t seed = 42;
  int threads = 0;  // 0 = library default

  ModelConfig model;       // image_size follows the dataset
  TrainConfig train;
  CohortSpec data;
  AugmentSpec augment;

  int n_selection_subjects = 1;  // plain-train split sizes
  int n_eval_subjects = 1;
  double target_dice = -1.0;     // early exit for smoke runs, <0 disables

  int cv_folds = 4;

  std::vector<double> ablation_sizes = {1.0, 0.5, 0.25};
  std::vector<std::uint64_t> ablation_seeds = {1, 2, 3};
  int ablation_base_fold = 0;

  std::filesystem::path dataset_dir = "data";
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
    augment.validate();
    ADVSEG_CHECK(n_selection_subjects >= 1 && n_eval_subjects >= 1, ConfigError,
                 "config: selection/eval subject counts must be >= 1");
    ADVSEG_CHECK(cv_folds >= 3, ConfigError, "config: cv.n_folds must be >= 3");
    ADVSEG_CHECK(threads >= 0, ConfigError, "config: threads must be >= 0");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& path,
                                const std::set<std::string>& known) {
  for (const auto& [key, value] : obj.items())
    ADVSEG_CHECK(known.count(key) == 1, ConfigError, "config: unknown key '",
                 path.empty() ? key : path + "." + key, "'");
}

template <typename T>
void take(const nlohmann::json& obj, const char* key, T& into) {
  if (obj.contains(key)) into = obj.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  detail::reject_unknown_keys(j, "", {"seed", "threads", "model", "train", "data", "augment",
                                      "sampler", "cv", "ablation", "paths"});
  detail::take(j, "seed", cfg.seed);
  detail::take(j, "threads", cfg.threads);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown_keys(m, "model", {"width_scale", "leaky_slope"});
    detail::take(m, "width_scale", cfg.model.width_scale);
    detail::take(m, "leaky_slope", cfg.model.leaky_slope);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(
        t, "train",
        {"epochs", "batches_per_epoch", "batch_size", "lr0_s", "halve_every", "lr_d", "k_disc",
         "scheme", "hybrid_mce_weight", "grad_clip", "real_label_smooth", "n_selection_subjects",
         "n_eval_subjects", "target_dice"});
    detail::take(t, "epochs", cfg.train.epochs);
    detail::take(t, "batches_per_epoch", cfg.train.batches_per_epoch);
    detail::take(t, "batch_size", cfg.train.batch_size);
    detail::take(t, "lr0_s", cfg.train.lr0_s);
    detail::take(t, "halve_every", cfg.train.halve_every);
    detail::take(t, "lr_d", cfg.train.lr_d);
    detail::take(t, "k_disc", cfg.train.k_disc);
    if (t.contains("scheme")) cfg.train.scheme = scheme_from_name(t.at("scheme").get<std::string>());
    detail::take(t, "hybrid_mce_weight", cfg.train.hybrid_mce_weight);
    detail::take(t, "grad_clip", cfg.train.grad_clip);
    detail::take(t, "real_label_smooth", cfg.train.real_label_smooth);
    detail::take(t, "n_selection_subjects", cfg.n_selection_subjects);
    detail::take(t, "n_eval_subjects", cfg.n_eval_subjects);
    detail::take(t, "target_dice", cfg.target_dice);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown_keys(d, "data",
                                {"n_subjects_pos", "slices_per_pos", "n_subjects_neg",
                                 "slices_per_neg", "image_size", "ambiguity_width",
                                 "lesion_frac_min", "lesion_frac_max"});
    detail::take(d, "n_subjects_pos", cfg.data.n_subjects_pos);
    detail::take(d, "slices_per_pos", cfg.data.slices_per_pos);
    detail::take(d, "n_subjects_neg", cfg.data.n_subjects_neg);
    detail::take(d, "slices_per_neg", cfg.data.slices_per_neg);
    detail::take(d, "image_size", cfg.data.image_size);
    detail::take(d, "ambiguity_width", cfg.data.ambiguity_width);
    detail::take(d, "lesion_frac_min", cfg.data.lesion_frac_min);
    detail::take(d, "lesion_frac_max", cfg.data.lesion_frac_max);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    detail::reject_unknown_keys(a, "augment", {"rot_range", "shift_frac", "mirror_prob"});
    detail::take(a, "rot_range", cfg.augment.rot_range);
    detail::take(a, "shift_frac", cfg.augment.shift_frac);
    detail::take(a, "mirror_prob", cfg.augment.mirror_prob);
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    detail::reject_unknown_keys(s, "sampler", {"p_pos"});
    detail::take(s, "p_pos", cfg.train.p_pos);
  }
  if (j.contains("cv")) {
    const auto& c = j.at("cv");
    detail::reject_unknown_keys(c, "cv", {"n_folds"});
    detail::take(c, "n_folds", cfg.cv_folds);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    detail::reject_unknown_keys(a, "ablation", {"sizes", "seeds", "base_fold"});
    detail::take(a, "sizes", cfg.ablation_sizes);
    detail::take(a, "seeds", cfg.ablation_seeds);
    detail::take(a, "base_fold", cfg.ablation_base_fold);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::reject_unknown_keys(p, "paths", {"dataset_dir", "out_dir", "checkpoint"});
    std::string s;
    detail::take(p, "dataset_dir", s);
    if (!s.empty()) cfg.dataset_dir = s;
    s.clear();
    detail::take(p, "out_dir", s);
    if (!s.empty()) cfg.out_dir = s;
    s.clear();
    detail::take(p, "checkpoint", s);
    if (!s.empty()) cfg.checkpoint = s;
  }

  // the data seed follows the master seed unless the cohort spec overrides it
  cfg.data.seed = mix_seed(cfg.seed, 0xDA7Aull);
  cfg.model.seed = mix_seed(cfg.seed, 0x0DE1ull);
  cfg.train.seed = mix_seed(cfg.seed, 0x7A1Bull);
  cfg.model.image_size = cfg.data.image_size;
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  ADVSEG_CHECK(is.good(), ConfigError, "config: cannot open ", path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    ADVSEG_THROW(ConfigError, "config: parse error in ", path.string(), ": ", e.what());
  }
  try {
    return parse_run_config(j);
  } catch (const nlohmann::json::exception& e) {
    ADVSEG_THROW(ConfigError, "config: bad value in ", path.string(), ": ", e.what());
  }
}

}  // namespace advseg
