// Cross-validation and data-ablation harnesses plus their CSV reports.
//
// Folds partition positive subjects; negatives are available to every
// training pool and are never evaluated. All schemes inside one permutation
// share the same fold split, model seeds and batch stream seeds, so scheme
// comparisons are paired. Evaluation always uses the checkpoint selected by
// the selection fold, not the final parameters.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "advseg/trainer.hpp"
#include "advseg/wilcoxon.hpp"

namespace advseg {

struct FoldAssignment {
  std::vector<int> train;      // subject ids
  std::vector<int> selection;
  std::vector<int> test;
};

// Seeded shuffle, near-equal fold sizes (first n % k folds take the extra
// subject), then k permutations rotating the roles: fold i is the test fold,
// fold (i+1) mod k the selection fold, the rest train.
inline std::vector<FoldAssignment> make_folds(std::vector<int> pos_subjects, int n_folds,
                                              std::uint64_t seed) {
  ADVSEG_CHECK(n_folds >= 3, ConfigError, "make_folds: need at least 3 folds");
  ADVSEG_CHECK(static_cast<int>(pos_subjects.size()) >= n_folds, ConfigError,
               "make_folds: ", pos_subjects.size(), " subjects cannot fill ", n_folds, " folds");
  std::sort(pos_subjects.begin(), pos_subjects.end());
  std::mt19937_64 rng(seed);
  std::shuffle(pos_subjects.begin(), pos_subjects.end(), rng);

  const int n = static_cast<int>(pos_subjects.size());
  const int base = n / n_folds, extra = n % n_folds;
  std::vector<std::vector<int>> folds;
  int at = 0;
  for (int f = 0; f < n_folds; ++f) {
    const int len = base + (f < extra ? 1 : 0);
    folds.emplace_back(pos_subjects.begin() + at, pos_subjects.begin() + at + len);
    at += len;
  }

  std::vector<FoldAssignment> perms;
  for (int p = 0; p < n_folds; ++p) {
    FoldAssignment fa;
    fa.test = folds[static_cast<std::size_t>(p)];
    fa.selection = folds[static_cast<std::size_t>((p + 1) % n_folds)];
    for (int f = 0; f < n_folds; ++f)
      if (f != p && f != (p + 1) % n_folds)
        fa.train.insert(fa.train.end(), folds[static_cast<std::size_t>(f)].begin(),
                        folds[static_cast<std::size_t>(f)].end());
    perms.push_back(std::move(fa));
  }
  return perms;
}

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentSpec augment;
};

struct SliceRecord {
  std::string scheme;
  int permutation = 0;
  SliceMetrics metrics;
};

struct SummaryRecord {
  std::string scheme;
  std::string metric;
  SummaryStats stats;
};

struct WilcoxonRecord {
  std::string metric;
  std::string scheme_a, scheme_b;
  std::optional<double> statistic;
  int n_effective = 0;
  std::optional<double> p_value;
  std::string method;
};

struct CrossvalResult {
  std::vector<SliceRecord> per_slice;
  std::vector<SummaryRecord> summary;
  std::vector<WilcoxonRecord> wilcoxon;
};

namespace detail {

inline std::vector<PhantomSample> slices_of(const std::vector<PhantomSample>& pool,
                                            const std::vector<int>& subjects) {
  std::set<int> wanted(subjects.begin(), subjects.end());
  std::vector<PhantomSample> out;
  for (const auto& s : pool)
    if (wanted.count(s.subject_id)) out.push_back(s);
  return out;
}

inline std::vector<int> positive_subjects(const Cohort& cohort) {
  std::set<int> ids;
  for (const auto& s : cohort.pos_slices) ids.insert(s.subject_id);
  return {ids.begin(), ids.end()};
}

// One training run on the given split; returns test-fold per-slice metrics
// of the selection-best checkpoint.
inline std::vector<SliceMetrics> train_and_test(const Cohort& cohort, ExperimentConfig cfg,
                                                Scheme scheme, const FoldAssignment& fold,
                                                std::uint64_t model_seed,
                                                std::uint64_t train_seed,
                                                const std::vector<int>* train_subset = nullptr) {
  const std::vector<int>& train_ids = train_subset ? *train_subset : fold.train;
  auto train_pos = slices_of(cohort.pos_slices, train_ids);
  auto selection = slices_of(cohort.pos_slices, fold.selection);
  auto test = slices_of(cohort.pos_slices, fold.test);
  ADVSEG_CHECK(!train_pos.empty() && !selection.empty() && !test.empty(), ContractError,
               "crossval: a fold role received no slices");

  cfg.model.seed = model_seed;
  cfg.train.scheme = scheme;
  cfg.train.seed = train_seed;

  Segmentor seg(cfg.model);
  std::optional<Discriminator> disc;
  Discriminator* disc_ptr = nullptr;
  if (scheme != Scheme::Mce) {
    ModelConfig dcfg = cfg.model;
    dcfg.seed = mix_seed(model_seed, 0xD15Cull);
    disc.emplace(dcfg);
    disc_ptr = &*disc;
  }
  auto res = run_training(seg, disc_ptr, train_pos, cohort.neg_slices, selection, cfg.augment,
                          cfg.train);
  Segmentor best = segmentor_from_checkpoint(res.best);
  return evaluate_slices(best, test, cfg.train.batch_size);
}

inline std::vector<double> collect(const std::vector<SliceRecord>& rows,
                                   const std::string& scheme, const std::string& metric) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.scheme != scheme) continue;
    if (metric == "dice") v.push_back(r.metrics.dice_score);
    if (metric == "sensitivity" && r.metrics.sens) v.push_back(*r.metrics.sens);
    if (metric == "specificity" && r.metrics.spec) v.push_back(*r.metrics.spec);
  }
  return v;
}

}  // namespace detail

inline CrossvalResult crossval_run(const Cohort& cohort, const ExperimentConfig& cfg,
                                   const std::vector<Scheme>& schemes, int n_folds,
                                   std::uint64_t seed) {
  auto ids = detail::positive_subjects(cohort);
  auto folds = make_folds(ids, n_folds, mix_seed(seed, 0xF01D5ull));

  CrossvalResult result;
  for (std::size_t p = 0; p < folds.size(); ++p) {
    const auto& fold = folds[p];
    // schemes share seeds inside a permutation, so comparisons are paired
    const std::uint64_t model_seed = mix_seed(seed, p, 0x0DE1ull);
    const std::uint64_t train_seed = mix_seed(seed, p, 0x7A1Bull);
    for (Scheme scheme : schemes) {
      auto metrics = detail::train_and_test(cohort, cfg, scheme, fold, model_seed, train_seed);
      // leakage audit: no evaluated subject may appear in train or selection
      std::set<int> trained(fold.train.begin(), fold.train.end());
      trained.insert(fold.selection.begin(), fold.selection.end());
      for (const auto& m : metrics)
        ADVSEG_CHECK(trained.count(m.subject_id) == 0, ContractError,
                     "crossval: subject ", m.subject_id, " evaluated after being trained on");
      for (const auto& m : metrics)
        result.per_slice.push_back({scheme_name(scheme), static_cast<int>(p), m});
    }
  }

  for (Scheme scheme : schemes)
    for (const std::string metric : {"dice", "sensitivity", "specificity"}) {
      auto values = detail::collect(result.per_slice, scheme_name(scheme), metric);
      if (!values.empty())
        result.summary.push_back({scheme_name(scheme), metric, summarize(values)});
    }

  // pairwise tests on per-slice dice and sensitivity, matched by slice
  for (std::size_t i = 0; i < schemes.size(); ++i)
    for (std::size_t j = i + 1; j < schemes.size(); ++j)
      for (const std::string metric : {"dice", "sensitivity"}) {
        const std::string sa = scheme_name(schemes[i]);
        const std::string sb = scheme_name(schemes[j]);
        std::map<std::tuple<int, int, int>, double> a_by_key, b_by_key;
        for (const auto& r : result.per_slice) {
          std::optional<double> v;
          if (metric == "dice") v = r.metrics.dice_score;
          else if (r.metrics.sens) v = *r.metrics.sens;
          if (!v) continue;
          const auto key = std::make_tuple(r.permutation, r.metrics.subject_id,
                                           r.metrics.slice_id);
          if (r.scheme == sa) a_by_key[key] = *v;
          if (r.scheme == sb) b_by_key[key] = *v;
        }
        std::vector<double> a, b;
        for (const auto& [key, va] : a_by_key) {
          auto it = b_by_key.find(key);
          if (it != b_by_key.end()) {
            a.push_back(va);
            b.push_back(it->second);
          }
        }
        WilcoxonRecord rec;
        rec.metric = metric;
        rec.scheme_a = sa;
        rec.scheme_b = sb;
        try {
          auto w = wilcoxon_signed_rank(a, b);
          rec.statistic = w.statistic;
          rec.n_effective = w.n_effective;
          rec.p_value = w.p_value;
          rec.method = w.method;
        } catch (const InsufficientDataError&) {
          rec.method = "insufficient-data";
        }
        result.wilcoxon.push_back(std::move(rec));
      }
  return result;
}

// ---------------------------------------------------------------------------
// Data ablation: successively remove positive training subjects from one
// fixed fold assignment and compare schemes on its held-out test fold.
// ---------------------------------------------------------------------------

struct AblationPoint {
  double size_frac = 1.0;
  std::uint64_t seed = 0;
  std::string scheme;
  double median_dice = 0.0;
  double median_sensitivity = 0.0;
  std::optional<double> rel_gain_dice;  // (adv - mce) / mce at this (size, seed)
  std::optional<double> rel_gain_sens;
  std::vector<int> train_subjects;      // nested across sizes for one seed
};

inline std::vector<AblationPoint> ablation_run(const Cohort& cohort, const ExperimentConfig& cfg,
                                               int base_fold, const std::vector<double>& sizes,
                                               const std::vector<std::uint64_t>& seeds,
                                               int n_folds, std::uint64_t master_seed) {
  ADVSEG_CHECK(!sizes.empty() && !seeds.empty(), ConfigError, "ablation: empty sizes or seeds");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    ADVSEG_CHECK(sizes[i] < sizes[i - 1], ConfigError,
                 "ablation: sizes must be strictly decreasing");
  ADVSEG_CHECK(sizes.front() <= 1.0 && sizes.back() > 0.0, ConfigError,
               "ablation: sizes must lie in (0, 1]");

  auto ids = detail::positive_subjects(cohort);
  auto folds = make_folds(ids, n_folds, mix_seed(master_seed, 0xF01D5ull));
  ADVSEG_CHECK(base_fold >= 0 && base_fold < static_cast<int>(folds.size()), ConfigError,
               "ablation: base_fold ", base_fold, " out of range");
  const auto& fold = folds[static_cast<std::size_t>(base_fold)];

  std::vector<AblationPoint> table;
  for (std::uint64_t run_seed : seeds) {
    // one nested removal order per seed
    std::vector<int> order = fold.train;
    std::mt19937_64 rng(mix_seed(master_seed, 0xAB1A7Eull, run_seed));
    std::shuffle(order.begin(), order.end(), rng);
    const std::uint64_t model_seed = mix_seed(master_seed, run_seed, 0x0DE1ull);
    const std::uint64_t train_seed = mix_seed(master_seed, run_seed, 0x7A1Bull);

    for (double frac : sizes) {
      const int keep = std::max(
          1, static_cast<int>(std::llround(frac * static_cast<double>(order.size()))));
      std::vector<int> subset(order.begin(), order.begin() + keep);

      std::map<std::string, std::pair<double, double>> medians;  // scheme -> (dice, sens)
      for (Scheme scheme : {Scheme::Mce, Scheme::Adversarial}) {
        auto metrics = detail::train_and_test(cohort, cfg, scheme, fold, model_seed, train_seed,
                                              &subset);
        std::vector<double> dices, senses;
        for (const auto& m : metrics) {
          dices.push_back(m.dice_score);
          if (m.sens) senses.push_back(*m.sens);
        }
        const double med_dice = summarize(dices).median;
        const double med_sens = senses.empty() ? 0.0 : summarize(senses).median;
        medians[scheme_name(scheme)] = {med_dice, med_sens};

        AblationPoint pt;
        pt.size_frac = frac;
        pt.seed = run_seed;
        pt.scheme = scheme_name(scheme);
        pt.median_dice = med_dice;
        pt.median_sensitivity = med_sens;
        pt.train_subjects = subset;
        table.push_back(std::move(pt));
      }
      // relative gains attach to both scheme rows of this (size, seed)
      const auto [mce_dice, mce_sens] = medians.at("mce");
      const auto [adv_dice, adv_sens] = medians.at("adversarial");
      std::optional<double> gd, gs;
      if (mce_dice != 0.0) gd = (adv_dice - mce_dice) / mce_dice;
      if (mce_sens != 0.0) gs = (adv_sens - mce_sens) / mce_sens;
      for (auto it = table.rbegin(); it != table.rend() && it->size_frac == frac &&
                                     it->seed == run_seed;
           ++it) {
        it->rel_gain_dice = gd;
        it->rel_gain_sens = gs;
      }
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// CSV reports (atomic: temp file + rename). Undefined values render empty.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_opt(std::optional<double> v) {
  if (!v) return "";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", *v);
  return buf;
}

inline std::string fmt_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

class AtomicCsv {
 public:
  explicit AtomicCsv(const std::filesystem::path& path)
      : path_(path), tmp_(path.string() + ".tmp"), os_(tmp_, std::ios::trunc) {
    ADVSEG_CHECK(os_.good(), FormatError, "csv: cannot write ", path.string());
  }
  ~AtomicCsv() {
    os_.close();
    std::error_code ec;
    std::filesystem::rename(tmp_, path_, ec);
  }
  std::ofstream& stream() { return os_; }

 private:
  std::filesystem::path path_, tmp_;
  std::ofstream os_;
};

}  // namespace detail

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<SliceRecord>& rows) {
  detail::AtomicCsv csv(path);
  csv.stream() << "scheme,permutation,subject_id,slice_id,dice,sensitivity,specificity,tp,fp,tn,fn\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    csv.stream() << r.scheme << ',' << r.permutation << ',' << m.subject_id << ',' << m.slice_id
                 << ',' << detail::fmt_num(m.dice_score) << ',' << detail::fmt_opt(m.sens) << ','
                 << detail::fmt_opt(m.spec) << ',' << m.counts.tp << ',' << m.counts.fp << ','
                 << m.counts.tn << ',' << m.counts.fn << '\n';
  }
}

inline void write_summary_csv(const std::filesystem::path& path,
                              const std::vector<SummaryRecord>& rows) {
  detail::AtomicCsv csv(path);
  csv.stream() << "scheme,metric,mean,std,median,n\n";
  for (const auto& r : rows)
    csv.stream() << r.scheme << ',' << r.metric << ',' << detail::fmt_num(r.stats.mean) << ','
                 << detail::fmt_num(r.stats.std_dev) << ',' << detail::fmt_num(r.stats.median)
                 << ',' << r.stats.n << '\n';
}

inline void write_wilcoxon_csv(const std::filesystem::path& path,
                               const std::vector<WilcoxonRecord>& rows) {
  detail::AtomicCsv csv(path);
  csv.stream() << "metric,scheme_a,scheme_b,W,n_effective,p,method\n";
  for (const auto& r : rows)
    csv.stream() << r.metric << ',' << r.scheme_a << ',' << r.scheme_b << ','
                 << detail::fmt_opt(r.statistic) << ',' << r.n_effective << ','
                 << detail::fmt_opt(r.p_value) << ',' << r.method << '\n';
}

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationPoint>& rows) {
  detail::AtomicCsv csv(path);
  csv.stream() << "size,seed,scheme,median_dice,median_sensitivity,rel_gain_dice,rel_gain_sens\n";
  for (const auto& r : rows)
    csv.stream() << detail::fmt_num(r.size_frac) << ',' << r.seed << ',' << r.scheme << ','
                 << detail::fmt_num(r.median_dice) << ',' << detail::fmt_num(r.median_sensitivity)
                 << ',' << detail::fmt_opt(r.rel_gain_dice) << ','
                 << detail::fmt_opt(r.rel_gain_sens) << '\n';
}

}  // namespace advseg
