#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "advseg/experiments.hpp"
#include "advseg/metrics.hpp"
#include "advseg/wilcoxon.hpp"

using namespace advseg;

namespace {

// independent brute-force Wilcoxon p: enumerate every sign assignment
double brute_force_wilcoxon_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  const int n = static_cast<int>(d.size());

  // midranks by sorting |d|
  std::vector<double> ad(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) ad[i] = std::fabs(d[i]);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return ad[x] < ad[y]; });
  std::vector<double> rank(d.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && ad[order[j + 1]] == ad[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }

  double w_plus = 0, w_minus = 0;
  for (std::size_t k = 0; k < d.size(); ++k) (d[k] > 0 ? w_plus : w_minus) += rank[k];
  const double w_obs = std::min(w_plus, w_minus);

  std::uint64_t count = 0;
  const std::uint64_t total = 1ull << n;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    double w = 0;
    for (int k = 0; k < n; ++k)
      if (mask & (1ull << k)) w += rank[static_cast<std::size_t>(k)];
    if (w <= w_obs) ++count;
  }
  return std::min(1.0, 2.0 * static_cast<double>(count) / static_cast<double>(total));
}

Tensor onehot_map(const std::vector<int>& classes, int h, int w) {
  auto t = Tensor::zeros({4, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t p = 0; p < plane; ++p)
    t.data()[classes[static_cast<std::size_t>(p)] * plane + p] = 1.0f;
  return t;
}

}  // namespace

TEST_CASE("confusion counts on hand cases") {
  // perfect prediction
  auto gt = onehot_map({0, 3, 3, 1}, 2, 2);
  auto c = confusion_counts(gt, gt);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);
  CHECK(c.tp == 2);
  CHECK(c.total() == 4);

  // all-background prediction against 10 tumor pixels
  std::vector<int> cls(25, 0);
  for (int i = 0; i < 10; ++i) cls[static_cast<std::size_t>(i)] = 3;
  auto gt2 = onehot_map(cls, 5, 5);
  auto pred2 = onehot_map(std::vector<int>(25, 0), 5, 5);
  auto c2 = confusion_counts(pred2, gt2);
  CHECK(c2.fn == 10);
  CHECK(c2.tp == 0);
  CHECK(c2.tn == 15);
}

TEST_CASE("argmax ties resolve to the lowest class index") {
  auto pred = Tensor::full({4, 1, 1}, 0.25f);  // four-way tie -> class 0
  auto gt = onehot_map({3}, 1, 1);
  auto c = confusion_counts(pred, gt);
  CHECK(c.fn == 1);
  CHECK(c.tp == 0);
}

TEST_CASE("confusion counts match a naive pixel loop on random maps") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 3 + static_cast<int>(rng() % 5), w = 3 + static_cast<int>(rng() % 5);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    auto pred = Tensor::zeros({4, h, w});
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    for (std::int64_t i = 0; i < pred.numel(); ++i) pred.data()[i] = dist(rng);
    std::vector<int> cls(static_cast<std::size_t>(plane));
    for (auto& v : cls) v = static_cast<int>(rng() % 4);
    auto gt = onehot_map(cls, h, w);

    auto fast = confusion_counts(pred, gt);
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::int64_t p = 0; p < plane; ++p) {
      int best = 0;
      for (int c = 1; c < 4; ++c)
        if (pred.data()[c * plane + p] > pred.data()[best * plane + p]) best = c;
      const bool pt = best == 3, gtm = cls[static_cast<std::size_t>(p)] == 3;
      if (pt && gtm) ++tp;
      else if (pt) ++fp;
      else if (gtm) ++fn;
      else ++tn;
    }
    REQUIRE(fast.tp == tp);
    REQUIRE(fast.fp == fp);
    REQUIRE(fast.tn == tn);
    REQUIRE(fast.fn == fn);
    REQUIRE(fast.total() == plane);
  }
}

TEST_CASE("dice values and conventions") {
  CHECK(dice(10, 0, 0) == 1.0);
  CHECK(dice(2, 2, 2) == Catch::Approx(0.5));  // 4 px pred, 4 px gt, overlap 2
  CHECK(dice(0, 3, 4) == 0.0);                 // disjoint non-empty masks
  CHECK(dice(0, 0, 0) == 1.0);                 // both empty by convention
}

TEST_CASE("dice is symmetric and maximal only at identity") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t tp = static_cast<std::int64_t>(rng() % 20);
    const std::int64_t fp = static_cast<std::int64_t>(rng() % 20);
    const std::int64_t fn = static_cast<std::int64_t>(rng() % 20);
    // swapping prediction and ground truth swaps fp and fn
    CHECK(dice(tp, fp, fn) == Catch::Approx(dice(tp, fn, fp)));
    if (fp + fn > 0) CHECK(dice(tp, fp, fn) < 1.0);
  }
}

TEST_CASE("sensitivity and specificity handle empty denominators") {
  CHECK(*sensitivity(5, 0) == 1.0);
  CHECK(*specificity(7, 0) == 1.0);
  CHECK_FALSE(sensitivity(0, 0).has_value());  // lesion-free ground truth
  CHECK(specificity(90, 10).has_value());
  CHECK(*specificity(90, 10) == Catch::Approx(0.9));
}

TEST_CASE("summarize basics and table rendering") {
  auto one = summarize({0.5});
  CHECK(one.mean == 0.5);
  CHECK(one.std_dev == 0.0);
  CHECK(one.median == 0.5);
  CHECK(one.n == 1);

  auto two = summarize({0.0, 1.0});
  CHECK(two.mean == Catch::Approx(0.5));
  CHECK(two.std_dev == Catch::Approx(0.5));
  CHECK(two.median == Catch::Approx(0.5));

  auto s = summarize({0.351, 0.0, 0.702});
  CHECK(s.formatted() == "0.35 ± 0.29");

  CHECK_THROWS_AS(summarize({}), ContractError);
}

TEST_CASE("summary is order-independent") {
  std::vector<double> v = {0.1, 0.9, 0.4, 0.7, 0.2, 0.5};
  auto a = summarize(v);
  std::mt19937_64 rng(9);
  std::shuffle(v.begin(), v.end(), rng);
  auto b = summarize(v);
  CHECK(a.mean == b.mean);
  CHECK(a.std_dev == b.std_dev);
  CHECK(a.median == b.median);
}

TEST_CASE("wilcoxon rejects degenerate input") {
  std::vector<double> a = {1, 2, 3, 4, 5, 6};
  CHECK_THROWS_AS(wilcoxon_signed_rank(a, a), InsufficientDataError);
  std::vector<double> b = {1, 2, 3};
  CHECK_THROWS_AS(wilcoxon_signed_rank(b, std::vector<double>{2, 3, 4}),
                  InsufficientDataError);
}

TEST_CASE("wilcoxon all-positive n=6 gives the textbook exact p") {
  std::vector<double> a = {2, 3, 4, 5, 6, 7};
  std::vector<double> b = {1, 2, 3, 4, 5, 6};
  auto r = wilcoxon_signed_rank(a, b);
  CHECK(r.method == "exact");
  CHECK(r.n_effective == 6);
  CHECK(r.statistic == 0.0);
  CHECK(r.p_value == Catch::Approx(2.0 / 64.0));
}

TEST_CASE("wilcoxon exact p equals full enumeration on random cases") {
  std::mt19937_64 rng(2024);
  int done = 0;
  while (done < 50) {
    const int n = 6 + static_cast<int>(rng() % 7);  // 6..12 pairs
    std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
    // quantized values force ties and occasional zero differences
    for (int i = 0; i < n; ++i) {
      a[static_cast<std::size_t>(i)] = static_cast<double>(rng() % 8) / 4.0;
      b[static_cast<std::size_t>(i)] = static_cast<double>(rng() % 8) / 4.0;
    }
    int nonzero = 0;
    for (int i = 0; i < n; ++i)
      if (a[static_cast<std::size_t>(i)] != b[static_cast<std::size_t>(i)]) ++nonzero;
    if (nonzero < 5) continue;
    auto r = wilcoxon_signed_rank(a, b);
    REQUIRE(r.method == "exact");
    REQUIRE(r.p_value == brute_force_wilcoxon_p(a, b));  // exactly equal
    ++done;
  }
}

TEST_CASE("wilcoxon switches to the normal approximation beyond n=25") {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> a, b;
  for (int i = 0; i < 40; ++i) {
    const double base = noise(rng);
    a.push_back(base + 0.3 + 0.1 * noise(rng));
    b.push_back(base);
  }
  auto r = wilcoxon_signed_rank(a, b);
  CHECK(r.method == "normal-approximation");
  CHECK(r.n_effective == 40);
  CHECK(r.p_value > 0.0);
  CHECK(r.p_value < 1.0);
  // a clear location shift should be flagged
  CHECK(r.p_value < 0.05);
}

TEST_CASE("make_folds rotates roles over near-equal partitions") {
  std::vector<int> subjects(8);
  std::iota(subjects.begin(), subjects.end(), 0);
  auto perms = make_folds(subjects, 4, 11);
  REQUIRE(perms.size() == 4);

  std::multiset<int> tested;
  for (const auto& p : perms) {
    CHECK(p.test.size() == 2);
    CHECK(p.selection.size() == 2);
    CHECK(p.train.size() == 4);
    std::set<int> all(p.train.begin(), p.train.end());
    all.insert(p.selection.begin(), p.selection.end());
    for (int t : p.test) CHECK(all.count(t) == 0);
    tested.insert(p.test.begin(), p.test.end());
  }
  // each subject is a test subject exactly once across permutations
  for (int s : subjects) CHECK(tested.count(s) == 1);

  // determinism
  auto again = make_folds(subjects, 4, 11);
  for (std::size_t i = 0; i < perms.size(); ++i) CHECK(perms[i].test == again[i].test);
  auto other = make_folds(subjects, 4, 12);
  bool any_diff = false;
  for (std::size_t i = 0; i < perms.size(); ++i)
    if (perms[i].test != other[i].test) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("make_folds splits 55 subjects into 14/14/14/13") {
  std::vector<int> subjects(55);
  std::iota(subjects.begin(), subjects.end(), 100);
  auto perms = make_folds(subjects, 4, 3);
  std::multiset<std::size_t> sizes;
  for (const auto& p : perms) sizes.insert(p.test.size());
  CHECK(sizes == std::multiset<std::size_t>{14, 14, 14, 13});

  CHECK_THROWS_AS(make_folds({1, 2, 3}, 4, 0), ConfigError);
}
