#include <algorithm>
#include <cmath>
#include <numeric>

#include "bcnn/metrics.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bcnn;

namespace {

// Independent AP oracle: enumerates the full PR staircase and scans every
// prefix for each of the 101 recall levels.
double ap_oracle(std::span<const double> scores, std::span<const std::uint8_t> pos) {
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  long long positives = std::count(pos.begin(), pos.end(), std::uint8_t(1));
  std::vector<double> prec, rec;
  long long tp = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    tp += pos[order[i]];
    prec.push_back(double(tp) / double(i + 1));
    rec.push_back(double(tp) / double(positives));
  }
  double acc = 0;
  for (int k = 0; k <= 100; ++k) {
    double level = double(k) / 100.0;
    double best = 0;
    for (size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= level) best = std::max(best, prec[i]);
    acc += best;
  }
  return acc / 101.0;
}

ElementRecord rec_of(std::int32_t truth, std::int32_t pred, double score = 0.5,
                     double entropy = 0.1, double dist = 0.0) {
  ElementRecord r;
  r.true_label = truth;
  r.predicted = pred;
  r.mean_score = real(score);
  r.entropy_paper = real(entropy);
  r.entropy_mean = real(entropy);
  r.dist_to_surface = static_cast<float>(dist);
  return r;
}

}  // namespace

TEST_CASE("iou: exact match, disjoint prediction, hand-counted case") {
  std::vector<std::int32_t> gt{0, 1, 2, 1, 0};
  IoUResult perfect = iou(gt, gt, {}, 3);
  for (Index c = 0; c < 3; ++c) {
    CHECK(perfect.present[size_t(c)]);
    CHECK(perfect.per_class[size_t(c)] == doctest::Approx(1.0));
  }
  CHECK(perfect.miou == doctest::Approx(1.0));

  std::vector<std::int32_t> pred_a{1, 1, 1};
  std::vector<std::int32_t> gt_b{2, 2, 2};
  IoUResult disjoint = iou(pred_a, gt_b, {}, 3);
  CHECK(disjoint.per_class[1] == doctest::Approx(0.0));
  CHECK(disjoint.per_class[2] == doctest::Approx(0.0));
  CHECK_FALSE(disjoint.present[0]);  // class 0 absent everywhere

  // pred {A,A,B}, gt {A,B,B}: IoU(A) = 1/2, IoU(B) = 1/2
  std::vector<std::int32_t> p{0, 0, 1};
  std::vector<std::int32_t> g{0, 1, 1};
  IoUResult hand = iou(p, g, {}, 2);
  CHECK(hand.per_class[0] == doctest::Approx(0.5));
  CHECK(hand.per_class[1] == doctest::Approx(0.5));
  CHECK(hand.miou == doctest::Approx(0.5));
}

TEST_CASE("iou: masking and errors") {
  std::vector<std::int32_t> pred{0, 1, 1};
  std::vector<std::int32_t> gt{0, 0, 1};
  std::vector<std::uint8_t> mask{1, 0, 1};
  IoUResult r = iou(pred, gt, mask, 2);
  CHECK(r.per_class[0] == doctest::Approx(1.0));
  CHECK(r.per_class[1] == doctest::Approx(1.0));
  CHECK(r.miou == doctest::Approx(1.0));
  CHECK_THROWS_AS(iou(pred, gt, std::vector<std::uint8_t>{0, 0, 0}, 2), ContractError);
}

TEST_CASE("iou is 1 exactly when masked sets coincide") {
  RngStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::int32_t> gt(50), pred(50);
    std::vector<std::uint8_t> mask(50);
    for (size_t i = 0; i < 50; ++i) {
      gt[i] = std::int32_t(rng.next_index(4));
      pred[i] = rng.uniform(0, 1) < 0.8 ? gt[i] : std::int32_t(rng.next_index(4));
      mask[i] = rng.uniform(0, 1) < 0.7;
    }
    if (std::count(mask.begin(), mask.end(), std::uint8_t(1)) == 0) continue;
    IoUResult r = iou(pred, gt, mask, 4);
    bool coincide = true;
    for (size_t i = 0; i < 50; ++i)
      if (mask[i] && pred[i] != gt[i]) coincide = false;
    bool all_ones = true;
    for (Index c = 0; c < 4; ++c) {
      CHECK(r.per_class[size_t(c)] >= 0.0);
      CHECK(r.per_class[size_t(c)] <= 1.0);
      if (r.present[size_t(c)] && r.per_class[size_t(c)] < 1.0) all_ones = false;
    }
    CHECK(all_ones == coincide);
  }
}

TEST_CASE("average_precision: separable ranking gives 1.0") {
  std::vector<double> scores{0.9, 0.8, 0.3, 0.2};
  std::vector<std::uint8_t> pos{1, 1, 0, 0};
  APResult r = average_precision(scores, pos);
  CHECK(r.has_positives);
  CHECK(r.ap == doctest::Approx(1.0));
}

TEST_CASE("average_precision: positives buried under many negatives") {
  std::vector<double> scores;
  std::vector<std::uint8_t> pos;
  for (int i = 0; i < 200; ++i) {
    scores.push_back(0.5 + i * 1e-3);
    pos.push_back(0);
  }
  scores.push_back(0.0);
  scores.push_back(0.0);
  pos.push_back(1);
  pos.push_back(1);
  APResult r = average_precision(scores, pos);
  CHECK(r.ap == doctest::Approx(ap_oracle(scores, pos)).epsilon(1e-12));
  CHECK(r.ap < 0.02);
}

TEST_CASE("average_precision: 4-element hand case matches the oracle") {
  std::vector<double> scores{0.9, 0.8, 0.7, 0.6};
  std::vector<std::uint8_t> pos{1, 0, 1, 0};
  APResult r = average_precision(scores, pos);
  CHECK(r.ap == doctest::Approx(ap_oracle(scores, pos)).epsilon(1e-12));
  // staircase: prec (1, 1/2, 2/3, 1/2), rec (1/2, 1/2, 1, 1)
  // interp: 1 for r <= 0.5, 2/3 above -> (51*1 + 50*(2/3))/101
  CHECK(r.ap == doctest::Approx((51.0 + 50.0 * 2 / 3) / 101.0).epsilon(1e-12));
}

TEST_CASE("average_precision equals the brute-force oracle on random instances") {
  RngStream rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    size_t n = 1 + rng.next_index(20);
    std::vector<double> scores(n);
    std::vector<std::uint8_t> pos(n);
    bool any = false;
    for (size_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform(0, 1);
      if (rng.uniform(0, 1) < 0.3) scores[i] = std::round(scores[i] * 4) / 4;  // force ties
      pos[i] = rng.uniform(0, 1) < 0.4;
      any = any || pos[i];
    }
    if (!any) {
      CHECK_FALSE(average_precision(scores, pos).has_positives);
      continue;
    }
    APResult r = average_precision(scores, pos);
    CHECK(r.ap == doctest::Approx(ap_oracle(scores, pos)).epsilon(1e-12));
  }
}

TEST_CASE("average_precision is invariant under monotone score transforms") {
  RngStream rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    size_t n = 2 + rng.next_index(30);
    std::vector<double> scores(n), mapped(n);
    std::vector<std::uint8_t> pos(n);
    bool any = false;
    for (size_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform(-2, 2);
      mapped[i] = std::exp(3 * scores[i]) + 1;
      pos[i] = rng.uniform(0, 1) < 0.5;
      any = any || pos[i];
    }
    if (!any) continue;
    CHECK(average_precision(scores, pos).ap ==
          doctest::Approx(average_precision(mapped, pos).ap).epsilon(1e-12));
  }
}

TEST_CASE("mean_average_precision skips classes without positives") {
  // 3 elements over 3 classes, class 2 never appears
  std::vector<real> probs{0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.6, 0.3, 0.1};
  std::vector<std::int32_t> gt{0, 1, 0};
  MAPResult r = mean_average_precision(probs, 3, gt, {});
  CHECK(r.classes_used == 2);
  CHECK(r.per_class[0].has_positives);
  CHECK_FALSE(r.per_class[2].has_positives);
  CHECK(r.map == doctest::Approx((r.per_class[0].ap + r.per_class[1].ap) / 2));
}

TEST_CASE("bhattacharyya: hand cases") {
  Histogram2 h;
  h.edges0 = {0, 0.5, 1.0};
  h.kind = PartitionKind::TpFn;

  h.tp = {3, 1};
  h.other = {3, 1};
  CHECK(bhattacharyya(h) == doctest::Approx(1.0).epsilon(1e-12));

  h.tp = {4, 0};
  h.other = {0, 4};
  CHECK(bhattacharyya(h) == doctest::Approx(0.0).epsilon(1e-12));

  h.tp = {1, 1};   // normalized [0.5, 0.5]
  h.other = {7, 0};  // normalized [1, 0]
  CHECK(bhattacharyya(h) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));

  // symmetry
  Histogram2 swapped = h;
  std::swap(swapped.tp, swapped.other);
  CHECK(bhattacharyya(swapped) == doctest::Approx(bhattacharyya(h)).epsilon(1e-12));

  // paper-literal variant: raw counts with the 1/N prefactor
  h.tp = {1, 1};
  h.other = {1, 0};
  CHECK(bhattacharyya(h, true) == doctest::Approx(0.5).epsilon(1e-12));

  h.tp = {0, 0};
  CHECK_THROWS_AS(bhattacharyya(h), ContractError);
}

TEST_CASE("bhattacharyya stays in [0,1] for random histograms") {
  RngStream rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    Histogram2 h;
    h.edges0 = uniform_edges(0, 1, 8);
    h.tp.resize(8);
    h.other.resize(8);
    for (int b = 0; b < 8; ++b) {
      h.tp[size_t(b)] = std::floor(rng.uniform(0, 20));
      h.other[size_t(b)] = std::floor(rng.uniform(0, 20));
    }
    if (std::accumulate(h.tp.begin(), h.tp.end(), 0.0) == 0) h.tp[0] = 1;
    if (std::accumulate(h.other.begin(), h.other.end(), 0.0) == 0) h.other[0] = 1;
    double bc = bhattacharyya(h);
    CHECK(bc >= 0.0);
    CHECK(bc <= 1.0 + 1e-12);
    CHECK(bhattacharyya(h, true) >= 0.0);
  }
}

TEST_CASE("bin_predictions: 1d scores, both correct") {
  std::vector<ElementRecord> recs{rec_of(0, 0, 0.2), rec_of(1, 1, 0.8)};
  Histogram2 h = bin_predictions(recs, {HistAxis::Score}, {{0, 0.5, 1.0}}, PartitionKind::TpFn);
  CHECK(h.tp == std::vector<double>{1, 1});
  CHECK(h.other == std::vector<double>{0, 0});
}

TEST_CASE("bin_predictions: 2d entry lands in exactly one bin") {
  std::vector<ElementRecord> recs{rec_of(0, 1, 0.3, 0.9)};
  Histogram2 h = bin_predictions(recs, {HistAxis::EntropyPaper, HistAxis::Score},
                                 {uniform_edges(0, 2, 4), uniform_edges(0, 1, 5)},
                                 PartitionKind::TpFp);
  CHECK(std::accumulate(h.tp.begin(), h.tp.end(), 0.0) == 0);
  CHECK(std::accumulate(h.other.begin(), h.other.end(), 0.0) == 1);
  // entropy 0.9 -> bin 1 of 4; score 0.3 -> bin 1 of 5
  CHECK(h.other[size_t(1 * 5 + 1)] == 1);
}

TEST_CASE("bin_predictions: totals are conserved and clamping works") {
  RngStream rng(31);
  std::vector<ElementRecord> recs;
  size_t evaluated = 0;
  for (int i = 0; i < 500; ++i) {
    ElementRecord r = rec_of(std::int32_t(rng.next_index(3)), std::int32_t(rng.next_index(3)),
                             rng.uniform(-0.5, 1.5), rng.uniform(-1, 4));
    r.evaluated = rng.uniform(0, 1) < 0.9;
    evaluated += r.evaluated;
    recs.push_back(r);
  }
  Histogram2 h = bin_predictions(recs, {HistAxis::Score, HistAxis::EntropyPaper},
                                 {uniform_edges(0, 1, 10), uniform_edges(0, 2, 6)},
                                 PartitionKind::TpFn);
  double total = std::accumulate(h.tp.begin(), h.tp.end(), 0.0) +
                 std::accumulate(h.other.begin(), h.other.end(), 0.0);
  CHECK(total == double(evaluated));
  CHECK_THROWS_AS(
      bin_predictions(recs, {HistAxis::Score}, {{0.5, 0.2}}, PartitionKind::TpFn),
      ConfigError);
}

TEST_CASE("accuracy_precision_recall: perfect, constant, and hand case") {
  std::vector<ElementRecord> perfect;
  for (int i = 0; i < 12; ++i)
    perfect.push_back(rec_of(i % 3, i % 3));
  PrfResult p = accuracy_precision_recall(perfect, 3);
  CHECK(p.accuracy == doctest::Approx(1.0));
  for (Index c = 0; c < 3; ++c) {
    CHECK(p.precision[size_t(c)] == doctest::Approx(1.0));
    CHECK(p.recall[size_t(c)] == doctest::Approx(1.0));
  }

  std::vector<ElementRecord> constant;
  for (int i = 0; i < 100; ++i) constant.push_back(rec_of(i % 10, 0));
  PrfResult c = accuracy_precision_recall(constant, 10);
  CHECK(c.accuracy == doctest::Approx(0.1));

  // pred {A,A,B}, gt {A,B,B}
  std::vector<ElementRecord> hand{rec_of(0, 0), rec_of(1, 0), rec_of(1, 1)};
  PrfResult h = accuracy_precision_recall(hand, 2);
  CHECK(h.accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(h.precision[0] == doctest::Approx(0.5));
  CHECK(h.recall[1] == doctest::Approx(0.5));
}
