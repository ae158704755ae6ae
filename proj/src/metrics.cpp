#include "nas/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace nas {

LabelVolume::LabelVolume(std::vector<std::size_t> shape_, std::vector<int> labels_)
    : shape(std::move(shape_)), labels(std::move(labels_)) {
  if (shape.empty() || shape.size() > 4) throw std::invalid_argument("label volume rank must be 1..4");
  const auto n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  if (n != labels.size()) throw std::invalid_argument("label count does not match shape");
}

double dice(const LabelVolume& reference, const LabelVolume& prediction, int num_classes) {
  if (num_classes < 2) throw std::invalid_argument("dice needs at least two classes");
  if (reference.shape != prediction.shape || reference.labels.size() != prediction.labels.size())
    throw std::invalid_argument("reference and prediction shapes differ");
  const auto c = static_cast<std::size_t>(num_classes);
  std::vector<std::size_t> ref_count(c, 0);
  std::vector<std::size_t> pred_count(c, 0);
  std::vector<std::size_t> both(c, 0);
  for (std::size_t i = 0; i < reference.labels.size(); ++i) {
    const int r = reference.labels[i];
    const int p = prediction.labels[i];
    if (r < 0 || r >= num_classes || p < 0 || p >= num_classes) throw std::invalid_argument("label out of range");
    ++ref_count[static_cast<std::size_t>(r)];
    ++pred_count[static_cast<std::size_t>(p)];
    if (r == p) ++both[static_cast<std::size_t>(r)];
  }
  double sum = 0.0;
  for (std::size_t k = 1; k < c; ++k) {
    const auto denom = ref_count[k] + pred_count[k];
    sum += denom == 0 ? 1.0 : 2.0 * static_cast<double>(both[k]) / static_cast<double>(denom);
  }
  return sum / static_cast<double>(c - 1);
}

double dice_one_hot(std::span<const std::uint8_t> reference, std::span<const std::uint8_t> prediction,
                    std::size_t num_classes) {
  if (num_classes < 2) throw std::invalid_argument("dice needs at least two classes");
  if (reference.size() != prediction.size() || reference.size() % num_classes != 0)
    throw std::invalid_argument("reference and prediction shapes differ");
  const std::size_t voxels = reference.size() / num_classes;
  double sum = 0.0;
  for (std::size_t k = 1; k < num_classes; ++k) {
    std::size_t r = 0, p = 0, both = 0;
    for (std::size_t v = 0; v < voxels; ++v) {
      const bool in_r = reference[k * voxels + v] != 0;
      const bool in_p = prediction[k * voxels + v] != 0;
      r += in_r;
      p += in_p;
      both += in_r && in_p;
    }
    sum += r + p == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(r + p);
  }
  return sum / static_cast<double>(num_classes - 1);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman inputs differ in length");
  if (xs.size() < 2) throw std::invalid_argument("spearman needs at least two points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(rx.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::optional<double> top_fraction_correlation(std::span<const std::pair<double, double>> pairs, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must be in (0, 1]");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pairs[a].first > pairs[b].first; });
  const auto keep = std::min(pairs.size(), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pairs.size()))));
  if (keep < 2) return std::nullopt;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < keep; ++i) {
    xs.push_back(pairs[order[i]].first);
    ys.push_back(pairs[order[i]].second);
  }
  return spearman(xs, ys);
}

namespace {

// Upper tail P(W+ >= observed) with doubled (integer) ranks.
double exact_by_enumeration(const std::vector<long long>& ranks2, long long observed2) {
  const std::size_t n = ranks2.size();
  const std::uint64_t total = std::uint64_t{1} << n;
  std::uint64_t count = 0;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    long long w = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1U) w += ranks2[i];
    count += w >= observed2;
  }
  return static_cast<double>(count) / static_cast<double>(total);
}

double exact_by_counting(const std::vector<long long>& ranks2, long long observed2) {
  const long long max_sum = std::accumulate(ranks2.begin(), ranks2.end(), 0LL);
  std::vector<std::uint64_t> ways(static_cast<std::size_t>(max_sum) + 1, 0);
  ways[0] = 1;
  long long reach = 0;
  for (long long r : ranks2) {
    for (long long s = reach; s >= 0; --s)
      if (ways[static_cast<std::size_t>(s)]) ways[static_cast<std::size_t>(s + r)] += ways[static_cast<std::size_t>(s)];
    reach += r;
  }
  std::uint64_t count = 0;
  for (long long s = std::max(observed2, 0LL); s <= max_sum; ++s) count += ways[static_cast<std::size_t>(s)];
  return static_cast<double>(count) / std::ldexp(1.0, static_cast<int>(ranks2.size()));
}

}  // namespace

double wilcoxon_one_sided(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon needs paired samples of equal length");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw std::invalid_argument("wilcoxon needs finite values");
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.empty()) return 1.0;

  std::vector<double> magnitudes(diffs.size());
  std::transform(diffs.begin(), diffs.end(), magnitudes.begin(), [](double d) { return std::abs(d); });
  const auto ranks = average_ranks(magnitudes);
  std::vector<long long> ranks2(ranks.size());
  long long observed2 = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    ranks2[i] = std::llround(2.0 * ranks[i]);
    if (diffs[i] > 0) observed2 += ranks2[i];
  }

  const std::size_t n = diffs.size();
  if (n <= 20) return exact_by_enumeration(ranks2, observed2);
  if (n <= 60) return exact_by_counting(ranks2, observed2);

  const double nd = static_cast<double>(n);
  double tie_term = 0.0;
  std::vector<double> sorted = magnitudes;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double mean = nd * (nd + 1.0) / 4.0;
  const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
  const double w = static_cast<double>(observed2) / 2.0;
  const double z = (w - mean - 0.5) / std::sqrt(var);
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double bonferroni(double p, int m) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must be in [0, 1]");
  if (m < 1) throw std::invalid_argument("m must be at least 1");
  return std::min(1.0, p * m);
}

}  // namespace nas
