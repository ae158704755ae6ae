#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace nas {

/// Dense grid of integer class labels, rank 1 to 4.
struct LabelVolume {
  std::vector<std::size_t> shape;
  std::vector<int> labels;

  LabelVolume() = default;
  /// Throws std::invalid_argument if the label count does not match the shape.
  LabelVolume(std::vector<std::size_t> shape, std::vector<int> labels);
};

/// Mean Dice over foreground classes 1..C-1. A class absent from both
/// volumes counts as 1. Throws std::invalid_argument on shape mismatch,
/// C < 2 or labels outside [0, C-1].
double dice(const LabelVolume& reference, const LabelVolume& prediction, int num_classes);

/// Same metric on binary maps laid out as C x voxels (class-major).
double dice_one_hot(std::span<const std::uint8_t> reference, std::span<const std::uint8_t> prediction,
                    std::size_t num_classes);

/// 1-based ranks; tied values share their mean rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation of average ranks. nullopt when either side is
/// constant (the coefficient is undefined). Throws on n < 2 or length mismatch.
std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys);

/// Spearman over the items whose first score is among the top
/// ceil(fraction * n). nullopt if fewer than two items are selected.
std::optional<double> top_fraction_correlation(std::span<const std::pair<double, double>> pairs, double fraction);

/// One-sided Wilcoxon signed-rank p-value for the alternative a > b.
/// Zero differences are dropped; tied magnitudes share mid-ranks. Exact by
/// enumerating all sign assignments for n <= 20, exact by counting the
/// signed-rank distribution for n <= 60, normal approximation with tie and
/// continuity correction beyond. All-zero differences give 1.
double wilcoxon_one_sided(std::span<const double> a, std::span<const double> b);

/// min(1, m * p).
double bonferroni(double p, int m);

}  // namespace nas
