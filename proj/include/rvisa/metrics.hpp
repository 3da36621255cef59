#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

#include "rvisa/error.hpp"
#include "rvisa/polarity.hpp"

namespace rvisa {

// confusion[gold][pred]
using ConfusionMatrix = std::array<std::array<std::size_t, 3>, 3>;

namespace detail {
inline void check_aligned(std::span<const Polarity> pred, std::span<const Polarity> gold) {
  if (pred.size() != gold.size()) throw ArgumentError("prediction and gold lengths differ");
  if (pred.empty()) throw ArgumentError("metrics need at least one prediction");
}
}  // namespace detail

inline ConfusionMatrix confusion(std::span<const Polarity> pred, std::span<const Polarity> gold) {
  detail::check_aligned(pred, gold);
  ConfusionMatrix m{};
  for (std::size_t i = 0; i < pred.size(); ++i) ++m[index_of(gold[i])][index_of(pred[i])];
  return m;
}

inline double accuracy(std::span<const Polarity> pred, std::span<const Polarity> gold) {
  detail::check_aligned(pred, gold);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Mean per-class F1 over the fixed three-label alphabet. A class that is
/// neither gold nor predicted anywhere contributes 0.
///
/// Per-class F1 is 2tp / (gold_c + pred_c); the three fractions are summed over
/// a common denominator so small inputs round once (7/9 comes out as 7.0 / 9.0).
inline double macro_f1(std::span<const Polarity> pred, std::span<const Polarity> gold) {
  const auto m = confusion(pred, gold);
  std::array<std::uint64_t, 3> num{};
  std::array<std::uint64_t, 3> den{1, 1, 1};
  for (std::size_t c = 0; c < 3; ++c) {
    std::uint64_t gold_c = 0;
    std::uint64_t pred_c = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      gold_c += m[c][k];
      pred_c += m[k][c];
    }
    if (gold_c + pred_c == 0) continue;
    num[c] = 2 * m[c][c];
    den[c] = gold_c + pred_c;
  }
  constexpr std::uint64_t kExact = std::uint64_t{1} << 53;
  const bool small = den[0] < (1u << 16) && den[1] < (1u << 16) && den[2] < (1u << 16) &&
                     3 * den[0] * den[1] * den[2] < kExact;
  if (small) {
    const std::uint64_t total = num[0] * den[1] * den[2] + num[1] * den[0] * den[2] + num[2] * den[0] * den[1];
    return static_cast<double>(total) / static_cast<double>(3 * den[0] * den[1] * den[2]);
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < 3; ++c) sum += static_cast<double>(num[c]) / static_cast<double>(den[c]);
  return sum / 3.0;
}

}  // namespace rvisa
