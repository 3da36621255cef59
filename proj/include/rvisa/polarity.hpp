#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace rvisa {

enum class Polarity { positive, negative, neutral };

inline constexpr std::array<Polarity, 3> kPolarities = {Polarity::positive, Polarity::negative,
                                                        Polarity::neutral};

constexpr std::string_view to_string(Polarity p) noexcept {
  switch (p) {
    case Polarity::positive:
      return "positive";
    case Polarity::negative:
      return "negative";
    case Polarity::neutral:
      return "neutral";
  }
  return "neutral";
}

constexpr std::size_t index_of(Polarity p) noexcept { return static_cast<std::size_t>(p); }

// Exact, case-sensitive match against the three label words.
inline std::optional<Polarity> parse_polarity(std::string_view s) noexcept {
  for (auto p : kPolarities) {
    if (s == to_string(p)) return p;
  }
  return std::nullopt;
}

}  // namespace rvisa
