#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rvisa/corpus.hpp"
#include "rvisa/polarity.hpp"

namespace testing_support {

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::filesystem::path golden(const std::string& name) {
  return std::filesystem::path(RVISA_GOLDEN_DIR) / name;
}

inline std::filesystem::path source_dir() { return RVISA_SOURCE_DIR; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("rvisa_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline rvisa::Example price_example() {
  return {"r1", "a cheaper price should not equal a \"cheap\" product.", "price", rvisa::Polarity::positive, true,
          rvisa::Split::test};
}

// First whole-word label by scanning each label with find() over a lowercased copy,
// then taking the minimum accepted offset. Independent of the library's tokenizer.
inline std::optional<rvisa::Polarity> first_polarity_oracle(const std::string& text) {
  std::string low = text;
  for (auto& c : low) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  auto word = [](unsigned char c) { return c >= 0x80 || std::isalnum(c) || c == '_'; };
  std::optional<rvisa::Polarity> best;
  std::size_t best_pos = std::string::npos;
  for (auto p : {rvisa::Polarity::positive, rvisa::Polarity::negative, rvisa::Polarity::neutral}) {
    const std::string w(rvisa::to_string(p));
    for (auto pos = low.find(w); pos != std::string::npos; pos = low.find(w, pos + 1)) {
      const bool left = pos == 0 || !word(static_cast<unsigned char>(low[pos - 1]));
      const bool right = pos + w.size() == low.size() || !word(static_cast<unsigned char>(low[pos + w.size()]));
      if (left && right) {
        if (pos < best_pos) {
          best_pos = pos;
          best = p;
        }
        break;
      }
    }
  }
  return best;
}

struct OracleMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

// Counts tp/fp/fn per class by direct enumeration; absent classes score 0.
inline OracleMetrics metrics_oracle(const std::vector<rvisa::Polarity>& pred,
                                    const std::vector<rvisa::Polarity>& gold) {
  OracleMetrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == gold[i];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  double sum = 0.0;
  for (auto c : {rvisa::Polarity::positive, rvisa::Polarity::negative, rvisa::Polarity::neutral}) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c && gold[i] == c) tp += 1;
      if (pred[i] == c && gold[i] != c) fp += 1;
      if (pred[i] != c && gold[i] == c) fn += 1;
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    sum += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  m.macro_f1 = sum / 3.0;
  return m;
}

inline rvisa::Polarity random_polarity(std::mt19937_64& rng) {
  return rvisa::kPolarities[std::uniform_int_distribution<int>(0, 2)(rng)];
}

// Random text mixing label words, near-misses and filler, for scanner fuzzing.
inline std::string random_rationale(std::mt19937_64& rng) {
  static const std::vector<std::string> pieces = {
      "positive", "Negative", "NEUTRAL", "positively", "nonnegative", "neutrality", "pos", "the", "aspect",
      "is", "about", "price", "good", "bad", "_neutral", "positive_", "négative", "2positive", "negative9",
      "Therefore", "not", "really", "posítive", "neutral's"};
  static const std::vector<std::string> seps = {" ", ", ", ". ", "\n", "(", ")", "-", "\"", "'", "", "é", "/"};
  std::uniform_int_distribution<std::size_t> n_tokens(0, 14);
  std::uniform_int_distribution<std::size_t> pick_piece(0, pieces.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_sep(0, seps.size() - 1);
  std::string out;
  const auto n = n_tokens(rng);
  for (std::size_t i = 0; i < n; ++i) {
    out += seps[pick_sep(rng)];
    out += pieces[pick_piece(rng)];
  }
  return out;
}

}  // namespace testing_support
