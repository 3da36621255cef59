#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "rvisa/corpus.hpp"
#include "rvisa/error.hpp"

namespace rvisa {

enum class PromptMode { direct, re, ra, zero_cot, th_re, th_ra, verify };

constexpr std::string_view to_string(PromptMode m) noexcept {
  switch (m) {
    case PromptMode::direct:
      return "direct";
    case PromptMode::re:
      return "re";
    case PromptMode::ra:
      return "ra";
    case PromptMode::zero_cot:
      return "zero_cot";
    case PromptMode::th_re:
      return "th_re";
    case PromptMode::th_ra:
      return "th_ra";
    case PromptMode::verify:
      return "verify";
  }
  return "direct";
}

inline std::optional<PromptMode> parse_prompt_mode(std::string_view s) noexcept {
  for (auto m : {PromptMode::direct, PromptMode::re, PromptMode::ra, PromptMode::zero_cot,
                 PromptMode::th_re, PromptMode::th_ra, PromptMode::verify}) {
    if (s == to_string(m)) return m;
  }
  return std::nullopt;
}

struct RenderedPrompt {
  PromptMode mode = PromptMode::direct;
  std::string example_id;
  std::string text;

  bool operator==(const RenderedPrompt&) const = default;
};

// Placeholders are substituted literally; nothing in the sentence, term or
// rationale is escaped.
namespace prompt_text {

inline std::string question(const Example& e) {
  return "Given the sentence \"" + e.sentence + "\", what is the sentiment polarity towards " +
         e.aspect_term;
}

inline std::string labeled_question(const Example& e) {
  return "Given the sentence \"" + e.sentence + "\", the sentiment polarity towards " +
         e.aspect_term + " is " + std::string(to_string(e.polarity));
}

inline constexpr std::string_view kStepByStep = " Let's think step by step.";

inline std::string three_hop_scaffold(const std::string& term) {
  return " The mentioned aspect towards " + term + " is about ... The underlying opinion towards " +
         term + " is about ... Therefore, the sentiment polarity towards " + term + " is ...";
}

}  // namespace prompt_text

/// Three-hop reasoning prompt: asks for the polarity and walks aspect, opinion, polarity.
inline RenderedPrompt render_th_re(const Example& e) {
  return {PromptMode::th_re, e.id,
          prompt_text::question(e) + ", why?" + std::string(prompt_text::kStepByStep) +
              prompt_text::three_hop_scaffold(e.aspect_term)};
}

/// Three-hop rationalization prompt: states the gold label and asks for the reasoning.
inline RenderedPrompt render_th_ra(const Example& e) {
  return {PromptMode::th_ra, e.id,
          prompt_text::labeled_question(e) + ", why?" + std::string(prompt_text::kStepByStep) +
              prompt_text::three_hop_scaffold(e.aspect_term)};
}

inline RenderedPrompt render_baseline(const Example& e, PromptMode mode) {
  switch (mode) {
    case PromptMode::direct:
      return {mode, e.id, prompt_text::question(e) + "?"};
    case PromptMode::re:
      return {mode, e.id, prompt_text::question(e) + ", why?"};
    case PromptMode::zero_cot:
      return {mode, e.id, prompt_text::question(e) + ", why?" + std::string(prompt_text::kStepByStep)};
    case PromptMode::ra:
      return {mode, e.id, prompt_text::labeled_question(e) + ", why?"};
    default:
      throw ArgumentError("render_baseline: mode '" + std::string(to_string(mode)) +
                          "' is not a baseline mode");
  }
}

inline RenderedPrompt render_verify(std::string_view rationale_text, std::string example_id = {}) {
  if (rationale_text.empty()) throw ArgumentError("render_verify: empty rationale");
  return {PromptMode::verify, std::move(example_id),
          "Given the rationale \"" + std::string(rationale_text) +
              "\", Please verify whether the above given rationale is reasonable. Return True or "
              "False."};
}

/// Dispatches on mode for every example-driven mode. `verify` needs a rationale and is rejected.
inline RenderedPrompt render(const Example& e, PromptMode mode) {
  switch (mode) {
    case PromptMode::th_re:
      return render_th_re(e);
    case PromptMode::th_ra:
      return render_th_ra(e);
    case PromptMode::verify:
      throw ArgumentError("render: verify prompts are rendered from a rationale");
    default:
      return render_baseline(e, mode);
  }
}

}  // namespace rvisa
