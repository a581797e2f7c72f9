#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "planlab/util.hpp"

namespace planlab {

// Steering sites near the end of a prompt. Declaration order is the sweep
// tie-break order.
enum class AnchorKind { last_word, newline, question_mark };

inline constexpr std::array<AnchorKind, 3> kAllAnchors = {AnchorKind::last_word, AnchorKind::newline,
                                                          AnchorKind::question_mark};

inline std::string_view anchor_name(AnchorKind k) {
  switch (k) {
    case AnchorKind::last_word: return "last_word";
    case AnchorKind::newline: return "newline";
    case AnchorKind::question_mark: return "question_mark";
  }
  return "?";
}

inline AnchorKind parse_anchor(std::string_view s) {
  if (s == "last_word") return AnchorKind::last_word;
  if (s == "newline") return AnchorKind::newline;
  if (s == "question_mark") return AnchorKind::question_mark;
  throw Error("unknown anchor kind '" + std::string(s) + "' (expected last_word, newline or question_mark)");
}

struct PositionAnchors {
  std::size_t last_newline = 0;
  std::size_t last_word_final_token = 0;
  std::optional<std::size_t> question_mark;

  std::size_t resolve(AnchorKind kind) const {
    switch (kind) {
      case AnchorKind::last_word: return last_word_final_token;
      case AnchorKind::newline: return last_newline;
      case AnchorKind::question_mark:
        if (!question_mark) throw Error("anchor: question_mark requested but prompt has no '?' token");
        return *question_mark;
    }
    throw Error("anchor: bad kind");
  }
};

}  // namespace planlab
