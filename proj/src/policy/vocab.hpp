#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace morl::policy {

// Discrete codebook of V sequence tokens plus the End and pad specials.
struct Vocabulary {
  int codebook = 32;

  int end_id() const { return codebook; }
  int pad_id() const { return codebook + 1; }
  int total() const { return codebook + 2; }
};

// A generated sequence: codebook indices terminated by exactly one End
// token at the last position. length counts the End token.
struct TokenSequence {
  std::vector<int> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
  bool operator==(const TokenSequence&) const = default;

  // Motion-token view (everything before End).
  int motion_length() const { return length() - 1; }
};

inline TokenSequence make_sequence(std::vector<int> motion_tokens, const Vocabulary& v) {
  motion_tokens.push_back(v.end_id());
  return TokenSequence{std::move(motion_tokens)};
}

inline void validate_sequence(const Vocabulary& v, const TokenSequence& s, int max_len) {
  if (s.tokens.empty() || s.length() > max_len)
    throw std::invalid_argument("token sequence: length " + std::to_string(s.length()) +
                                " outside [1," + std::to_string(max_len) + "]");
  for (int i = 0; i + 1 < s.length(); ++i) {
    const int t = s.tokens[i];
    if (t == v.end_id())
      throw std::invalid_argument("token sequence: End token before the final position");
    if (t == v.pad_id())
      throw std::invalid_argument("token sequence: pad token inside the sequence");
    if (t < 0 || t >= v.codebook)
      throw std::invalid_argument("token sequence: index " + std::to_string(t) +
                                  " outside the codebook");
  }
  if (s.tokens.back() != v.end_id())
    throw std::invalid_argument("token sequence: missing End terminator");
}

}  // namespace morl::policy
