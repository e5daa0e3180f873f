#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mprompt/tensor.hpp"

namespace mprompt {

inline constexpr int kPadId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kUnkId = 2;

// Fixed synthetic vocabulary with whitespace tokenization and per-character
// fallback for unknown words. The word list is a versioned constant so any
// checkpoint and any suite agree on ids.
class Vocab {
 public:
  static const Vocab& standard();

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const;
  int lookup(const std::string& w) const;  // -1 when absent

  // One known word -> one id; unknown word -> its characters (UNK for
  // characters outside the vocabulary).
  void encode_word(const std::string& w, std::vector<int>& out) const;
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<int> encode_text(const std::string& text) const;  // whitespace split
  std::string decode(const std::vector<int>& ids) const;        // space-joined

 private:
  explicit Vocab(std::vector<std::string> words);
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_ws(const std::string& text);

}  // namespace mprompt
