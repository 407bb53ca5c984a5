// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace survlm {

inline bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

// Lowercased maximal runs of alphanumeric bytes; everything else splits.
inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Word-level vocabulary with four reserved ids.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBeginAnswer = 2;
  static constexpr int kEndAnswer = 3;

  Tokenizer() : words_{"<pad>", "<unk>", "<boa>", "<eoa>"} { reindex(); }

  // Words are sorted so the vocabulary does not depend on corpus order.
  static Tokenizer build(const std::vector<std::string>& corpus) {
    std::set<std::string> words;
    for (const auto& text : corpus)
      for (auto& w : word_tokens(text)) words.insert(std::move(w));
    Tokenizer t;
    for (const auto& w : words) t.words_.push_back(w);
    t.reindex();
    return t;
  }

  static Tokenizer from_words(std::vector<std::string> words) {
    Tokenizer t;
    if (words.size() < 4 || words[0] != "<pad>" || words[1] != "<unk>" || words[2] != "<boa>" ||
        words[3] != "<eoa>")
      throw std::invalid_argument("Tokenizer: word list must start with the reserved tokens");
    t.words_ = std::move(words);
    t.reindex();
    return t;
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : word_tokens(text)) {
      auto it = index_.find(w);
      ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    return ids;
  }

  // Question ids terminated by the begin-of-answer marker.
  std::vector<int> encode_question(std::string_view text) const {
    auto ids = encode(text);
    ids.push_back(kBeginAnswer);
    return ids;
  }

  // Answer ids terminated by the end-of-answer marker.
  std::vector<int> encode_answer(std::string_view text) const {
    auto ids = encode(text);
    ids.push_back(kEndAnswer);
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kPad || id == kBeginAnswer || id == kEndAnswer) continue;
      if (!out.empty()) out.push_back(' ');
      out += (id >= 0 && static_cast<std::size_t>(id) < words_.size()) ? words_[id] : "<unk>";
    }
    return out;
  }

  // Lowercased, punctuation-free form used to compare free text.
  static std::string normalize(std::string_view text) {
    std::string out;
    for (const auto& w : word_tokens(text)) {
      if (!out.empty()) out.push_back(' ');
      out += w;
    }
    return out;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

}  // namespace survlm
