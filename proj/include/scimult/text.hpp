#pragma once

// Input templates and the deterministic hashing tokenizer. Words hash into
// a fixed-size vocabulary; [CLS] and [SEP] own reserved ids 0 and 1.

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "scimult/common.hpp"

namespace scimult {

class Tokenizer {
 public:
  static constexpr int kClsId = 0;
  static constexpr int kSepId = 1;

  explicit Tokenizer(std::size_t vocab_size) : vocab_(vocab_size) {
    if (vocab_size <= 2)
      throw config_error("tokenizer: vocab_size must exceed the 2 markers");
  }

  std::size_t vocab_size() const { return vocab_; }

  int word_id(std::string_view lowercase_word) const {
    return 2 + static_cast<int>(fnv1a64(lowercase_word) %
                                static_cast<std::uint64_t>(vocab_ - 2));
  }

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> ids;
    std::string word;
    auto flush = [&] {
      if (!word.empty()) {
        ids.push_back(word_id(word));
        word.clear();
      }
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (int marker = match_marker(text, i); marker >= 0) {
        flush();
        ids.push_back(marker);
        i += 4;  // skip the rest of "[cls]" / "[sep]"
        continue;
      }
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isalnum(c)) {
        word.push_back(static_cast<char>(std::tolower(c)));
      } else {
        flush();
      }
    }
    flush();
    return ids;
  }

 private:
  static int match_marker(std::string_view text, std::size_t i) {
    if (i + 5 > text.size() || text[i] != '[' || text[i + 4] != ']') return -1;
    const char a = static_cast<char>(std::tolower(text[i + 1]));
    const char b = static_cast<char>(std::tolower(text[i + 2]));
    const char c = static_cast<char>(std::tolower(text[i + 3]));
    if (a == 'c' && b == 'l' && c == 's') return kClsId;
    if (a == 's' && b == 'e' && c == 'p') return kSepId;
    return -1;
  }

  std::size_t vocab_;
};

// Lowercased alphanumeric words, markers dropped. Shared by the tokenizer's
// notion of a word and the label-name matcher.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      words.push_back(word);
      word.clear();
    }
  };
  for (const char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return words;
}

namespace detail {

inline bool marker_at(const std::string& s, std::size_t i) {
  if (i + 5 > s.size() || s[i] != '[' || s[i + 4] != ']') return false;
  const char a = static_cast<char>(std::tolower(s[i + 1]));
  const char b = static_cast<char>(std::tolower(s[i + 2]));
  const char c = static_cast<char>(std::tolower(s[i + 3]));
  return (a == 'c' && b == 'l' && c == 's') || (a == 's' && b == 'e' && c == 'p');
}

}  // namespace detail

// Strips reserved markers from a user-supplied field so the rendered
// templates stay injective, then trims surrounding whitespace.
inline std::string sanitize_field(std::string_view raw) {
  std::string s(raw);
  bool changed = true;
  while (changed) {
    changed = false;
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size();) {
      if (detail::marker_at(s, i)) {
        out.push_back(' ');
        i += 5;
        changed = true;
      } else {
        out.push_back(s[i]);
        ++i;
      }
    }
    s = std::move(out);
  }
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string render_text_pair(const std::string& head,
                                    const std::string& tail,
                                    const char* empty_head_error) {
  const std::string h = sanitize_field(head);
  if (h.empty()) throw data_error(empty_head_error);
  const std::string t = sanitize_field(tail);
  if (t.empty()) return "[CLS] " + h + " [SEP]";
  return "[CLS] " + h + " [SEP] " + t + " [SEP]";
}

// "[CLS] {query} [SEP]" — query text may carry literal [SEP] segment breaks.
inline std::string render_query(const std::string& text) {
  return "[CLS] " + text + " [SEP]";
}

}  // namespace scimult
