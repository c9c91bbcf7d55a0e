#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace mvgpt {

// Special token ids, fixed so PAD lines up with zeroed buffers.
namespace tok {
constexpr int kPad = 0;
constexpr int kUnk = 1;
constexpr int kMask = 2;
constexpr int kEos = 3;
constexpr int kCls1 = 4;
constexpr int kCls2 = 5;
constexpr int kBos1 = 6;
constexpr int kBos2 = 7;
constexpr int kNumSpecial = 8;

inline bool is_special(int id) { return id >= 0 && id < kNumSpecial; }

inline const char* special_name(int id) {
  static const char* names[] = {"<pad>", "<unk>", "<mask>", "<eos>",
                                "<cls1>", "<cls2>", "<bos1>", "<bos2>"};
  return names[id];
}
}  // namespace tok

// Lowercase, strip ASCII punctuation to spaces, split on whitespace.
inline std::vector<std::string> normalize_words(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (c < 128 && std::ispunct(c)) {
      cleaned.push_back(' ');
    } else {
      cleaned.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
    }
  }
  std::vector<std::string> words;
  std::istringstream is(cleaned);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

struct TokenStream {
  std::vector<int> ids;
  std::vector<bool> pad_mask;  // true = real token, false = PAD filler

  std::size_t length() const { return ids.size(); }
};

class Vocabulary {
 public:
  Vocabulary() = default;

  std::size_t size() const { return words_.size() + tok::kNumSpecial; }

  int token_to_id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? tok::kUnk : it->second;
  }

  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  const std::string& id_to_token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
      throw std::invalid_argument("vocabulary: id " + std::to_string(id) + " out of range, size " +
                                  std::to_string(size()));
    }
    if (tok::is_special(id)) {
      static const std::string specials[] = {"<pad>", "<unk>", "<mask>", "<eos>",
                                             "<cls1>", "<cls2>", "<bos1>", "<bos2>"};
      return specials[id];
    }
    return words_[static_cast<std::size_t>(id) - tok::kNumSpecial];
  }

  // Word list in id order; used by the vocab file writer and random
  // replacement draws (which must avoid specials).
  const std::vector<std::string>& words() const { return words_; }

  void add_word(const std::string& w) {
    if (w.empty()) throw std::invalid_argument("vocabulary: empty token");
    if (index_.count(w)) throw std::invalid_argument("vocabulary: duplicate token '" + w + "'");
    index_[w] = static_cast<int>(words_.size()) + tok::kNumSpecial;
    words_.push_back(w);
  }

 private:
  std::vector<std::string> words_;              // id = position + 8
  std::unordered_map<std::string, int> index_;
};

// Counts case-folded words and keeps those seen at least min_count times,
// ordered by (count desc, token asc) after the 8 specials.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_count = 1) {
  std::unordered_map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& line : corpus) {
    for (const auto& w : normalize_words(line)) {
      ++counts[w];
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> entries(counts.begin(), counts.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [w, c] : entries) {
    if (c >= min_count) v.add_word(w);
  }
  return v;
}

// [prefix?] + body + [EOS?], truncated to max_len. The prefix always survives
// truncation and EOS, when requested, is the final kept token.
inline TokenStream encode(const Vocabulary& v, const std::string& text, std::optional<int> prefix,
                          bool append_eos, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("encode: max_len must be at least 2");
  if (prefix && (*prefix == tok::kBos1 || *prefix == tok::kBos2)) {
    throw std::invalid_argument("encode: BOS tokens are decoder-side only");
  }
  if (prefix && !tok::is_special(*prefix)) {
    throw std::invalid_argument("encode: prefix must be a special token id");
  }
  TokenStream s;
  if (prefix) s.ids.push_back(*prefix);
  std::size_t budget = max_len - s.ids.size() - (append_eos ? 1 : 0);
  for (const auto& w : normalize_words(text)) {
    if (s.ids.size() - (prefix ? 1 : 0) >= budget) break;
    s.ids.push_back(v.token_to_id(w));
  }
  if (append_eos) s.ids.push_back(tok::kEos);
  s.pad_mask.assign(s.ids.size(), true);
  return s;
}

// Specials are dropped and decoding stops at the first EOS.
inline std::string decode(const Vocabulary& v, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v.size()) {
      throw std::invalid_argument("decode: id " + std::to_string(id) + " out of vocabulary of size " +
                                  std::to_string(v.size()));
    }
    if (id == tok::kEos) break;
    if (tok::is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += v.id_to_token(id);
  }
  return out;
}

// Extends with PAD up to len; pad positions are masked out downstream.
inline TokenStream pad_to(TokenStream s, std::size_t len) {
  if (len < s.ids.size()) {
    throw std::invalid_argument("pad_to: target " + std::to_string(len) + " shorter than stream " +
                                std::to_string(s.ids.size()));
  }
  s.ids.resize(len, tok::kPad);
  s.pad_mask.resize(len, false);
  return s;
}

// Vocab file: one non-special token per line, line number = id - 8.
inline void save_vocab(const Vocabulary& v, std::ostream& os) {
  for (const auto& w : v.words()) os << w << '\n';
}

inline void save_vocab(const Vocabulary& v, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_vocab: cannot open " + path);
  save_vocab(v, f);
}

inline Vocabulary load_vocab(std::istream& is) {
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      throw std::runtime_error("load_vocab: empty token at line " + std::to_string(lineno));
    }
    v.add_word(line);
  }
  return v;
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_vocab: cannot open " + path);
  return load_vocab(f);
}

}  // namespace mvgpt
