// SPDX-License-Identifier: Apache-2.0
#include "fpe/tokenizer.hpp"

#include <cctype>
#include <climits>
#include <json.hpp>
#include <sstream>

#include "fpe/io.hpp"

namespace fpe {

namespace {

std::string utf8(uint32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    s.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
  return s;
}

// GPT-2 style reversible byte -> printable code point table.
std::vector<std::string> make_byte_encoder() {
  std::vector<int> printable;
  for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
  for (int b = 0xa1; b <= 0xac; ++b) printable.push_back(b);
  for (int b = 0xae; b <= 0xff; ++b) printable.push_back(b);
  std::vector<std::string> table(256);
  std::vector<bool> used(256, false);
  for (int b : printable) {
    table[static_cast<size_t>(b)] = utf8(static_cast<uint32_t>(b));
    used[static_cast<size_t>(b)] = true;
  }
  uint32_t extra = 0;
  for (int b = 0; b < 256; ++b) {
    if (!used[static_cast<size_t>(b)]) table[static_cast<size_t>(b)] = utf8(256 + extra++);
  }
  return table;
}

size_t utf8_len(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

enum class CharClass { letter, digit, space, other };

CharClass classify(unsigned char c) {
  if (c >= 0x80) return CharClass::letter;  // non-ASCII treated as letters
  if (std::isalpha(c)) return CharClass::letter;
  if (std::isdigit(c)) return CharClass::digit;
  if (std::isspace(c)) return CharClass::space;
  return CharClass::other;
}

std::vector<std::string> split_words(const std::string& cleaned) {
  std::vector<std::string> words;
  std::istringstream is(cleaned);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

}  // namespace

int TokenizedPrompt::position_of(const std::string& word, int occurrence) const {
  for (const auto& span : words) {
    if (span.word == word && occurrence-- == 0) return span.positions.front();
  }
  throw PromptError("word '" + word + "' not found in prompt");
}

bool TokenizedPrompt::is_multi_token(const std::string& word) const {
  for (const auto& span : words) {
    if (span.word == word) return span.positions.size() > 1;
  }
  return false;
}

std::string clean_prompt(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::vector<std::string> pretokenize(const std::string& word) {
  static const char* kSpecial[] = {"<|startoftext|>", "<|endoftext|>"};
  static const char* kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string> pieces;
  size_t i = 0;
  const size_t n = word.size();
  while (i < n) {
    bool matched = false;
    for (const char* sp : kSpecial) {
      if (word.compare(i, std::strlen(sp), sp) == 0) {
        pieces.emplace_back(sp);
        i += std::strlen(sp);
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (word[i] == '\'') {
      for (const char* c : kContractions) {
        if (word.compare(i, std::strlen(c), c) == 0) {
          pieces.emplace_back(c);
          i += std::strlen(c);
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    const CharClass cls = classify(static_cast<unsigned char>(word[i]));
    size_t j = i;
    if (cls == CharClass::digit) {
      j = i + 1;
    } else if (cls == CharClass::space) {
      ++i;
      continue;
    } else {
      while (j < n && classify(static_cast<unsigned char>(word[j])) == cls) {
        j += cls == CharClass::letter ? utf8_len(static_cast<unsigned char>(word[j])) : 1;
      }
      j = std::min(j, n);
    }
    pieces.push_back(word.substr(i, j - i));
    i = j;
  }
  return pieces;
}

BpeTokenizer::BpeTokenizer(std::unordered_map<std::string, int> vocab,
                           const std::vector<std::pair<std::string, std::string>>& merges, int max_length)
    : vocab_(std::move(vocab)), byte_encoder_(make_byte_encoder()), max_length_(max_length) {
  for (size_t i = 0; i < merges.size(); ++i) ranks_.emplace(merges[i], static_cast<int>(i));
  auto special = [&](const char* s) {
    auto it = vocab_.find(s);
    if (it == vocab_.end()) throw Error(std::string("tokenizer vocabulary lacks ") + s);
    return it->second;
  };
  bos_ = special("<|startoftext|>");
  eos_ = special("<|endoftext|>");
}

std::unique_ptr<BpeTokenizer> BpeTokenizer::from_files(const std::filesystem::path& vocab_json,
                                                       const std::filesystem::path& merges_txt, int max_length) {
  const auto vocab_doc = nlohmann::json::parse(io::read_text(vocab_json));
  std::unordered_map<std::string, int> vocab;
  for (const auto& [k, v] : vocab_doc.items()) vocab.emplace(k, v.get<int>());
  std::vector<std::pair<std::string, std::string>> merges;
  std::istringstream lines(io::read_text(merges_txt));
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty() || line.starts_with("#version")) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos) continue;
    merges.emplace_back(line.substr(0, space), line.substr(space + 1));
  }
  return std::make_unique<BpeTokenizer>(std::move(vocab), merges, max_length);
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& chunk) const {
  std::vector<std::string> symbols;
  for (unsigned char c : chunk) symbols.push_back(byte_encoder_[c]);
  if (symbols.empty()) return symbols;
  symbols.back() += "</w>";
  while (symbols.size() > 1) {
    int best_rank = INT_MAX;
    size_t best = 0;
    for (size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = ranks_.find({symbols[i], symbols[i + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == INT_MAX) break;
    const std::string first = symbols[best], second = symbols[best + 1];
    std::vector<std::string> merged;
    for (size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == first && symbols[i + 1] == second) {
        merged.push_back(first + second);
        i += 2;
      } else {
        merged.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(merged);
  }
  return symbols;
}

std::vector<int> BpeTokenizer::encode_word(const std::string& word) const {
  std::vector<int> ids;
  for (const auto& piece : pretokenize(word)) {
    if (piece == "<|startoftext|>" || piece == "<|endoftext|>") {
      ids.push_back(vocab_.at(piece));
      continue;
    }
    for (const auto& sym : bpe(piece)) {
      auto it = vocab_.find(sym);
      if (it == vocab_.end()) throw PromptError("token '" + sym + "' missing from the vocabulary");
      ids.push_back(it->second);
    }
  }
  return ids;
}

TokenizedPrompt BpeTokenizer::encode(const std::string& text) const {
  TokenizedPrompt out;
  out.ids.push_back(bos_);
  // One span per pre-tokenized piece, so "car," yields spans "car" and ",".
  for (const auto& word : split_words(clean_prompt(text))) {
    for (const auto& piece : pretokenize(word)) {
      WordSpan span{piece, {}};
      for (int id : encode_word(piece)) {
        span.positions.push_back(static_cast<int>(out.ids.size()));
        out.ids.push_back(id);
      }
      out.words.push_back(std::move(span));
    }
  }
  out.ids.push_back(eos_);
  out.length = static_cast<int>(out.ids.size());
  if (out.length > max_length_) {
    throw PromptError("prompt needs " + std::to_string(out.length) + " tokens but the text encoder window is " +
                      std::to_string(max_length_));
  }
  out.ids.resize(static_cast<size_t>(max_length_), eos_);
  return out;
}

TokenizedPrompt WordTokenizer::encode(const std::string& text) const {
  TokenizedPrompt out;
  out.ids.push_back(bos_id());
  for (const auto& word : split_words(clean_prompt(text))) {
    out.words.push_back({word, {static_cast<int>(out.ids.size())}});
    out.ids.push_back(static_cast<int>(fnv1a64(word) % static_cast<uint64_t>(vocab_size_ - 2)));
  }
  out.ids.push_back(eos_id());
  out.length = static_cast<int>(out.ids.size());
  if (out.length > max_length_) {
    throw PromptError("prompt needs " + std::to_string(out.length) + " tokens but the text encoder window is " +
                      std::to_string(max_length_));
  }
  out.ids.resize(static_cast<size_t>(max_length_), eos_id());
  return out;
}

}  // namespace fpe
