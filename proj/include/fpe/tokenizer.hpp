// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fpe/tensor.hpp"

namespace fpe {

class PromptError : public Error {
 public:
  using Error::Error;
};

struct WordSpan {
  std::string word;
  std::vector<int> positions;  // token positions in the padded sequence
};

struct TokenizedPrompt {
  std::vector<int> ids;  // padded to max_length
  int length = 0;        // tokens before padding, including start/end markers
  std::vector<WordSpan> words;

  // Position of the first sub-token of the `occurrence`-th match of `word`.
  int position_of(const std::string& word, int occurrence = 0) const;
  bool is_multi_token(const std::string& word) const;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  // Throws PromptError when the prompt does not fit the window.
  virtual TokenizedPrompt encode(const std::string& text) const = 0;
  virtual int max_length() const = 0;
  virtual int eos_id() const = 0;
};

/// Byte-level BPE used by CLIP text encoders (vocab.json + merges.txt).
class BpeTokenizer final : public Tokenizer {
 public:
  BpeTokenizer(std::unordered_map<std::string, int> vocab, const std::vector<std::pair<std::string, std::string>>& merges,
               int max_length);
  static std::unique_ptr<BpeTokenizer> from_files(const std::filesystem::path& vocab_json,
                                                  const std::filesystem::path& merges_txt, int max_length = 77);

  TokenizedPrompt encode(const std::string& text) const override;
  int max_length() const override { return max_length_; }
  int eos_id() const override { return eos_; }

  // BPE pieces for one pre-tokenized chunk (for tests and diagnostics).
  std::vector<std::string> bpe(const std::string& chunk) const;

 private:
  std::vector<int> encode_word(const std::string& word) const;

  std::unordered_map<std::string, int> vocab_;
  std::map<std::pair<std::string, std::string>, int> ranks_;
  std::vector<std::string> byte_encoder_;
  int max_length_;
  int bos_;
  int eos_;
};

/// Word-level hashing tokenizer for the built-in fixture backbone.
class WordTokenizer final : public Tokenizer {
 public:
  WordTokenizer(int vocab_size, int max_length) : vocab_size_(vocab_size), max_length_(max_length) {}

  TokenizedPrompt encode(const std::string& text) const override;
  int max_length() const override { return max_length_; }
  int eos_id() const override { return vocab_size_ - 1; }
  int bos_id() const { return vocab_size_ - 2; }
  int vocab_size() const { return vocab_size_; }

 private:
  int vocab_size_;
  int max_length_;
};

// Lower-cases and collapses runs of whitespace; shared by both tokenizers.
std::string clean_prompt(const std::string& text);
// CLIP pre-tokenization of one whitespace-free word.
std::vector<std::string> pretokenize(const std::string& word);

}  // namespace fpe
