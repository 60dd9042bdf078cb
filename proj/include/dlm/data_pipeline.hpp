// SPDX-License-Identifier: Apache-2.0
//
// Character-level tokenizer with reserved special ids, plus fixed-length
// sequence packing. Characters are Unicode code points decoded from UTF-8.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dlm/diffusion_core.hpp"
#include "dlm/tensor.hpp"

namespace dlm {

/// Glyph printed in place of MASK by decode().
inline constexpr std::string_view kMaskGlyph = "□";

class Vocab {
 public:
  /// Only the three reserved entries (BOS, MASK, DOCSEP).
  Vocab();

  /// Rebuilds from an id-ordered symbol list; the first three entries must be
  /// the reserved names. Throws FormatError otherwise.
  static Vocab from_symbols(std::vector<std::string> symbols);

  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(TokenId id) const;
  bool contains(std::string_view symbol) const;
  TokenId id_of(std::string_view symbol) const;

  /// Adds a content symbol if not present; returns its id.
  TokenId add(const std::string& symbol);

  bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Splits UTF-8 text into code points (each returned as its UTF-8 bytes).
/// Throws InvalidInput on malformed UTF-8.
std::vector<std::string> utf8_chars(std::string_view text);

/// Content symbols in first-seen order. Throws InvalidInput on empty text.
Vocab build_vocab(std::string_view corpus);
Vocab build_vocab(const std::vector<std::string>& documents);

/// Throws InvalidInput naming the first character missing from the vocab.
TokenSeq encode(const Vocab& vocab, std::string_view text);

/// MASK renders as kMaskGlyph, BOS as nothing, DOCSEP as a blank line.
std::string decode(const Vocab& vocab, const TokenSeq& ids);

struct PackedBatchSet {
  std::size_t block_len = 0;
  std::vector<TokenSeq> blocks;

  std::size_t token_count() const { return block_len * blocks.size(); }
};

/// Joins encoded documents with one DOCSEP between neighbours, cuts the stream
/// into chunks of N-1 tokens and prepends BOS to each. The final chunk is
/// padded with DOCSEP. Requires N >= 2.
PackedBatchSet pack_sequences(const Vocab& vocab, const std::vector<std::string>& documents,
                              std::size_t block_len);

/// Blank-line separated paragraphs; surrounding newlines trimmed, empty
/// paragraphs dropped.
std::vector<std::string> split_documents(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
std::vector<std::string> read_corpus(const std::filesystem::path& path);

/// JSON: {"format": "dlm-vocab", "version": 1, "entries": [{"id":0,"symbol":"<bos>"}, ...]}
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);
std::string vocab_to_json(const Vocab& vocab);
Vocab vocab_from_json(std::string_view json_text);

}  // namespace dlm
