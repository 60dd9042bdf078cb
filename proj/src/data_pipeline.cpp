// SPDX-License-Identifier: Apache-2.0

#include "dlm/data_pipeline.hpp"

#include <fstream>
#include <sstream>

#include "dlm/errors.hpp"
#include "json.hpp"

namespace dlm {
namespace {

const std::vector<std::string> kReserved = {"<bos>", "<mask>", "<docsep>"};

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 0;
}

}  // namespace

Vocab::Vocab() {
  for (const auto& s : kReserved) {
    index_.emplace(s, static_cast<TokenId>(symbols_.size()));
    symbols_.push_back(s);
  }
}

Vocab Vocab::from_symbols(std::vector<std::string> symbols) {
  if (symbols.size() < kReserved.size() ||
      !std::equal(kReserved.begin(), kReserved.end(), symbols.begin())) {
    throw FormatError("vocabulary must start with <bos>, <mask>, <docsep>");
  }
  Vocab v;
  for (std::size_t i = kReserved.size(); i < symbols.size(); ++i) {
    if (v.contains(symbols[i])) throw FormatError("duplicate vocabulary symbol: " + symbols[i]);
    v.add(symbols[i]);
  }
  return v;
}

const std::string& Vocab::symbol(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
    throw InvalidInput("token id " + std::to_string(id) + " outside vocabulary");
  }
  return symbols_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(std::string_view symbol) const {
  return index_.find(std::string(symbol)) != index_.end();
}

TokenId Vocab::id_of(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  if (it == index_.end()) throw InvalidInput("unknown symbol '" + std::string(symbol) + "'");
  return it->second;
}

TokenId Vocab::add(const std::string& symbol) {
  auto [it, inserted] = index_.emplace(symbol, static_cast<TokenId>(symbols_.size()));
  if (inserted) symbols_.push_back(symbol);
  return it->second;
}

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    if (len == 0 || i + len > text.size()) {
      throw InvalidInput("malformed UTF-8 at byte offset " + std::to_string(i));
    }
    for (std::size_t j = 1; j < len; ++j) {
      if ((static_cast<unsigned char>(text[i + j]) >> 6) != 0x2) {
        throw InvalidInput("malformed UTF-8 at byte offset " + std::to_string(i));
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

Vocab build_vocab(std::string_view corpus) {
  if (corpus.empty()) throw InvalidInput("cannot build a vocabulary from an empty corpus");
  Vocab v;
  for (const auto& ch : utf8_chars(corpus)) v.add(ch);
  return v;
}

Vocab build_vocab(const std::vector<std::string>& documents) {
  Vocab v;
  bool any = false;
  for (const auto& doc : documents) {
    for (const auto& ch : utf8_chars(doc)) {
      v.add(ch);
      any = true;
    }
  }
  if (!any) throw InvalidInput("cannot build a vocabulary from an empty corpus");
  return v;
}

TokenSeq encode(const Vocab& vocab, std::string_view text) {
  TokenSeq ids;
  for (const auto& ch : utf8_chars(text)) {
    if (!vocab.contains(ch)) throw InvalidInput("character not in vocabulary: '" + ch + "'");
    const TokenId id = vocab.id_of(ch);
    if (id < kFirstContentId) throw InvalidInput("text spells a reserved symbol: '" + ch + "'");
    ids.push_back(id);
  }
  return ids;
}

std::string decode(const Vocab& vocab, const TokenSeq& ids) {
  std::string out;
  for (TokenId id : ids) {
    switch (id) {
      case kBosId:
        break;
      case kMaskId:
        out += kMaskGlyph;
        break;
      case kDocSepId:
        out += "\n\n";
        break;
      default:
        out += vocab.symbol(id);
    }
  }
  return out;
}

PackedBatchSet pack_sequences(const Vocab& vocab, const std::vector<std::string>& documents,
                              std::size_t block_len) {
  if (block_len < 2) throw InvalidInput("block length must be at least 2");
  TokenSeq stream;
  for (std::size_t d = 0; d < documents.size(); ++d) {
    if (d > 0) stream.push_back(kDocSepId);
    const TokenSeq ids = encode(vocab, documents[d]);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  PackedBatchSet out;
  out.block_len = block_len;
  const std::size_t chunk = block_len - 1;
  for (std::size_t pos = 0; pos < stream.size(); pos += chunk) {
    TokenSeq block;
    block.reserve(block_len);
    block.push_back(kBosId);
    const std::size_t end = std::min(stream.size(), pos + chunk);
    block.insert(block.end(), stream.begin() + static_cast<std::ptrdiff_t>(pos),
                 stream.begin() + static_cast<std::ptrdiff_t>(end));
    block.resize(block_len, kDocSepId);
    out.blocks.push_back(std::move(block));
  }
  return out;
}

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::istringstream in{std::string(text)};
  std::string line;
  auto flush = [&] {
    while (!current.empty() && current.back() == '\n') current.pop_back();
    if (!current.empty()) docs.push_back(current);
    current.clear();
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
    } else {
      current += line;
      current += '\n';
    }
  }
  flush();
  return docs;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  return split_documents(read_text_file(path));
}

std::string vocab_to_json(const Vocab& vocab) {
  nlohmann::json j;
  j["format"] = "dlm-vocab";
  j["version"] = 1;
  j["entries"] = nlohmann::json::array();
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    j["entries"].push_back({{"id", i}, {"symbol", vocab.symbols()[i]}});
  }
  return j.dump(1);
}

Vocab vocab_from_json(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("vocab file is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "dlm-vocab" || j.value("version", 0) != 1) {
    throw FormatError("not a version-1 dlm vocab file");
  }
  std::vector<std::string> symbols;
  for (const auto& e : j.at("entries")) {
    if (e.at("id").get<std::size_t>() != symbols.size()) {
      throw FormatError("vocab ids must be dense and ordered");
    }
    symbols.push_back(e.at("symbol").get<std::string>());
  }
  return Vocab::from_symbols(std::move(symbols));
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << vocab_to_json(vocab) << '\n';
}

Vocab load_vocab(const std::filesystem::path& path) {
  return vocab_from_json(read_text_file(path));
}

}  // namespace dlm
