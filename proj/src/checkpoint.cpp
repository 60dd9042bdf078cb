// SPDX-License-Identifier: Apache-2.0

#include "dlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dlm/config.hpp"
#include "dlm/errors.hpp"

namespace dlm {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'M', '1'};

template <class U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xFFU));
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string text(std::uint64_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  validate_params(ck.params);
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);

  nlohmann::json cfg{{"model", model_config_to_json(ck.params.config)},
                     {"train", ck.train ? train_config_to_json(*ck.train) : nlohmann::json()}};
  const std::string blob = cfg.dump();
  put_le<std::uint64_t>(out, blob.size());
  out.insert(out.end(), blob.begin(), blob.end());

  put_le<std::uint64_t>(out, ck.params.tensors.size());
  for (const auto& t : ck.params.tensors) {
    put_le<std::uint64_t>(out, t.name.size());
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_le<std::uint64_t>(out, d);
    for (float v : t.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.text(4) != std::string(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto blob_len = r.le<std::uint64_t>();
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(r.text(blob_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.params = zero_params<float>(model_config_from_json(cfg.at("model")));
    if (cfg.contains("train") && !cfg.at("train").is_null()) {
      ck.train = train_config_from_json(cfg.at("train"));
    }
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint config rejected: ") + e.what());
  }

  const auto count = r.le<std::uint64_t>();
  if (count != ck.params.tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                      std::to_string(ck.params.tensors.size()));
  }
  for (auto& t : ck.params.tensors) {
    const std::string name = r.text(r.le<std::uint64_t>());
    if (name != t.name) throw FormatError("unexpected tensor '" + name + "', wanted " + t.name);
    const auto rank = r.le<std::uint32_t>();
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.le<std::uint64_t>();
    if (shape != t.shape) throw FormatError("tensor " + name + " shape does not match the config");
    for (float& v : t.data) v = std::bit_cast<float>(r.le<std::uint32_t>());
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace dlm
