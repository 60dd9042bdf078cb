// Checkpoint encoding and keyed configuration.

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dlm/checkpoint.hpp"
#include "dlm/config.hpp"
#include "dlm/errors.hpp"
#include "doctest.h"

using namespace dlm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 12;
  c.vocab_size = 9;
  c.mode = AttentionMode::full;
  c.anneal_ratio = 1.0;
  return c;
}

bool bitwise_equal(const ModelParams<float>& a, const ModelParams<float>& b) {
  if (!(a.config == b.config) || a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const auto& x = a.tensors[i];
    const auto& y = b.tensors[i];
    if (x.name != y.name || x.shape != y.shape || x.data.size() != y.data.size()) return false;
    if (std::memcmp(x.data.data(), y.data.data(), x.data.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise") {
  Checkpoint ck{init_params(small_config(), 3), std::nullopt};
  ck.params.tensors[0].data[0] = -0.0F;
  ck.params.tensors[0].data[1] = std::numeric_limits<float>::denorm_min();
  TrainConfig tc;
  tc.steps = 17;
  tc.lr = 1.0 / 3.0;
  tc.objective = Objective::ar;
  tc.alignment = LogitAlignment::unshifted;
  ck.train = tc;

  const auto bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(bitwise_equal(ck.params, back.params));
  REQUIRE(back.train.has_value());
  CHECK(train_config_to_json(*back.train) == train_config_to_json(tc));
  CHECK(serialize_checkpoint(back) == bytes);

  const auto dir = std::filesystem::temp_directory_path() / "dlm_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "a.ckpt", ck);
  save_checkpoint(dir / "b.ckpt", load_checkpoint(dir / "a.ckpt"));
  std::ifstream fa(dir / "a.ckpt", std::ios::binary);
  std::ifstream fb(dir / "b.ckpt", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {});
  const std::string sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
  CHECK(sa.size() == bytes.size());
  std::filesystem::remove_all(dir);

  Checkpoint no_train{init_params(small_config(), 4), std::nullopt};
  CHECK_FALSE(deserialize_checkpoint(serialize_checkpoint(no_train)).train.has_value());
}

TEST_CASE("malformed checkpoints are rejected") {
  const Checkpoint ck{init_params(small_config(), 5), std::nullopt};
  const auto bytes = serialize_checkpoint(ck);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);

  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad), doctest::Contains("version"), FormatError);

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2,
                          bytes.size() - 1}) {
    const std::vector<std::uint8_t> shortened(bytes.begin(),
                                              bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(deserialize_checkpoint(shortened), FormatError);
  }

  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);

  // A config claiming a wider model than the stored tensors.
  ModelConfig wide = small_config();
  wide.d_ff = 48;
  const auto other = serialize_checkpoint({init_params(wide, 5), std::nullopt});
  const std::string old_cfg = model_config_to_json(small_config()).dump();
  const std::string new_cfg = model_config_to_json(wide).dump();
  std::string text(bytes.begin(), bytes.end());
  const auto at = text.find(old_cfg);
  REQUIRE(at != std::string::npos);
  REQUIRE(old_cfg.size() == new_cfg.size());
  text.replace(at, old_cfg.size(), new_cfg);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(std::vector<std::uint8_t>(text.begin(), text.end())),
                       doctest::Contains("shape"), FormatError);
  CHECK_NOTHROW(deserialize_checkpoint(other));

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.ckpt"), FormatError);
}

TEST_CASE("non-finite parameters cannot be saved") {
  Checkpoint ck{init_params(small_config(), 6), std::nullopt};
  ck.params.tensors[2].data[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(serialize_checkpoint(ck), ConfigError);
}

TEST_CASE("config keys") {
  CliConfig c;
  CHECK(defaulted_keys(c) == config_keys());
  CHECK_THROWS_AS(set_config_value(c, "no_such_key", "1"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "steps", "ten"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "steps", "-1"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "objective", "gan"), ConfigError);

  set_config_value(c, "seed", "42");
  CHECK(c.train.seed == 42);
  CHECK(c.sampler.seed == 42);
  set_config_value(c, "top_k", "none");
  CHECK_FALSE(c.sampler.top_k.has_value());
  set_config_value(c, "top_p", "0.9");
  CHECK(*c.sampler.top_p == doctest::Approx(0.9));
  set_config_value(c, "alignment", "unshifted");
  CHECK(c.train.alignment == LogitAlignment::unshifted);

  const auto left = defaulted_keys(c);
  CHECK(left.size() == config_keys().size() - 4);
  CHECK(std::find(left.begin(), left.end(), "seed") == left.end());
  CHECK(c.effective_block_len() == c.model.max_seq_len);
  set_config_value(c, "block_len", "7");
  CHECK(c.effective_block_len() == 7);
}

TEST_CASE("config files and flag precedence") {
  const auto dir = std::filesystem::temp_directory_path() / "dlm_cfg_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "c.json");
    f << R"({"steps": 50, "lr": 0.01, "d_model": 32, "objective": "ar"})";
  }
  CliConfig c = load_config_file(dir / "c.json");
  CHECK(c.train.steps == 50);
  CHECK(c.model.d_model == 32);
  CHECK(c.train.objective == Objective::ar);
  set_config_value(c, "steps", "80");
  CHECK(c.train.steps == 80);
  CHECK(c.train.lr == doctest::Approx(0.01));

  {
    std::ofstream f(dir / "bad.json");
    f << R"({"steps": 50, "stpes": 10})";
  }
  CHECK_THROWS_WITH_AS(load_config_file(dir / "bad.json"), doctest::Contains("stpes"), ConfigError);
  {
    std::ofstream f(dir / "broken.json");
    f << "{steps";
  }
  CHECK_THROWS_AS(load_config_file(dir / "broken.json"), ConfigError);
  CHECK_THROWS_AS(load_config_file(dir / "missing.json"), ConfigError);

  // Dumping and reapplying every key reproduces the same config.
  CliConfig d;
  apply_config_json(d, config_to_json(c));
  CHECK(config_to_json(d) == config_to_json(c));
  CHECK(defaulted_keys(d).empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("model and train config JSON") {
  const ModelConfig m = small_config();
  CHECK(model_config_from_json(model_config_to_json(m)) == m);
  auto j = model_config_to_json(m);
  j["extra"] = 1;
  CHECK_THROWS_AS(model_config_from_json(j), ConfigError);

  TrainConfig t;
  t.steps = 9;
  t.anneal_steps = 3;
  t.init = "base.ckpt";
  t.grad_clip = 0.0;
  CHECK(train_config_to_json(train_config_from_json(train_config_to_json(t))) ==
        train_config_to_json(t));
  CHECK(objective_from_string(to_string(Objective::ar)) == Objective::ar);
  CHECK(alignment_from_string(to_string(LogitAlignment::shifted)) == LogitAlignment::shifted);
}
