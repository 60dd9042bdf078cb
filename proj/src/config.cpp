// SPDX-License-Identifier: Apache-2.0

#include "dlm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dlm/errors.hpp"

namespace dlm {

using nlohmann::json;

std::string_view to_string(Objective objective) {
  return objective == Objective::ar ? "ar" : "diffusion";
}

Objective objective_from_string(std::string_view name) {
  if (name == "ar") return Objective::ar;
  if (name == "diffusion") return Objective::diffusion;
  throw ConfigError("unknown objective: " + std::string(name));
}

std::string_view to_string(LogitAlignment alignment) {
  return alignment == LogitAlignment::shifted ? "shifted" : "unshifted";
}

LogitAlignment alignment_from_string(std::string_view name) {
  if (name == "shifted") return LogitAlignment::shifted;
  if (name == "unshifted") return LogitAlignment::unshifted;
  throw ConfigError("unknown logit alignment: " + std::string(name));
}

namespace {

enum class Kind { count, real, text, opt_count, opt_real };

struct KeySpec {
  Kind kind;
  std::function<void(CliConfig&, const json&)> set;
  std::function<json(const CliConfig&)> get;
};

std::size_t as_count(const json& v, std::string_view key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("key '" + std::string(key) + "' expects a non-negative integer");
  }
  return v.get<std::size_t>();
}

double as_real(const json& v, std::string_view key) {
  if (!v.is_number()) throw ConfigError("key '" + std::string(key) + "' expects a number");
  return v.get<double>();
}

std::string as_text(const json& v, std::string_view key) {
  if (!v.is_string()) throw ConfigError("key '" + std::string(key) + "' expects a string");
  return v.get<std::string>();
}

#define DLM_COUNT(key, field)                                                   \
  {key,                                                                         \
   {Kind::count, [](CliConfig& c, const json& v) { c.field = as_count(v, key); }, \
    [](const CliConfig& c) { return json(c.field); }}}
#define DLM_REAL(key, field)                                                   \
  {key,                                                                        \
   {Kind::real, [](CliConfig& c, const json& v) { c.field = as_real(v, key); }, \
    [](const CliConfig& c) { return json(c.field); }}}

const std::map<std::string, KeySpec, std::less<>>& registry() {
  static const std::map<std::string, KeySpec, std::less<>> r = {
      DLM_COUNT("n_layers", model.n_layers),
      DLM_COUNT("d_model", model.d_model),
      DLM_COUNT("n_heads", model.n_heads),
      DLM_COUNT("d_ff", model.d_ff),
      DLM_COUNT("max_seq_len", model.max_seq_len),
      DLM_COUNT("block_len", block_len),
      DLM_COUNT("steps", train.steps),
      DLM_COUNT("batch_size", train.batch_size),
      DLM_COUNT("warmup_steps", train.warmup_steps),
      DLM_COUNT("anneal_steps", train.anneal_steps),
      DLM_COUNT("grad_accum", train.grad_accum),
      DLM_COUNT("log_interval", train.log_interval),
      DLM_REAL("lr", train.lr),
      DLM_REAL("t_eps", train.t_eps),
      DLM_REAL("weight_decay", train.weight_decay),
      DLM_REAL("beta1", train.beta1),
      DLM_REAL("beta2", train.beta2),
      DLM_REAL("adam_eps", train.adam_eps),
      DLM_REAL("grad_clip", train.grad_clip),
      DLM_REAL("min_lr_ratio", train.min_lr_ratio),
      DLM_COUNT("T", sampler.steps),
      DLM_COUNT("len", sampler.length),
      DLM_REAL("temperature", sampler.temperature),
      {"seed",
       {Kind::count,
        [](CliConfig& c, const json& v) {
          if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
            throw ConfigError("key 'seed' expects a non-negative integer");
          }
          c.train.seed = v.get<std::uint64_t>();
          c.sampler.seed = c.train.seed;
        },
        [](const CliConfig& c) { return json(c.train.seed); }}},
      {"objective",
       {Kind::text,
        [](CliConfig& c, const json& v) {
          c.train.objective = objective_from_string(as_text(v, "objective"));
        },
        [](const CliConfig& c) { return json(std::string(to_string(c.train.objective))); }}},
      {"init",
       {Kind::text, [](CliConfig& c, const json& v) { c.train.init = as_text(v, "init"); },
        [](const CliConfig& c) { return json(c.train.init); }}},
      {"alignment",
       {Kind::text,
        [](CliConfig& c, const json& v) {
          c.train.alignment = alignment_from_string(as_text(v, "alignment"));
        },
        [](const CliConfig& c) { return json(std::string(to_string(c.train.alignment))); }}},
      {"strategy",
       {Kind::text,
        [](CliConfig& c, const json& v) {
          c.sampler.strategy = sampling_strategy_from_string(as_text(v, "strategy"));
        },
        [](const CliConfig& c) { return json(std::string(to_string(c.sampler.strategy))); }}},
      {"top_k",
       {Kind::opt_count,
        [](CliConfig& c, const json& v) {
          if (v.is_null()) {
            c.sampler.top_k.reset();
          } else {
            c.sampler.top_k = as_count(v, "top_k");
          }
        },
        [](const CliConfig& c) { return c.sampler.top_k ? json(*c.sampler.top_k) : json(nullptr); }}},
      {"top_p",
       {Kind::opt_real,
        [](CliConfig& c, const json& v) {
          if (v.is_null()) {
            c.sampler.top_p.reset();
          } else {
            c.sampler.top_p = as_real(v, "top_p");
          }
        },
        [](const CliConfig& c) { return c.sampler.top_p ? json(*c.sampler.top_p) : json(nullptr); }}},
  };
  return r;
}

#undef DLM_COUNT
#undef DLM_REAL

const KeySpec& spec_for(std::string_view key) {
  const auto& r = registry();
  auto it = r.find(key);
  if (it == r.end()) throw ConfigError("unknown config key: " + std::string(key));
  return it->second;
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("cannot parse value '" + std::string(text) + "' for key '" +
                      std::string(key) + "'");
  }
  return value;
}

void reject_unknown(const json& object, std::initializer_list<std::string_view> known,
                    std::string_view what) {
  if (!object.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [k, v] : object.items()) {
    bool ok = false;
    for (auto name : known) ok = ok || k == name;
    if (!ok) throw ConfigError("unknown " + std::string(what) + " key: " + k);
  }
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, spec] : registry()) k.push_back(name);
    return k;
  }();
  return keys;
}

bool is_config_key(std::string_view key) { return registry().find(key) != registry().end(); }

void set_config_value(CliConfig& config, std::string_view key, std::string_view text) {
  const KeySpec& spec = spec_for(key);
  json v;
  switch (spec.kind) {
    case Kind::count:
      v = parse_number<std::uint64_t>(key, text);
      break;
    case Kind::real:
      v = parse_number<double>(key, text);
      break;
    case Kind::text:
      v = std::string(text);
      break;
    case Kind::opt_count:
      v = text == "none" ? json(nullptr) : json(parse_number<std::uint64_t>(key, text));
      break;
    case Kind::opt_real:
      v = text == "none" ? json(nullptr) : json(parse_number<double>(key, text));
      break;
  }
  spec.set(config, v);
  config.explicit_keys.insert(std::string(key));
}

void apply_config_json(CliConfig& config, const json& object) {
  if (!object.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : object.items()) {
    spec_for(k).set(config, v);
    config.explicit_keys.insert(k);
  }
}

CliConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config file " + path.string() + ": " + e.what());
  }
  CliConfig c;
  apply_config_json(c, j);
  return c;
}

json config_to_json(const CliConfig& config) {
  json j = json::object();
  for (const auto& [name, spec] : registry()) j[name] = spec.get(config);
  return j;
}

std::vector<std::string> defaulted_keys(const CliConfig& config) {
  std::vector<std::string> out;
  for (const auto& k : config_keys()) {
    if (!config.explicit_keys.contains(k)) out.push_back(k);
  }
  return out;
}

json model_config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"d_model", c.d_model},
          {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
          {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
          {"mode", std::string(to_string(c.mode))}, {"anneal_ratio", c.anneal_ratio}};
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"n_layers", "d_model", "n_heads", "d_ff", "max_seq_len", "vocab_size", "mode",
                  "anneal_ratio"},
                 "model config");
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.mode = attention_mode_from_string(j.at("mode").get<std::string>());
    c.anneal_ratio = j.at("anneal_ratio").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"warmup_steps", t.warmup_steps},
          {"anneal_steps", t.anneal_steps},
          {"t_eps", t.t_eps},
          {"seed", t.seed},
          {"objective", std::string(to_string(t.objective))},
          {"init", t.init},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"grad_clip", t.grad_clip},
          {"min_lr_ratio", t.min_lr_ratio},
          {"grad_accum", t.grad_accum},
          {"log_interval", t.log_interval},
          {"alignment", std::string(to_string(t.alignment))}};
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j,
                 {"steps", "batch_size", "lr", "warmup_steps", "anneal_steps", "t_eps", "seed",
                  "objective", "init", "weight_decay", "beta1", "beta2", "adam_eps", "grad_clip",
                  "min_lr_ratio", "grad_accum", "log_interval", "alignment"},
                 "train config");
  CliConfig c;
  for (const auto& [k, v] : j.items()) spec_for(k).set(c, v);
  return c.train;
}

}  // namespace dlm
