// The dlm command line, driven in-process.

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "dlm/checkpoint.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "dlm");
  std::ostringstream out, err;
  const int code = dlm::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path tmpdir() {
  static const fs::path dir = [] {
    fs::path d = DLM_TEST_TMPDIR;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path write_corpus() {
  const fs::path p = tmpdir() / "corpus.txt";
  std::ofstream f(p);
  for (int i = 0; i < 40; ++i) {
    f << "the cat sat on the mat. the dog ran.\n\n";
    f << "a bird sang in the tree.\n\n";
  }
  return p;
}

const std::vector<std::string> kTinyModel = {
    "--n_layers", "1", "--d_model", "16", "--n_heads", "2",  "--d_ff",       "32",
    "--max_seq_len", "64", "--block_len", "16", "--batch_size", "2"};

// Trains one small AR base for the tests that need a checkpoint.
fs::path ar_checkpoint() {
  static const fs::path ckpt = [] {
    const fs::path out = tmpdir() / "ar.ckpt";
    std::vector<std::string> args = {"train-ar", "--corpus", write_corpus().string(), "--out",
                                     out.string(), "--steps", "20", "--seed", "1"};
    args.insert(args.end(), kTinyModel.begin(), kTinyModel.end());
    const Result r = run(args);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return out;
  }();
  return ckpt;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({}).code == 2);
  CHECK(run({"verify", "--no-such-flag"}).code == 2);
  CHECK(run({"sample", "--ckpt"}).code == 2);
  CHECK(run({"verify", "--kernels", "neon"}).code == 2);
  const Result help = run({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("adapt") != std::string::npos);
}

TEST_CASE("runtime failures exit 1") {
  const fs::path bogus = tmpdir() / "bogus.ckpt";
  std::ofstream(bogus) << "not a checkpoint";
  const Result r = run({"sample", "--ckpt", bogus.string(), "--seed", "1"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("verify passes") {
  const Result r = run({"verify"});
  CHECK_MESSAGE(r.code == 0, r.out);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("tokenize") {
  const Result r = run({"tokenize", "--corpus", write_corpus().string(), "--text", "the cat"});
  REQUIRE(r.code == 0);
  // The vocabulary JSON comes first, the encoded ids on the last line.
  const std::string body = r.out.substr(0, r.out.size() - 1);
  const auto split = body.rfind('\n');
  REQUIRE(split != std::string::npos);
  const auto ids = nlohmann::json::parse(body.substr(split + 1));
  CHECK(ids.size() == 7);
  CHECK(ids[0] == ids[6]);  // 't' in "the" and "cat"
  CHECK(nlohmann::json::parse(body.substr(0, split)).at("format") == "dlm-vocab");
}

TEST_CASE("train, adapt, sample") {
  const fs::path base = ar_checkpoint();
  CHECK(fs::exists(base.string() + ".vocab.json"));

  SUBCASE("adapt with zero steps keeps parameters bitwise") {
    const fs::path out = tmpdir() / "adapt0.ckpt";
    const Result r = run({"adapt", "--init", base.string(), "--out", out.string(), "--steps", "0",
                          "--seed", "2"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto a = dlm::load_checkpoint(base);
    const auto b = dlm::load_checkpoint(out);
    REQUIRE(a.params.tensors.size() == b.params.tensors.size());
    for (std::size_t i = 0; i < a.params.tensors.size(); ++i) {
      CHECK(a.params.tensors[i].data == b.params.tensors[i].data);
    }
    CHECK(b.params.config == a.params.config);
  }

  SUBCASE("adapted sampling is reproducible") {
    const fs::path out = tmpdir() / "adapted.ckpt";
    const Result a = run({"adapt", "--init", base.string(), "--corpus", write_corpus().string(),
                          "--out", out.string(), "--steps", "10", "--anneal_steps", "5", "--block_len",
                          "16", "--batch_size", "2", "--seed", "3"});
    REQUIRE_MESSAGE(a.code == 0, a.err);
    const auto summary = nlohmann::json::parse(a.out);
    CHECK(summary.at("steps") == 10);
    CHECK(summary.at("mode") == "full");

    const std::vector<std::string> args = {"sample", "--ckpt", out.string(), "--T",  "16",
                                           "--len",  "64",         "--seed", "7"};
    const Result s1 = run(args);
    const Result s2 = run(args);
    REQUIRE_MESSAGE(s1.code == 0, s1.err);
    CHECK(s1.out == s2.out);
    CHECK_FALSE(s1.out.empty());

    const Result fresh = run({"sample", "--ckpt", out.string(), "--T", "4", "--len", "16"});
    REQUIRE(fresh.code == 0);
    CHECK(fresh.err.find("(derived from entropy)") != std::string::npos);
    CHECK(fresh.err.find("seed: ") != std::string::npos);

    const fs::path trace = tmpdir() / "trace.jsonl";
    const Result inf = run({"infill", "--ckpt", out.string(), "--prefix", "the ", "--suffix", " sat",
                            "--hole", "3", "--len", "16", "--T", "4", "--seed", "1", "--trace",
                            trace.string()});
    REQUIRE_MESSAGE(inf.code == 0, inf.err);
    CHECK(inf.out.rfind("the ", 0) == 0);
    CHECK(inf.out.find(" sat\n") != std::string::npos);
    CHECK_FALSE(slurp(trace).empty());

    const Result too_long = run({"sample", "--ckpt", out.string(), "--len", "65", "--seed", "1"});
    CHECK(too_long.code == 1);
  }

  SUBCASE("config file values yield to flags") {
    const fs::path cfg = tmpdir() / "cfg.json";
    std::ofstream(cfg) << R"({"steps": 3, "lr": 0.001})";
    const fs::path out = tmpdir() / "cfg.ckpt";
    const Result r = run({"adapt", "--init", base.string(), "--corpus", write_corpus().string(),
                          "--out", out.string(), "--config", cfg.string(), "--steps", "2",
                          "--block_len", "16", "--seed", "4"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(nlohmann::json::parse(r.out).at("steps") == 2);
    const auto ck = dlm::load_checkpoint(out);
    REQUIRE(ck.train.has_value());
    CHECK(ck.train->lr == doctest::Approx(0.001));
    CHECK(r.err.find("notice: using defaults for") != std::string::npos);

    std::ofstream(cfg) << R"({"stpes": 3})";
    CHECK(run({"adapt", "--init", base.string(), "--out", out.string(), "--config", cfg.string()})
              .code == 1);
  }

  SUBCASE("evaluation commands") {
    const Result e = run({"eval-elbo", "--ckpt", base.string(), "--corpus", write_corpus().string(),
                          "--num-t", "2", "--max-blocks", "3", "--block_len", "16", "--seed", "1"});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    CHECK(e.out.find("nats/token") != std::string::npos);

    const fs::path items = tmpdir() / "items.jsonl";
    std::ofstream(items) << R"({"prompt": "the ", "choices": ["cat", "dog"], "answer": 0})" << '\n';
    const Result m = run({"eval-mc", "--ckpt", base.string(), "--items", items.string(), "--num-t",
                          "2", "--seed", "1"});
    REQUIRE_MESSAGE(m.code == 0, m.err);
    CHECK(m.out.find("accuracy") != std::string::npos);
  }
}
