// SPDX-License-Identifier: Apache-2.0

#include "dlm/corpus.hpp"

#include <array>
#include <string_view>

#include "dlm/errors.hpp"
#include "dlm/rng.hpp"

namespace dlm::corpus {
namespace {

constexpr std::array<std::string_view, 10> kNouns = {"cat",  "dog",  "bird", "fox", "girl",
                                                      "boy",  "king", "frog", "owl", "horse"};
constexpr std::array<std::string_view, 8> kVerbs = {"see",  "like", "chase", "help",
                                                    "find", "call", "feed",  "watch"};
constexpr std::array<std::string_view, 8> kAdjectives = {"red", "small", "old",  "quick",
                                                         "big", "happy", "blue", "lazy"};
constexpr std::array<std::string_view, 4> kPlaces = {"in the park", "by the river",
                                                     "at the farm", "near the house"};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& words, Rng& rng) {
  return words[rng.below(N)];
}

std::string plural(std::string_view noun) {
  std::string out(noun);
  out += (noun == "fox") ? "es" : "s";
  return out;
}

std::string verb_form(std::string_view verb, bool singular) {
  std::string out(verb);
  if (singular) out += (verb == "watch") ? "es" : "s";
  return out;
}

std::string noun_phrase(Rng& rng, bool singular) {
  std::string np;
  if (singular) {
    np = rng.bernoulli(0.5) ? "the " : "a ";
  } else {
    static constexpr std::array<std::string_view, 4> kPluralDets = {"the ", "some ", "two ",
                                                                    "many "};
    np = std::string(pick(kPluralDets, rng));
  }
  if (rng.bernoulli(0.5)) {
    np += pick(kAdjectives, rng);
    np += ' ';
  }
  const std::string_view noun = pick(kNouns, rng);
  np += singular ? std::string(noun) : plural(noun);
  return np;
}

std::string clause(Rng& rng) {
  const bool singular = rng.bernoulli(0.5);
  std::string c = noun_phrase(rng, singular);
  c += ' ';
  c += verb_form(pick(kVerbs, rng), singular);
  c += ' ';
  c += noun_phrase(rng, rng.bernoulli(0.5));
  if (rng.bernoulli(0.3)) {
    c += ' ';
    c += pick(kPlaces, rng);
  }
  return c;
}

std::string sentence(Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.2) return "when " + clause(rng) + ", " + clause(rng) + ".";
  if (u < 0.35) return clause(rng) + " and " + clause(rng) + ".";
  return clause(rng) + ".";
}

}  // namespace

std::vector<std::string> alphabet_runs(std::size_t n_docs, std::size_t run_len,
                                       std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> docs;
  docs.reserve(n_docs);
  for (std::size_t d = 0; d < n_docs; ++d) {
    const std::size_t start = rng.below(26);
    std::string doc;
    for (std::size_t i = 0; i < run_len; ++i) doc += static_cast<char>('a' + (start + i) % 26);
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::string repeating(const std::string& pattern, std::size_t length) {
  if (pattern.empty()) throw InvalidInput("repeating pattern must be non-empty");
  std::string out;
  out.reserve(length);
  while (out.size() < length) out += pattern[out.size() % pattern.size()];
  return out;
}

std::string uniform_symbols(const std::string& alphabet, std::size_t length, std::uint64_t seed) {
  if (alphabet.empty()) throw InvalidInput("alphabet must be non-empty");
  Rng rng(seed);
  std::string out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) out += alphabet[rng.below(alphabet.size())];
  return out;
}

std::vector<std::string> toy_sentences(std::size_t n_chars, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> docs;
  std::size_t total = 0;
  while (total < n_chars) {
    const std::size_t n_sent = 3 + rng.below(6);
    std::string doc;
    for (std::size_t s = 0; s < n_sent; ++s) {
      if (s > 0) doc += ' ';
      doc += sentence(rng);
    }
    total += doc.size();
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace dlm::corpus
