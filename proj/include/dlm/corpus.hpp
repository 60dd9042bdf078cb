// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic corpora for experiments and tests.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dlm::corpus {

/// Runs of consecutive lowercase letters ("mnopqr"), wrapping after 'z'.
std::vector<std::string> alphabet_runs(std::size_t n_docs, std::size_t run_len,
                                       std::uint64_t seed);

/// One document repeating `pattern` until it is `length` characters long.
std::string repeating(const std::string& pattern, std::size_t length);

/// i.i.d. uniform draws from `alphabet` (single-byte symbols).
std::string uniform_symbols(const std::string& alphabet, std::size_t length, std::uint64_t seed);

/// English-like sentences from a small grammar with number agreement
/// (singular subjects take "-s" verbs, plural subjects don't) and paired
/// clauses. Paragraphs of several sentences; total length >= n_chars.
std::vector<std::string> toy_sentences(std::size_t n_chars, std::uint64_t seed);

}  // namespace dlm::corpus
