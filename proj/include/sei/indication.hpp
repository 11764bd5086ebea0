#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "sei/corpus.hpp"
#include "sei/error.hpp"
#include "sei/tokenizer.hpp"

namespace sei {

struct NormalizerConfig {
  std::string illegal_chars = "/_@";
  std::vector<std::string> invalid_words = {"history:", "-year-old", "year old"};
  std::set<std::string> male_terms = {"male", "man", "m", "gentleman"};
  std::set<std::string> female_terms = {"female", "woman", "f", "lady"};

  void validate() const {
    for (const auto& p : invalid_words)
      if (p.empty()) throw ValidationError("normalizer: invalid-word phrases must be non-empty");
    for (const auto& t : male_terms)
      if (female_terms.count(t))
        throw ValidationError("normalizer: term '" + t + "' is both male and female");
  }
};

namespace detail {

inline std::string collapse_whitespace(std::string_view s) {
  return join(split_whitespace(s), " ");
}

inline bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

// Replaces the alphanumeric core of a whitespace token when it is a gender term.
inline std::string map_gender_token(const std::string& tok, const NormalizerConfig& cfg) {
  std::size_t b = 0, e = tok.size();
  while (b < e && !is_alnum(tok[b])) ++b;
  while (e > b && !is_alnum(tok[e - 1])) --e;
  const std::string core = tok.substr(b, e - b);
  if (core.empty()) return tok;
  const char* repl = nullptr;
  if (cfg.male_terms.count(core)) repl = "man";
  else if (cfg.female_terms.count(core)) repl = "woman";
  if (!repl) return tok;
  return tok.substr(0, b) + repl + tok.substr(e);
}

}  // namespace detail

/// Lowercases, blanks illegal characters, deletes invalid phrases (longest
/// first, repeated until none remain), unifies gender terms to "man"/"woman"
/// and collapses whitespace. Inputs that end up empty map to nullopt.
inline std::optional<std::string> normalize_indication(const std::optional<std::string>& raw,
                                                       const NormalizerConfig& cfg = {}) {
  if (!raw) return std::nullopt;
  std::string s = to_lower(*raw);
  for (char& c : s)
    if (cfg.illegal_chars.find(c) != std::string::npos) c = ' ';
  s = detail::collapse_whitespace(s);

  std::vector<std::string> phrases;
  for (const auto& p : cfg.invalid_words) phrases.push_back(to_lower(p));
  std::stable_sort(phrases.begin(), phrases.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& p : phrases) {
      for (auto pos = s.find(p); pos != std::string::npos; pos = s.find(p)) {
        s.replace(pos, p.size(), " ");
        changed = true;
      }
      s = detail::collapse_whitespace(s);
    }
  }

  std::vector<std::string> words;
  for (const auto& w : split_whitespace(s)) words.push_back(detail::map_gender_token(w, cfg));
  s = join(words, " ");
  if (s.empty()) return std::nullopt;
  return s;
}

inline NormalizerConfig normalizer_config_from_json(const json& j) {
  NormalizerConfig cfg;
  auto strings = [&](const char* key) {
    std::vector<std::string> out;
    const auto& v = j.at(key);
    if (!v.is_array()) throw ValidationError(std::string("normalizer config: '") + key + "' must be an array");
    for (const auto& x : v) {
      if (!x.is_string()) throw ValidationError(std::string("normalizer config: '") + key + "' must hold strings");
      out.push_back(x.get<std::string>());
    }
    return out;
  };
  if (j.contains("illegal_chars")) cfg.illegal_chars = join(strings("illegal_chars"), "");
  if (j.contains("invalid_words")) cfg.invalid_words = strings("invalid_words");
  if (j.contains("male_terms")) {
    cfg.male_terms.clear();
    for (auto& t : strings("male_terms")) cfg.male_terms.insert(to_lower(t));
  }
  if (j.contains("female_terms")) {
    cfg.female_terms.clear();
    for (auto& t : strings("female_terms")) cfg.female_terms.insert(to_lower(t));
  }
  cfg.validate();
  return cfg;
}

inline json normalizer_config_to_json(const NormalizerConfig& cfg) {
  std::vector<std::string> chars;
  for (char c : cfg.illegal_chars) chars.emplace_back(1, c);
  return json{{"illegal_chars", chars},
              {"invalid_words", cfg.invalid_words},
              {"male_terms", cfg.male_terms},
              {"female_terms", cfg.female_terms}};
}

}  // namespace sei
